//! Value/density fixed-point loop.
//!
//! Each outer iteration freezes `rho^k`, solves for the value field, builds
//! the induced ground velocity, relaxes the transport equation to steady
//! state and blends the result into `rho^{k+1}` with under-relaxation.

use std::time::Instant;

use thiserror::Error;

use crate::config::{ScenarioConfig, ValueSolverConfig};
use crate::fsm::{solve_value_fsm, FsmOptions};
use crate::fundamental::FundamentalDiagram;
use crate::fvm::{solve_density_steady_from, TransportOptions, TransportSolution};
use crate::grid::{CellClass, GeometryError, GridField, GridGeometry, Units};
use crate::pinn::{PinnError, PinnOptions, PinnSolver};
use crate::scalar::Real;
use crate::source::{build_source, SourceError, SourceField};
use crate::value::{v_max_field, SolveStatus, ValueProblem, ValueSolution};
use crate::vec3::Vec3;
use crate::wind::WindModel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Source(#[from] SourceError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PicardOptions<T> {
    pub alpha: T,
    pub rho_max: T,
    pub max_outer: usize,
    pub rho_change_tol: T,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ValueBackend<T> {
    Fsm(FsmOptions<T>),
    Pinn { opts: PinnOptions<T>, warm_start: bool },
}

impl<T> ValueBackend<T> {
    pub fn name(&self) -> &'static str {
        match self {
            ValueBackend::Fsm(_) => "fsm",
            ValueBackend::Pinn { .. } => "pinn",
        }
    }
}

/// Everything a run needs, materialized from a validated configuration.
#[derive(Debug, Clone)]
pub struct Scenario<T> {
    pub geom: GridGeometry<T>,
    pub wind: WindModel<T>,
    pub fd: FundamentalDiagram<T>,
    pub source: SourceField<T>,
    pub eps_reg: T,
    pub transport: TransportOptions<T>,
    pub picard: PicardOptions<T>,
    pub backend: ValueBackend<T>,
}

impl<T: Real> Scenario<T> {
    pub fn from_config(cfg: &ScenarioConfig) -> Result<Self, ScenarioError> {
        let geom = GridGeometry::from_config(cfg)?;
        let source = build_source(&cfg.source, &geom)?;
        let backend = match &cfg.value_solver {
            ValueSolverConfig::Fsm(f) => ValueBackend::Fsm(FsmOptions { tol: T::of(f.tol), max_sweep_rounds: f.max_sweep_rounds }),
            ValueSolverConfig::Pinn(p) => {
                ValueBackend::Pinn { opts: PinnOptions::from_config(p, &geom, cfg.seed), warm_start: p.warm_start }
            }
        };
        Ok(Self {
            wind: WindModel::from_config(&cfg.wind, cfg.domain.min),
            fd: FundamentalDiagram::from_config(&cfg.fd),
            source,
            eps_reg: T::of(cfg.eps_reg),
            transport: TransportOptions::from_config(&cfg.transport),
            picard: PicardOptions {
                alpha: T::of(cfg.picard.alpha),
                rho_max: T::of(cfg.picard.rho_max),
                max_outer: cfg.picard.max_outer,
                rho_change_tol: T::of(cfg.picard.rho_change_tol),
            },
            backend,
            geom,
        })
    }
}

/// Gradient component along `axis`: central where both neighbors are usable,
/// one-sided toward the usable one otherwise. Target neighbors read 0;
/// obstacle, outer-boundary and unreached neighbors are unusable.
fn axis_derivative<T: Real>(phi: &[T], geom: &GridGeometry<T>, idx: usize, axis: usize) -> T {
    let sample = |dir: isize| -> Option<T> {
        let n = geom.neighbor(idx, axis, dir)?;
        match geom.class(n) {
            CellClass::Target => Some(T::zero()),
            CellClass::Obstacle => None,
            CellClass::Free => (!phi[n].is_sentinel()).then_some(phi[n]),
        }
    };
    let h = geom.spacing[axis];
    match (sample(-1), sample(1)) {
        (Some(lo), Some(hi)) => (hi - lo) / (T::of(2.0) * h),
        (Some(lo), None) => (phi[idx] - lo) / h,
        (None, Some(hi)) => (hi - phi[idx]) / h,
        (None, None) => T::zero(),
    }
}

/// `u = w - v_max * grad(phi) / |grad(phi)|_eps` per free cell from
/// precomputed speeds and wind samples; zero on obstacle and target cells.
/// Unreached free cells (sentinel `phi`) drift with the wind.
pub fn induced_velocity_from<T: Real>(phi: &[T], v_max: &[T], wind: &[Vec3<T>], eps_reg: T, geom: &GridGeometry<T>) -> GridField<T> {
    let u: Vec<Vec3<T>> = (0..geom.len())
        .map(|idx| {
            if geom.class(idx) != CellClass::Free {
                return Vec3::zero();
            }
            if phi[idx].is_sentinel() {
                return wind[idx];
            }
            let g = Vec3([0, 1, 2].map(|d| axis_derivative(phi, geom, idx, d)));
            let norm = g.norm_eps(eps_reg);
            if norm == T::zero() {
                return wind[idx];
            }
            wind[idx] - g * (v_max[idx] / norm)
        })
        .collect();
    GridField::vector(geom, &u, Units::Velocity)
}

pub fn induced_velocity<T: Real>(
    phi: &GridField<T>,
    rho: &GridField<T>,
    wind: &WindModel<T>,
    fd: &FundamentalDiagram<T>,
    eps_reg: T,
    geom: &GridGeometry<T>,
) -> GridField<T> {
    induced_velocity_from(&phi.values, &v_max_field(fd, rho), &wind.sample(geom), eps_reg, geom)
}

/// `(1 - alpha) * rho_old + alpha * clip(rho_tilde, 0, rho_max)`.
#[inline]
pub fn relaxed_update<T: Real>(rho_old: T, rho_tilde: T, alpha: T, rho_max: T) -> T {
    let clipped = rho_tilde.max(T::zero()).min(rho_max);
    let blended = (T::one() - alpha) * rho_old + alpha * clipped;
    // rounding in the blend may leave the interval by an ulp
    blended.max(T::zero()).min(rho_max)
}

/// `|a - b|_2 / max(|b|_2, tiny)`.
pub fn relative_change<T: Real>(new: &[T], old: &[T]) -> T {
    let diff = new.iter().zip(old).fold(T::zero(), |s, (a, b)| s + (*a - *b) * (*a - *b)).sqrt();
    let base = old.iter().fold(T::zero(), |s, a| s + *a * *a).sqrt();
    diff / base.max(T::tiny())
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PhaseDurations {
    pub value_s: f64,
    pub transport_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PicardState<T> {
    /// One-based index of the iteration that produced this state.
    pub outer_iter: usize,
    pub rho: GridField<T>,
    pub phi: GridField<T>,
    pub u: GridField<T>,
    pub rho_change: T,
    pub timing: PhaseDurations,
}

/// Per-iteration diagnostics, one per metrics row.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationReport<T> {
    pub outer_iter: usize,
    pub eik_res_mean: T,
    pub eik_res_max: T,
    pub eik_loss_final: Option<T>,
    pub value_status: SolveStatus,
    pub value_iterations: usize,
    pub fvm_iters: usize,
    pub fvm_residual_final: T,
    pub fvm_status: SolveStatus,
    pub rho_change: T,
    pub mass_injected: T,
    pub mass_absorbed: T,
    pub mass_balance_rel_err: T,
    pub timing: PhaseDurations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PicardOutcome<T> {
    pub state: PicardState<T>,
    pub reports: Vec<IterationReport<T>>,
    /// Converged when `rho_change` dropped below the tolerance.
    pub status: SolveStatus,
}

impl<T> PicardOutcome<T> {
    /// True when the outer loop or any inner solve failed to converge.
    pub fn any_not_converged(&self) -> bool {
        self.status == SolveStatus::NotConverged
            || self.reports.iter().any(|r| r.value_status == SolveStatus::NotConverged || r.fvm_status == SolveStatus::NotConverged)
    }
}

enum ValueEngine<T> {
    Fsm(FsmOptions<T>),
    Pinn { solver: Option<PinnSolver<T>>, opts: PinnOptions<T>, warm_start: bool },
}

impl<T: Real> ValueEngine<T> {
    fn solve(&mut self, problem: &ValueProblem<'_, T>) -> Result<ValueSolution<T>, PinnError> {
        match self {
            ValueEngine::Fsm(o) => Ok(solve_value_fsm(problem, o)),
            ValueEngine::Pinn { solver, opts, warm_start } => {
                if solver.is_none() || !*warm_start {
                    *solver = Some(PinnSolver::new(problem.geom, opts.clone())?);
                }
                solver.as_mut().expect("solver initialized above").train(problem)
            }
        }
    }
}

/// Runs the outer loop from `rho^0 = 0`. `observer` sees every iteration's
/// report and state (for metrics rows and field dumps); an observer error
/// aborts the run.
pub fn run_picard<T, E>(
    scenario: &Scenario<T>,
    mut observer: impl FnMut(&IterationReport<T>, &PicardState<T>) -> Result<(), E>,
) -> Result<PicardOutcome<T>, E>
where
    T: Real,
    E: From<PinnError>,
{
    let geom = &scenario.geom;
    let opts = scenario.picard;
    let wind_samples = scenario.wind.sample(geom);
    let mut engine = match &scenario.backend {
        ValueBackend::Fsm(o) => ValueEngine::Fsm(*o),
        ValueBackend::Pinn { opts, warm_start } => ValueEngine::Pinn { solver: None, opts: opts.clone(), warm_start: *warm_start },
    };
    let mut rho = GridField::scalar_filled(geom, T::zero(), Units::Density);
    let mut transport_guess: Option<Vec<T>> = None;
    let mut reports = Vec::new();
    let mut state = None;
    let mut status = SolveStatus::NotConverged;

    for k in 1..=opts.max_outer.max(1) {
        let t0 = Instant::now();
        let problem = ValueProblem { geom, wind: &scenario.wind, fd: &scenario.fd, rho: &rho, eps_reg: scenario.eps_reg };
        let value = engine.solve(&problem)?;
        let value_s = t0.elapsed().as_secs_f64();

        let t1 = Instant::now();
        let v_max = v_max_field(&scenario.fd, &rho);
        let u = induced_velocity_from(&value.phi.values, &v_max, &wind_samples, scenario.eps_reg, geom);
        let transport: TransportSolution<T> =
            solve_density_steady_from(&u, &scenario.source.q, geom, &scenario.transport, transport_guess.as_deref());
        let next: Vec<T> = rho
            .values
            .iter()
            .zip(&transport.rho.values)
            .map(|(old, tilde)| relaxed_update(*old, *tilde, opts.alpha, opts.rho_max))
            .collect();
        assert!(next.iter().all(|r| *r >= T::zero() && *r <= opts.rho_max), "relaxed density left [0, rho_max]");
        let rho_change = relative_change(&next, &rho.values);
        let transport_s = t1.elapsed().as_secs_f64();

        transport_guess = Some(transport.rho.values.clone());
        rho = GridField::scalar(geom, next, Units::Density);
        let timing = PhaseDurations { value_s, transport_s };
        let report = IterationReport {
            outer_iter: k,
            eik_res_mean: value.residual_mean,
            eik_res_max: value.residual_max,
            eik_loss_final: value.loss_final,
            value_status: value.status,
            value_iterations: value.iterations,
            fvm_iters: transport.iters,
            fvm_residual_final: transport.final_residual(),
            fvm_status: transport.status,
            rho_change,
            mass_injected: transport.mass_injected,
            mass_absorbed: transport.mass_absorbed,
            mass_balance_rel_err: transport.mass_balance_rel_err,
            timing,
        };
        let st = PicardState { outer_iter: k, rho: rho.clone(), phi: value.phi, u, rho_change, timing };
        log::info!(
            "outer {k}: rho_change {:e}, eik_res_mean {:e}, fvm_iters {}",
            rho_change.to_f64_lossy(),
            report.eik_res_mean.to_f64_lossy(),
            report.fvm_iters
        );
        let done = rho_change < opts.rho_change_tol;
        if done {
            status = SolveStatus::Converged;
        }
        observer(&report, &st)?;
        reports.push(report);
        state = Some(st);
        if done {
            break;
        }
    }
    Ok(PicardOutcome { state: state.expect("at least one outer iteration"), reports, status })
}
