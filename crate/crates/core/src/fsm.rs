//! Reference solver for the anisotropic Eikonal equation
//! `v_max |grad phi|_eps - w . grad phi = 1` by Lax-Friedrichs fast sweeping.
//!
//! Each cell update solves the Lax-Friedrichs discretization for the center
//! value with Gauss-Seidel ordering, cycling through the eight sweep
//! directions. Stored values only ever decrease. Target cells hold 0; all
//! other cells start at the `1e30` sentinel. At the domain boundary the
//! missing ghost value copies the interior neighbor; obstacle neighbors copy
//! the cell's own value (zero normal gradient).

use log::warn;

use crate::grid::{CellClass, GridField, GridGeometry, Units};
use crate::scalar::Real;
use crate::value::{grid_residual_stats, hamiltonian, v_max_field, SolveStatus, ValueProblem, ValueSolution};
use crate::vec3::Vec3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FsmOptions<T> {
    /// Stop once the largest per-round decrease falls below this.
    pub tol: T,
    pub max_sweep_rounds: usize,
}

/// Local coefficients of the cell Hamiltonian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellCoeffs<T> {
    pub v_max: T,
    pub wind: Vec3<T>,
    pub eps_reg: T,
    /// Dissipation per axis, `v_max + |w_d|`, bounding `|dH/dp_d|`.
    pub alphas: Vec3<T>,
}

impl<T: Real> CellCoeffs<T> {
    pub fn new(v_max: T, wind: Vec3<T>, eps_reg: T) -> Self {
        Self { v_max, wind, eps_reg, alphas: wind.map(|w| v_max + w.abs()) }
    }
}

/// Values seen across the two faces of `idx` on `axis`, `(minus, plus)`.
#[inline]
fn neighbor_pair<T: Real>(phi: &[T], geom: &GridGeometry<T>, idx: usize, coord: usize, axis: usize, stride: usize) -> (T, T) {
    let own = phi[idx];
    let read = |n: usize| match geom.cell_class[n] {
        CellClass::Free => phi[n],
        CellClass::Target => T::zero(),
        CellClass::Obstacle => own,
    };
    let minus = (coord > 0).then(|| read(idx - stride));
    let plus = (coord + 1 < geom.shape[axis]).then(|| read(idx + stride));
    match (minus, plus) {
        (Some(m), Some(p)) => (m, p),
        (Some(m), None) => (m, m),
        (None, Some(p)) => (p, p),
        (None, None) => (own, own),
    }
}

#[inline]
fn update_at<T: Real>(phi: &[T], geom: &GridGeometry<T>, idx: usize, c: [usize; 3], k: &CellCoeffs<T>) -> T {
    let strides = [1, geom.shape[0], geom.shape[0] * geom.shape[1]];
    let two = T::of(2.0);
    let mut p = Vec3::zero();
    let mut avg = T::zero();
    let mut denom = T::zero();
    for axis in 0..3 {
        let (m, pl) = neighbor_pair(phi, geom, idx, c[axis], axis, strides[axis]);
        let h = geom.spacing[axis];
        p[axis] = (pl - m) / (two * h);
        avg = avg + k.alphas[axis] * (pl + m) / (two * h);
        denom = denom + k.alphas[axis] / h;
    }
    let candidate = (T::one() - hamiltonian(p, k.v_max, k.wind, k.eps_reg) + avg) / denom;
    phi[idx].min(candidate)
}

/// Lax-Friedrichs update of one free, non-target cell. Returns
/// `min(phi_old, phi_new)` with
/// `phi_new = [1 - H(p) + sum_d a_d (phi_d+ + phi_d-) / (2 h_d)] / sum_d (a_d / h_d)`
/// and `p_d = (phi_d+ - phi_d-) / (2 h_d)`.
pub fn lf_update_cell<T: Real>(phi: &[T], geom: &GridGeometry<T>, idx: usize, coeffs: &CellCoeffs<T>) -> T {
    assert_eq!(geom.class(idx), CellClass::Free, "fast-sweeping update on a non-free cell {idx}");
    update_at(phi, geom, idx, geom.coords(idx), coeffs)
}

/// Sweep-by-sweep driver; [`solve_value_fsm`] runs it to convergence.
pub struct FsmSolver<'a, T> {
    geom: &'a GridGeometry<T>,
    phi: Vec<T>,
    coeffs: Vec<CellCoeffs<T>>,
    v_max: Vec<T>,
    wind: Vec<Vec3<T>>,
    eps_reg: T,
    rounds: usize,
}

impl<'a, T: Real> FsmSolver<'a, T> {
    pub fn new(problem: &ValueProblem<'a, T>) -> Self {
        let geom = problem.geom;
        let v_max = v_max_field(problem.fd, problem.rho);
        let wind = problem.wind.sample(geom);
        let coeffs = (0..geom.len()).map(|i| CellCoeffs::new(v_max[i], wind[i], problem.eps_reg)).collect();
        let phi = geom
            .cell_class
            .iter()
            .map(|c| if *c == CellClass::Target { T::zero() } else { T::sentinel() })
            .collect();
        Self { geom, phi, coeffs, v_max, wind, eps_reg: problem.eps_reg, rounds: 0 }
    }

    pub fn phi(&self) -> &[T] {
        &self.phi
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    /// Runs the eight directional sweeps once; returns the largest decrease.
    pub fn sweep_round(&mut self) -> T {
        let [nx, ny, nz] = self.geom.shape;
        let mut max_change = T::zero();
        for dirs in 0..8u8 {
            let fwd = [dirs & 1 == 0, dirs & 2 == 0, dirs & 4 == 0];
            for kk in 0..nz {
                let k = if fwd[2] { kk } else { nz - 1 - kk };
                for jj in 0..ny {
                    let j = if fwd[1] { jj } else { ny - 1 - jj };
                    for ii in 0..nx {
                        let i = if fwd[0] { ii } else { nx - 1 - ii };
                        let idx = i + nx * (j + ny * k);
                        if self.geom.cell_class[idx] != CellClass::Free {
                            continue;
                        }
                        let old = self.phi[idx];
                        let new = update_at(&self.phi, self.geom, idx, [i, j, k], &self.coeffs[idx]);
                        let change = old - new;
                        if change > max_change {
                            max_change = change;
                        }
                        self.phi[idx] = new;
                    }
                }
            }
        }
        self.rounds += 1;
        max_change
    }

    pub fn residual_stats(&self) -> (T, T) {
        grid_residual_stats(&self.phi, self.geom, &self.v_max, &self.wind, self.eps_reg)
    }

    pub fn run(mut self, opts: &FsmOptions<T>) -> ValueSolution<T> {
        let mut last = T::zero();
        let mut status = SolveStatus::NotConverged;
        while self.rounds < opts.max_sweep_rounds {
            last = self.sweep_round();
            if last < opts.tol {
                status = SolveStatus::Converged;
                break;
            }
        }
        if status == SolveStatus::NotConverged {
            warn!(
                "fast sweeping stopped after {} rounds with update {}",
                self.rounds,
                last.to_f64_lossy()
            );
        }
        let (residual_mean, residual_max) = self.residual_stats();
        ValueSolution {
            phi: GridField::scalar(self.geom, self.phi, Units::Seconds),
            iterations: self.rounds,
            final_update_inf_norm: last,
            residual_mean,
            residual_max,
            loss_final: None,
            residual_mean_history: Vec::new(),
            residual_max_history: Vec::new(),
            status,
        }
    }
}

/// Solves for the value field with `v_max(rho)` frozen at the given density.
pub fn solve_value_fsm<T: Real>(problem: &ValueProblem<'_, T>, opts: &FsmOptions<T>) -> ValueSolution<T> {
    FsmSolver::new(problem).run(opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fundamental::FundamentalDiagram;
    use crate::grid::{Aabb, Sphere};
    use crate::wind::WindModel;

    fn v(x: f64, y: f64, z: f64) -> Vec3<f64> {
        Vec3::new(x, y, z)
    }

    fn unit_fd() -> FundamentalDiagram<f64> {
        // v_max == 1 for every density through the clamp
        FundamentalDiagram { v_max0: 1.0, v_min: 0.1, rho_jam: 1.0, beta: 20.0, clip_lo: 1.0, clip_hi: 1.0 }
    }

    fn cube(n: usize, h: f64, target: Vec3<f64>, radius: f64, obstacles: Vec<Aabb<f64>>) -> GridGeometry<f64> {
        GridGeometry::classify(v(0.0, 0.0, 0.0), v(h, h, h), [n, n, n], Sphere { center: target, radius }, obstacles).unwrap()
    }

    fn solve(geom: &GridGeometry<f64>, wind: WindModel<f64>, eps: f64) -> ValueSolution<f64> {
        let rho = GridField::scalar_filled(geom, 0.0, Units::Density);
        let fd = unit_fd();
        let problem = ValueProblem { geom, wind: &wind, fd: &fd, rho: &rho, eps_reg: eps };
        solve_value_fsm(&problem, &FsmOptions { tol: 1e-12, max_sweep_rounds: 5000 })
    }

    #[test]
    fn update_with_zero_neighbors_is_one_third() {
        // 3x3x3 grid: every cell but the middle one relabelled as target
        let mut geom = cube(3, 1.0, v(0.5, 0.5, 0.5), 0.1, vec![]);
        geom.cell_class.iter_mut().for_each(|c| *c = CellClass::Target);
        let mid = geom.idx(1, 1, 1);
        geom.cell_class[mid] = CellClass::Free;
        let mut phi = vec![0.0; 27];
        phi[mid] = 1e30;
        let k = CellCoeffs::new(1.0, Vec3::zero(), 0.0);
        assert!((lf_update_cell(&phi, &geom, mid, &k) - 1.0 / 3.0).abs() < 1e-15);
        phi[mid] = 0.2;
        assert_eq!(lf_update_cell(&phi, &geom, mid, &k), 0.2);
    }

    #[test]
    #[should_panic(expected = "non-free")]
    fn update_rejects_target_cell() {
        let geom = cube(4, 1.0, v(1.5, 1.5, 1.5), 0.2, vec![]);
        let idx = geom.idx(1, 1, 1);
        let phi = vec![0.0; geom.len()];
        lf_update_cell(&phi, &geom, idx, &CellCoeffs::new(1.0, Vec3::zero(), 0.0));
    }

    #[test]
    fn one_dimensional_spacing_is_h_over_v() {
        // a thin slab: target on the x = 0 face layer, no transverse variation
        let n = 24;
        let geom = GridGeometry::classify(
            v(0.0, 0.0, 0.0),
            v(1.0, 1.0, 1.0),
            [n, 4, 4],
            Sphere { center: v(0.5, 2.0, 2.0), radius: 2.2 },
            vec![],
        )
        .unwrap();
        // make the whole i = 0 layer the target so the problem is one-dimensional
        let mut geom = geom;
        for idx in 0..geom.len() {
            geom.cell_class[idx] = if geom.coords(idx)[0] == 0 { CellClass::Target } else { CellClass::Free };
        }
        let sol = solve(&geom, WindModel::None, 0.0);
        assert_eq!(sol.status, SolveStatus::Converged);
        for i in 1..n {
            let phi = sol.phi.get(geom.idx(i, 2, 1));
            assert!((phi - i as f64).abs() < 1e-9, "i={i} phi={phi}");
        }
    }

    #[test]
    fn stored_values_never_increase() {
        let geom = cube(12, 1.0, v(4.5, 6.5, 5.5), 0.3, vec![Aabb { min: v(6.0, 2.0, 0.0), max: v(8.0, 9.0, 12.0) }]);
        let rho = GridField::scalar_filled(&geom, 0.0, Units::Density);
        let wind = WindModel::Uniform { v: v(0.3, -0.2, 0.0) };
        let fd = unit_fd();
        let problem = ValueProblem { geom: &geom, wind: &wind, fd: &fd, rho: &rho, eps_reg: 1e-3 };
        let mut solver = FsmSolver::new(&problem);
        let (initial_mean, _) = solver.residual_stats();
        let mut prev = solver.phi().to_vec();
        for _ in 0..200 {
            let change = solver.sweep_round();
            for (a, b) in prev.iter().zip(solver.phi()) {
                assert!(b <= a);
            }
            prev = solver.phi().to_vec();
            if change < 1e-12 {
                break;
            }
        }
        let (final_mean, _) = solver.residual_stats();
        assert!(final_mean < initial_mean);
        // obstacle cells keep the sentinel, target cells stay at zero
        for idx in 0..geom.len() {
            match geom.class(idx) {
                CellClass::Obstacle => assert_eq!(prev[idx], 1e30),
                CellClass::Target => assert_eq!(prev[idx], 0.0),
                CellClass::Free => assert!(prev[idx] >= 0.0 && prev[idx] < 1e3),
            }
        }
    }

    #[test]
    fn octant_symmetry_without_wind() {
        let n = 11;
        let geom = cube(n, 1.0, v(5.5, 5.5, 5.5), 0.2, vec![]);
        let sol = solve(&geom, WindModel::None, 1e-3);
        for (i, j, k) in geom.cell_indices() {
            let a = sol.phi.get(geom.idx(i, j, k));
            for other in [
                geom.idx(n - 1 - i, j, k),
                geom.idx(i, n - 1 - j, k),
                geom.idx(i, j, n - 1 - k),
                geom.idx(j, i, k),
                geom.idx(k, j, i),
            ] {
                assert!((a - sol.phi.get(other)).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn walled_off_cells_keep_sentinel() {
        // target enclosed in a box of obstacle cells; the outer free region is unreachable
        let n = 8;
        let walls = vec![
            Aabb { min: v(2.0, 2.0, 2.0), max: v(6.0, 6.0, 2.9) },
            Aabb { min: v(2.0, 2.0, 5.1), max: v(6.0, 6.0, 6.0) },
            Aabb { min: v(2.0, 2.0, 2.0), max: v(2.9, 6.0, 6.0) },
            Aabb { min: v(5.1, 2.0, 2.0), max: v(6.0, 6.0, 6.0) },
            Aabb { min: v(2.0, 2.0, 2.0), max: v(6.0, 2.9, 6.0) },
            Aabb { min: v(2.0, 5.1, 2.0), max: v(6.0, 6.0, 6.0) },
        ];
        let geom = cube(n, 1.0, v(4.0, 4.0, 4.0), 0.9, walls);
        let sol = solve(&geom, WindModel::None, 0.0);
        assert_eq!(sol.status, SolveStatus::Converged);
        assert_eq!(sol.iterations, 1);
        for idx in 0..geom.len() {
            if geom.class(idx) == CellClass::Free {
                assert_eq!(sol.phi.get(idx), 1e30);
            }
        }
    }

    #[test]
    fn not_converged_is_reported() {
        let geom = cube(10, 1.0, v(0.5, 0.5, 0.5), 0.2, vec![]);
        let rho = GridField::scalar_filled(&geom, 0.0, Units::Density);
        let fd = unit_fd();
        let problem = ValueProblem { geom: &geom, wind: &WindModel::None, fd: &fd, rho: &rho, eps_reg: 0.0 };
        let sol = solve_value_fsm(&problem, &FsmOptions { tol: 1e-14, max_sweep_rounds: 1 });
        assert_eq!(sol.status, SolveStatus::NotConverged);
        assert_eq!(sol.iterations, 1);
        assert!(sol.phi.values.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn upwind_travel_takes_longer() {
        let n = 15;
        let geom = cube(n, 1.0, v(7.5, 7.5, 7.5), 0.2, vec![]);
        let sol = solve(&geom, WindModel::Uniform { v: v(0.5, 0.0, 0.0) }, 0.0);
        for d in 1..=7 {
            // cell downwind of the target must fly against the wind
            let against = sol.phi.get(geom.idx(7 + d, 7, 7));
            let with = sol.phi.get(geom.idx(7 - d, 7, 7));
            assert!(against > with);
        }
    }

    #[test]
    fn generic_f32_solve_matches_f64() {
        let n = 9;
        let g64 = cube(n, 1.0, v(4.5, 4.5, 4.5), 0.2, vec![]);
        let s64 = solve(&g64, WindModel::None, 1e-3);
        let g32 = GridGeometry::<f32>::classify(
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 1.0, 1.0),
            [n, n, n],
            Sphere { center: Vec3::new(4.5, 4.5, 4.5), radius: 0.2 },
            vec![],
        )
        .unwrap();
        let rho = GridField::scalar_filled(&g32, 0.0f32, Units::Density);
        let fd = FundamentalDiagram { v_max0: 1.0f32, v_min: 0.1, rho_jam: 1.0, beta: 20.0, clip_lo: 1.0, clip_hi: 1.0 };
        let problem = ValueProblem { geom: &g32, wind: &WindModel::None, fd: &fd, rho: &rho, eps_reg: 1e-3 };
        let s32 = solve_value_fsm(&problem, &FsmOptions { tol: 1e-6, max_sweep_rounds: 5000 });
        for idx in 0..g64.len() {
            let (a, b) = (s32.phi.values[idx] as f64, s64.phi.values[idx]);
            assert!((a - b).abs() < 1e-3, "cell {idx}: {a} vs {b} ({:?} {:?})", s32.status, s64.status);
        }
    }
}
