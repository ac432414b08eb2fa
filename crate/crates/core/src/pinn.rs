//! Neural value solver.
//!
//! A small fully connected network `N(x)` is wrapped in a hard absorbing
//! boundary:
//!
//! ```text
//! phi_hat(x) = d(x)^p * softplus(N(x)) + d(x)^p * C * softplus(-k * d_obs(x))
//! ```
//!
//! where `d = max(0, sdf_target)`, so `phi_hat` vanishes on and inside the
//! target by construction. Training minimizes the mean squared Eikonal
//! residual over a collocation set that excludes points within `mask_delta`
//! of any obstacle. Spatial gradients of `phi_hat` are central finite
//! differences; parameter gradients are exact reverse mode through those
//! stencil evaluations.

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::grid::{CellClass, GridField, GridGeometry, Units};
use crate::scalar::{sigmoid, softplus, Real};
use crate::value::{hamiltonian, SolveStatus, ValueProblem, ValueSolution};
use crate::vec3::Vec3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PinnError {
    #[error("training loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("no collocation point satisfies the residual mask")]
    EmptyCollocation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sin,
}

impl Activation {
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "tanh" => Some(Activation::Tanh),
            "sin" => Some(Activation::Sin),
            _ => None,
        }
    }

    #[inline]
    fn apply<T: Real>(self, z: T) -> T {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Sin => z.sin(),
        }
    }

    /// Derivative given the pre-activation `z` and the activation `a`.
    #[inline]
    fn derivative<T: Real>(self, z: T, a: T) -> T {
        match self {
            Activation::Tanh => T::one() - a * a,
            Activation::Sin => z.cos(),
        }
    }
}

/// Fully connected network `R^3 -> R` with a flat parameter vector.
///
/// Per layer the parameters are the row-major `out x in` weight matrix
/// followed by the `out` biases. Inputs are mapped affinely from the domain
/// box onto `[-1, 1]^3` before the first layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    widths: Vec<usize>,
    params: Vec<T>,
    activation: Activation,
    input_lo: Vec3<T>,
    input_scale: Vec3<T>,
}

/// Forward-pass record reused by [`Mlp::backward`].
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    /// `acts[0]` is the normalized input; `acts[l + 1]` the output of layer `l`.
    acts: Vec<Vec<T>>,
    pre: Vec<Vec<T>>,
}

impl<T: Real> Mlp<T> {
    /// Network `3 -> hidden... -> 1` with weights and biases uniform in
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn new(hidden: &[usize], activation: Activation, lo: Vec3<T>, hi: Vec3<T>, rng: &mut impl Rng) -> Self {
        let mut widths = vec![3];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let mut params = Vec::new();
        for w in widths.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..(w[0] * w[1] + w[1]) {
                params.push(T::of(rng.gen_range(-bound..=bound)));
            }
        }
        let two = T::of(2.0);
        Self { widths, params, activation, input_lo: lo, input_scale: (hi - lo).map(|e| two / e) }
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    #[inline]
    fn normalize(&self, x: Vec3<T>) -> [T; 3] {
        let one = T::one();
        [0, 1, 2].map(|d| (x[d] - self.input_lo[d]) * self.input_scale[d] - one)
    }

    pub fn forward(&self, x: Vec3<T>) -> T {
        let mut cur: Vec<T> = self.normalize(x).to_vec();
        let mut off = 0;
        let n_layers = self.widths.len() - 1;
        for l in 0..n_layers {
            let (nin, nout) = (self.widths[l], self.widths[l + 1]);
            let w = &self.params[off..off + nin * nout];
            let b = &self.params[off + nin * nout..off + nin * nout + nout];
            let next: Vec<T> = (0..nout)
                .map(|o| {
                    let z = w[o * nin..(o + 1) * nin].iter().zip(&cur).fold(b[o], |acc, (wi, xi)| acc + *wi * *xi);
                    if l + 1 < n_layers {
                        self.activation.apply(z)
                    } else {
                        z
                    }
                })
                .collect();
            off += nin * nout + nout;
            cur = next;
        }
        cur[0]
    }

    /// Forward pass keeping intermediates for a later backward pass.
    pub fn forward_taped(&self, x: Vec3<T>, tape: &mut Tape<T>) -> T {
        let n_layers = self.widths.len() - 1;
        tape.acts.resize(n_layers + 1, Vec::new());
        tape.pre.resize(n_layers, Vec::new());
        tape.acts[0].clear();
        tape.acts[0].extend_from_slice(&self.normalize(x));
        let mut off = 0;
        for l in 0..n_layers {
            let (nin, nout) = (self.widths[l], self.widths[l + 1]);
            let w = &self.params[off..off + nin * nout];
            let b = &self.params[off + nin * nout..off + nin * nout + nout];
            let (head, tail) = tape.acts.split_at_mut(l + 1);
            let input = &head[l];
            let out = &mut tail[0];
            let pre = &mut tape.pre[l];
            pre.clear();
            out.clear();
            for o in 0..nout {
                let z = w[o * nin..(o + 1) * nin].iter().zip(input).fold(b[o], |acc, (wi, xi)| acc + *wi * *xi);
                pre.push(z);
                out.push(if l + 1 < n_layers { self.activation.apply(z) } else { z });
            }
            off += nin * nout + nout;
        }
        tape.acts[n_layers][0]
    }

    /// Accumulates `seed * dN/dparams` into `grad` for the taped input.
    pub fn backward(&self, tape: &Tape<T>, seed: T, grad: &mut [T]) {
        let n_layers = self.widths.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for l in 0..n_layers {
            offsets.push(off);
            off += self.widths[l] * self.widths[l + 1] + self.widths[l + 1];
        }
        // d(output)/d(pre-activation) of the current layer
        let mut delta = vec![seed];
        for l in (0..n_layers).rev() {
            let (nin, nout) = (self.widths[l], self.widths[l + 1]);
            let off = offsets[l];
            let input = &tape.acts[l];
            for o in 0..nout {
                let d = delta[o];
                let row = off + o * nin;
                for i in 0..nin {
                    grad[row + i] = grad[row + i] + d * input[i];
                }
                grad[off + nin * nout + o] = grad[off + nin * nout + o] + d;
            }
            if l == 0 {
                break;
            }
            let w = &self.params[off..off + nin * nout];
            let prev_pre = &tape.pre[l - 1];
            let prev_act = &tape.acts[l];
            delta = (0..nin)
                .map(|i| {
                    let back = (0..nout).fold(T::zero(), |acc, o| acc + w[o * nin + i] * delta[o]);
                    back * self.activation.derivative(prev_pre[i], prev_act[i])
                })
                .collect();
        }
    }
}

/// Hard absorbing-boundary composition parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HardBc<T> {
    /// Exponent `p` on the target distance.
    pub power: T,
    pub barrier_c: T,
    pub barrier_k: T,
}

/// `C * softplus(-k * d_obs)`; vanishes far from obstacles.
#[inline]
pub fn barrier_from_distance<T: Real>(d_obs: T, c_height: T, k: T) -> T {
    if c_height == T::zero() {
        return T::zero();
    }
    c_height * softplus(-k * d_obs)
}

pub fn barrier_obs<T: Real>(geom: &GridGeometry<T>, x: Vec3<T>, c_height: T, k: T) -> T {
    barrier_from_distance(geom.sdf_obstacles(x), c_height, k)
}

#[inline]
fn distance_factor<T: Real>(geom: &GridGeometry<T>, x: Vec3<T>, power: T) -> T {
    let d = geom.target_distance(x);
    if d == T::zero() {
        T::zero()
    } else if power == T::one() {
        d
    } else {
        d.powf(power)
    }
}

/// `d^p * softplus(N(x)) + d^p * barrier(x)`; exactly zero on and inside the target.
pub fn compose_phi_hat<T: Real>(net: &Mlp<T>, geom: &GridGeometry<T>, x: Vec3<T>, bc: &HardBc<T>) -> T {
    let dp = distance_factor(geom, x, bc.power);
    if dp == T::zero() {
        return T::zero();
    }
    dp * (softplus(net.forward(x)) + barrier_obs(geom, x, bc.barrier_c, bc.barrier_k))
}

/// Central-difference gradient of an arbitrary field with step `h` per axis.
pub fn fd_gradient<T: Real>(phi: impl Fn(Vec3<T>) -> T, x: Vec3<T>, h: T) -> Vec3<T> {
    let two = T::of(2.0);
    let mut g = Vec3::zero();
    for d in 0..3 {
        let mut e = Vec3::zero();
        e[d] = h;
        g[d] = (phi(x + e) - phi(x - e)) / (two * h);
    }
    g
}

/// `v_max |g|_eps - w . g - 1` with `g` the finite-difference gradient of `phi` at `x`.
pub fn eikonal_residual_of<T: Real>(phi: impl Fn(Vec3<T>) -> T, x: Vec3<T>, v_max: T, wind: Vec3<T>, eps_reg: T, h: T) -> T {
    let g = fd_gradient(phi, x, h);
    hamiltonian(g, v_max, wind, eps_reg) - T::one()
}

/// Residual of the composed network at a collocation point. `x` must satisfy
/// the residual mask `d_obs(x) > mask_delta`.
#[allow(clippy::too_many_arguments)]
pub fn eikonal_residual<T: Real>(
    net: &Mlp<T>,
    geom: &GridGeometry<T>,
    bc: &HardBc<T>,
    x: Vec3<T>,
    v_max: T,
    wind: Vec3<T>,
    eps_reg: T,
    fd_step_h: T,
    mask_delta: T,
) -> T {
    assert!(geom.sdf_obstacles(x) > mask_delta, "residual evaluated inside the obstacle mask");
    eikonal_residual_of(|y| compose_phi_hat(net, geom, y, bc), x, v_max, wind, eps_reg, fd_step_h)
}

/// A collocation point with its frozen coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualPoint<T> {
    pub x: Vec3<T>,
    pub v_max: T,
    pub wind: Vec3<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollocationSet<T> {
    pub interior: Vec<Vec3<T>>,
    pub near_geometry: Vec<Vec3<T>>,
    pub seed: u64,
}

impl<T: Real> CollocationSet<T> {
    pub fn len(&self) -> usize {
        self.interior.len() + self.near_geometry.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn points(&self) -> impl Iterator<Item = Vec3<T>> + '_ {
        self.interior.iter().chain(&self.near_geometry).copied()
    }
}

fn uniform_in_box<T: Real>(rng: &mut impl Rng, lo: Vec3<T>, hi: Vec3<T>) -> Vec3<T> {
    Vec3([0, 1, 2].map(|d| lo[d] + (hi[d] - lo[d]) * T::of(rng.gen::<f64>())))
}

fn unit_direction<T: Real>(rng: &mut impl Rng) -> Vec3<T> {
    loop {
        let v = Vec3::new(
            T::of(rng.gen_range(-1.0..1.0)),
            T::of(rng.gen_range(-1.0..1.0)),
            T::of(rng.gen_range(-1.0..1.0)),
        );
        let n = v.norm();
        if n > T::of(1e-3) && n <= T::one() {
            return v * (T::one() / n);
        }
    }
}

/// Draws the collocation set: uniform rejection sampling over the domain plus
/// extra points in a band of width `band` around the target and obstacles.
/// Every kept point has `d_obs > mask_delta` and lies strictly outside the target.
pub fn sample_collocation<T: Real>(
    geom: &GridGeometry<T>,
    n_interior: usize,
    n_near: usize,
    mask_delta: T,
    band: T,
    seed: u64,
) -> Result<CollocationSet<T>, PinnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = geom.origin;
    let hi = geom.domain_max();
    let admissible = |x: Vec3<T>| geom.sdf_obstacles(x) > mask_delta && geom.sdf_target(x) > T::zero() && geom.contains(x);
    let max_tries = 200 * (n_interior + n_near).max(1);

    let mut interior = Vec::with_capacity(n_interior);
    let mut tries = 0;
    while interior.len() < n_interior && tries < max_tries {
        tries += 1;
        let x = uniform_in_box(&mut rng, lo, hi);
        if admissible(x) {
            interior.push(x);
        }
    }

    let mut near = Vec::with_capacity(n_near);
    let near_obstacles = if geom.obstacles.is_empty() { 0 } else { n_near / 2 };
    let near_target = n_near - near_obstacles;
    tries = 0;
    while near.len() < near_target && tries < max_tries {
        tries += 1;
        let r = geom.target.radius + band * T::of(rng.gen::<f64>());
        let x = geom.target.center + unit_direction::<T>(&mut rng) * r;
        if admissible(x) {
            near.push(x);
        }
    }
    tries = 0;
    let goal = near.len() + near_obstacles;
    while near.len() < goal && tries < max_tries {
        tries += 1;
        let x = uniform_in_box(&mut rng, lo, hi);
        if admissible(x) && geom.sdf_obstacles(x) <= mask_delta + band {
            near.push(x);
        }
    }

    let set = CollocationSet { interior, near_geometry: near, seed };
    if set.is_empty() {
        return Err(PinnError::EmptyCollocation);
    }
    Ok(set)
}

/// Residual statistics of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualStats<T> {
    /// Mean squared residual (the training loss).
    pub loss: T,
    pub mean_abs: T,
    pub max_abs: T,
}

/// Composed network plus the data needed to evaluate the training loss.
#[derive(Debug, Clone)]
pub struct LossContext<'a, T> {
    pub geom: &'a GridGeometry<T>,
    pub bc: HardBc<T>,
    pub eps_reg: T,
    pub fd_step_h: T,
    pub mask_delta: T,
}

const CHUNK: usize = 32;

struct ChunkResult<T> {
    grad: Vec<T>,
    sq: T,
    abs: T,
    max: T,
}

impl<'a, T: Real> LossContext<'a, T> {
    /// Loss only, without parameter gradients.
    pub fn loss(&self, net: &Mlp<T>, batch: &[ResidualPoint<T>]) -> ResidualStats<T> {
        let mut sq = T::zero();
        let mut abs = T::zero();
        let mut max = T::zero();
        for pt in batch {
            let r = eikonal_residual(net, self.geom, &self.bc, pt.x, pt.v_max, pt.wind, self.eps_reg, self.fd_step_h, self.mask_delta);
            sq = sq + r * r;
            abs = abs + r.abs();
            max = max.max(r.abs());
        }
        let m = T::of(batch.len().max(1) as f64);
        ResidualStats { loss: sq / m, mean_abs: abs / m, max_abs: max }
    }

    fn chunk_grad(&self, net: &Mlp<T>, pts: &[ResidualPoint<T>], inv_m: T) -> ChunkResult<T> {
        let two = T::of(2.0);
        let h = self.fd_step_h;
        let mut grad = vec![T::zero(); net.n_params()];
        let mut tapes: [Tape<T>; 6] = Default::default();
        let mut factor = [T::zero(); 6];
        let mut active = [false; 6];
        let (mut sq, mut abs, mut max) = (T::zero(), T::zero(), T::zero());
        for pt in pts {
            assert!(self.geom.sdf_obstacles(pt.x) > self.mask_delta, "masked point reached the loss");
            let mut g = Vec3::zero();
            for d in 0..3 {
                let mut vals = [T::zero(); 2];
                for (s, sign) in [T::one(), -T::one()].into_iter().enumerate() {
                    let slot = 2 * d + s;
                    let mut y = pt.x;
                    y[d] = y[d] + sign * h;
                    let dp = distance_factor(self.geom, y, self.bc.power);
                    if dp == T::zero() {
                        active[slot] = false;
                        vals[s] = T::zero();
                        continue;
                    }
                    let n = net.forward_taped(y, &mut tapes[slot]);
                    let barrier = barrier_obs(self.geom, y, self.bc.barrier_c, self.bc.barrier_k);
                    vals[s] = dp * (softplus(n) + barrier);
                    factor[slot] = dp * sigmoid(n);
                    active[slot] = true;
                }
                g[d] = (vals[0] - vals[1]) / (two * h);
            }
            let norm = g.norm_eps(self.eps_reg);
            let r = pt.v_max * norm - pt.wind.dot(g) - T::one();
            sq = sq + r * r;
            abs = abs + r.abs();
            max = max.max(r.abs());
            if norm == T::zero() {
                continue;
            }
            for d in 0..3 {
                // dL/dg_d for this point's share of the mean
                let dr_dg = pt.v_max * g[d] / norm - pt.wind[d];
                let coeff = two * inv_m * r * dr_dg / (two * h);
                for (s, sign) in [T::one(), -T::one()].into_iter().enumerate() {
                    let slot = 2 * d + s;
                    if active[slot] {
                        net.backward(&tapes[slot], sign * coeff * factor[slot], &mut grad);
                    }
                }
            }
        }
        ChunkResult { grad, sq, abs, max }
    }

    /// Loss and exact parameter gradient. Points are processed in fixed
    /// chunks whose partial sums are combined in order, so the result does not
    /// depend on the number of worker threads.
    pub fn loss_and_grad(&self, net: &Mlp<T>, batch: &[ResidualPoint<T>]) -> (ResidualStats<T>, Vec<T>) {
        let m = batch.len().max(1);
        let inv_m = T::one() / T::of(m as f64);
        let parts: Vec<ChunkResult<T>> = batch.par_chunks(CHUNK).map(|c| self.chunk_grad(net, c, inv_m)).collect();
        let mut grad = vec![T::zero(); net.n_params()];
        let (mut sq, mut abs, mut max) = (T::zero(), T::zero(), T::zero());
        for p in parts {
            for (g, pg) in grad.iter_mut().zip(&p.grad) {
                *g = *g + *pg;
            }
            sq = sq + p.sq;
            abs = abs + p.abs;
            max = max.max(p.max);
        }
        let mf = T::of(m as f64);
        (ResidualStats { loss: sq / mf, mean_abs: abs / mf, max_abs: max }, grad)
    }
}

/// Largest relative difference between the reverse-mode gradient and central
/// finite differences (step `1e-6`) over every network parameter.
///
/// The denominator is `max(|analytic|, |numeric|, 1e-3 * max_p |analytic_p|)`:
/// components far below the gradient's scale are compared at the finite
/// difference noise level instead of against themselves.
pub fn weight_gradient_check(ctx: &LossContext<'_, f64>, net: &Mlp<f64>, batch: &[ResidualPoint<f64>]) -> f64 {
    let (_, analytic) = ctx.loss_and_grad(net, batch);
    let step = 1e-6;
    let floor = 1e-3 * analytic.iter().fold(0.0_f64, |m, a| m.max(a.abs())) + f64::MIN_POSITIVE;
    let mut probe = net.clone();
    let mut worst = 0.0_f64;
    for (p, &a) in analytic.iter().enumerate() {
        let orig = probe.params[p];
        probe.params[p] = orig + step;
        let up = ctx.loss(&probe, batch).loss;
        probe.params[p] = orig - step;
        let down = ctx.loss(&probe, batch).loss;
        probe.params[p] = orig;
        let numeric = (up - down) / (2.0 * step);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(rel);
    }
    worst
}

/// Resolved neural-solver options.
#[derive(Debug, Clone, PartialEq)]
pub struct PinnOptions<T> {
    pub hidden_layers: Vec<usize>,
    pub activation: Activation,
    pub n_interior: usize,
    pub n_near_geom: usize,
    pub epochs: usize,
    pub lr: T,
    pub cosine_decay: bool,
    pub fd_step_h: T,
    pub bc: HardBc<T>,
    pub mask_delta: T,
    pub near_band: T,
    pub seed: u64,
}

impl<T: Real> PinnOptions<T> {
    pub fn from_config(cfg: &crate::config::PinnConfig, geom: &GridGeometry<T>, seed: u64) -> Self {
        let half_min = geom.min_spacing() * T::of(0.5);
        Self {
            hidden_layers: cfg.hidden_layers.clone(),
            activation: Activation::from_name(&cfg.activation).unwrap_or(Activation::Tanh),
            n_interior: cfg.n_interior,
            n_near_geom: cfg.n_near_geom,
            epochs: cfg.epochs,
            lr: T::of(cfg.lr),
            cosine_decay: cfg.cosine_decay,
            fd_step_h: cfg.fd_step_h.map(T::of).unwrap_or(half_min),
            bc: HardBc { power: T::of(cfg.bc_power_p), barrier_c: T::of(cfg.barrier_c), barrier_k: T::of(cfg.barrier_k) },
            mask_delta: cfg.mask_delta.map(T::of).unwrap_or(half_min),
            near_band: cfg.near_band.map(T::of).unwrap_or(geom.max_spacing() * T::of(2.0)),
            seed,
        }
    }
}

/// Network plus collocation set; kept alive across outer iterations for warm starts.
#[derive(Debug, Clone)]
pub struct PinnSolver<T> {
    pub net: Mlp<T>,
    pub collocation: CollocationSet<T>,
    pub opts: PinnOptions<T>,
}

impl<T: Real> PinnSolver<T> {
    pub fn new(geom: &GridGeometry<T>, opts: PinnOptions<T>) -> Result<Self, PinnError> {
        let collocation =
            sample_collocation(geom, opts.n_interior, opts.n_near_geom, opts.mask_delta, opts.near_band, opts.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);
        let net = Mlp::new(&opts.hidden_layers, opts.activation, geom.origin, geom.domain_max(), &mut rng);
        Ok(Self { net, collocation, opts })
    }

    fn batch(&self, problem: &ValueProblem<'_, T>) -> Vec<ResidualPoint<T>> {
        self.collocation
            .points()
            .map(|x| {
                let rho = problem.geom.trilinear(&problem.rho.values, x).max(T::zero());
                ResidualPoint { x, v_max: problem.fd.v_max(rho), wind: problem.wind.eval(x) }
            })
            .collect()
    }

    fn context<'g>(&self, problem: &ValueProblem<'g, T>) -> LossContext<'g, T> {
        LossContext {
            geom: problem.geom,
            bc: self.opts.bc,
            eps_reg: problem.eps_reg,
            fd_step_h: self.opts.fd_step_h,
            mask_delta: self.opts.mask_delta,
        }
    }

    /// Runs `opts.epochs` steps of gradient descent against the frozen density
    /// and samples the composed field on the grid.
    pub fn train(&mut self, problem: &ValueProblem<'_, T>) -> Result<ValueSolution<T>, PinnError> {
        let batch = self.batch(problem);
        let ctx = self.context(problem);
        let epochs = self.opts.epochs;
        let mut mean_hist = Vec::with_capacity(epochs);
        let mut max_hist = Vec::with_capacity(epochs);
        let mut last_step = T::zero();
        for epoch in 0..epochs {
            let (stats, grad) = ctx.loss_and_grad(&self.net, &batch);
            if !stats.loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(PinnError::NonFiniteLoss { epoch });
            }
            mean_hist.push(stats.mean_abs);
            max_hist.push(stats.max_abs);
            let lr = if self.opts.cosine_decay {
                let t = T::of(epoch as f64 / epochs as f64);
                self.opts.lr * T::of(0.5) * (T::one() + (T::PI() * t).cos())
            } else {
                self.opts.lr
            };
            last_step = T::zero();
            for (p, g) in self.net.params.iter_mut().zip(&grad) {
                let step = lr * *g;
                *p = *p - step;
                last_step = last_step.max(step.abs());
            }
            if epoch % 100 == 0 {
                debug!("epoch {epoch}: loss {} mean |r| {}", stats.loss.to_f64_lossy(), stats.mean_abs.to_f64_lossy());
            }
        }
        let final_stats = ctx.loss(&self.net, &batch);
        if !final_stats.loss.is_finite() || self.net.params.iter().any(|p| !p.is_finite()) {
            return Err(PinnError::NonFiniteLoss { epoch: epochs });
        }
        Ok(ValueSolution {
            phi: self.sample_grid(problem.geom),
            iterations: epochs,
            final_update_inf_norm: last_step,
            residual_mean: final_stats.mean_abs,
            residual_max: final_stats.max_abs,
            loss_final: Some(final_stats.loss),
            residual_mean_history: mean_hist,
            residual_max_history: max_hist,
            status: SolveStatus::Converged,
        })
    }

    /// Composed field at cell centers; 0 on target cells, sentinel on obstacles.
    pub fn sample_grid(&self, geom: &GridGeometry<T>) -> GridField<T> {
        let values = (0..geom.len())
            .map(|idx| match geom.class(idx) {
                CellClass::Target => T::zero(),
                CellClass::Obstacle => T::sentinel(),
                CellClass::Free => compose_phi_hat(&self.net, geom, geom.center_of(idx), &self.opts.bc),
            })
            .collect();
        GridField::scalar(geom, values, Units::Seconds)
    }
}

/// Trains a freshly initialized network for the given density.
pub fn train_value_pinn<T: Real>(problem: &ValueProblem<'_, T>, opts: PinnOptions<T>) -> Result<ValueSolution<T>, PinnError> {
    PinnSolver::new(problem.geom, opts)?.train(problem)
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

    fn geom(obstacles: Vec<Aabb<f64>>) -> GridGeometry<f64> {
        GridGeometry::classify(v(-1.0, -1.0, -1.0), v(0.25, 0.25, 0.25), [8, 8, 8], Sphere { center: v(0.125, 0.125, 0.125), radius: 0.2 }, obstacles)
            .unwrap()
    }

    fn zero_net(g: &GridGeometry<f64>) -> Mlp<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Mlp::new(&[4], Activation::Tanh, g.origin, g.domain_max(), &mut rng);
        net.params.iter_mut().for_each(|p| *p = 0.0);
        net
    }

    const NO_BARRIER: HardBc<f64> = HardBc { power: 1.0, barrier_c: 0.0, barrier_k: 10.0 };

    #[test]
    fn barrier_examples() {
        assert!(barrier_from_distance(1e30, 5.0, 10.0) <= 1e-12);
        assert!((barrier_from_distance(-0.1, 5.0, 10.0_f64) - 5.0 * (1.0 + 1f64.exp()).ln()).abs() < 1e-12);
        assert!((barrier_from_distance(-0.1, 5.0, 10.0_f64) - 6.5664).abs() < 1e-4);
        assert!((barrier_from_distance(0.0, 2.0, 3.0_f64) - 2.0 * 2f64.ln()).abs() < 1e-15);
        let g = geom(vec![]);
        assert_eq!(barrier_obs(&g, v(0.3, 0.3, 0.3), 5.0, 10.0), 0.0);
    }

    #[test]
    fn composition_examples() {
        let g = geom(vec![]);
        let net = zero_net(&g);
        let c = g.target.center;
        assert_eq!(compose_phi_hat(&net, &g, c + v(0.2, 0.0, 0.0), &NO_BARRIER), 0.0);
        assert_eq!(compose_phi_hat(&net, &g, c + v(0.05, -0.1, 0.0), &NO_BARRIER), 0.0);
        let x = c + v(0.5, 0.0, 0.0);
        let phi = compose_phi_hat(&net, &g, x, &NO_BARRIER);
        assert!((phi - 0.3 * 2f64.ln()).abs() < 1e-15);
        // a wider grid so that d = 2 exactly
        let wide = GridGeometry::classify(v(-4.0, -4.0, -4.0), v(1.0, 1.0, 1.0), [8, 8, 8], Sphere { center: v(0.5, 0.5, 0.5), radius: 1.0 }, vec![]).unwrap();
        let net = zero_net(&wide);
        let phi = compose_phi_hat(&net, &wide, v(3.5, 0.5, 0.5), &NO_BARRIER);
        assert!((phi - 2.0 * 2f64.ln()).abs() < 1e-15);
        assert!((phi - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn hard_bc_is_exact_inside_target() {
        let obs = vec![Aabb { min: v(0.5, -1.0, -1.0), max: v(0.75, 1.0, 1.0) }];
        let g = geom(obs);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(&[6, 6], Activation::Tanh, g.origin, g.domain_max(), &mut rng);
        let bc = HardBc { power: 1.5, barrier_c: 3.0, barrier_k: 8.0 };
        for _ in 0..1000 {
            let x = g.target.center + unit_direction::<f64>(&mut rng) * (g.target.radius * rng.gen::<f64>());
            assert_eq!(compose_phi_hat(&net, &g, x, &bc).to_bits(), 0.0f64.to_bits());
        }
    }

    #[test]
    fn composition_is_nonnegative() {
        let g = geom(vec![Aabb { min: v(-0.9, -0.9, -0.9), max: v(-0.4, -0.4, -0.4) }]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = Mlp::new(&[5], Activation::Sin, g.origin, g.domain_max(), &mut rng);
        net.params.iter_mut().for_each(|p| *p *= 40.0);
        let bc = HardBc { power: 2.0, barrier_c: 1.0, barrier_k: 20.0 };
        for _ in 0..2000 {
            let x = uniform_in_box(&mut rng, g.origin, g.domain_max());
            assert!(compose_phi_hat(&net, &g, x, &bc) >= 0.0);
        }
    }

    #[test]
    fn residual_of_linear_fields() {
        let h = 1e-3;
        let lin = |x: Vec3<f64>| x.x();
        let r = eikonal_residual_of(lin, v(0.3, 0.1, -0.2), 1.0, Vec3::zero(), 0.0, h);
        assert!(r.abs() < 1e-10);
        let r = eikonal_residual_of(lin, v(0.3, 0.1, -0.2), 1.0, v(0.5, 0.0, 0.0), 0.0, h);
        assert!((r + 0.5).abs() < 1e-10);
    }

    #[test]
    #[should_panic(expected = "obstacle mask")]
    fn residual_rejects_masked_points() {
        let g = geom(vec![Aabb { min: v(0.5, 0.5, 0.5), max: v(1.0, 1.0, 1.0) }]);
        let net = zero_net(&g);
        eikonal_residual(&net, &g, &NO_BARRIER, v(0.45, 0.6, 0.6), 1.0, Vec3::zero(), 0.0, 0.01, 0.1);
    }

    #[test]
    fn collocation_respects_mask() {
        let g = geom(vec![Aabb { min: v(0.5, -1.0, -1.0), max: v(0.75, 1.0, 0.0) }]);
        let set = sample_collocation(&g, 300, 100, 0.1, 0.3, 11).unwrap();
        assert_eq!(set.interior.len(), 300);
        assert_eq!(set.near_geometry.len(), 100);
        for x in set.points() {
            assert!(g.sdf_obstacles(x) > 0.1);
            assert!(g.target_distance(x) > 0.0);
            assert!(g.contains(x));
        }
        // same seed, same set
        assert_eq!(sample_collocation(&g, 300, 100, 0.1, 0.3, 11).unwrap(), set);
    }

    fn batch(g: &GridGeometry<f64>, n: usize, seed: u64) -> Vec<ResidualPoint<f64>> {
        let set = sample_collocation(g, n, 0, 0.1, 0.2, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        set.points()
            .map(|x| ResidualPoint { x, v_max: rng.gen_range(0.5..1.5), wind: v(rng.gen_range(-0.3..0.3), 0.1, -0.05) })
            .collect()
    }

    fn ctx(g: &GridGeometry<f64>) -> LossContext<'_, f64> {
        LossContext {
            geom: g,
            bc: HardBc { power: 1.0, barrier_c: 0.5, barrier_k: 6.0 },
            eps_reg: 1e-3,
            fd_step_h: 0.05,
            mask_delta: 0.1,
        }
    }

    #[test]
    fn gradient_check_random_tiny_net() {
        let g = geom(vec![Aabb { min: v(0.5, -1.0, -1.0), max: v(0.75, 1.0, 0.0) }]);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let net = Mlp::new(&[8, 8], Activation::Tanh, g.origin, g.domain_max(), &mut rng);
        assert!(net.n_params() <= 200);
        for seed in 0..5 {
            let err = weight_gradient_check(&ctx(&g), &net, &batch(&g, 4, 2 + 10 * seed));
            assert!(err <= 1e-5, "seed {seed}: max relative error {err}");
        }
    }

    #[test]
    fn gradient_check_zero_net_absolute() {
        let g = geom(vec![]);
        let net = zero_net(&g);
        let c = ctx(&g);
        let b = batch(&g, 4, 8);
        let (_, analytic) = c.loss_and_grad(&net, &b);
        let mut probe = net.clone();
        for p in 0..net.n_params() {
            probe.params[p] = 1e-6;
            let up = c.loss(&probe, &b).loss;
            probe.params[p] = -1e-6;
            let down = c.loss(&probe, &b).loss;
            probe.params[p] = 0.0;
            assert!((analytic[p] - (up - down) / 2e-6).abs() <= 1e-6);
        }
    }

    #[test]
    fn single_parameter_taylor_check() {
        let g = geom(vec![]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Mlp::new(&[6], Activation::Tanh, g.origin, g.domain_max(), &mut rng);
        let c = ctx(&g);
        let b = batch(&g, 6, 5);
        let (base, grad) = c.loss_and_grad(&net, &b);
        let p = 7;
        let mut errs = Vec::new();
        for eps in [1e-2, 5e-3] {
            let mut probe = net.clone();
            probe.params[p] += eps;
            let change = c.loss(&probe, &b).loss - base.loss;
            errs.push((change - grad[p] * eps).abs());
        }
        // halving eps shrinks the first-order remainder about fourfold
        assert!(errs[1] < errs[0] * 0.3, "{errs:?}");
    }

    #[test]
    fn chunked_gradient_matches_serial_sum() {
        let g = geom(vec![]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Mlp::new(&[5, 5], Activation::Tanh, g.origin, g.domain_max(), &mut rng);
        let c = ctx(&g);
        let b = batch(&g, 100, 3);
        let (stats, grad) = c.loss_and_grad(&net, &b);
        let plain = c.loss(&net, &b);
        assert!((stats.loss - plain.loss).abs() < 1e-12);
        assert!((stats.mean_abs - plain.mean_abs).abs() < 1e-12);
        assert_eq!(stats.max_abs, plain.max_abs);
        let again = c.loss_and_grad(&net, &b).1;
        assert_eq!(grad, again);
    }

    fn toy_problem(n: usize) -> (GridGeometry<f64>, FundamentalDiagram<f64>, GridField<f64>) {
        let h = 2.0 / n as f64;
        let g = GridGeometry::classify(v(-1.0, -1.0, -1.0), v(h, h, h), [n, n, n], Sphere { center: v(0.0, 0.0, 0.0), radius: 0.25 }, vec![]).unwrap();
        let fd = FundamentalDiagram { v_max0: 1.0, v_min: 0.1, rho_jam: 1.0, beta: 20.0, clip_lo: 0.2, clip_hi: 2.0 };
        let rho = GridField::scalar_filled(&g, 0.0, Units::Density);
        (g, fd, rho)
    }

    fn toy_opts(g: &GridGeometry<f64>, epochs: usize) -> PinnOptions<f64> {
        let mut cfg = crate::config::PinnConfig::default();
        cfg.hidden_layers = vec![8];
        cfg.n_interior = 200;
        cfg.n_near_geom = 50;
        cfg.epochs = epochs;
        cfg.lr = 0.05;
        PinnOptions::from_config(&cfg, g, 17)
    }

    #[test]
    fn training_reduces_residual() {
        let (g, fd, rho) = toy_problem(9);
        let wind = WindModel::None;
        let problem = ValueProblem { geom: &g, wind: &wind, fd: &fd, rho: &rho, eps_reg: 1e-3 };
        let sol = train_value_pinn(&problem, toy_opts(&g, 300)).unwrap();
        let first = sol.residual_mean_history[0];
        assert_eq!(sol.residual_mean_history.len(), 300);
        assert!(sol.residual_mean * 5.0 <= first, "first {first} final {}", sol.residual_mean);
    }

    #[test]
    fn zero_epochs_returns_untrained_composition() {
        let (g, fd, rho) = toy_problem(9);
        let wind = WindModel::None;
        let problem = ValueProblem { geom: &g, wind: &wind, fd: &fd, rho: &rho, eps_reg: 1e-3 };
        let opts = toy_opts(&g, 0);
        let solver = PinnSolver::new(&g, opts.clone()).unwrap();
        let sol = train_value_pinn(&problem, opts).unwrap();
        assert!(sol.residual_mean_history.is_empty());
        assert!(sol.residual_max_history.is_empty());
        assert_eq!(sol.phi, solver.sample_grid(&g));
    }

    #[test]
    fn jammed_density_uses_speed_floor() {
        let (g, mut fd, _) = toy_problem(9);
        fd.clip_lo = 0.4;
        let rho = GridField::scalar_filled(&g, fd.rho_jam, Units::Density);
        let wind = WindModel::None;
        let problem = ValueProblem { geom: &g, wind: &wind, fd: &fd, rho: &rho, eps_reg: 1e-3 };
        let solver = PinnSolver::new(&g, toy_opts(&g, 20)).unwrap();
        assert!(solver.batch(&problem).iter().all(|p| p.v_max == 0.4));
        let sol = train_value_pinn(&problem, toy_opts(&g, 20)).unwrap();
        assert!(sol.phi.values.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn non_finite_parameters_abort_training() {
        let (g, fd, rho) = toy_problem(9);
        let wind = WindModel::None;
        let problem = ValueProblem { geom: &g, wind: &wind, fd: &fd, rho: &rho, eps_reg: 1e-3 };
        let mut opts = toy_opts(&g, 20);
        opts.lr = f64::NAN;
        assert_eq!(train_value_pinn(&problem, opts).unwrap_err(), PinnError::NonFiniteLoss { epoch: 1 });
    }

    #[test]
    fn empty_collocation_is_an_error() {
        let (g, _, _) = toy_problem(9);
        assert_eq!(sample_collocation(&g, 0, 0, 0.1, 0.1, 1), Err(PinnError::EmptyCollocation));
    }
}
