//! Types shared by the two value-field solvers.

use crate::fundamental::FundamentalDiagram;
use crate::grid::{CellClass, GridField, GridGeometry};
use crate::scalar::Real;
use crate::vec3::Vec3;
use crate::wind::WindModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    NotConverged,
}

/// Minimum-time field plus solver diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueSolution<T> {
    pub phi: GridField<T>,
    /// Sweep rounds (fast sweeping) or epochs (neural solver).
    pub iterations: usize,
    pub final_update_inf_norm: T,
    pub residual_mean: T,
    pub residual_max: T,
    /// Mean squared residual of the last training evaluation; neural solver only.
    pub loss_final: Option<T>,
    pub residual_mean_history: Vec<T>,
    pub residual_max_history: Vec<T>,
    pub status: SolveStatus,
}

/// Anisotropic Hamiltonian `v_max * |p|_eps - w . p`.
#[inline]
pub fn hamiltonian<T: Real>(p: Vec3<T>, v_max: T, wind: Vec3<T>, eps_reg: T) -> T {
    v_max * p.norm_eps(eps_reg) - wind.dot(p)
}

/// Per-cell `v_max(rho)` for the frozen density.
pub fn v_max_field<T: Real>(fd: &FundamentalDiagram<T>, rho: &GridField<T>) -> Vec<T> {
    rho.values.iter().map(|&r| fd.v_max(r.max(T::zero()))).collect()
}

/// Mean and max of `|v_max |grad phi|_eps - w . grad phi - 1|` over free cells
/// whose six neighbors all exist and are not obstacles. Gradients are central
/// differences with target neighbors contributing `phi = 0`.
pub fn grid_residual_stats<T: Real>(
    phi: &[T],
    geom: &GridGeometry<T>,
    v_max: &[T],
    wind: &[Vec3<T>],
    eps_reg: T,
) -> (T, T) {
    let two = T::of(2.0);
    let mut sum = T::zero();
    let mut max = T::zero();
    let mut count = 0usize;
    'cells: for idx in 0..geom.len() {
        if geom.class(idx) != CellClass::Free {
            continue;
        }
        let mut g = Vec3::zero();
        for axis in 0..3 {
            let mut side = [T::zero(); 2];
            for (s, dir) in [-1isize, 1].into_iter().enumerate() {
                match geom.neighbor(idx, axis, dir) {
                    None => continue 'cells,
                    Some(n) => match geom.class(n) {
                        CellClass::Obstacle => continue 'cells,
                        CellClass::Target => side[s] = T::zero(),
                        CellClass::Free => side[s] = phi[n],
                    },
                }
            }
            g[axis] = (side[1] - side[0]) / (two * geom.spacing[axis]);
        }
        let r = (hamiltonian(g, v_max[idx], wind[idx], eps_reg) - T::one()).abs();
        sum = sum + r;
        max = max.max(r);
        count += 1;
    }
    if count == 0 {
        (T::zero(), T::zero())
    } else {
        (sum / T::of(count as f64), max)
    }
}

/// Inputs common to both value solvers: geometry, wind, speed law and frozen density.
#[derive(Debug, Clone, Copy)]
pub struct ValueProblem<'a, T> {
    pub geom: &'a GridGeometry<T>,
    pub wind: &'a WindModel<T>,
    pub fd: &'a FundamentalDiagram<T>,
    pub rho: &'a GridField<T>,
    pub eps_reg: T,
}
