//! Static background wind fields.
//!
//! Vortex: Rankine-style horizontal rotation about a vertical axis through
//! `center_xy`, solid-body inside `core_radius` and decaying as `(R/r)^2`
//! outside. Shear: `rate * z * axis_dir`, with height `z` measured from the
//! domain floor. The vertical axis is the third coordinate.

use crate::config::WindConfig;
use crate::grid::GridGeometry;
use crate::scalar::Real;
use crate::vec3::Vec3;

#[derive(Debug, Clone, PartialEq)]
pub enum WindModel<T> {
    None,
    Uniform { v: Vec3<T> },
    Vortex { center_xy: [T; 2], omega: T, core_radius: T },
    Shear { rate: T, axis_dir: Vec3<T>, floor_z: T },
}

impl<T: Real> WindModel<T> {
    pub fn from_config(cfg: &WindConfig, domain_min: Vec3<f64>) -> Self {
        match cfg {
            WindConfig::None => WindModel::None,
            WindConfig::Uniform { v } => WindModel::Uniform { v: Vec3::from_f64(*v) },
            WindConfig::Vortex { center_xy, omega, core_radius } => WindModel::Vortex {
                center_xy: center_xy.map(T::of),
                omega: T::of(*omega),
                core_radius: T::of(*core_radius),
            },
            WindConfig::Shear { rate, axis_dir } => WindModel::Shear {
                rate: T::of(*rate),
                axis_dir: Vec3::from_f64(*axis_dir),
                floor_z: T::of(domain_min.z()),
            },
        }
    }

    pub fn eval(&self, x: Vec3<T>) -> Vec3<T> {
        match self {
            WindModel::None => Vec3::zero(),
            WindModel::Uniform { v } => *v,
            WindModel::Vortex { center_xy, omega, core_radius } => {
                let dx = x.x() - center_xy[0];
                let dy = x.y() - center_xy[1];
                let r2 = dx * dx + dy * dy;
                let factor = if r2 <= *core_radius * *core_radius {
                    T::one()
                } else {
                    *core_radius * *core_radius / r2
                };
                Vec3::new(-dy, dx, T::zero()) * (*omega * factor)
            }
            WindModel::Shear { rate, axis_dir, floor_z } => *axis_dir * (*rate * (x.z() - *floor_z)),
        }
    }

    /// Largest wind speed over all cell centers.
    pub fn max_speed(&self, geom: &GridGeometry<T>) -> T {
        geom.cell_indices()
            .map(|(i, j, k)| self.eval(geom.cell_center(i, j, k)).norm())
            .fold(T::zero(), T::max)
    }

    /// Wind sampled at every cell center, x-fastest.
    pub fn sample(&self, geom: &GridGeometry<T>) -> Vec<Vec3<T>> {
        geom.cell_indices().map(|(i, j, k)| self.eval(geom.cell_center(i, j, k))).collect()
    }
}
