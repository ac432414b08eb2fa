//! Demand source fields for the homing and point-to-point scenarios.

use thiserror::Error;

use crate::config::SourceConfig;
use crate::grid::{CellClass, GridField, GridGeometry, Units};
use crate::scalar::Real;
use crate::vec3::Vec3;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SourceError {
    #[error("source sphere contains no free cell center")]
    EmptySourceRegion,
}

/// Source density `q` (veh/(m^3 s)) with its integrated rate (veh/s).
#[derive(Debug, Clone, PartialEq)]
pub struct SourceField<T> {
    pub q: GridField<T>,
    pub total_rate: T,
}

impl<T: Real> SourceField<T> {
    pub fn max_rate(&self) -> T {
        self.q.values.iter().copied().fold(T::zero(), T::max)
    }
}

/// Homing injects `rate_density` on every free cell. Point-to-point splits
/// `total_rate` evenly over the free cells whose centers fall in the source
/// sphere. Obstacle and target cells never carry a source.
pub fn build_source<T: Real>(cfg: &SourceConfig, geom: &GridGeometry<T>) -> Result<SourceField<T>, SourceError> {
    let n = geom.len();
    let mut q = vec![T::zero(); n];
    match cfg {
        SourceConfig::Homing { rate_density } => {
            let r = T::of(*rate_density);
            let mut free = 0usize;
            for (idx, c) in geom.cell_class.iter().enumerate() {
                if *c == CellClass::Free {
                    q[idx] = r;
                    free += 1;
                }
            }
            let total_rate = r * geom.cell_volume * T::of(free as f64);
            Ok(SourceField { q: GridField::scalar(geom, q, Units::SourceRate), total_rate })
        }
        SourceConfig::P2p { center, radius, total_rate } => {
            let center = Vec3::<T>::from_f64(*center);
            let radius = T::of(*radius);
            let covered: Vec<usize> = (0..n)
                .filter(|&idx| {
                    geom.class(idx) == CellClass::Free && (geom.center_of(idx) - center).norm() <= radius
                })
                .collect();
            if covered.is_empty() {
                return Err(SourceError::EmptySourceRegion);
            }
            let total = T::of(*total_rate);
            let per_cell = total / (T::of(covered.len() as f64) * geom.cell_volume);
            for idx in covered {
                q[idx] = per_cell;
            }
            Ok(SourceField { q: GridField::scalar(geom, q, Units::SourceRate), total_rate: total })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Aabb, Sphere};

    fn v(x: f64, y: f64, z: f64) -> Vec3<f64> {
        Vec3::new(x, y, z)
    }

    fn sum_qv(s: &SourceField<f64>, geom: &GridGeometry<f64>) -> f64 {
        s.q.values.iter().map(|q| q * geom.cell_volume).sum()
    }

    #[test]
    fn homing_sums_free_cells() {
        // 4x4x4 unit cells; target takes 8 centers, obstacles take 46, leaving 10 free
        let obs = vec![
            Aabb { min: v(0.0, 0.0, 0.0), max: v(4.0, 4.0, 0.9) },
            Aabb { min: v(0.0, 0.0, 3.1), max: v(4.0, 4.0, 4.0) },
            Aabb { min: v(0.0, 0.0, 0.0), max: v(4.0, 0.9, 4.0) },
            Aabb { min: v(0.0, 0.0, 0.0), max: v(0.9, 4.0, 4.0) },
        ];
        let geom = GridGeometry::classify(
            v(0.0, 0.0, 0.0),
            v(1.0, 1.0, 1.0),
            [4, 4, 4],
            Sphere { center: v(2.0, 2.0, 2.0), radius: 0.9 },
            obs,
        )
        .unwrap();
        let c = geom.counts();
        assert_eq!(c.free, 10);
        let s = build_source(&SourceConfig::Homing { rate_density: 1.0 }, &geom).unwrap();
        assert_eq!(s.total_rate, 10.0);
        assert_eq!(sum_qv(&s, &geom), 10.0);
        for (idx, q) in s.q.values.iter().enumerate() {
            let expect = if geom.class(idx) == CellClass::Free { 1.0 } else { 0.0 };
            assert_eq!(*q, expect);
        }
    }

    #[test]
    fn p2p_splits_uniformly() {
        // spacing (1, 1, 0.5): cell volume 0.5; sphere at a cell corner covers 4 centers in-plane
        let geom = GridGeometry::classify(
            v(0.0, 0.0, 0.0),
            v(1.0, 1.0, 0.5),
            [6, 6, 6],
            Sphere { center: v(4.5, 4.5, 2.25), radius: 0.2 },
            vec![],
        )
        .unwrap();
        let cfg = SourceConfig::P2p { center: v(1.0, 1.0, 0.25), radius: 0.75, total_rate: 1.0 };
        let s = build_source(&cfg, &geom).unwrap();
        let covered: Vec<f64> = s.q.values.iter().copied().filter(|q| *q > 0.0).collect();
        assert_eq!(covered.len(), 4);
        assert!(covered.iter().all(|q| *q == 0.5));
        assert!((sum_qv(&s, &geom) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn p2p_inside_obstacle_is_empty() {
        let geom = GridGeometry::classify(
            v(0.0, 0.0, 0.0),
            v(1.0, 1.0, 1.0),
            [6, 6, 6],
            Sphere { center: v(4.5, 4.5, 4.5), radius: 0.2 },
            vec![Aabb { min: v(0.0, 0.0, 0.0), max: v(2.0, 2.0, 2.0) }],
        )
        .unwrap();
        let cfg = SourceConfig::P2p { center: v(1.0, 1.0, 1.0), radius: 0.9, total_rate: 1.0 };
        assert_eq!(build_source(&cfg, &geom), Err(SourceError::EmptySourceRegion));
    }

    #[test]
    fn p2p_conserves_total_rate_on_odd_counts() {
        let geom = GridGeometry::classify(
            v(-1.0, -1.0, -1.0),
            v(0.1, 0.1, 0.1),
            [20, 20, 20],
            Sphere { center: v(0.55, 0.55, 0.55), radius: 0.1 },
            vec![],
        )
        .unwrap();
        for &(r, rate) in &[(0.23, 3.7), (0.31, 0.013), (0.47, 1e4)] {
            let cfg = SourceConfig::P2p { center: v(-0.4, -0.33, -0.2), radius: r, total_rate: rate };
            let s = build_source(&cfg, &geom).unwrap();
            assert!((sum_qv(&s, &geom) - rate).abs() <= 1e-12 * rate);
        }
    }
}
