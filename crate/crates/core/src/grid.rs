//! Uniform cell-centered Cartesian grid, signed distances to the target
//! sphere and obstacle boxes, and per-cell classification.
//!
//! Cells are indexed x-fastest: `idx = i + nx * (j + ny * k)`.

use thiserror::Error;

use crate::config::ScenarioConfig;
use crate::scalar::{Real, SENTINEL};
use crate::vec3::Vec3;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GeometryError {
    #[error("no cell center lies inside the target sphere")]
    NoTargetCell,
    #[error("every cell is obstructed or part of the target")]
    NoFreeCell,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellClass {
    Free,
    Obstacle,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sphere<T> {
    pub center: Vec3<T>,
    pub radius: T,
}

impl<T: Real> Sphere<T> {
    /// Signed distance, negative inside.
    #[inline]
    pub fn sdf(&self, x: Vec3<T>) -> T {
        (x - self.center).norm() - self.radius
    }
}

/// Closed axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb<T> {
    pub min: Vec3<T>,
    pub max: Vec3<T>,
}

impl<T: Real> Aabb<T> {
    #[inline]
    pub fn contains(&self, x: Vec3<T>) -> bool {
        (0..3).all(|d| x[d] >= self.min[d] && x[d] <= self.max[d])
    }

    /// Exact signed distance, positive outside and negative inside.
    #[inline]
    pub fn sdf(&self, x: Vec3<T>) -> T {
        let half = T::of(0.5);
        let c = (self.min + self.max) * half;
        let e = (self.max - self.min) * half;
        let q = (x - c).map(T::abs) - e;
        let outside = q.map(|v| v.max(T::zero())).norm();
        let inside = q.x().max(q.y()).max(q.z()).min(T::zero());
        outside + inside
    }
}

/// Signed distance to the union of boxes (minimum of the per-box distances),
/// or the `1e30` sentinel when there are no boxes.
pub fn sdf_boxes<T: Real>(boxes: &[Aabb<T>], x: Vec3<T>) -> T {
    boxes.iter().map(|b| b.sdf(x)).fold(T::sentinel(), T::min)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridGeometry<T> {
    pub origin: Vec3<T>,
    pub spacing: Vec3<T>,
    pub shape: [usize; 3],
    pub cell_class: Vec<CellClass>,
    pub cell_volume: T,
    pub target: Sphere<T>,
    pub obstacles: Vec<Aabb<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClassCounts {
    pub free: usize,
    pub obstacle: usize,
    pub target: usize,
}

impl<T: Real> GridGeometry<T> {
    /// Builds and classifies the grid described by `cfg`.
    pub fn from_config(cfg: &ScenarioConfig) -> Result<Self, GeometryError> {
        let obstacles = cfg
            .effective_obstacles()
            .iter()
            .map(|b| Aabb { min: Vec3::from_f64(b.min), max: Vec3::from_f64(b.max) })
            .collect();
        let spacing = cfg.spacing();
        Self::classify(
            Vec3::from_f64(cfg.domain.min),
            Vec3::from_f64(spacing),
            cfg.grid.shape,
            Sphere { center: Vec3::from_f64(cfg.target.center), radius: T::of(cfg.target.radius) },
            obstacles,
        )
    }

    /// Classifies every cell by its center: inside any obstacle box means
    /// `Obstacle`, otherwise within the target radius means `Target`.
    pub fn classify(
        origin: Vec3<T>,
        spacing: Vec3<T>,
        shape: [usize; 3],
        target: Sphere<T>,
        obstacles: Vec<Aabb<T>>,
    ) -> Result<Self, GeometryError> {
        let mut geom = Self {
            origin,
            spacing,
            shape,
            cell_class: Vec::new(),
            cell_volume: spacing.x() * spacing.y() * spacing.z(),
            target,
            obstacles,
        };
        let classes: Vec<CellClass> = geom
            .cell_indices()
            .map(|(i, j, k)| {
                let x = geom.cell_center(i, j, k);
                if geom.obstacles.iter().any(|b| b.contains(x)) {
                    CellClass::Obstacle
                } else if geom.target.sdf(x) <= T::zero() {
                    CellClass::Target
                } else {
                    CellClass::Free
                }
            })
            .collect();
        geom.cell_class = classes;
        let counts = geom.counts();
        if counts.free == 0 {
            return Err(GeometryError::NoFreeCell);
        }
        if counts.target == 0 {
            return Err(GeometryError::NoTargetCell);
        }
        Ok(geom)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.shape[0] * (j + self.shape[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.shape[0];
        let ny = self.shape[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// All `(i, j, k)` in storage order.
    pub fn cell_indices(&self) -> impl Iterator<Item = (usize, usize, usize)> {
        let [nx, ny, nz] = self.shape;
        (0..nz).flat_map(move |k| (0..ny).flat_map(move |j| (0..nx).map(move |i| (i, j, k))))
    }

    #[inline]
    pub fn cell_center(&self, i: usize, j: usize, k: usize) -> Vec3<T> {
        let half = T::of(0.5);
        let idx = [i, j, k];
        Vec3([0, 1, 2].map(|d| self.origin[d] + (T::of(idx[d] as f64) + half) * self.spacing[d]))
    }

    #[inline]
    pub fn center_of(&self, idx: usize) -> Vec3<T> {
        let [i, j, k] = self.coords(idx);
        self.cell_center(i, j, k)
    }

    pub fn domain_max(&self) -> Vec3<T> {
        Vec3([0, 1, 2].map(|d| self.origin[d] + T::of(self.shape[d] as f64) * self.spacing[d]))
    }

    pub fn min_spacing(&self) -> T {
        self.spacing.x().min(self.spacing.y()).min(self.spacing.z())
    }

    pub fn max_spacing(&self) -> T {
        self.spacing.x().max(self.spacing.y()).max(self.spacing.z())
    }

    /// Neighbor across the face on `axis` in direction `dir` (`-1` or `+1`).
    #[inline]
    pub fn neighbor(&self, idx: usize, axis: usize, dir: isize) -> Option<usize> {
        let c = self.coords(idx);
        let n = c[axis] as isize + dir;
        if n < 0 || n >= self.shape[axis] as isize {
            return None;
        }
        let stride = match axis {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[0] * self.shape[1],
        };
        Some(if dir > 0 { idx + stride } else { idx - stride })
    }

    #[inline]
    pub fn class(&self, idx: usize) -> CellClass {
        self.cell_class[idx]
    }

    pub fn counts(&self) -> ClassCounts {
        let mut c = ClassCounts::default();
        for class in &self.cell_class {
            match class {
                CellClass::Free => c.free += 1,
                CellClass::Obstacle => c.obstacle += 1,
                CellClass::Target => c.target += 1,
            }
        }
        c
    }

    pub fn free_mask(&self) -> Vec<bool> {
        self.cell_class.iter().map(|c| *c == CellClass::Free).collect()
    }

    #[inline]
    pub fn sdf_target(&self, x: Vec3<T>) -> T {
        self.target.sdf(x)
    }

    /// Nonnegative target distance `max(0, sdf_target)`.
    #[inline]
    pub fn target_distance(&self, x: Vec3<T>) -> T {
        self.target.sdf(x).max(T::zero())
    }

    #[inline]
    pub fn sdf_obstacles(&self, x: Vec3<T>) -> T {
        sdf_boxes(&self.obstacles, x)
    }

    pub fn contains(&self, x: Vec3<T>) -> bool {
        let hi = self.domain_max();
        (0..3).all(|d| x[d] >= self.origin[d] && x[d] <= hi[d])
    }

    /// Trilinear interpolation of cell-centered `values` at `x`, clamped to
    /// the outermost cell centers.
    pub fn trilinear(&self, values: &[T], x: Vec3<T>) -> T {
        let half = T::of(0.5);
        let mut base = [0usize; 3];
        let mut frac = [T::zero(); 3];
        for d in 0..3 {
            let n = self.shape[d];
            let s = ((x[d] - self.origin[d]) / self.spacing[d] - half)
                .max(T::zero())
                .min(T::of((n - 1) as f64));
            let i0 = s.floor().to_usize().unwrap_or(0).min(n.saturating_sub(2));
            base[d] = i0;
            frac[d] = s - T::of(i0 as f64);
        }
        let mut acc = T::zero();
        for corner in 0..8usize {
            let mut w = T::one();
            let mut c = [0usize; 3];
            for d in 0..3 {
                let up = (corner >> d) & 1 == 1;
                c[d] = (base[d] + usize::from(up)).min(self.shape[d] - 1);
                w = w * if up { frac[d] } else { T::one() - frac[d] };
            }
            if w != T::zero() {
                acc = acc + w * values[self.idx(c[0], c[1], c[2])];
            }
        }
        acc
    }

    /// `[xmin, ymin, zmin, xmax, ymax, zmax]` as stored in field dumps.
    pub fn bounds(&self) -> [f64; 6] {
        let lo = self.origin.to_f64();
        let hi = self.domain_max().to_f64();
        [lo[0], lo[1], lo[2], hi[0], hi[1], hi[2]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Scalar,
    Vector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Units {
    Seconds,
    Density,
    Velocity,
    SourceRate,
    Dimensionless,
}

/// Cell-centered scalar or 3-vector field. Vector fields store xyz interleaved per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField<T> {
    pub shape: [usize; 3],
    pub bounds: [f64; 6],
    pub kind: FieldKind,
    pub units: Units,
    pub values: Vec<T>,
}

impl<T: Real> GridField<T> {
    pub fn scalar(geom: &GridGeometry<T>, values: Vec<T>, units: Units) -> Self {
        assert_eq!(values.len(), geom.len(), "scalar field length");
        Self { shape: geom.shape, bounds: geom.bounds(), kind: FieldKind::Scalar, units, values }
    }

    pub fn scalar_filled(geom: &GridGeometry<T>, value: T, units: Units) -> Self {
        Self::scalar(geom, vec![value; geom.len()], units)
    }

    pub fn vector(geom: &GridGeometry<T>, values: &[Vec3<T>], units: Units) -> Self {
        assert_eq!(values.len(), geom.len(), "vector field length");
        Self {
            shape: geom.shape,
            bounds: geom.bounds(),
            kind: FieldKind::Vector,
            units,
            values: values.iter().flat_map(|v| v.0).collect(),
        }
    }

    pub fn n_cells(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
    }

    pub fn components(&self) -> usize {
        match self.kind {
            FieldKind::Scalar => 1,
            FieldKind::Vector => 3,
        }
    }

    #[inline]
    pub fn get(&self, idx: usize) -> T {
        debug_assert_eq!(self.kind, FieldKind::Scalar);
        self.values[idx]
    }

    #[inline]
    pub fn get_vec(&self, idx: usize) -> Vec3<T> {
        debug_assert_eq!(self.kind, FieldKind::Vector);
        Vec3([self.values[3 * idx], self.values[3 * idx + 1], self.values[3 * idx + 2]])
    }

    pub fn to_f64(&self) -> GridField<f64> {
        GridField {
            shape: self.shape,
            bounds: self.bounds,
            kind: self.kind,
            units: self.units,
            values: self.values.iter().map(|v| v.to_f64_lossy()).collect(),
        }
    }

    /// All entries finite and below the sentinel on the selected cells.
    pub fn is_finite_on(&self, mask: &[bool]) -> bool {
        let c = self.components();
        mask.iter()
            .enumerate()
            .filter(|(_, m)| **m)
            .all(|(i, _)| (0..c).all(|q| self.values[c * i + q].is_finite()))
    }
}

impl GridField<f64> {
    pub fn sentinel_masked(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.values.iter().copied().enumerate().filter(|(_, v)| v.abs() < SENTINEL * 0.5)
    }
}
