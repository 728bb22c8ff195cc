//! Scalar volumes on an axis-aligned world grid, landmark sets, and the
//! geometric operations the detector needs (normalisation, air padding,
//! trilinear resampling, left-right reflection, random cropping).
//!
//! World convention: right-handed, millimetres, `origin` is the centre of
//! voxel `(0, 0, 0)` and voxel `i` sits at `origin + i * spacing`. Landmarks
//! are always kept in world millimetres so that changing resolution never
//! touches them.

mod augment;
mod io;
mod landmarks;
mod ops;

pub use augment::{random_crop, reflect_lr, CropDraw};
pub use io::{load_volume, save_volume};
pub use landmarks::{load_landmarks, save_landmarks, Landmark, LandmarkSet, Status};
pub use ops::{normalize_intensities, pad, pad_with_air, resample};

use crate::error::{Error, Result};

/// CT air in Hounsfield units.
pub const AIR_HU: f32 = -1000.0;
/// Intensity scale applied to HU values before truncation.
pub const HU_SCALE: f32 = 3.0e-3;
/// Normalised intensities are truncated to `[-NORM_LIMIT, NORM_LIMIT]`.
pub const NORM_LIMIT: f32 = 3.0;
/// Air after normalisation.
pub const AIR_NORMALIZED: f32 = -NORM_LIMIT;

/// What the voxel values mean. Decides the air fill value and the on-disk
/// sample type.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    /// Raw CT intensities; stored as int16.
    Hu,
    /// Rescaled and truncated intensities; stored as f32.
    Normalized,
    /// Anything else (heatmaps, coordinate channels); stored as f32, air = 0.
    Unitless,
}

impl Domain {
    pub fn air_value(self) -> f32 {
        match self {
            Domain::Hu => AIR_HU,
            Domain::Normalized => AIR_NORMALIZED,
            Domain::Unitless => 0.0,
        }
    }
}

/// Placement of a voxel lattice in world space, without any data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!("dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "spacing must be positive and finite, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidArgument(format!("origin must be finite, got {origin:?}")));
        }
        Ok(Self { dims, spacing, origin })
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Linear index, x fastest then y then z.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.dims[0];
        let rest = index / self.dims[0];
        [x, rest % self.dims[1], rest / self.dims[1]]
    }

    #[inline]
    pub fn voxel_to_world(&self, v: [usize; 3]) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + v[a] as f64 * self.spacing[a])
    }

    /// Continuous voxel coordinates of a world point.
    #[inline]
    pub fn world_to_continuous(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| (p[a] - self.origin[a]) / self.spacing[a])
    }

    /// Nearest voxel to a world point, or `None` when it falls outside the
    /// lattice.
    pub fn world_to_voxel(&self, p: [f64; 3]) -> Option<[usize; 3]> {
        let c = self.world_to_continuous(p);
        let mut out = [0usize; 3];
        for a in 0..3 {
            let r = c[a].round();
            if !(r >= 0.0 && r < self.dims[a] as f64) {
                return None;
            }
            out[a] = r as usize;
        }
        Some(out)
    }

    /// Physical field of view: voxel boundaries, half a voxel beyond the
    /// first and last centres.
    pub fn extent(&self) -> ([f64; 3], [f64; 3]) {
        let lo = std::array::from_fn(|a| self.origin[a] - 0.5 * self.spacing[a]);
        let hi = std::array::from_fn(|a| {
            self.origin[a] + (self.dims[a] as f64 - 0.5) * self.spacing[a]
        });
        (lo, hi)
    }

    /// Closed-interval containment in the field of view.
    pub fn contains_world(&self, p: [f64; 3]) -> bool {
        let (lo, hi) = self.extent();
        (0..3).all(|a| p[a] >= lo[a] && p[a] <= hi[a])
    }

    /// Shrink by `margin` voxels on every side (the output lattice of a
    /// valid-mode network applied to this grid).
    pub fn shrink(&self, margin: usize) -> Result<Grid> {
        if self.dims.iter().any(|&d| d <= 2 * margin) {
            return Err(Error::Shape(format!(
                "grid {:?} too small to remove a margin of {margin}",
                self.dims
            )));
        }
        Ok(Grid {
            dims: self.dims.map(|d| d - 2 * margin),
            spacing: self.spacing,
            origin: std::array::from_fn(|a| self.origin[a] + margin as f64 * self.spacing[a]),
        })
    }

    pub fn grow(&self, margin: usize) -> Grid {
        Grid {
            dims: self.dims.map(|d| d + 2 * margin),
            spacing: self.spacing,
            origin: std::array::from_fn(|a| self.origin[a] - margin as f64 * self.spacing[a]),
        }
    }
}

/// A dense scalar volume: a [`Grid`] plus x-fastest voxel data.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    grid: Grid,
    domain: Domain,
    data: Vec<f32>,
}

impl Volume3D {
    pub fn new(grid: Grid, domain: Domain, data: Vec<f32>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::Shape(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                grid.dims
            )));
        }
        Ok(Self { grid, domain, data })
    }

    pub fn filled(grid: Grid, domain: Domain, value: f32) -> Self {
        Self {
            data: vec![value; grid.len()],
            grid,
            domain,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.grid.origin
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn with_domain(mut self, domain: Domain) -> Self {
        self.domain = domain;
        self
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.grid.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: f32) {
        let i = self.grid.index(x, y, z);
        self.data[i] = value;
    }

    pub fn voxel_to_world(&self, v: [usize; 3]) -> [f64; 3] {
        self.grid.voxel_to_world(v)
    }

    pub fn world_to_voxel(&self, p: [f64; 3]) -> Option<[usize; 3]> {
        self.grid.world_to_voxel(p)
    }

    pub fn air_value(&self) -> f32 {
        self.domain.air_value()
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Grid {
        Grid::new([4, 5, 6], [0.7, 1.3, 2.9], [-12.25, 3.5, 100.1]).unwrap()
    }

    #[test]
    fn world_voxel_round_trip_is_exact() {
        let g = grid();
        for i in 0..g.len() {
            let v = g.coords(i);
            assert_eq!(g.world_to_voxel(g.voxel_to_world(v)), Some(v));
            assert_eq!(g.index(v[0], v[1], v[2]), i);
        }
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(Grid::new([0, 1, 1], [1.0; 3], [0.0; 3]).is_err());
        assert!(Grid::new([1, 1, 1], [1.0, 0.0, 1.0], [0.0; 3]).is_err());
        let g = Grid::new([2, 2, 2], [1.0; 3], [0.0; 3]).unwrap();
        assert!(Volume3D::new(g, Domain::Hu, vec![0.0; 7]).is_err());
    }

    #[test]
    fn containment_uses_voxel_boundaries() {
        let g = Grid::new([10, 10, 10], [2.0; 3], [0.0; 3]).unwrap();
        assert!(g.contains_world([-1.0, 0.0, 19.0]));
        assert!(!g.contains_world([-1.01, 0.0, 0.0]));
        assert!(!g.contains_world([0.0, 0.0, 19.5]));
    }

    #[test]
    fn shrink_then_grow_restores_grid() {
        let g = grid();
        let s = g.grow(6).shrink(6).unwrap();
        assert_eq!(s.dims, g.dims);
        for a in 0..3 {
            assert!((s.origin[a] - g.origin[a]).abs() < 1e-12);
        }
        assert!(g.shrink(2).is_err());
    }
}
