//! Training-time geometric augmentation.

use std::collections::HashMap;

use rand::Rng;

use super::{Grid, LandmarkSet, Status, Volume3D};
use crate::error::{Error, Result};

/// Mirror the volume along x and swap paired left/right landmark names.
///
/// Landmark x-coordinates are mirrored about the midline of the voxel-centre
/// span, so the mapping is consistent with the data flip. Names not in
/// `swap_pairs` keep their name. Pairs may reference names missing from
/// `lm`.
pub fn reflect_lr(
    vol: &Volume3D,
    lm: &LandmarkSet,
    swap_pairs: &[(String, String)],
) -> Result<(Volume3D, LandmarkSet)> {
    let mut partner: HashMap<&str, &str> = HashMap::new();
    for (a, b) in swap_pairs {
        for (k, v) in [(a.as_str(), b.as_str()), (b.as_str(), a.as_str())] {
            if partner.insert(k, v).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "landmark {k:?} appears in more than one swap pair"
                )));
            }
        }
    }

    let g = *vol.grid();
    let nx = g.dims[0];
    let mut data = Vec::with_capacity(vol.data().len());
    for row in vol.data().chunks_exact(nx) {
        data.extend(row.iter().rev());
    }
    let out = Volume3D::new(g, vol.domain(), data)?;

    let mirror_sum = 2.0 * g.origin[0] + (nx - 1) as f64 * g.spacing[0];
    let mut entries = Vec::with_capacity(lm.len());
    for e in lm {
        let mut e = e.clone();
        if let Some(p) = partner.get(e.name.as_str()) {
            e.name = p.to_string();
        }
        if e.status != Status::Absent {
            e.position[0] = mirror_sum - e.position[0];
        }
        entries.push(e);
    }
    Ok((out, LandmarkSet::from_entries(entries)?))
}

/// Per-face crop amounts in millimetres. Positive values remove tissue from
/// that face, negative values extend the field of view with air.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropDraw {
    pub low: [f64; 3],
    pub high: [f64; 3],
}

impl CropDraw {
    pub fn none() -> Self {
        Self {
            low: [0.0; 3],
            high: [0.0; 3],
        }
    }

    /// Six independent uniform draws in `[-max_shift_mm, max_shift_mm]`.
    pub fn sample<R: Rng + ?Sized>(max_shift_mm: f64, rng: &mut R) -> Self {
        let mut draw = || {
            if max_shift_mm > 0.0 {
                rng.random_range(-max_shift_mm..=max_shift_mm)
            } else {
                0.0
            }
        };
        let low = [draw(), draw(), draw()];
        let high = [draw(), draw(), draw()];
        Self { low, high }
    }

    /// Crop `vol`, filling any extension with air. Landmarks outside the new
    /// field of view (closed interval) become absent; the rest keep their
    /// world coordinates.
    pub fn apply(&self, vol: &Volume3D, lm: &LandmarkSet) -> Result<(Volume3D, LandmarkSet)> {
        let g = vol.grid();
        let mut lo = [0i64; 3];
        let mut dims = [0usize; 3];
        for a in 0..3 {
            let cut_lo = (self.low[a] / g.spacing[a]).round() as i64;
            let cut_hi = (self.high[a] / g.spacing[a]).round() as i64;
            let hi = g.dims[a] as i64 - 1 - cut_hi;
            if hi < cut_lo {
                return Err(Error::InvalidArgument(format!(
                    "crop {self:?} removes the whole volume along axis {a}"
                )));
            }
            lo[a] = cut_lo;
            dims[a] = (hi - cut_lo + 1) as usize;
        }
        let origin = std::array::from_fn(|a| g.origin[a] + lo[a] as f64 * g.spacing[a]);
        let grid = Grid::new(dims, g.spacing, origin)?;
        let air = vol.air_value();
        let mut out = Volume3D::filled(grid, vol.domain(), air);
        let src_dims = g.dims.map(|d| d as i64);
        for z in 0..dims[2] {
            let sz = z as i64 + lo[2];
            if sz < 0 || sz >= src_dims[2] {
                continue;
            }
            for y in 0..dims[1] {
                let sy = y as i64 + lo[1];
                if sy < 0 || sy >= src_dims[1] {
                    continue;
                }
                for x in 0..dims[0] {
                    let sx = x as i64 + lo[0];
                    if sx < 0 || sx >= src_dims[0] {
                        continue;
                    }
                    let v = vol.get(sx as usize, sy as usize, sz as usize);
                    out.set(x, y, z, v);
                }
            }
        }
        let mut lm = lm.clone();
        for e in lm.entries_mut() {
            if e.status != Status::Absent && !grid.contains_world(e.position) {
                e.status = Status::Absent;
                e.certainty = 0.0;
            }
        }
        Ok((out, lm))
    }
}

/// Random per-face crop/extension of up to `max_shift_mm` on each of the six
/// faces.
pub fn random_crop<R: Rng + ?Sized>(
    vol: &Volume3D,
    lm: &LandmarkSet,
    max_shift_mm: f64,
    rng: &mut R,
) -> Result<(Volume3D, LandmarkSet)> {
    if !(max_shift_mm >= 0.0) {
        return Err(Error::InvalidArgument(format!("max shift {max_shift_mm} < 0")));
    }
    CropDraw::sample(max_shift_mm, rng).apply(vol, lm)
}
