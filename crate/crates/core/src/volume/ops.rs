use super::{Domain, Grid, Volume3D, HU_SCALE, NORM_LIMIT};
use crate::error::{Error, Result};

/// `clamp(hu * 3e-3, -3, 3)` elementwise. Geometry is unchanged.
pub fn normalize_intensities(vol: &Volume3D) -> Volume3D {
    let data = vol
        .data()
        .iter()
        .map(|&hu| (hu * HU_SCALE).clamp(-NORM_LIMIT, NORM_LIMIT))
        .collect();
    Volume3D::new(*vol.grid(), Domain::Normalized, data).expect("same geometry")
}

/// Grow by `margin` voxels per side, filling with `value`. World positions
/// of the original voxels are preserved.
pub fn pad(vol: &Volume3D, margin: usize, value: f32) -> Volume3D {
    if margin == 0 {
        return vol.clone();
    }
    let grid = vol.grid().grow(margin);
    let mut out = Volume3D::filled(grid, vol.domain(), value);
    let [nx, ny, nz] = vol.dims();
    for z in 0..nz {
        for y in 0..ny {
            let src = vol.grid().index(0, y, z);
            let dst = grid.index(margin, y + margin, z + margin);
            out.data_mut()[dst..dst + nx].copy_from_slice(&vol.data()[src..src + nx]);
        }
    }
    out
}

/// [`pad`] with the air value of the volume's intensity domain.
pub fn pad_with_air(vol: &Volume3D, margin: usize) -> Volume3D {
    pad(vol, margin, vol.air_value())
}

struct AxisTaps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

fn axis_taps(n_in: usize, spacing_in: f64, n_out: usize, spacing_out: f64) -> AxisTaps {
    let mut taps = AxisTaps {
        lo: Vec::with_capacity(n_out),
        hi: Vec::with_capacity(n_out),
        frac: Vec::with_capacity(n_out),
    };
    let max = (n_in - 1) as f64;
    for i in 0..n_out {
        let c = (i as f64 * spacing_out / spacing_in).clamp(0.0, max);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        taps.lo.push(lo);
        taps.hi.push(hi);
        taps.frac.push(c - lo as f64);
    }
    taps
}

/// Trilinear resampling onto a new spacing. The first voxel centre stays at
/// the same world position; output dims cover the same field of view
/// (`ceil(n * spacing / target)`). Samples beyond the last input centre are
/// clamped to the edge.
pub fn resample(vol: &Volume3D, target_spacing: [f64; 3]) -> Result<Volume3D> {
    if target_spacing.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
        return Err(Error::InvalidArgument(format!(
            "degenerate target spacing {target_spacing:?}"
        )));
    }
    let g = vol.grid();
    let dims: [usize; 3] = std::array::from_fn(|a| {
        let extent = g.dims[a] as f64 * g.spacing[a];
        ((extent / target_spacing[a] - 1e-9).ceil() as usize).max(1)
    });
    let out_grid = Grid::new(dims, target_spacing, g.origin)?;
    let taps: Vec<AxisTaps> = (0..3)
        .map(|a| axis_taps(g.dims[a], g.spacing[a], dims[a], target_spacing[a]))
        .collect();
    let src = vol.data();
    let mut data = Vec::with_capacity(out_grid.len());
    for z in 0..dims[2] {
        let (z0, z1, fz) = (taps[2].lo[z], taps[2].hi[z], taps[2].frac[z]);
        for y in 0..dims[1] {
            let (y0, y1, fy) = (taps[1].lo[y], taps[1].hi[y], taps[1].frac[y]);
            let r00 = g.index(0, y0, z0);
            let r10 = g.index(0, y1, z0);
            let r01 = g.index(0, y0, z1);
            let r11 = g.index(0, y1, z1);
            for x in 0..dims[0] {
                let (x0, x1, fx) = (taps[0].lo[x], taps[0].hi[x], taps[0].frac[x]);
                let lerp = |row: usize| {
                    let a = src[row + x0] as f64;
                    let b = src[row + x1] as f64;
                    a + (b - a) * fx
                };
                let c0 = lerp(r00) + (lerp(r10) - lerp(r00)) * fy;
                let c1 = lerp(r01) + (lerp(r11) - lerp(r01)) * fy;
                data.push((c0 + (c1 - c0) * fz) as f32);
            }
        }
    }
    Volume3D::new(out_grid, vol.domain(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vol(dims: [usize; 3], spacing: [f64; 3], mut f: impl FnMut([f64; 3]) -> f32) -> Volume3D {
        let g = Grid::new(dims, spacing, [-3.0, 1.0, 7.5]).unwrap();
        let data = (0..g.len()).map(|i| f(g.voxel_to_world(g.coords(i)))).collect();
        Volume3D::new(g, Domain::Normalized, data).unwrap()
    }

    #[test]
    fn normalisation_points() {
        let g = Grid::new([3, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let v = Volume3D::new(g, Domain::Hu, vec![0.0, 1000.0, -2000.0]).unwrap();
        let n = normalize_intensities(&v);
        assert_eq!(n.data(), &[0.0, 3.0, -3.0]);
        assert_eq!(n.domain(), Domain::Normalized);
    }

    #[test]
    fn pad_margin_six_places_input_at_six() {
        let v = vol([3, 3, 3], [1.0; 3], |p| (p[0] + 10.0 * p[1] + 100.0 * p[2]) as f32);
        let p = pad_with_air(&v, 6);
        assert_eq!(p.dims(), [15, 15, 15]);
        assert_eq!(p.get(6, 6, 6), v.get(0, 0, 0));
        assert_eq!(p.get(0, 0, 0), -3.0);
        assert_eq!(p.voxel_to_world([6, 6, 6]), v.voxel_to_world([0, 0, 0]));
        assert_eq!(pad_with_air(&v, 0), v);
    }

    #[test]
    fn pad_preserves_world_positions() {
        let v = vol([4, 2, 3], [0.5, 2.0, 1.5], |p| p[0] as f32);
        let p = pad(&v, 3, 9.0);
        for i in 0..v.grid().len() {
            let c = v.grid().coords(i);
            let w = v.voxel_to_world(c);
            let pc = p.world_to_voxel(w).unwrap();
            assert_eq!(pc, [c[0] + 3, c[1] + 3, c[2] + 3]);
            assert_eq!(p.get(pc[0], pc[1], pc[2]), v.get(c[0], c[1], c[2]));
        }
    }

    #[test]
    fn identity_resample_reproduces_data() {
        let v = vol([5, 4, 3], [1.5, 2.0, 3.0], |p| (p[0] * p[1] - p[2]) as f32);
        let r = resample(&v, [1.5, 2.0, 3.0]).unwrap();
        assert_eq!(r.dims(), v.dims());
        assert_eq!(r.data(), v.data());
    }

    #[test]
    fn ramp_matches_analytic_values() {
        let ramp = |p: [f64; 3]| 2.0 * p[0] - 5.0;
        let v = vol([12, 1, 1], [1.0; 3], |p| ramp(p) as f32);
        for target in [2.0, 1.5, 0.7] {
            let r = resample(&v, [target, 1.0, 1.0]).unwrap();
            assert_eq!(r.dims()[0], (12.0f64 / target).ceil() as usize);
            for x in 0..r.dims()[0] {
                let w = r.voxel_to_world([x, 0, 0]);
                // beyond the last input centre the sample is clamped
                let wx = w[0].min(v.voxel_to_world([11, 0, 0])[0]);
                let expect = ramp([wx, 0.0, 0.0]);
                assert!((r.get(x, 0, 0) as f64 - expect).abs() < 1e-5, "{target} {x}");
            }
        }
    }

    #[test]
    fn rejects_bad_target() {
        let v = vol([2, 2, 2], [1.0; 3], |_| 0.0);
        assert!(resample(&v, [1.0, 0.0, 1.0]).is_err());
        assert!(resample(&v, [1.0, f64::NAN, 1.0]).is_err());
    }

    proptest! {
        #[test]
        fn normalisation_bounded_and_monotone(a in -5000.0f32..5000.0, b in -5000.0f32..5000.0) {
            let g = Grid::new([2, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
            let n = normalize_intensities(&Volume3D::new(g, Domain::Hu, vec![a, b]).unwrap());
            let (na, nb) = (n.data()[0], n.data()[1]);
            prop_assert!((-3.0..=3.0).contains(&na) && (-3.0..=3.0).contains(&nb));
            if a <= b { prop_assert!(na <= nb); }
        }

        #[test]
        fn resample_is_convex(
            seed in any::<u64>(),
            target in prop::array::uniform3(0.4f64..3.0),
        ) {
            let mut s = seed;
            let v = vol([5, 4, 3], [1.0, 1.3, 0.9], |_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
                ((s >> 40) as f32) / 1000.0 - 8000.0
            });
            let (lo, hi) = v.min_max();
            let r = resample(&v, target).unwrap();
            let (rlo, rhi) = r.min_max();
            prop_assert!(rlo >= lo - 1e-3 && rhi <= hi + 1e-3);
        }

        #[test]
        fn resample_constant_is_constant(c in -3.0f32..3.0, target in prop::array::uniform3(0.3f64..4.0)) {
            let v = vol([4, 3, 5], [1.0, 2.0, 0.5], |_| c);
            let r = resample(&v, target).unwrap();
            prop_assert!(r.data().iter().all(|&x| (x - c).abs() <= 1e-6));
        }
    }
}
