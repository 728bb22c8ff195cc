//! Gaussian heatmap targets, training patch sampling, tiled whole-volume
//! inference and argmax detection.
//!
//! Heatmap temperatures follow `t = k * exp(-|v - p|^2 / (2 sigma^2))` with
//! the distance measured in voxels of the operating grid.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nnet::{FcnModel, Patch, Tensor4};
use crate::volume::{save_volume, Domain, Grid, Landmark, LandmarkSet, Status, Volume3D};

/// Height and width of the regression Gaussians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeatmapSpec {
    /// Standard deviation in voxels.
    pub sigma: f64,
    /// Peak height.
    pub k: f64,
}

impl HeatmapSpec {
    pub fn new(sigma: f64, k: f64) -> Result<Self> {
        let s = Self { sigma, k };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite() && self.k > 0.0 && self.k.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "heatmap sigma and k must be positive, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Temperature at squared distance `d2` (voxels^2).
    #[inline]
    pub fn temperature(&self, d2: f64) -> f64 {
        self.k * (-d2 / (2.0 * self.sigma * self.sigma)).exp()
    }
}

/// Squared distance in voxel units between a world point and a voxel centre.
#[inline]
fn voxel_dist2(grid: &Grid, v: [usize; 3], p: [f64; 3]) -> f64 {
    let w = grid.voxel_to_world(v);
    (0..3).map(|a| ((w[a] - p[a]) / grid.spacing[a]).powi(2)).sum()
}

/// One heatmap channel per landmark on a shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    pub grid: Grid,
    pub names: Vec<String>,
    /// Channel values, x fastest. Kept in f64 so targets are exact.
    pub channels: Vec<Vec<f64>>,
    /// Per-voxel evaluation flags; `None` means every voxel was evaluated.
    pub evaluated: Option<Vec<bool>>,
    /// Channels excluded from the training loss (uncertain ground truth).
    pub excluded: Vec<bool>,
    pub spec: HeatmapSpec,
}

impl HeatmapStack {
    pub fn zeros(grid: Grid, names: Vec<String>, spec: HeatmapSpec) -> Self {
        let n = names.len();
        Self {
            channels: vec![vec![0.0; grid.len()]; n],
            excluded: vec![false; n],
            evaluated: None,
            grid,
            names,
            spec,
        }
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    #[inline]
    pub fn is_evaluated(&self, i: usize) -> bool {
        self.evaluated.as_ref().is_none_or(|e| e[i])
    }

    pub fn evaluated_count(&self) -> usize {
        match &self.evaluated {
            None => self.grid.len(),
            Some(e) => e.iter().filter(|&&b| b).count(),
        }
    }

    pub fn channel_volume(&self, c: usize) -> Volume3D {
        let data = self.channels[c].iter().map(|&v| v as f32).collect();
        Volume3D::new(self.grid, Domain::Unitless, data).expect("stack geometry")
    }

    /// Argmax of channel `c` over evaluated voxels accepted by `filter`.
    /// Ties go to the lowest linear index. Returns `(index, value)`.
    pub fn argmax_where(&self, c: usize, filter: impl Fn(usize) -> bool) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &v) in self.channels[c].iter().enumerate() {
            if !self.is_evaluated(i) || !filter(i) || v.is_nan() {
                continue;
            }
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        best
    }

    /// Debug dump: one f32 MVOL1 per channel plus `index.txt`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut index = String::new();
        for (c, name) in self.names.iter().enumerate() {
            let file = format!("heatmap_{c:02}_{name}.mvol");
            save_volume(&self.channel_volume(c), dir.join(&file))?;
            let _ = writeln!(index, "{name} {file}");
        }
        let p = dir.join("index.txt");
        fs::write(&p, index).map_err(|e| Error::io(p, e))
    }
}

/// Regression targets for `names` on `grid`. Absent or missing landmarks give
/// all-zero channels; uncertain ones are rendered but flagged as excluded.
pub fn gaussian_target(grid: &Grid, lm: &LandmarkSet, names: &[String], spec: &HeatmapSpec) -> Result<HeatmapStack> {
    spec.validate()?;
    let mut stack = HeatmapStack::zeros(*grid, names.to_vec(), *spec);
    for (c, name) in names.iter().enumerate() {
        let Some(l) = lm.get(name) else { continue };
        match l.status {
            Status::Absent => continue,
            Status::Uncertain => stack.excluded[c] = true,
            Status::Visible => {}
        }
        for (i, t) in stack.channels[c].iter_mut().enumerate() {
            *t = spec.temperature(voxel_dist2(grid, grid.coords(i), l.position));
        }
    }
    Ok(stack)
}

/// Sizes of a training patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    /// Output (target) extent per axis.
    pub target: usize,
    /// Network margin per side.
    pub margin: usize,
}

impl Default for PatchGeometry {
    fn default() -> Self {
        Self { target: 3, margin: 6 }
    }
}

impl PatchGeometry {
    pub fn input(&self) -> usize {
        self.target + 2 * self.margin
    }

    fn half(&self) -> usize {
        self.input() / 2
    }
}

/// Background patches drawn per landmark patch.
pub const BACKGROUND_RATIO: usize = 5;

fn check_inputs(inputs: &[Volume3D]) -> Result<Grid> {
    let first = inputs.first().ok_or_else(|| Error::InvalidArgument("no input channels".into()))?;
    let g = *first.grid();
    if inputs.iter().any(|v| *v.grid() != g) {
        return Err(Error::Shape("input channels have different geometry".into()));
    }
    Ok(g)
}

fn extract_patch(inputs: &[Volume3D], lo: [usize; 3], size: usize) -> Tensor4<f32> {
    let mut data = Vec::with_capacity(inputs.len() * size.pow(3));
    for v in inputs {
        let g = v.grid();
        for z in lo[2]..lo[2] + size {
            for y in lo[1]..lo[1] + size {
                let s = g.index(lo[0], y, z);
                data.extend_from_slice(&v.data()[s..s + size]);
            }
        }
    }
    Tensor4::from_vec([inputs.len(), size, size, size], data).expect("patch shape")
}

fn patch_at(
    inputs: &[Volume3D],
    grid: &Grid,
    centre: [usize; 3],
    lm: &LandmarkSet,
    names: &[String],
    spec: &HeatmapSpec,
    geo: PatchGeometry,
) -> Result<Patch<f32>> {
    let h = geo.half();
    let lo = centre.map(|c| c - h);
    let input = extract_patch(inputs, lo, geo.input());
    let t0 = lo.map(|l| l + geo.margin);
    let tgrid = Grid::new([geo.target; 3], grid.spacing, grid.voxel_to_world(t0))?;
    let stack = gaussian_target(&tgrid, lm, names, spec)?;
    let mut tdata = Vec::with_capacity(names.len() * tgrid.len());
    for ch in &stack.channels {
        tdata.extend(ch.iter().map(|&v| v as f32));
    }
    let target = Tensor4::from_vec([names.len(), geo.target, geo.target, geo.target], tdata)?;
    Ok(Patch {
        input,
        target,
        include: stack.excluded.iter().map(|&e| !e).collect(),
    })
}

fn valid_centre_range(grid: &Grid, geo: PatchGeometry) -> Result<([usize; 3], [usize; 3])> {
    let h = geo.half();
    if grid.dims.iter().any(|&d| d < geo.input()) {
        return Err(Error::Shape(format!(
            "volume {:?} smaller than one {}^3 patch",
            grid.dims,
            geo.input()
        )));
    }
    Ok(([h; 3], grid.dims.map(|d| d - 1 - h)))
}

/// One patch centred on each visible landmark (clamped so it fits).
pub fn landmark_patches(
    inputs: &[Volume3D],
    lm: &LandmarkSet,
    names: &[String],
    spec: &HeatmapSpec,
    geo: PatchGeometry,
) -> Result<Vec<Patch<f32>>> {
    let grid = check_inputs(inputs)?;
    let (lo, hi) = valid_centre_range(&grid, geo)?;
    let mut out = Vec::new();
    for name in names {
        let Some(l) = lm.get(name).filter(|l| l.is_visible()) else { continue };
        let c = grid.world_to_continuous(l.position);
        let centre = std::array::from_fn(|a| {
            (c[a].round().max(0.0) as usize).clamp(lo[a], hi[a])
        });
        out.push(patch_at(inputs, &grid, centre, lm, names, spec, geo)?);
    }
    Ok(out)
}

/// `count` patches with uniformly drawn centres, rejecting centres within
/// `2 sigma` voxels of any visible or uncertain landmark.
pub fn background_patches<R: Rng + ?Sized>(
    inputs: &[Volume3D],
    lm: &LandmarkSet,
    names: &[String],
    spec: &HeatmapSpec,
    geo: PatchGeometry,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Patch<f32>>> {
    const MAX_TRIES: usize = 1000;
    let grid = check_inputs(inputs)?;
    let (lo, hi) = valid_centre_range(&grid, geo)?;
    let keep_out = (2.0 * spec.sigma).powi(2);
    let marks: Vec<[f64; 3]> = lm
        .iter()
        .filter(|l| l.status != Status::Absent)
        .map(|l| l.position)
        .collect();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut centre = [0usize; 3];
        for _ in 0..MAX_TRIES {
            centre = std::array::from_fn(|a| rng.random_range(lo[a]..=hi[a]));
            if marks.iter().all(|&p| voxel_dist2(&grid, centre, p) > keep_out) {
                break;
            }
        }
        out.push(patch_at(inputs, &grid, centre, lm, names, spec, geo)?);
    }
    Ok(out)
}

/// Landmark patches plus [`BACKGROUND_RATIO`] background patches per
/// landmark patch. `inputs` must already be padded by the network margin.
pub fn sample_training_patches<R: Rng + ?Sized>(
    inputs: &[Volume3D],
    lm: &LandmarkSet,
    names: &[String],
    spec: &HeatmapSpec,
    geo: PatchGeometry,
    rng: &mut R,
) -> Result<Vec<Patch<f32>>> {
    let mut patches = landmark_patches(inputs, lm, names, spec, geo)?;
    let n_bg = BACKGROUND_RATIO * patches.len();
    patches.extend(background_patches(inputs, lm, names, spec, geo, n_bg, rng)?);
    Ok(patches)
}

/// A world-space ball.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sphere {
    pub centre: [f64; 3],
    pub radius: f64,
}

impl Sphere {
    #[inline]
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let d2: f64 = (0..3).map(|a| (p[a] - self.centre[a]).powi(2)).sum();
        d2 <= self.radius * self.radius
    }

    /// Whether the sphere touches the axis-aligned box `[lo, hi]`.
    pub fn intersects_box(&self, lo: [f64; 3], hi: [f64; 3]) -> bool {
        let d2: f64 = (0..3)
            .map(|a| {
                let c = self.centre[a].clamp(lo[a], hi[a]);
                (c - self.centre[a]).powi(2)
            })
            .sum();
        d2 <= self.radius * self.radius
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileStats {
    pub tiles_total: usize,
    pub tiles_evaluated: usize,
    pub voxels_evaluated: usize,
}

struct Tile {
    lo: [usize; 3],
    size: [usize; 3],
}

/// Piecewise whole-volume prediction.
///
/// `inputs` are the model's input channels, padded by the model margin. The
/// output lattice is the input lattice shrunk by that margin and is covered
/// by non-overlapping tiles of `tile` output voxels per axis; neighbouring
/// tiles only share input margin. With `roi`, only tiles touching a sphere
/// are run and only voxels inside a sphere are marked evaluated.
pub fn tile_inference(
    model: &FcnModel<f32>,
    inputs: &[Volume3D],
    names: &[String],
    spec: &HeatmapSpec,
    tile: usize,
    roi: Option<&[Sphere]>,
) -> Result<(HeatmapStack, TileStats)> {
    let in_grid = check_inputs(inputs)?;
    if inputs.len() != model.in_channels {
        return Err(Error::Shape(format!(
            "model expects {} channels, got {}",
            model.in_channels,
            inputs.len()
        )));
    }
    if names.len() != model.n_landmarks {
        return Err(Error::Shape(format!(
            "{} names for {} output channels",
            names.len(),
            model.n_landmarks
        )));
    }
    if tile == 0 {
        return Err(Error::InvalidArgument("tile size must be positive".into()));
    }
    let margin = model.margin();
    let out_grid = in_grid.shrink(margin).map_err(|_| {
        Error::Shape(format!(
            "input {:?} is not padded by the {margin}-voxel network margin",
            in_grid.dims
        ))
    })?;

    let counts = out_grid.dims.map(|d| d.div_ceil(tile));
    let mut tiles = Vec::new();
    for tz in 0..counts[2] {
        for ty in 0..counts[1] {
            for tx in 0..counts[0] {
                let lo = [tx * tile, ty * tile, tz * tile];
                let size = std::array::from_fn(|a| tile.min(out_grid.dims[a] - lo[a]));
                tiles.push(Tile { lo, size });
            }
        }
    }
    let tiles_total = tiles.len();
    if let Some(spheres) = roi {
        tiles.retain(|t| {
            let lo = out_grid.voxel_to_world(t.lo);
            let hi = out_grid.voxel_to_world(std::array::from_fn(|a| t.lo[a] + t.size[a] - 1));
            spheres.iter().any(|s| s.intersects_box(lo, hi))
        });
    }

    let outputs: Vec<Tensor4<f32>> = tiles
        .par_iter()
        .map(|t| {
            let mut data = Vec::new();
            let isize: [usize; 3] = t.size.map(|s| s + 2 * margin);
            for v in inputs {
                for z in t.lo[2]..t.lo[2] + isize[2] {
                    for y in t.lo[1]..t.lo[1] + isize[1] {
                        let s = in_grid.index(t.lo[0], y, z);
                        data.extend_from_slice(&v.data()[s..s + isize[0]]);
                    }
                }
            }
            let x = Tensor4::from_vec([inputs.len(), isize[0], isize[1], isize[2]], data)?;
            model.forward(&x)
        })
        .collect::<Result<_>>()?;

    let mut stack = HeatmapStack::zeros(out_grid, names.to_vec(), *spec);
    let mut evaluated = roi.map(|_| vec![false; out_grid.len()]);
    for (t, y) in tiles.iter().zip(&outputs) {
        for z in 0..t.size[2] {
            for yy in 0..t.size[1] {
                for x in 0..t.size[0] {
                    let v = [t.lo[0] + x, t.lo[1] + yy, t.lo[2] + z];
                    let i = out_grid.index(v[0], v[1], v[2]);
                    if let (Some(ev), Some(spheres)) = (evaluated.as_mut(), roi) {
                        let w = out_grid.voxel_to_world(v);
                        if !spheres.iter().any(|s| s.contains(w)) {
                            continue;
                        }
                        ev[i] = true;
                    }
                    for (c, ch) in stack.channels.iter_mut().enumerate() {
                        ch[i] = y.get(c, x, yy, z) as f64;
                    }
                }
            }
        }
    }
    stack.evaluated = evaluated;
    let stats = TileStats {
        tiles_total,
        tiles_evaluated: tiles.len(),
        voxels_evaluated: stack.evaluated_count(),
    };
    Ok((stack, stats))
}

/// Per channel, the evaluated voxel with the highest temperature. Certainty
/// is `clamp(t / k, 0, 1)`; channels with no evaluated voxel are absent.
pub fn extract_detections(stack: &HeatmapStack) -> Result<LandmarkSet> {
    if stack.evaluated_count() == 0 {
        return Err(Error::EmptyRegion("no voxel of the heatmap stack was evaluated".into()));
    }
    let mut out = LandmarkSet::new();
    for (c, name) in stack.names.iter().enumerate() {
        let lm = match stack.argmax_where(c, |_| true) {
            Some((i, t)) => Landmark {
                name: name.clone(),
                position: stack.grid.voxel_to_world(stack.grid.coords(i)),
                certainty: (t / stack.spec.k).clamp(0.0, 1.0),
                status: Status::Visible,
            },
            None => Landmark::absent(name.clone()),
        };
        out.push(lm)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Landmark;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("l{i}")).collect()
    }

    #[test]
    fn eq1_scalar_values() {
        let spec = HeatmapSpec::new(1.0, 1e3).unwrap();
        let g = Grid::new([5, 5, 5], [4.0; 3], [0.0; 3]).unwrap();
        let lm = LandmarkSet::from_entries(vec![Landmark::visible("l0", [8.0, 8.0, 8.0])]).unwrap();
        let s = gaussian_target(&g, &lm, &names(1), &spec).unwrap();
        let at = |v: [usize; 3]| s.channels[0][g.index(v[0], v[1], v[2])];
        assert_eq!(at([2, 2, 2]), 1000.0);
        assert!((at([3, 2, 2]) - 606.530_659_712_633_4).abs() < 1e-9);
        assert!((at([3, 3, 3]) - 223.130_160_148_429_8).abs() < 1e-9);
    }

    #[test]
    fn absent_and_uncertain_channels() {
        let spec = HeatmapSpec::new(1.0, 10.0).unwrap();
        let g = Grid::new([3, 3, 3], [1.0; 3], [0.0; 3]).unwrap();
        let mut u = Landmark::visible("l1", [1.0, 1.0, 1.0]);
        u.status = Status::Uncertain;
        let lm = LandmarkSet::from_entries(vec![Landmark::absent("l0"), u]).unwrap();
        let s = gaussian_target(&g, &lm, &names(3), &spec).unwrap();
        assert!(s.channels[0].iter().all(|&v| v == 0.0));
        assert!(s.channels[2].iter().all(|&v| v == 0.0));
        assert_eq!(s.excluded, vec![false, true, false]);
        assert!(HeatmapSpec::new(0.0, 1.0).is_err());
    }

    #[test]
    fn detections_recover_on_grid_landmarks() {
        let spec = HeatmapSpec::new(1.0, 1e6).unwrap();
        let g = Grid::new([9, 8, 7], [2.0, 2.0, 3.0], [-5.0, 1.0, 2.0]).unwrap();
        let pts = [[3usize, 4, 2], [0, 0, 0], [8, 7, 6]];
        let lm = LandmarkSet::from_entries(
            pts.iter().enumerate().map(|(i, &v)| Landmark::visible(format!("l{i}"), g.voxel_to_world(v))).collect(),
        )
        .unwrap();
        let s = gaussian_target(&g, &lm, &names(3), &spec).unwrap();
        let det = extract_detections(&s).unwrap();
        for (d, l) in det.iter().zip(lm.iter()) {
            assert_eq!(d.position, l.position);
            assert_eq!(d.certainty, 1.0);
        }
    }

    #[test]
    fn argmax_tie_break_and_zero_channel() {
        let spec = HeatmapSpec::new(1.0, 100.0).unwrap();
        let g = Grid::new([3, 2, 2], [1.0; 3], [10.0, 20.0, 30.0]).unwrap();
        let mut s = HeatmapStack::zeros(g, names(2), spec);
        s.channels[1][4] = 250.0;
        s.channels[1][9] = 250.0;
        let det = extract_detections(&s).unwrap();
        assert_eq!(det.entries()[0].position, [10.0, 20.0, 30.0]);
        assert_eq!(det.entries()[0].certainty, 0.0);
        assert_eq!(det.entries()[1].position, g.voxel_to_world(g.coords(4)));
        assert_eq!(det.entries()[1].certainty, 1.0);
        s.evaluated = Some(vec![false; g.len()]);
        assert!(matches!(extract_detections(&s), Err(Error::EmptyRegion(_))));
    }

    fn padded_scan() -> (Volume3D, LandmarkSet) {
        let g = Grid::new([30, 30, 30], [2.0; 3], [0.0; 3]).unwrap();
        let data = (0..g.len()).map(|i| ((i * 7919) % 13) as f32 / 13.0).collect();
        let v = Volume3D::new(g, Domain::Normalized, data).unwrap();
        let lm = LandmarkSet::from_entries(vec![
            Landmark::visible("l0", [20.0, 20.0, 20.0]),
            Landmark::visible("l1", [40.0, 30.0, 16.0]),
            Landmark::visible("l2", [0.0, 2.0, 58.0]),
            Landmark::visible("l3", [30.0, 44.0, 36.0]),
        ])
        .unwrap();
        (v, lm)
    }

    #[test]
    fn patch_counts_follow_one_to_five_ratio() {
        let (v, lm) = padded_scan();
        let spec = HeatmapSpec::new(1.0, 1e3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = sample_training_patches(&[v], &lm, &names(4), &spec, PatchGeometry::default(), &mut rng).unwrap();
        assert_eq!(p.len(), 24);
        assert!(p.iter().all(|p| p.input.shape() == [1, 15, 15, 15] && p.target.shape() == [4, 3, 3, 3]));
        // landmark-centred patch: centre of that channel equals k
        assert_eq!(p[0].target.get(0, 1, 1, 1), 1000.0);
        assert_eq!(p[1].target.get(1, 1, 1, 1), 1000.0);
    }

    #[test]
    fn background_far_from_landmarks_is_near_zero() {
        let g = Grid::new([60, 20, 20], [1.0; 3], [0.0; 3]).unwrap();
        let v = Volume3D::filled(g, Domain::Normalized, 0.0);
        let lm = LandmarkSet::from_entries(vec![Landmark::visible("l0", [2.0, 10.0, 10.0])]).unwrap();
        let spec = HeatmapSpec::new(1.0, 1e3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bg = background_patches(&[v], &lm, &names(1), &spec, PatchGeometry::default(), 50, &mut rng).unwrap();
        for p in &bg {
            // patch centres are at least 2 sigma away; far ones decay to ~0
            let far = p.target.data().iter().all(|&t| (t as f64) < 1e3 * (-50.0f64).exp());
            let near = p.target.data().iter().any(|&t| t > 0.0);
            assert!(far || near);
            assert!((p.target.get(0, 1, 1, 1) as f64) < 1e3 * (-2.0f64).exp());
        }
        assert!(bg.iter().any(|p| p.target.data().iter().all(|&t| (t as f64) < 1e3 * (-50.0f64).exp())));
    }

    #[test]
    fn undersized_volume_rejected() {
        let g = Grid::new([14, 20, 20], [1.0; 3], [0.0; 3]).unwrap();
        let v = Volume3D::filled(g, Domain::Normalized, 0.0);
        let spec = HeatmapSpec::new(1.0, 1e3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(sample_training_patches(&[v], &LandmarkSet::new(), &names(1), &spec, PatchGeometry::default(), &mut rng).is_err());
    }

    #[test]
    fn sphere_box_intersection() {
        let s = Sphere { centre: [0.0; 3], radius: 2.0 };
        assert!(s.intersects_box([1.0, 1.0, -1.0], [5.0, 5.0, 5.0]));
        assert!(!s.intersects_box([1.5, 1.5, 1.5], [5.0, 5.0, 5.0]));
        assert!(s.contains([0.0, 2.0, 0.0]));
    }
}
