//! Landmark atlas, certainty-weighted affine fitting with worst-residual
//! pruning, and atlas-guided correction of detections.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, SymmetricEigen, Vector3};

use crate::error::{Error, Result};
use crate::heatmap::HeatmapStack;
use crate::volume::{Domain, Grid, Landmark, LandmarkSet, Status, Volume3D};

/// Largest condition number accepted for a mapping that has to be inverted.
pub const MAX_TRANSFORM_CONDITION: f64 = 1e8;
/// Largest condition number of the normalised second-moment matrix in a fit.
const MAX_FIT_CONDITION: f64 = 1e12;
/// Well-spacedness: smallest singular value of the centred inlier matrix,
/// relative to the inliers' largest bounding-box side.
const SPACING_RATIO: f64 = 1e-3;
const ATLAS_HEADER: &str = "frame: atlas";

/// `x -> A x + b` in world millimetres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    pub linear: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Default for AffineTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineTransform {
    pub fn identity() -> Self {
        Self {
            linear: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn new(linear: [[f64; 3]; 3], translation: [f64; 3]) -> Self {
        Self { linear, translation }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Self { translation: t, ..Self::identity() }
    }

    pub fn scale(s: f64) -> Self {
        Self {
            linear: [[s, 0.0, 0.0], [0.0, s, 0.0], [0.0, 0.0, s]],
            translation: [0.0; 3],
        }
    }

    fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.linear[r][c])
    }

    fn from_parts(a: Matrix3<f64>, b: Vector3<f64>) -> Self {
        Self {
            linear: std::array::from_fn(|r| std::array::from_fn(|c| a[(r, c)])),
            translation: [b[0], b[1], b[2]],
        }
    }

    #[inline]
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let a = &self.linear;
        std::array::from_fn(|r| a[r][0] * p[0] + a[r][1] * p[1] + a[r][2] * p[2] + self.translation[r])
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &AffineTransform) -> AffineTransform {
        let a = self.matrix() * other.matrix();
        let b = self.matrix() * Vector3::from(other.translation) + Vector3::from(self.translation);
        Self::from_parts(a, b)
    }

    pub fn is_finite(&self) -> bool {
        self.linear.iter().flatten().chain(&self.translation).all(|v| v.is_finite())
    }

    /// Ratio of extreme singular values of the linear part.
    pub fn condition_number(&self) -> f64 {
        if !self.is_finite() {
            return f64::INFINITY;
        }
        let sv = self.matrix().singular_values();
        let (mx, mn) = (sv.max(), sv.min());
        if mn > 0.0 {
            mx / mn
        } else {
            f64::INFINITY
        }
    }

    pub fn invert(&self) -> Result<AffineTransform> {
        let cond = self.condition_number();
        if cond >= MAX_TRANSFORM_CONDITION {
            return Err(Error::Degenerate(format!(
                "affine transform is not invertible (condition number {cond:.3e})"
            )));
        }
        let inv = self
            .matrix()
            .try_inverse()
            .ok_or_else(|| Error::Degenerate("singular affine transform".into()))?;
        let b = -(inv * Vector3::from(self.translation));
        Ok(Self::from_parts(inv, b))
    }

    /// Largest absolute difference over all twelve coefficients.
    pub fn max_abs_diff(&self, other: &AffineTransform) -> f64 {
        let a = self.linear.iter().flatten().chain(&self.translation);
        let b = other.linear.iter().flatten().chain(&other.translation);
        a.zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }
}

pub fn apply_affine(t: &AffineTransform, pts: &[[f64; 3]]) -> Vec<[f64; 3]> {
    pts.iter().map(|&p| t.apply(p)).collect()
}

pub fn invert_affine(t: &AffineTransform) -> Result<AffineTransform> {
    t.invert()
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}

/// Canonical landmark positions in the atlas frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Atlas {
    names: Vec<String>,
    positions: Vec<[f64; 3]>,
}

impl Atlas {
    pub fn new(names: Vec<String>, positions: Vec<[f64; 3]>) -> Result<Self> {
        if names.len() != positions.len() {
            return Err(Error::InvalidArgument("atlas names/positions length mismatch".into()));
        }
        if names.len() < 4 {
            return Err(Error::InsufficientLandmarks { needed: 4, found: names.len() });
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::InvalidArgument(format!("duplicate atlas landmark {n:?}")));
            }
        }
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite atlas position".into()));
        }
        if !well_spaced(&positions) {
            return Err(Error::Degenerate("atlas landmarks are coplanar".into()));
        }
        Ok(Self { names, positions })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<[f64; 3]> {
        self.names.iter().position(|n| n == name).map(|i| self.positions[i])
    }

    /// Axis-aligned bounding box of the atlas landmarks.
    pub fn bounding_box(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.positions {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }

    pub fn centre(&self) -> [f64; 3] {
        let (lo, hi) = self.bounding_box();
        std::array::from_fn(|a| 0.5 * (lo[a] + hi[a]))
    }

    pub fn half_extent(&self) -> [f64; 3] {
        let (lo, hi) = self.bounding_box();
        std::array::from_fn(|a| 0.5 * (hi[a] - lo[a]))
    }

    pub fn to_landmarks(&self) -> LandmarkSet {
        let entries = self
            .names
            .iter()
            .zip(&self.positions)
            .map(|(n, &p)| Landmark::visible(n.clone(), p))
            .collect();
        LandmarkSet::from_entries(entries).expect("atlas names are unique")
    }

    pub fn from_landmarks(set: &LandmarkSet) -> Result<Self> {
        let (names, positions) = set.visible().map(|l| (l.name.clone(), l.position)).unzip();
        Self::new(names, positions)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::volume::save_landmarks(&self.to_landmarks(), path, Some(ATLAS_HEADER))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if !text.lines().any(|l| l.trim() == format!("# {ATLAS_HEADER}")) {
            return Err(Error::format("atlas file", format!("missing '# {ATLAS_HEADER}' header")));
        }
        Self::from_landmarks(&LandmarkSet::parse(&text)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AtlasConfig {
    /// Inlier threshold for the refined fit, mm.
    pub d_atlas: f64,
    /// Correction search radius around mapped atlas landmarks, mm.
    pub d_volume: f64,
    pub min_inliers: usize,
}

impl Default for AtlasConfig {
    fn default() -> Self {
        Self { d_atlas: 10.0, d_volume: 28.0, min_inliers: 4 }
    }
}

impl AtlasConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        if !ok(self.d_atlas) || !ok(self.d_volume) || self.min_inliers < 4 {
            return Err(Error::InvalidArgument(format!(
                "atlas config needs positive distances and min_inliers >= 4, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Outcome of [`iterative_refine_fit`]; `transform` maps detections to the
/// atlas frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub transform: AffineTransform,
    pub inliers: Vec<String>,
    pub residuals: Vec<(String, f64)>,
    pub dropped: Vec<String>,
    pub low_confidence: bool,
    pub note: Option<String>,
}

impl FitResult {
    /// A flagged placeholder carrying `transform`, used when no fit exists.
    pub fn fallback(transform: AffineTransform, note: impl Into<String>) -> Self {
        Self {
            transform,
            inliers: Vec::new(),
            residuals: Vec::new(),
            dropped: Vec::new(),
            low_confidence: true,
            note: Some(note.into()),
        }
    }

    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().map(|r| r.1).fold(0.0, f64::max)
    }

    pub fn report(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "transform (detections -> atlas):");
        for r in 0..3 {
            let a = self.transform.linear[r];
            let _ = writeln!(s, "  {:12.6} {:12.6} {:12.6} | {:12.6}", a[0], a[1], a[2], self.transform.translation[r]);
        }
        let _ = writeln!(s, "low_confidence: {}", self.low_confidence);
        if let Some(n) = &self.note {
            let _ = writeln!(s, "note: {n}");
        }
        let _ = writeln!(s, "inliers ({}): {}", self.inliers.len(), self.inliers.join(" "));
        let _ = writeln!(s, "dropped (in order): {}", self.dropped.join(" "));
        let _ = writeln!(s, "residuals (mm):");
        for (n, r) in &self.residuals {
            let _ = writeln!(s, "  {n} {r:.4}");
        }
        s
    }
}

fn centred(points: &[[f64; 3]]) -> DMatrix<f64> {
    let n = points.len() as f64;
    let c: [f64; 3] = std::array::from_fn(|a| points.iter().map(|p| p[a]).sum::<f64>() / n);
    DMatrix::from_fn(points.len(), 3, |i, a| points[i][a] - c[a])
}

fn well_spaced(points: &[[f64; 3]]) -> bool {
    if points.len() < 4 {
        return false;
    }
    let mut extent = 0.0f64;
    for a in 0..3 {
        let (lo, hi) = points
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), p| (l.min(p[a]), h.max(p[a])));
        extent = extent.max(hi - lo);
    }
    if extent <= 0.0 {
        return false;
    }
    let sv = centred(points).singular_values();
    sv.min() > SPACING_RATIO * extent
}

/// Weighted least-squares affine map: minimises `sum w_i |A src_i + b - dst_i|^2`.
///
/// The homogeneous normal equations are formed about the weighted source
/// centroid, with the source scaled to unit RMS radius, which makes them block
/// diagonal: the translation row decouples and the three output coordinates
/// share one 3x3 system.
pub fn weighted_affine_fit(src: &[[f64; 3]], dst: &[[f64; 3]], weights: &[f64]) -> Result<AffineTransform> {
    if src.len() != dst.len() || src.len() != weights.len() {
        return Err(Error::InvalidArgument("fit inputs differ in length".into()));
    }
    if weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
        return Err(Error::InvalidArgument("fit weights must be finite and non-negative".into()));
    }
    if src.iter().chain(dst).flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite fit coordinates".into()));
    }
    let positive = weights.iter().filter(|&&w| w > 0.0).count();
    if positive < 4 {
        return Err(Error::InsufficientLandmarks { needed: 4, found: positive });
    }
    let wsum: f64 = weights.iter().sum();
    let mean = |pts: &[[f64; 3]]| -> Vector3<f64> {
        let mut m = Vector3::zeros();
        for (p, &w) in pts.iter().zip(weights) {
            m += w * Vector3::from(*p);
        }
        m / wsum
    };
    let cs = mean(src);
    let cd = mean(dst);
    let rms = (src
        .iter()
        .zip(weights)
        .map(|(p, &w)| w * (Vector3::from(*p) - cs).norm_squared())
        .sum::<f64>()
        / wsum)
        .sqrt();
    if rms == 0.0 {
        return Err(Error::Degenerate("all weighted source points coincide".into()));
    }
    let mut sxx = Matrix3::zeros();
    let mut syx = Matrix3::zeros();
    for ((p, q), &w) in src.iter().zip(dst).zip(weights) {
        if w == 0.0 {
            continue;
        }
        let x = (Vector3::from(*p) - cs) / rms;
        let y = Vector3::from(*q) - cd;
        sxx += w * x * x.transpose();
        syx += w * y * x.transpose();
    }
    let eig = SymmetricEigen::new(sxx).eigenvalues;
    let (mx, mn) = (eig.max(), eig.min());
    if !(mn > 0.0) || mx / mn > MAX_FIT_CONDITION {
        return Err(Error::Degenerate(format!(
            "source points are coplanar or collinear (condition number {:.3e})",
            if mn > 0.0 { mx / mn } else { f64::INFINITY }
        )));
    }
    let chol = sxx
        .cholesky()
        .ok_or_else(|| Error::Degenerate("normal equations not positive definite".into()))?;
    // A_n = syx * sxx^-1, solved via sxx * A_n^T = syx^T
    let a_norm = chol.solve(&syx.transpose()).transpose();
    let a = a_norm / rms;
    let b = cd - a * cs;
    Ok(AffineTransform::from_parts(a, b))
}

/// Certainty-weighted fit of visible detections to the atlas, dropping the
/// worst-mapped landmark until all residuals are within `d_atlas` or only
/// `min_inliers` remain.
pub fn iterative_refine_fit(detections: &LandmarkSet, atlas: &Atlas, cfg: &AtlasConfig) -> Result<FitResult> {
    cfg.validate()?;
    let mut set: Vec<(String, [f64; 3], [f64; 3], f64)> = detections
        .iter()
        .filter(|l| l.status == Status::Visible && l.certainty > 0.0)
        .filter_map(|l| atlas.get(&l.name).map(|a| (l.name.clone(), l.position, a, l.certainty)))
        .collect();
    if set.len() < cfg.min_inliers {
        return Err(Error::InsufficientLandmarks { needed: cfg.min_inliers, found: set.len() });
    }
    let fit = |set: &[(String, [f64; 3], [f64; 3], f64)]| {
        let src: Vec<_> = set.iter().map(|e| e.1).collect();
        let dst: Vec<_> = set.iter().map(|e| e.2).collect();
        let w: Vec<_> = set.iter().map(|e| e.3).collect();
        weighted_affine_fit(&src, &dst, &w)
    };
    let residuals = |t: &AffineTransform, set: &[(String, [f64; 3], [f64; 3], f64)]| -> Vec<(String, f64)> {
        set.iter().map(|e| (e.0.clone(), dist(t.apply(e.1), e.2))).collect()
    };

    let mut transform = fit(&set)?;
    let mut res = residuals(&transform, &set);
    let mut dropped = Vec::new();
    let mut note = None;
    loop {
        let (worst, max) = res
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, r)| if r.1 > acc.1 { (i, r.1) } else { acc });
        if max <= cfg.d_atlas || set.len() <= cfg.min_inliers {
            break;
        }
        let mut trial = set.clone();
        let gone = trial.remove(worst);
        match fit(&trial) {
            Ok(t) => {
                dropped.push(gone.0);
                set = trial;
                transform = t;
                res = residuals(&transform, &set);
            }
            Err(e) => {
                note = Some(format!("stopped pruning: {e}"));
                break;
            }
        }
    }
    let inlier_pts: Vec<[f64; 3]> = set.iter().map(|e| e.1).collect();
    let mut low_confidence = false;
    if res.iter().any(|r| r.1 > cfg.d_atlas) {
        low_confidence = true;
        note.get_or_insert_with(|| format!("residuals exceed d_atlas with {} landmarks left", set.len()));
    }
    if !well_spaced(&inlier_pts) {
        low_confidence = true;
        note.get_or_insert_with(|| "inlier landmarks are not well spaced".into());
    }
    if transform.condition_number() >= MAX_TRANSFORM_CONDITION {
        low_confidence = true;
        note.get_or_insert_with(|| "fitted transform is near singular".into());
    }
    Ok(FitResult {
        transform,
        inliers: set.into_iter().map(|e| e.0).collect(),
        residuals: res,
        dropped,
        low_confidence,
        note,
    })
}

/// Builds an atlas from ground-truth landmark sets: the first set is the
/// reference, the others are affinely aligned to it and averaged, and the
/// alignment is repeated twice against the running mean.
pub fn build_atlas(training_sets: &[LandmarkSet]) -> Result<Atlas> {
    let first = training_sets
        .first()
        .ok_or_else(|| Error::InvalidArgument("no training landmark sets".into()))?;
    let mut names: Vec<String> = Vec::new();
    for s in training_sets {
        for l in s.visible() {
            if !names.contains(&l.name) {
                names.push(l.name.clone());
            }
        }
    }
    let mut reference: Vec<Option<[f64; 3]>> = names.iter().map(|n| first.get(n).filter(|l| l.is_visible()).map(|l| l.position)).collect();
    let ref_pts: Vec<[f64; 3]> = reference.iter().flatten().copied().collect();
    if !well_spaced(&ref_pts) {
        return Err(Error::Degenerate("reference landmark set is degenerate".into()));
    }

    if training_sets.len() == 1 {
        return Atlas::from_landmarks(&LandmarkSet::from_entries(first.visible().cloned().collect())?);
    }
    for round in 0..3 {
        let mut sum = vec![[0.0f64; 3]; names.len()];
        let mut count = vec![0usize; names.len()];
        for (si, s) in training_sets.iter().enumerate() {
            let t = if round == 0 && si == 0 {
                Some(AffineTransform::identity())
            } else {
                let mut src = Vec::new();
                let mut dst = Vec::new();
                for (n, r) in names.iter().zip(&reference) {
                    if let (Some(l), Some(r)) = (s.get(n).filter(|l| l.is_visible()), r) {
                        src.push(l.position);
                        dst.push(*r);
                    }
                }
                let w = vec![1.0; src.len()];
                weighted_affine_fit(&src, &dst, &w).ok()
            };
            let Some(t) = t else { continue };
            for (i, n) in names.iter().enumerate() {
                if let Some(l) = s.get(n).filter(|l| l.is_visible()) {
                    let p = t.apply(l.position);
                    for a in 0..3 {
                        sum[i][a] += p[a];
                    }
                    count[i] += 1;
                }
            }
        }
        reference = sum
            .iter()
            .zip(&count)
            .map(|(s, &c)| (c > 0).then(|| s.map(|v| v / c as f64)))
            .collect();
    }
    let (names, positions): (Vec<_>, Vec<_>) = names
        .into_iter()
        .zip(reference)
        .filter_map(|(n, p)| p.map(|p| (n, p)))
        .unzip();
    Atlas::new(names, positions)
}

/// Moves each detection to the highest-temperature evaluated voxel within
/// `d_volume` mm of its inverse-mapped atlas landmark. Landmarks whose mapped
/// atlas point falls outside the stack's field of view become absent.
pub fn direct_atlas_correction(
    detections: &LandmarkSet,
    stack: &HeatmapStack,
    atlas: &Atlas,
    fit: &FitResult,
    cfg: &AtlasConfig,
) -> Result<LandmarkSet> {
    cfg.validate()?;
    let inv = fit.transform.invert()?;
    let g = &stack.grid;
    let mut out = LandmarkSet::new();
    let mut any_roi = false;
    for (c, name) in stack.names.iter().enumerate() {
        let Some(a) = atlas.get(name) else {
            out.push(detections.get(name).cloned().unwrap_or_else(|| Landmark::absent(name.clone())))?;
            continue;
        };
        let m = inv.apply(a);
        let found = if g.contains_world(m) { roi_argmax(stack, c, m, cfg.d_volume) } else { None };
        let lm = match found {
            Some((i, t)) => {
                any_roi = true;
                Landmark {
                    name: name.clone(),
                    position: g.voxel_to_world(g.coords(i)),
                    certainty: (t / stack.spec.k).clamp(0.0, 1.0),
                    status: Status::Visible,
                }
            }
            None => Landmark::absent(name.clone()),
        };
        out.push(lm)?;
    }
    if !any_roi {
        return Err(Error::EmptyRegion("no atlas region of interest intersects the volume".into()));
    }
    Ok(out)
}

/// Argmax of channel `c` over evaluated voxels within `r` mm of `centre`,
/// lowest linear index on ties.
fn roi_argmax(stack: &HeatmapStack, c: usize, centre: [f64; 3], r: f64) -> Option<(usize, f64)> {
    let g = &stack.grid;
    let cc = g.world_to_continuous(centre);
    let range = |a: usize| {
        let h = r / g.spacing[a];
        let lo = (cc[a] - h).ceil().max(0.0);
        let hi = (cc[a] + h).floor().min(g.dims[a] as f64 - 1.0);
        (lo as usize, hi as isize)
    };
    let (x0, x1) = range(0);
    let (y0, y1) = range(1);
    let (z0, z1) = range(2);
    let ch = &stack.channels[c];
    let mut best: Option<(usize, f64)> = None;
    for z in z0 as isize..=z1 {
        for y in y0 as isize..=y1 {
            for x in x0 as isize..=x1 {
                let v = [x as usize, y as usize, z as usize];
                let i = g.index(v[0], v[1], v[2]);
                if !stack.is_evaluated(i) || dist(g.voxel_to_world(v), centre) > r {
                    continue;
                }
                let t = ch[i];
                if t.is_nan() {
                    continue;
                }
                if best.is_none_or(|(_, b)| t > b) {
                    best = Some((i, t));
                }
            }
        }
    }
    best
}

/// Atlas-frame coordinates of every voxel centre of `grid` under
/// `fit.transform`, centred on the atlas bounding box and divided by its
/// half extent per axis.
pub fn atlas_coordinate_channels(grid: &Grid, fit: &FitResult, atlas: &Atlas) -> Result<[Volume3D; 3]> {
    let centre = atlas.centre();
    let half = atlas.half_extent();
    if half.iter().any(|&h| !(h > 0.0)) {
        return Err(Error::Degenerate(format!("atlas bounding box is flat: half extent {half:?}")));
    }
    let t = &fit.transform;
    let mut data = [Vec::with_capacity(grid.len()), Vec::with_capacity(grid.len()), Vec::with_capacity(grid.len())];
    for i in 0..grid.len() {
        let p = t.apply(grid.voxel_to_world(grid.coords(i)));
        for a in 0..3 {
            data[a].push(((p[a] - centre[a]) / half[a]) as f32);
        }
    }
    let [dx, dy, dz] = data;
    Ok([
        Volume3D::new(*grid, Domain::Unitless, dx)?,
        Volume3D::new(*grid, Domain::Unitless, dy)?,
        Volume3D::new(*grid, Domain::Unitless, dz)?,
    ])
}
