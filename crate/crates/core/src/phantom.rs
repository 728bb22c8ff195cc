//! Procedural head-like phantoms with exactly known landmarks.
//!
//! A phantom is a set of analytic primitives in a canonical frame. Each draw
//! applies a random affine deformation, renders the primitives onto a grid
//! with 2x supersampling, adds Gaussian noise and optionally crops.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::atlas::AffineTransform;
use crate::error::{Error, Result};
use crate::seeding;
use crate::volume::{save_landmarks, save_volume, CropDraw, Domain, Grid, Landmark, LandmarkSet, Volume3D, AIR_HU};

#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    /// Solid ellipsoid.
    Ellipsoid { centre: [f64; 3], semi_axes: [f64; 3], hu: f64 },
    /// Ellipsoidal shell between the outer semi-axes and the semi-axes
    /// reduced by `thickness`.
    Shell { centre: [f64; 3], semi_axes: [f64; 3], thickness: f64, hu: f64 },
    Sphere { centre: [f64; 3], radius: f64, hu: f64 },
    /// Flat-ended cylinder around the segment `start..end`.
    Rod { start: [f64; 3], end: [f64; 3], radius: f64, hu: f64 },
}

fn in_ellipsoid(p: [f64; 3], c: [f64; 3], s: [f64; 3]) -> bool {
    (0..3).map(|a| ((p[a] - c[a]) / s[a]).powi(2)).sum::<f64>() <= 1.0
}

impl Primitive {
    pub fn hu(&self) -> f64 {
        match *self {
            Primitive::Ellipsoid { hu, .. }
            | Primitive::Shell { hu, .. }
            | Primitive::Sphere { hu, .. }
            | Primitive::Rod { hu, .. } => hu,
        }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        match *self {
            Primitive::Ellipsoid { centre, semi_axes, .. } => in_ellipsoid(p, centre, semi_axes),
            Primitive::Shell { centre, semi_axes, thickness, .. } => {
                let inner = semi_axes.map(|s| s - thickness);
                in_ellipsoid(p, centre, semi_axes) && !in_ellipsoid(p, centre, inner)
            }
            Primitive::Sphere { centre, radius, .. } => {
                (0..3).map(|a| (p[a] - centre[a]).powi(2)).sum::<f64>() <= radius * radius
            }
            Primitive::Rod { start, end, radius, .. } => {
                let d: [f64; 3] = std::array::from_fn(|a| end[a] - start[a]);
                let len2: f64 = d.iter().map(|v| v * v).sum();
                let t = (0..3).map(|a| (p[a] - start[a]) * d[a]).sum::<f64>() / len2;
                if !(0.0..=1.0).contains(&t) {
                    return false;
                }
                let r2: f64 = (0..3).map(|a| (p[a] - start[a] - t * d[a]).powi(2)).sum();
                r2 <= radius * radius
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let hu = self.hu();
        let ok = match *self {
            Primitive::Ellipsoid { semi_axes, .. } => semi_axes.iter().all(|&s| s > 0.0),
            Primitive::Shell { semi_axes, thickness, .. } => {
                thickness > 0.0 && semi_axes.iter().all(|&s| s > thickness)
            }
            Primitive::Sphere { radius, .. } => radius > 0.0,
            Primitive::Rod { start, end, radius, .. } => radius > 0.0 && start != end,
        };
        if !ok || !(-1000.0..=1000.0).contains(&hu) {
            return Err(Error::InvalidArgument(format!("invalid primitive {self:?}")));
        }
        Ok(())
    }
}

/// Canonical phantom plus the ranges of its random draws.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    /// Painted in order; later primitives overwrite earlier ones.
    pub structures: Vec<Primitive>,
    pub landmarks: Vec<(String, [f64; 3])>,
    /// Mirror-image landmark names across the x = 0 plane.
    pub lr_pairs: Vec<(String, String)>,
    /// Maximum absolute rotation about each axis, degrees.
    pub rotation_deg: f64,
    pub scale_range: (f64, f64),
    /// Maximum absolute translation per axis, mm.
    pub translation_mm: f64,
    pub noise_hu: f64,
    pub crop_probability: f64,
    pub crop_mm: f64,
    pub dims: [usize; 3],
    pub spacing: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        let outer = [36.0, 42.0, 40.0];
        let thickness = 5.0;
        let lm = |n: &str, p: [f64; 3]| (n.to_string(), p);
        Self {
            structures: vec![
                Primitive::Ellipsoid { centre: [0.0; 3], semi_axes: outer.map(|s| s - thickness), hu: 0.0 },
                Primitive::Shell { centre: [0.0; 3], semi_axes: outer, thickness, hu: 700.0 },
                Primitive::Sphere { centre: [12.0, 24.0, 0.0], radius: 6.0, hu: 50.0 },
                Primitive::Sphere { centre: [-12.0, 24.0, 0.0], radius: 6.0, hu: 50.0 },
                Primitive::Rod { start: [0.0, -8.0, -30.0], end: [0.0, -8.0, 10.0], radius: 3.0, hu: 100.0 },
                // Dense knobs marking the skull landmarks.
                Primitive::Sphere { centre: [0.0, 0.0, 40.0], radius: 4.0, hu: 1000.0 },
                Primitive::Sphere { centre: [0.0, 0.0, -40.0], radius: 4.0, hu: 1000.0 },
                Primitive::Sphere { centre: [36.0, 0.0, 0.0], radius: 4.0, hu: 1000.0 },
                Primitive::Sphere { centre: [-36.0, 0.0, 0.0], radius: 4.0, hu: 1000.0 },
            ],
            landmarks: vec![
                lm("skull_apex", [0.0, 0.0, 40.0]),
                lm("skull_base", [0.0, 0.0, -40.0]),
                lm("skull_left", [36.0, 0.0, 0.0]),
                lm("skull_right", [-36.0, 0.0, 0.0]),
                lm("eye_left", [12.0, 24.0, 0.0]),
                lm("eye_right", [-12.0, 24.0, 0.0]),
                lm("eye_left_top", [12.0, 24.0, 6.0]),
                lm("eye_right_top", [-12.0, 24.0, 6.0]),
                lm("rod_top", [0.0, -8.0, 10.0]),
                lm("rod_bottom", [0.0, -8.0, -30.0]),
            ],
            lr_pairs: vec![
                ("skull_left".into(), "skull_right".into()),
                ("eye_left".into(), "eye_right".into()),
                ("eye_left_top".into(), "eye_right_top".into()),
            ],
            rotation_deg: 15.0,
            scale_range: (0.9, 1.15),
            translation_mm: 10.0,
            noise_hu: 20.0,
            crop_probability: 0.0,
            crop_mm: 50.0,
            dims: [64; 3],
            spacing: 2.0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        for p in &self.structures {
            p.validate()?;
        }
        if self.landmarks.len() < 6 {
            return Err(Error::InvalidArgument("a phantom needs at least 6 landmarks".into()));
        }
        let pts: Vec<[f64; 3]> = self.landmarks.iter().map(|l| l.1).collect();
        let names: Vec<String> = self.landmarks.iter().map(|l| l.0.clone()).collect();
        crate::atlas::Atlas::new(names, pts)?;
        let (lo, hi) = self.scale_range;
        let bad = !(self.rotation_deg >= 0.0 && self.rotation_deg < 90.0)
            || !(lo > 0.0 && hi >= lo)
            || !(self.translation_mm >= 0.0)
            || !(self.noise_hu >= 0.0)
            || !(0.0..=1.0).contains(&self.crop_probability)
            || !(self.crop_mm >= 0.0)
            || !(self.spacing > 0.0)
            || self.dims.contains(&0);
        if bad {
            return Err(Error::InvalidArgument(format!("invalid phantom deformation/grid ranges in {self:?}")));
        }
        Ok(())
    }

    /// The rendering grid, centred on the canonical origin.
    pub fn grid(&self) -> Grid {
        let origin = self.dims.map(|d| -0.5 * (d as f64 - 1.0) * self.spacing);
        Grid::new(self.dims, [self.spacing; 3], origin).expect("validated grid")
    }

    pub fn canonical_landmarks(&self) -> LandmarkSet {
        LandmarkSet::from_entries(self.landmarks.iter().map(|(n, p)| Landmark::visible(n.clone(), *p)).collect())
            .expect("unique phantom landmark names")
    }

    /// `x -> R S x + t` with Euler angles, per-axis scales and translation
    /// drawn uniformly from the spec ranges.
    pub fn draw_deformation<R: Rng + ?Sized>(&self, rng: &mut R) -> AffineTransform {
        let sym = |r: &mut R, m: f64| if m > 0.0 { r.random_range(-m..=m) } else { 0.0 };
        let ang: [f64; 3] = std::array::from_fn(|_| sym(rng, self.rotation_deg).to_radians());
        let (lo, hi) = self.scale_range;
        let scale: [f64; 3] = std::array::from_fn(|_| if hi > lo { rng.random_range(lo..=hi) } else { lo });
        let t: [f64; 3] = std::array::from_fn(|_| sym(rng, self.translation_mm));
        let rot = |axis: usize, a: f64| {
            let (s, c) = a.sin_cos();
            let (i, j) = ((axis + 1) % 3, (axis + 2) % 3);
            let mut m = AffineTransform::identity();
            m.linear[i][i] = c;
            m.linear[i][j] = -s;
            m.linear[j][i] = s;
            m.linear[j][j] = c;
            m
        };
        let mut s = AffineTransform::identity();
        for a in 0..3 {
            s.linear[a][a] = scale[a];
        }
        let r = rot(2, ang[2]).compose(&rot(1, ang[1])).compose(&rot(0, ang[0]));
        AffineTransform::translation(t).compose(&r.compose(&s))
    }
}

/// Render under a given deformation. `rng` drives noise and cropping only.
pub fn render_phantom<R: Rng + ?Sized>(
    spec: &PhantomSpec,
    deformation: &AffineTransform,
    rng: &mut R,
) -> Result<(Volume3D, LandmarkSet)> {
    spec.validate()?;
    let inv = deformation.invert()?;
    let grid = spec.grid();
    let q = spec.spacing / 4.0;
    let offsets: Vec<[f64; 3]> = (0..8)
        .map(|k| std::array::from_fn(|a| if k >> a & 1 == 1 { q } else { -q }))
        .collect();
    let paint = |p: [f64; 3]| {
        let c = inv.apply(p);
        spec.structures.iter().rev().find(|s| s.contains(c)).map_or(AIR_HU as f64, |s| s.hu())
    };
    let mut data: Vec<f32> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let w = grid.voxel_to_world(grid.coords(i));
            let sum: f64 = offsets.iter().map(|o| paint([w[0] + o[0], w[1] + o[1], w[2] + o[2]])).sum();
            (sum / 8.0) as f32
        })
        .collect();
    if spec.noise_hu > 0.0 {
        let normal = Normal::new(0.0, spec.noise_hu).expect("validated sigma");
        for v in &mut data {
            *v += normal.sample(rng) as f32;
        }
    }
    let vol = Volume3D::new(grid, Domain::Hu, data)?;
    let lm = LandmarkSet::from_entries(
        spec.landmarks
            .iter()
            .map(|(n, p)| Landmark::visible(n.clone(), deformation.apply(*p)))
            .collect(),
    )?;
    let crop = spec.crop_probability > 0.0 && rng.random_bool(spec.crop_probability);
    let draw = if crop { CropDraw::sample(spec.crop_mm, rng) } else { CropDraw::none() };
    let (vol, mut lm) = draw.apply(&vol, &lm)?;
    for e in lm.entries_mut() {
        if !vol.grid().contains_world(e.position) {
            *e = Landmark::absent(e.name.clone());
        }
    }
    Ok((vol, lm))
}

/// Draw a deformation and render: `(volume in HU, landmarks, deformation)`.
pub fn generate_phantom<R: Rng + ?Sized>(
    spec: &PhantomSpec,
    rng: &mut R,
) -> Result<(Volume3D, LandmarkSet, AffineTransform)> {
    let t = spec.draw_deformation(rng);
    let (v, l) = render_phantom(spec, &t, rng)?;
    Ok((v, l, t))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::format("manifest", format!("unknown split {s:?}"))),
        }
    }
}

/// Sizes of the train/validation/test partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    /// The 170/31/20 proportions of a 221-scan dataset scaled to `n`.
    pub fn proportional(n: usize) -> Self {
        let train = (n as f64 * 170.0 / 221.0).round() as usize;
        let val = ((n as f64 * 31.0 / 221.0).round() as usize).min(n - train);
        Self { train, val, test: n - train - val }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub volume: PathBuf,
    pub landmarks: PathBuf,
    pub split: Split,
}

/// `path_volume path_landmarks split` per line; relative paths resolve
/// against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn split(&self, s: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == s)
    }

    pub fn count(&self, s: Split) -> usize {
        self.split(s).count()
    }

    pub fn to_text(&self, base: &Path) -> String {
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
        self.entries
            .iter()
            .map(|e| format!("{} {} {}\n", rel(&e.volume), rel(&e.landmarks), e.split))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new(""));
        fs::write(path, self.to_text(base)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 3 {
                return Err(Error::format("manifest", format!("line {}: expected 3 fields", i + 1)));
            }
            entries.push(ManifestEntry {
                volume: base.join(f[0]),
                landmarks: base.join(f[1]),
                split: f[2].parse()?,
            });
        }
        Ok(Self { entries })
    }
}

/// Render `counts.total()` phantoms into `out_dir` and write
/// `manifest.txt`. Scan `i` depends only on `(spec, seed, i)`.
pub fn generate_dataset(spec: &PhantomSpec, counts: SplitCounts, seed: u64, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    spec.validate()?;
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n = counts.total();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeding::substream(seed, "split"));
    let mut split = vec![Split::Train; n];
    for (rank, &i) in order.iter().enumerate() {
        split[i] = if rank < counts.train {
            Split::Train
        } else if rank < counts.train + counts.val {
            Split::Val
        } else {
            Split::Test
        };
    }
    let entries = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = seeding::indexed(seed, "phantom", i as u64);
            let (vol, lm, _) = generate_phantom(spec, &mut rng)?;
            let volume = dir.join(format!("scan_{i:04}.mvol"));
            let landmarks = dir.join(format!("scan_{i:04}.lmk"));
            save_volume(&vol, &volume)?;
            save_landmarks(&lm, &landmarks, Some("frame: world"))?;
            Ok(ManifestEntry { volume, landmarks, split: split[i] })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest { entries };
    manifest.save(dir.join("manifest.txt"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atlas::{iterative_refine_fit, Atlas, AtlasConfig};
    use crate::volume::{load_volume, reflect_lr, Status};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_spec() -> PhantomSpec {
        PhantomSpec { dims: [48; 3], spacing: 2.5, ..PhantomSpec::default() }
    }

    fn still(spec: PhantomSpec) -> PhantomSpec {
        PhantomSpec { rotation_deg: 0.0, scale_range: (1.0, 1.0), translation_mm: 0.0, noise_hu: 0.0, ..spec }
    }

    #[test]
    fn undeformed_landmarks_are_canonical() {
        let spec = still(small_spec());
        let (_, lm, t) = generate_phantom(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(t, AffineTransform::identity());
        for ((n, p), l) in spec.landmarks.iter().zip(lm.iter()) {
            assert_eq!(&l.name, n);
            assert_eq!(l.position, *p);
        }
    }

    #[test]
    fn translation_moves_landmarks_exactly() {
        let spec = still(small_spec());
        let t = AffineTransform::translation([10.0, 0.0, 0.0]);
        let (_, lm) = render_phantom(&spec, &t, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for ((_, p), l) in spec.landmarks.iter().zip(lm.iter()) {
            assert_eq!(l.position, [p[0] + 10.0, p[1], p[2]]);
        }
    }

    #[test]
    fn drawn_deformation_is_recovered_by_the_fit() {
        let spec = small_spec();
        let atlas = Atlas::from_landmarks(&spec.canonical_landmarks()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let t = spec.draw_deformation(&mut rng);
            let lm = LandmarkSet::from_entries(
                spec.landmarks.iter().map(|(n, p)| Landmark::visible(n.clone(), t.apply(*p))).collect(),
            )
            .unwrap();
            let fit = iterative_refine_fit(&lm, &atlas, &AtlasConfig::default()).unwrap();
            let recovered = fit.transform.invert().unwrap();
            assert!(recovered.max_abs_diff(&t) < 1e-6);
        }
    }

    #[test]
    fn landmarks_sit_on_their_structures() {
        let spec = still(small_spec());
        let (vol, lm, _) = generate_phantom(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let at = |n: &str| {
            let v = vol.world_to_voxel(lm.get(n).unwrap().position).unwrap();
            vol.get(v[0], v[1], v[2])
        };
        assert!((at("eye_left") - 50.0).abs() < 1e-3);
        assert!((at("eye_right") - 50.0).abs() < 1e-3);
        let around = |n: &str| {
            let v = vol.world_to_voxel(lm.get(n).unwrap().position).unwrap();
            let mut seen = Vec::new();
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let q = [v[0] as i64 + dx, v[1] as i64 + dy, v[2] as i64 + dz];
                        if q.iter().zip(vol.dims()).all(|(&c, d)| c >= 0 && (c as usize) < d) {
                            seen.push(vol.get(q[0] as usize, q[1] as usize, q[2] as usize));
                        }
                    }
                }
            }
            seen
        };
        // surface landmarks: both sides of the boundary within one voxel
        for n in ["skull_apex", "skull_base", "skull_left", "skull_right"] {
            let s = around(n);
            assert!(s.iter().any(|&h| h < -500.0) && s.iter().any(|&h| h > 300.0), "{n}");
        }
        for n in ["rod_top", "rod_bottom"] {
            assert!(around(n).iter().any(|&h| h > 60.0), "{n}");
        }
        for n in ["eye_left_top", "eye_right_top"] {
            let s = around(n);
            assert!(s.iter().any(|&h| h > 40.0) && s.iter().any(|&h| h < 10.0), "{n}");
        }
    }

    #[test]
    fn mirrored_phantom_is_a_valid_phantom() {
        let spec = still(small_spec());
        let (vol, lm, _) = generate_phantom(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (mv, ml) = reflect_lr(&vol, &lm, &spec.lr_pairs).unwrap();
        assert_eq!(mv.data(), vol.data());
        for l in lm.iter() {
            assert_eq!(ml.get(&l.name).unwrap().position, l.position);
        }
    }

    #[test]
    fn cropping_marks_landmarks_absent() {
        let spec = PhantomSpec { crop_probability: 1.0, crop_mm: 60.0, ..small_spec() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut seen_absent = false;
        for _ in 0..10 {
            let (vol, lm, _) = generate_phantom(&spec, &mut rng).unwrap();
            for l in lm.iter() {
                if l.status == Status::Absent {
                    seen_absent = true;
                } else {
                    assert!(vol.grid().contains_world(l.position));
                }
            }
        }
        assert!(seen_absent);
    }

    #[test]
    fn split_counts() {
        assert_eq!(SplitCounts::proportional(221), SplitCounts { train: 170, val: 31, test: 20 });
        assert_eq!(SplitCounts::proportional(1), SplitCounts { train: 1, val: 0, test: 0 });
    }

    #[test]
    fn dataset_is_a_pure_function_of_the_seed() {
        let spec = PhantomSpec { dims: [24; 3], spacing: 4.0, ..PhantomSpec::default() };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let counts = SplitCounts { train: 3, val: 1, test: 1 };
        let ma = generate_dataset(&spec, counts, 42, a.path()).unwrap();
        let mb = generate_dataset(&spec, counts, 42, b.path()).unwrap();
        assert_eq!(ma.count(Split::Train), 3);
        assert_eq!(ma.count(Split::Test), 1);
        for (x, y) in ma.entries.iter().zip(&mb.entries) {
            assert_eq!(x.split, y.split);
            assert_eq!(fs::read(&x.volume).unwrap(), fs::read(&y.volume).unwrap());
            assert_eq!(fs::read(&x.landmarks).unwrap(), fs::read(&y.landmarks).unwrap());
        }
        let loaded = Manifest::load(a.path().join("manifest.txt")).unwrap();
        assert_eq!(loaded, ma);
        assert_eq!(load_volume(&loaded.entries[0].volume).unwrap().dims(), [24; 3]);
        let one = generate_dataset(&spec, SplitCounts::proportional(1), 1, a.path().join("one")).unwrap();
        assert_eq!(one.entries.len(), 1);
        assert_eq!(one.entries[0].split, Split::Train);
    }
}
