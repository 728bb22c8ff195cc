//! The two-pass detector: a coarse image-only pass, an atlas fit, and a fine
//! pass that also sees atlas-frame coordinates and only evaluates spherical
//! regions around the atlas-predicted landmark positions.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::atlas::{
    atlas_coordinate_channels, build_atlas, direct_atlas_correction, iterative_refine_fit, AffineTransform, Atlas,
    AtlasConfig, FitResult,
};
use crate::error::{Error, Result};
use crate::heatmap::{
    extract_detections, sample_training_patches, tile_inference, HeatmapSpec, HeatmapStack, PatchGeometry, Sphere,
    TileStats,
};
use crate::nnet::{
    load_weights, save_weights, train_model, AdamConfig, EpochStats, FcnModel, Patch, PatchSource, Schedule,
    TrainReport,
};
use crate::phantom::{Manifest, Split};
use crate::seeding;
use crate::volume::{
    load_landmarks, load_volume, normalize_intensities, pad_with_air, random_crop, reflect_lr, resample, Domain,
    Grid, LandmarkSet, Volume3D,
};

/// Everything that shapes a pipeline, serialisable as `key=value` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub pass0_spacing: f64,
    pub pass1_spacing: f64,
    /// Skip the second pass (the single-pass ablation).
    pub single_pass: bool,
    pub heatmap0: HeatmapSpec,
    pub heatmap1: HeatmapSpec,
    pub atlas: AtlasConfig,
    pub base_filters: usize,
    pub schedule0: Schedule,
    pub schedule1: Schedule,
    /// Maximum per-face crop/extension during training, mm.
    pub crop_mm: f64,
    /// Random left-right mirroring during pass-0 training.
    pub reflect: bool,
    /// Mirror pairs; `None` derives them from `left`/`right` in the names.
    pub lr_pairs: Option<Vec<(String, String)>>,
    /// Output voxels per tile edge.
    pub tile0: usize,
    pub tile1: usize,
    /// Restrict pass-1 evaluation to the atlas regions of interest.
    pub roi: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            pass0_spacing: 4.0,
            pass1_spacing: 2.0,
            single_pass: false,
            heatmap0: HeatmapSpec { sigma: 1.0, k: 1e3 },
            heatmap1: HeatmapSpec { sigma: 1.0, k: 1e6 },
            atlas: AtlasConfig::default(),
            base_filters: 12,
            schedule0: Schedule { epochs: 50, ..Schedule::default() },
            schedule1: Schedule { epochs: 200, ..Schedule::default() },
            crop_mm: 50.0,
            reflect: true,
            lr_pairs: None,
            tile0: 32,
            tile1: 24,
            roi: true,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

impl PipelineConfig {
    /// Pass 0 alone at 2 mm with atlas correction.
    pub fn single_pass_preset() -> Self {
        Self {
            pass0_spacing: 2.0,
            single_pass: true,
            ..Self::default()
        }
    }

    pub const KEYS: &'static [&'static str] = &[
        "pass0_spacing",
        "pass1_spacing",
        "single_pass",
        "sigma0",
        "k0",
        "sigma1",
        "k1",
        "d_atlas",
        "d_volume",
        "min_inliers",
        "base_filters",
        "epochs0",
        "epochs1",
        "batch_size",
        "lr",
        "crop_mm",
        "reflect",
        "lr_pairs",
        "tile0",
        "tile1",
        "roi",
    ];

    /// Sets one key. Returns `Ok(false)` for keys this config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "pass0_spacing" => self.pass0_spacing = parse(key, value)?,
            "pass1_spacing" => self.pass1_spacing = parse(key, value)?,
            "single_pass" => self.single_pass = parse(key, value)?,
            "sigma0" => self.heatmap0.sigma = parse(key, value)?,
            "k0" => self.heatmap0.k = parse(key, value)?,
            "sigma1" => self.heatmap1.sigma = parse(key, value)?,
            "k1" => self.heatmap1.k = parse(key, value)?,
            "d_atlas" => self.atlas.d_atlas = parse(key, value)?,
            "d_volume" => self.atlas.d_volume = parse(key, value)?,
            "min_inliers" => self.atlas.min_inliers = parse(key, value)?,
            "base_filters" => self.base_filters = parse(key, value)?,
            "epochs0" => self.schedule0.epochs = parse(key, value)?,
            "epochs1" => self.schedule1.epochs = parse(key, value)?,
            "batch_size" => {
                let b = parse(key, value)?;
                self.schedule0.batch_size = b;
                self.schedule1.batch_size = b;
            }
            "lr" => {
                let lr = parse(key, value)?;
                self.schedule0.adam.lr = lr;
                self.schedule1.adam.lr = lr;
            }
            "crop_mm" => self.crop_mm = parse(key, value)?,
            "reflect" => self.reflect = parse(key, value)?,
            "lr_pairs" => {
                self.lr_pairs = match value.trim() {
                    "auto" => None,
                    "" | "none" => Some(Vec::new()),
                    v => Some(
                        v.split(',')
                            .map(|p| {
                                p.split_once(':')
                                    .map(|(a, b)| (a.trim().to_string(), b.trim().to_string()))
                                    .ok_or_else(|| Error::Config(format!("bad lr pair {p:?}, want a:b")))
                            })
                            .collect::<Result<_>>()?,
                    ),
                }
            }
            "tile0" => self.tile0 = parse(key, value)?,
            "tile1" => self.tile1 = parse(key, value)?,
            "roi" => self.roi = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let pairs = match &self.lr_pairs {
            None => "auto".to_string(),
            Some(p) if p.is_empty() => "none".to_string(),
            Some(p) => p.iter().map(|(a, b)| format!("{a}:{b}")).collect::<Vec<_>>().join(","),
        };
        vec![
            ("pass0_spacing", self.pass0_spacing.to_string()),
            ("pass1_spacing", self.pass1_spacing.to_string()),
            ("single_pass", self.single_pass.to_string()),
            ("sigma0", self.heatmap0.sigma.to_string()),
            ("k0", self.heatmap0.k.to_string()),
            ("sigma1", self.heatmap1.sigma.to_string()),
            ("k1", self.heatmap1.k.to_string()),
            ("d_atlas", self.atlas.d_atlas.to_string()),
            ("d_volume", self.atlas.d_volume.to_string()),
            ("min_inliers", self.atlas.min_inliers.to_string()),
            ("base_filters", self.base_filters.to_string()),
            ("epochs0", self.schedule0.epochs.to_string()),
            ("epochs1", self.schedule1.epochs.to_string()),
            ("batch_size", self.schedule0.batch_size.to_string()),
            ("lr", self.schedule0.adam.lr.to_string()),
            ("crop_mm", self.crop_mm.to_string()),
            ("reflect", self.reflect.to_string()),
            ("lr_pairs", pairs),
            ("tile0", self.tile0.to_string()),
            ("tile1", self.tile1.to_string()),
            ("roi", self.roi.to_string()),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !pos(self.pass0_spacing) || !pos(self.pass1_spacing) || self.pass1_spacing > self.pass0_spacing {
            return Err(Error::Config(format!(
                "need 0 < pass1_spacing <= pass0_spacing, got {} and {}",
                self.pass1_spacing, self.pass0_spacing
            )));
        }
        self.heatmap0.validate()?;
        self.heatmap1.validate()?;
        self.atlas.validate()?;
        if self.base_filters == 0 || self.tile0 == 0 || self.tile1 == 0 {
            return Err(Error::Config("base_filters and tile sizes must be positive".into()));
        }
        for s in [&self.schedule0, &self.schedule1] {
            if s.epochs == 0 || s.batch_size == 0 || !pos(s.adam.lr) {
                return Err(Error::Config("epochs, batch_size and lr must be positive".into()));
            }
        }
        if !(self.crop_mm >= 0.0) {
            return Err(Error::Config("crop_mm must be non-negative".into()));
        }
        Ok(())
    }

    pub fn mirror_pairs(&self, names: &[String]) -> Vec<(String, String)> {
        if let Some(p) = &self.lr_pairs {
            return p.clone();
        }
        names
            .iter()
            .filter(|n| n.contains("left"))
            .filter_map(|n| {
                let m = n.replace("left", "right");
                names.contains(&m).then(|| (n.clone(), m))
            })
            .collect()
    }
}

/// Parse `key=value` lines (`#` comments allowed) into an ordered map.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// A scan with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Scan {
    pub volume: Volume3D,
    pub landmarks: LandmarkSet,
}

impl Scan {
    pub fn load(volume: impl AsRef<Path>, landmarks: impl AsRef<Path>) -> Result<Self> {
        Ok(Self {
            volume: load_volume(volume)?,
            landmarks: load_landmarks(landmarks)?,
        })
    }
}

pub fn load_scans(manifest: &Manifest, split: Split) -> Result<Vec<Scan>> {
    manifest
        .split(split)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|e| Scan::load(&e.volume, &e.landmarks))
        .collect()
}

/// Trained models, atlas and configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    pub model0: FcnModel<f32>,
    /// Absent in single-pass pipelines.
    pub model1: Option<FcnModel<f32>>,
    pub atlas: Atlas,
    /// Output channel order shared by both models.
    pub names: Vec<String>,
    pub config: PipelineConfig,
}

impl Pipeline {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let n = self.names.len();
        if self.model0.in_channels != 1 || self.model0.n_landmarks != n {
            return Err(Error::Shape("model0 must map 1 channel to one heatmap per landmark".into()));
        }
        match (&self.model1, self.config.single_pass) {
            (Some(m), false) if m.in_channels == 4 && m.n_landmarks == n => {}
            (None, true) => {}
            _ => return Err(Error::Shape("model1 must map 4 channels to one heatmap per landmark".into())),
        }
        if self.atlas.names() != self.names.as_slice() {
            return Err(Error::Shape("atlas and model landmark orders differ".into()));
        }
        Ok(())
    }

    /// Writes `model0.fcnw`, `model1.fcnw`, `atlas.lmk` and `pipeline.cfg`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_weights(&self.model0, dir.join("model0.fcnw"))?;
        if let Some(m) = &self.model1 {
            save_weights(m, dir.join("model1.fcnw"))?;
        }
        self.atlas.save(dir.join("atlas.lmk"))?;
        let mut cfg = String::new();
        for (k, v) in self.config.entries() {
            let _ = writeln!(cfg, "{k}={v}");
        }
        let _ = writeln!(cfg, "landmarks={}", self.names.join(","));
        let p = dir.join("pipeline.cfg");
        fs::write(&p, cfg).map_err(|e| Error::io(p, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let p = dir.join("pipeline.cfg");
        let kv = parse_kv(&fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)?;
        let mut config = PipelineConfig::default();
        let mut names = None;
        for (k, v) in &kv {
            if k == "landmarks" {
                names = Some(v.split(',').map(str::to_string).collect::<Vec<_>>());
            } else if !config.set(k, v)? {
                return Err(Error::Config(format!("unknown key {k:?} in {}", p.display())));
            }
        }
        let names = names.ok_or_else(|| Error::Config("pipeline.cfg lacks landmarks=".into()))?;
        let model1 = if config.single_pass { None } else { Some(load_weights(dir.join("model1.fcnw"))?) };
        let pipe = Self {
            model0: load_weights(dir.join("model0.fcnw"))?,
            model1,
            atlas: Atlas::load(dir.join("atlas.lmk"))?,
            names,
            config,
        };
        pipe.validate()?;
        Ok(pipe)
    }
}

/// Normalised and resampled to `spacing`, not yet padded.
pub fn prepare(vol: &Volume3D, spacing: f64) -> Result<Volume3D> {
    let v = match vol.domain() {
        Domain::Hu => normalize_intensities(vol),
        _ => vol.clone(),
    };
    if v.spacing() == [spacing; 3] {
        Ok(v)
    } else {
        resample(&v, [spacing; 3])
    }
}

/// A transform that only moves the volume centre onto the atlas centre.
pub fn centring_fit(grid: &Grid, atlas: &Atlas, note: &str) -> FitResult {
    let (lo, hi) = grid.extent();
    let c = atlas.centre();
    FitResult::fallback(AffineTransform::translation(std::array::from_fn(|a| c[a] - 0.5 * (lo[a] + hi[a]))), note)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pass0Output {
    /// Argmax detections before correction.
    pub raw: LandmarkSet,
    /// Atlas-corrected detections (equal to `raw` for low-confidence fits).
    pub corrected: LandmarkSet,
    pub stack: HeatmapStack,
    /// The fit handed on to pass 1.
    pub fit: FitResult,
    pub tiles: TileStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pass1Output {
    pub raw: LandmarkSet,
    pub landmarks: LandmarkSet,
    pub stack: HeatmapStack,
    /// Refit on pass-1 detections, if one succeeded.
    pub fit: Option<FitResult>,
    pub tiles: TileStats,
    pub restricted: bool,
}

fn fit_or_fallback(det: &LandmarkSet, atlas: &Atlas, cfg: &AtlasConfig, grid: &Grid) -> Result<FitResult> {
    match iterative_refine_fit(det, atlas, cfg) {
        Ok(f) => Ok(f),
        Err(e @ (Error::InsufficientLandmarks { .. } | Error::Degenerate(_))) => {
            Ok(centring_fit(grid, atlas, &format!("no fit: {e}")))
        }
        Err(e) => Err(e),
    }
}

fn correct(det: &LandmarkSet, stack: &HeatmapStack, atlas: &Atlas, fit: &FitResult, cfg: &AtlasConfig) -> Result<Option<LandmarkSet>> {
    if fit.low_confidence {
        return Ok(None);
    }
    match direct_atlas_correction(det, stack, atlas, fit, cfg) {
        Ok(c) => Ok(Some(c)),
        Err(Error::EmptyRegion(_) | Error::Degenerate(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Coarse pass: whole-volume inference, fit, correction, and a refit on
/// the corrected detections that becomes the transform for pass 1.
pub fn run_pass0(vol: &Volume3D, pipe: &Pipeline) -> Result<Pass0Output> {
    let cfg = &pipe.config;
    let img = pad_with_air(&prepare(vol, cfg.pass0_spacing)?, pipe.model0.margin());
    let (stack, tiles) = tile_inference(&pipe.model0, &[img], &pipe.names, &cfg.heatmap0, cfg.tile0, None)?;
    pass0_from_stack(stack, tiles, pipe)
}

/// Everything in [`run_pass0`] after inference.
pub fn pass0_from_stack(stack: HeatmapStack, tiles: TileStats, pipe: &Pipeline) -> Result<Pass0Output> {
    let cfg = &pipe.config;
    let raw = extract_detections(&stack)?;
    let mut fit = fit_or_fallback(&raw, &pipe.atlas, &cfg.atlas, &stack.grid)?;
    let corrected = match correct(&raw, &stack, &pipe.atlas, &fit, &cfg.atlas)? {
        Some(c) => {
            if let Ok(refit) = iterative_refine_fit(&c, &pipe.atlas, &cfg.atlas) {
                if !refit.low_confidence {
                    fit = refit;
                }
            }
            c
        }
        None => {
            fit.low_confidence = true;
            if fit.transform.invert().is_err() {
                fit = centring_fit(&stack.grid, &pipe.atlas, "pass-0 fit not invertible");
            }
            raw.clone()
        }
    };
    Ok(Pass0Output { raw, corrected, stack, fit, tiles })
}

/// Spheres of radius `d_volume` around the atlas landmarks mapped into the
/// volume, or `None` when the whole volume has to be evaluated.
pub fn pass1_rois(pipe: &Pipeline, fit0: &FitResult) -> Result<Option<Vec<Sphere>>> {
    if !pipe.config.roi || fit0.low_confidence {
        return Ok(None);
    }
    let inv = fit0.transform.invert()?;
    Ok(Some(
        pipe.atlas
            .positions()
            .iter()
            .map(|&p| Sphere { centre: inv.apply(p), radius: pipe.config.atlas.d_volume })
            .collect(),
    ))
}

/// Model-1 input channels for `vol`: the padded image and the three atlas
/// coordinate channels under `fit0`.
pub fn pass1_inputs(vol: &Volume3D, pipe: &Pipeline, fit0: &FitResult, margin: usize) -> Result<[Volume3D; 4]> {
    let img = pad_with_air(&prepare(vol, pipe.config.pass1_spacing)?, margin);
    let [cx, cy, cz] = atlas_coordinate_channels(img.grid(), fit0, &pipe.atlas)?;
    Ok([img, cx, cy, cz])
}

/// Fine pass on image plus atlas coordinates. With a confident pass-0 fit
/// only voxels within `d_volume` of the mapped atlas landmarks are
/// evaluated; otherwise the whole volume is.
pub fn run_pass1(vol: &Volume3D, pipe: &Pipeline, fit0: &FitResult) -> Result<Pass1Output> {
    let cfg = &pipe.config;
    let model = pipe
        .model1
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("single-pass pipeline has no pass-1 model".into()))?;
    let inputs = pass1_inputs(vol, pipe, fit0, model.margin())?;
    let spheres = pass1_rois(pipe, fit0)?;
    let (stack, tiles) = tile_inference(model, &inputs, &pipe.names, &cfg.heatmap1, cfg.tile1, spheres.as_deref())?;
    pass1_from_stack(stack, tiles, spheres.is_some(), pipe, fit0)
}

/// Everything in [`run_pass1`] after inference.
pub fn pass1_from_stack(
    stack: HeatmapStack,
    tiles: TileStats,
    restricted: bool,
    pipe: &Pipeline,
    fit0: &FitResult,
) -> Result<Pass1Output> {
    let cfg = &pipe.config;
    let raw = match extract_detections(&stack) {
        Ok(r) => r,
        Err(Error::EmptyRegion(_)) => {
            let mut r = LandmarkSet::new();
            for n in &pipe.names {
                r.push(crate::volume::Landmark::absent(n.clone()))?;
            }
            r
        }
        Err(e) => return Err(e),
    };
    let refit = match iterative_refine_fit(&raw, &pipe.atlas, &cfg.atlas) {
        Ok(f) => Some(f),
        Err(Error::InsufficientLandmarks { .. } | Error::Degenerate(_)) => None,
        Err(e) => return Err(e),
    };
    let mut landmarks = None;
    for f in refit.iter().chain(std::iter::once(fit0)) {
        if let Some(c) = correct(&raw, &stack, &pipe.atlas, f, &cfg.atlas)? {
            landmarks = Some(c);
            break;
        }
    }
    Ok(Pass1Output {
        landmarks: landmarks.unwrap_or_else(|| raw.clone()),
        raw,
        stack,
        fit: refit,
        tiles,
        restricted,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub landmarks: LandmarkSet,
    pub pass0: Pass0Output,
    pub pass1: Option<Pass1Output>,
    /// Wall-clock seconds per stage.
    pub timings: Vec<(&'static str, f64)>,
}

impl Detection {
    /// Deterministic text summary: fits, tile counts and final landmarks.
    pub fn report(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "== pass 0 fit ==\n{}", self.pass0.fit.report());
        let t = self.pass0.tiles;
        let _ = writeln!(s, "pass 0 tiles: {}/{} ({} voxels)", t.tiles_evaluated, t.tiles_total, t.voxels_evaluated);
        if let Some(p1) = &self.pass1 {
            match &p1.fit {
                Some(f) => {
                    let _ = writeln!(s, "== pass 1 fit ==\n{}", f.report());
                }
                None => {
                    let _ = writeln!(s, "== pass 1 fit ==\nnone");
                }
            }
            let t = p1.tiles;
            let _ = writeln!(
                s,
                "pass 1 tiles: {}/{} ({} voxels, restricted: {})",
                t.tiles_evaluated, t.tiles_total, t.voxels_evaluated, p1.restricted
            );
        }
        let _ = write!(s, "== landmarks ==\n{}", self.landmarks.to_text(None));
        s
    }

    pub fn timing_report(&self) -> String {
        self.timings.iter().map(|(k, v)| format!("{k}: {v:.3}s\n")).collect()
    }
}

/// Both passes (or pass 0 alone for single-pass pipelines).
pub fn detect(vol: &Volume3D, pipe: &Pipeline) -> Result<Detection> {
    let t0 = Instant::now();
    let pass0 = run_pass0(vol, pipe)?;
    let mut timings = vec![("pass0", t0.elapsed().as_secs_f64())];
    let (landmarks, pass1) = if pipe.config.single_pass {
        (pass0.corrected.clone(), None)
    } else {
        let t1 = Instant::now();
        let p1 = run_pass1(vol, pipe, &pass0.fit)?;
        timings.push(("pass1", t1.elapsed().as_secs_f64()));
        (p1.landmarks.clone(), Some(p1))
    };
    timings.push(("total", t0.elapsed().as_secs_f64()));
    Ok(Detection { landmarks, pass0, pass1, timings })
}

/// Per-epoch patch source with random mirroring and cropping. With `fits`,
/// each scan's input gains the atlas coordinate channels of its own fit.
struct AugmentedSource<'a> {
    scans: &'a [Scan],
    names: &'a [String],
    spec: HeatmapSpec,
    spacing: f64,
    margin: usize,
    crop_mm: f64,
    pairs: Option<Vec<(String, String)>>,
    fits: Option<(&'a [FitResult], &'a Atlas)>,
}

impl AugmentedSource<'_> {
    fn scan_patches(&self, i: usize, seed: u64, augment: bool) -> Result<Vec<Patch<f32>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scan = &self.scans[i];
        let (mut vol, mut lm) = (scan.volume.clone(), scan.landmarks.clone());
        if augment {
            if let Some(p) = &self.pairs {
                if rng.random_bool(0.5) {
                    (vol, lm) = reflect_lr(&vol, &lm, p)?;
                }
            }
            if self.crop_mm > 0.0 {
                (vol, lm) = random_crop(&vol, &lm, self.crop_mm, &mut rng)?;
            }
        }
        let img = pad_with_air(&prepare(&vol, self.spacing)?, self.margin);
        let mut inputs = vec![img];
        if let Some((fits, atlas)) = self.fits {
            let ch = atlas_coordinate_channels(inputs[0].grid(), &fits[i], atlas)?;
            inputs.extend(ch);
        }
        sample_training_patches(&inputs, &lm, self.names, &self.spec, PatchGeometry { target: 3, margin: self.margin }, &mut rng)
    }

    fn all(&self, rng: &mut dyn RngCore, augment: bool) -> Result<Vec<Patch<f32>>> {
        let seeds: Vec<u64> = (0..self.scans.len()).map(|_| rng.next_u64()).collect();
        let per: Vec<Vec<Patch<f32>>> = seeds
            .par_iter()
            .enumerate()
            .map(|(i, &s)| self.scan_patches(i, s, augment))
            .collect::<Result<_>>()?;
        Ok(per.into_iter().flatten().collect())
    }
}

impl PatchSource<f32> for AugmentedSource<'_> {
    fn epoch_patches(&mut self, _epoch: usize, rng: &mut dyn RngCore) -> Result<Vec<Patch<f32>>> {
        self.all(rng, true)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingOutcome {
    pub pipeline: Pipeline,
    pub report0: TrainReport,
    pub report1: Option<TrainReport>,
    /// Pass-0 fits of the training scans, then the validation scans.
    pub fits: Vec<FitResult>,
}

/// Progress messages from [`train_pipeline`].
pub enum TrainEvent<'a> {
    Stage(&'a str),
    Epoch(usize, &'a EpochStats),
}

/// Atlas, then pass-0 model, then pass-0 fits of every scan, then the
/// pass-1 model on coordinate channels from those fits.
pub fn train_pipeline(
    train: &[Scan],
    val: &[Scan],
    cfg: &PipelineConfig,
    seed: u64,
    mut progress: Option<&mut dyn FnMut(TrainEvent<'_>)>,
) -> Result<TrainingOutcome> {
    let mut forward = |e: TrainEvent<'_>| {
        if let Some(p) = progress.as_mut() {
            p(e);
        }
    };
    let (mut pipeline, report0) = train_pass0(train, val, cfg, seed, Some(&mut forward))?;
    if cfg.single_pass {
        return Ok(TrainingOutcome { pipeline, report0, report1: None, fits: Vec::new() });
    }
    let (report1, fits) = train_pass1(&mut pipeline, train, val, seed, Some(&mut forward))?;
    Ok(TrainingOutcome { pipeline, report0, report1: Some(report1), fits })
}

fn checked_sets(train: &[Scan], val: &[Scan]) -> Result<()> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument("training and validation scans are both required".into()));
    }
    Ok(())
}

/// Builds the atlas and trains the first-pass model. The returned pipeline
/// has no second-pass model yet.
pub fn train_pass0(
    train: &[Scan],
    val: &[Scan],
    cfg: &PipelineConfig,
    seed: u64,
    mut progress: Option<&mut dyn FnMut(TrainEvent<'_>)>,
) -> Result<(Pipeline, TrainReport)> {
    cfg.validate()?;
    checked_sets(train, val)?;
    let mut emit = |e: TrainEvent<'_>| {
        if let Some(p) = progress.as_mut() {
            p(e);
        }
    };
    emit(TrainEvent::Stage("atlas"));
    let usable: Vec<LandmarkSet> = train
        .iter()
        .map(|s| s.landmarks.clone())
        .filter(|l| l.visible().count() >= cfg.atlas.min_inliers)
        .collect();
    let atlas = build_atlas(&usable)?;
    let names = atlas.names().to_vec();
    let n = names.len();

    emit(TrainEvent::Stage("pass0"));
    let mut init = seeding::substream(seed, "model0-init");
    let mut model0 = FcnModel::<f32>::new(1, n, cfg.base_filters, &mut init)?;
    let margin = model0.margin();
    let pairs = (cfg.reflect).then(|| cfg.mirror_pairs(&names)).filter(|p| !p.is_empty());
    let mut src0 = AugmentedSource {
        scans: train,
        names: &names,
        spec: cfg.heatmap0,
        spacing: cfg.pass0_spacing,
        margin,
        crop_mm: cfg.crop_mm,
        pairs,
        fits: None,
    };
    let val0 = AugmentedSource { scans: val, crop_mm: 0.0, pairs: None, ..src0.clone_shallow() }
        .all(&mut seeding::substream(seed, "val0-patches"), false)?;
    let report0 = {
        let mut cb = |s: &EpochStats| emit(TrainEvent::Epoch(0, s));
        train_model(&mut model0, &mut src0, &val0, &cfg.schedule0, &mut seeding::substream(seed, "train0"), Some(&mut cb))?
    };
    let pipeline = Pipeline { model0, model1: None, atlas, names, config: cfg.clone() };
    Ok((pipeline, report0))
}

/// Trains the second-pass model on top of an existing first pass, using the
/// pipeline's own configuration. Returns the report and the first-pass fits
/// of the training scans followed by the validation scans.
pub fn train_pass1(
    pipeline: &mut Pipeline,
    train: &[Scan],
    val: &[Scan],
    seed: u64,
    mut progress: Option<&mut dyn FnMut(TrainEvent<'_>)>,
) -> Result<(TrainReport, Vec<FitResult>)> {
    checked_sets(train, val)?;
    let cfg = pipeline.config.clone();
    cfg.validate()?;
    let mut emit = |e: TrainEvent<'_>| {
        if let Some(p) = progress.as_mut() {
            p(e);
        }
    };
    emit(TrainEvent::Stage("pass0-fits"));
    let fits: Vec<FitResult> = train
        .iter()
        .chain(val)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|s| run_pass0(&s.volume, &*pipeline).map(|o| o.fit))
        .collect::<Result<_>>()?;
    let (fit_train, fit_val) = fits.split_at(train.len());

    emit(TrainEvent::Stage("pass1"));
    let n = pipeline.names.len();
    let margin = pipeline.model0.margin();
    let mut init = seeding::substream(seed, "model1-init");
    let mut model1 = FcnModel::<f32>::new(4, n, cfg.base_filters, &mut init)?;
    let mut src1 = AugmentedSource {
        scans: train,
        names: &pipeline.names,
        spec: cfg.heatmap1,
        spacing: cfg.pass1_spacing,
        margin,
        crop_mm: cfg.crop_mm,
        pairs: None,
        fits: Some((fit_train, &pipeline.atlas)),
    };
    let val1 = AugmentedSource { scans: val, crop_mm: 0.0, fits: Some((fit_val, &pipeline.atlas)), ..src1.clone_shallow() }
        .all(&mut seeding::substream(seed, "val1-patches"), false)?;
    let report1 = {
        let mut cb = |s: &EpochStats| emit(TrainEvent::Epoch(1, s));
        train_model(&mut model1, &mut src1, &val1, &cfg.schedule1, &mut seeding::substream(seed, "train1"), Some(&mut cb))?
    };
    drop(src1);
    pipeline.model1 = Some(model1);
    pipeline.config.single_pass = false;
    Ok((report1, fits))
}

impl<'a> AugmentedSource<'a> {
    fn clone_shallow(&self) -> Self {
        Self {
            scans: self.scans,
            names: self.names,
            spec: self.spec,
            spacing: self.spacing,
            margin: self.margin,
            crop_mm: self.crop_mm,
            pairs: self.pairs.clone(),
            fits: self.fits,
        }
    }
}

/// Schedule with the default Adam settings.
pub fn schedule(epochs: usize, batch_size: usize) -> Schedule {
    Schedule { epochs, batch_size, adam: AdamConfig::default() }
}
