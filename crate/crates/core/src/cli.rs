//! Command-line front end: `phantom`, `train`, `detect`, `evaluate`, `sweep`.
//!
//! Configuration is `key=value` text. A `--config` file is read first and
//! `--set key=value` flags override it; every key is checked against the
//! schema below and the merged result is written to `run.cfg` in the output
//! directory.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::atlas::{build_atlas, iterative_refine_fit, Atlas, AtlasConfig};
use crate::cascade::{
    detect, load_scans, parse_kv, run_pass0, train_pass0, train_pass1, train_pipeline, Pipeline, PipelineConfig,
    Scan, TrainEvent,
};
use crate::error::{Error, Result};
use crate::evalkit::{
    aggregate_metrics, format_breakdown, format_table, localisation_errors, per_landmark_breakdown, render_mip,
    ScanErrors,
};
use crate::nnet::TrainReport;
use crate::phantom::{generate_dataset, Manifest, PhantomSpec, Split, SplitCounts};
use crate::volume::{load_landmarks, load_volume, save_landmarks, LandmarkSet};

#[derive(Debug, Parser)]
#[command(name = "autocontext", version, about = "Anatomical landmark detection with atlas location autocontext")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// key=value configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Override one configuration key, e.g. `--set d_atlas=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom dataset and its manifest.
    Phantom {
        /// Total scans, split 170:31:20 into train/val/test.
        #[arg(long, default_value_t = 221, conflicts_with_all = ["train", "val", "test"])]
        count: usize,
        #[arg(long, requires_all = ["val", "test"])]
        train: Option<usize>,
        #[arg(long, requires_all = ["train", "test"])]
        val: Option<usize>,
        #[arg(long, requires_all = ["train", "val"])]
        test: Option<usize>,
    },
    /// Train the first pass, the second pass, or the full pipeline.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = Stage::Full)]
        stage: Stage,
        /// Existing bundle whose first pass is kept (`--stage pass1`).
        #[arg(long, required_if_eq("stage", "pass1"))]
        bundle: Option<PathBuf>,
    },
    /// Detect landmarks in one volume or in every scan of a manifest split.
    Detect {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
        input: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Compare predicted landmark files to references.
    Evaluate {
        /// Directory of `<scan>.lmk` predictions, or a single file with `--reference`.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, conflicts_with = "reference", required_unless_present = "reference")]
        manifest: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Also write axial, coronal and sagittal MIPs per scan.
        #[arg(long)]
        mip: bool,
    },
    /// Sweep the inlier threshold and report the mean mapping error per value.
    Sweep {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "train")]
        split: Split,
        /// Fit first-pass detections of this bundle instead of the ground truth.
        #[arg(long)]
        bundle: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Pass0,
    Pass1,
    Full,
}

/// Keys owned by the front end rather than the pipeline.
pub const RUN_KEYS: &[&str] = &[
    "phantom.rotation_deg",
    "phantom.scale_min",
    "phantom.scale_max",
    "phantom.translation_mm",
    "phantom.noise_hu",
    "phantom.crop_probability",
    "phantom.crop_mm",
    "phantom.size",
    "phantom.spacing",
    "threshold_mm",
    "sweep_values",
];

/// Merged configuration of one invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub pipeline: PipelineConfig,
    pub phantom: PhantomSpec,
    pub threshold_mm: f64,
    pub sweep_values: Vec<f64>,
    /// The explicitly given keys after merging, for layering onto a bundle.
    pub overrides: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            pipeline: PipelineConfig::default(),
            phantom: PhantomSpec::default(),
            threshold_mm: 4.0,
            sweep_values: vec![5.0, 10.0, 20.0],
            overrides: BTreeMap::new(),
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

impl RunConfig {
    /// Config file (if any) then `KEY=VALUE` overrides.
    pub fn from_sources(file: Option<&Path>, sets: &[String], seed: u64) -> Result<Self> {
        let mut merged = match file {
            Some(p) => parse_kv(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
            None => BTreeMap::new(),
        };
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
            merged.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut cfg = RunConfig { seed, ..Default::default() };
        for (k, v) in &merged {
            cfg.set(k, v)?;
        }
        cfg.pipeline.validate()?;
        cfg.phantom.validate()?;
        cfg.overrides = merged;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.pipeline.set(key, value)? {
            return Ok(());
        }
        let p = &mut self.phantom;
        match key {
            "phantom.rotation_deg" => p.rotation_deg = num(key, value)?,
            "phantom.scale_min" => p.scale_range.0 = num(key, value)?,
            "phantom.scale_max" => p.scale_range.1 = num(key, value)?,
            "phantom.translation_mm" => p.translation_mm = num(key, value)?,
            "phantom.noise_hu" => p.noise_hu = num(key, value)?,
            "phantom.crop_probability" => p.crop_probability = num(key, value)?,
            "phantom.crop_mm" => p.crop_mm = num(key, value)?,
            "phantom.size" => p.dims = [num(key, value)?; 3],
            "phantom.spacing" => p.spacing = num(key, value)?,
            "threshold_mm" => {
                self.threshold_mm = num(key, value)?;
                if !(self.threshold_mm > 0.0) {
                    return Err(Error::Config("threshold_mm must be positive".into()));
                }
            }
            "sweep_values" => {
                self.sweep_values = value.split(',').map(|v| num(key, v)).collect::<Result<_>>()?;
                if self.sweep_values.is_empty() || self.sweep_values.iter().any(|v| !(*v > 0.0)) {
                    return Err(Error::Config("sweep_values must be positive".into()));
                }
            }
            _ => return Err(Error::Config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    /// Full effective configuration as `key=value` lines.
    pub fn to_text(&self) -> String {
        let mut s = format!("seed={}\n", self.seed);
        for (k, v) in self.pipeline.entries() {
            let _ = writeln!(s, "{k}={v}");
        }
        let p = &self.phantom;
        let vals = [
            p.rotation_deg.to_string(),
            p.scale_range.0.to_string(),
            p.scale_range.1.to_string(),
            p.translation_mm.to_string(),
            p.noise_hu.to_string(),
            p.crop_probability.to_string(),
            p.crop_mm.to_string(),
            p.dims[0].to_string(),
            p.spacing.to_string(),
            self.threshold_mm.to_string(),
            self.sweep_values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
        ];
        for (k, v) in RUN_KEYS.iter().zip(vals) {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// A bundle's configuration with this run's explicit pipeline keys on top.
    pub fn layer_onto(&self, base: &PipelineConfig) -> Result<PipelineConfig> {
        let mut cfg = base.clone();
        for (k, v) in &self.overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            e => Failure::Runtime(e.to_string()),
        }
    }
}

fn progress(cmd: &str, msg: impl AsRef<str>) {
    eprintln!("[{cmd}] {}", msg.as_ref());
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write(p: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    fs::write(p, text).map_err(|e| Error::io(p, e))
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "scan".into())
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            2
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            1
        }
    }
}

fn execute(cli: Cli) -> std::result::Result<(), Failure> {
    let c = &cli.common;
    let cfg = RunConfig::from_sources(c.config.as_deref(), &c.set, c.seed)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = c.jobs {
        if j == 0 {
            return Err(Failure::Usage("--jobs must be at least 1".into()));
        }
        pool = pool.num_threads(j);
    }
    let pool = pool.build().map_err(|e| Failure::Runtime(e.to_string()))?;
    create_dir(&c.out)?;
    write(&c.out.join("run.cfg"), cfg.to_text())?;
    pool.install(|| dispatch(&cli.command, &cfg, &c.out)).map_err(Failure::from)
}

fn dispatch(cmd: &Command, cfg: &RunConfig, out: &Path) -> Result<()> {
    match cmd {
        Command::Phantom { count, train, val, test } => {
            let counts = match (train, val, test) {
                (Some(a), Some(b), Some(c)) => SplitCounts { train: *a, val: *b, test: *c },
                _ => SplitCounts::proportional(*count),
            };
            cmd_phantom(cfg, counts, out)
        }
        Command::Train { manifest, stage, bundle } => cmd_train(cfg, manifest, *stage, bundle.as_deref(), out),
        Command::Detect { bundle, input, manifest, split } => {
            cmd_detect(cfg, bundle, input.as_deref(), manifest.as_deref(), *split, out)
        }
        Command::Evaluate { pred, manifest, reference, split, mip } => {
            cmd_evaluate(cfg, pred, manifest.as_deref(), reference.as_deref(), *split, *mip, out)
        }
        Command::Sweep { manifest, split, bundle } => cmd_sweep(cfg, manifest, *split, bundle.as_deref(), out),
    }
}

pub fn cmd_phantom(cfg: &RunConfig, counts: SplitCounts, out: &Path) -> Result<()> {
    progress(
        "phantom",
        format!("generating train={} val={} test={} seed={}", counts.train, counts.val, counts.test, cfg.seed),
    );
    let m = generate_dataset(&cfg.phantom, counts, cfg.seed, out)?;
    progress("phantom", format!("wrote {} scans to {}", m.entries.len(), out.join("manifest.txt").display()));
    Ok(())
}

fn report_text(pass: usize, r: &TrainReport) -> String {
    let mut s = format!("# pass {pass}: best epoch {} val loss {:e}\n", r.best_epoch, r.best_val_loss);
    for e in &r.epochs {
        let _ = writeln!(s, "pass={pass} epoch={} train_loss={:e} val_loss={:e} patches={}", e.epoch, e.train_loss, e.val_loss, e.patches);
    }
    s
}

pub fn cmd_train(cfg: &RunConfig, manifest: &Path, stage: Stage, bundle: Option<&Path>, out: &Path) -> Result<()> {
    let m = Manifest::load(manifest)?;
    let train = load_scans(&m, Split::Train)?;
    let val = load_scans(&m, Split::Val)?;
    progress("train", format!("loaded train={} val={}", train.len(), val.len()));
    let mut log = |e: TrainEvent<'_>| match e {
        TrainEvent::Stage(s) => progress("train", format!("stage {s}")),
        TrainEvent::Epoch(p, s) => progress(
            "train",
            format!("pass={p} epoch={} train_loss={:.4e} val_loss={:.4e} patches={}", s.epoch, s.train_loss, s.val_loss, s.patches),
        ),
    };
    let (pipeline, text) = match stage {
        Stage::Full => {
            let o = train_pipeline(&train, &val, &cfg.pipeline, cfg.seed, Some(&mut log))?;
            let mut text = report_text(0, &o.report0);
            if let Some(r) = &o.report1 {
                text += &report_text(1, r);
            }
            (o.pipeline, text)
        }
        Stage::Pass0 => {
            let mut c = cfg.pipeline.clone();
            c.single_pass = true;
            let (p, r) = train_pass0(&train, &val, &c, cfg.seed, Some(&mut log))?;
            (p, report_text(0, &r))
        }
        Stage::Pass1 => {
            let dir = bundle.ok_or_else(|| Error::Config("--stage pass1 needs --bundle".into()))?;
            let mut p = Pipeline::load(dir)?;
            p.config = cfg.layer_onto(&p.config)?;
            let (r, _) = train_pass1(&mut p, &train, &val, cfg.seed, Some(&mut log))?;
            (p, report_text(1, &r))
        }
    };
    pipeline.save(out)?;
    write(&out.join("train_report.txt"), text)?;
    progress("train", format!("saved bundle to {}", out.display()));
    Ok(())
}

fn detect_one(pipe: &Pipeline, vol_path: &Path, out: &Path) -> Result<()> {
    let vol = load_volume(vol_path)?;
    let d = detect(&vol, pipe)?;
    let name = stem(vol_path);
    save_landmarks(&d.landmarks, out.join(format!("{name}.lmk")), Some("frame: world"))?;
    write(&out.join(format!("{name}.fit.txt")), d.report())?;
    let t: Vec<String> = d.timings.iter().map(|(k, v)| format!("{k}={v:.3}s")).collect();
    progress("detect", format!("{name} {}", t.join(" ")));
    Ok(())
}

pub fn cmd_detect(
    cfg: &RunConfig,
    bundle: &Path,
    input: Option<&Path>,
    manifest: Option<&Path>,
    split: Split,
    out: &Path,
) -> Result<()> {
    let mut pipe = Pipeline::load(bundle)?;
    pipe.config = cfg.layer_onto(&pipe.config)?;
    pipe.validate()?;
    match (input, manifest) {
        (Some(p), _) => detect_one(&pipe, p, out),
        (None, Some(m)) => {
            let m = Manifest::load(m)?;
            let entries: Vec<_> = m.split(split).collect();
            progress("detect", format!("{} scans in split {split}", entries.len()));
            entries.par_iter().try_for_each(|e| detect_one(&pipe, &e.volume, out))
        }
        (None, None) => Err(Error::Config("detect needs --input or --manifest".into())),
    }
}

pub fn cmd_evaluate(
    cfg: &RunConfig,
    pred: &Path,
    manifest: Option<&Path>,
    reference: Option<&Path>,
    split: Split,
    mip: bool,
    out: &Path,
) -> Result<()> {
    // (scan name, prediction, reference, volume path)
    let mut cases: Vec<(String, LandmarkSet, LandmarkSet, Option<PathBuf>)> = Vec::new();
    match (manifest, reference) {
        (_, Some(r)) => cases.push((stem(pred), load_landmarks(pred)?, load_landmarks(r)?, None)),
        (Some(m), None) => {
            for e in Manifest::load(m)?.split(split) {
                let name = stem(&e.volume);
                let p = load_landmarks(pred.join(format!("{name}.lmk")))?;
                cases.push((name, p, load_landmarks(&e.landmarks)?, Some(e.volume.clone())));
            }
        }
        (None, None) => return Err(Error::Config("evaluate needs --manifest or --reference".into())),
    }
    let errors: Vec<ScanErrors> = cases.iter().map(|(_, p, r, _)| localisation_errors(p, r)).collect();
    let summary = aggregate_metrics(&errors, cfg.threshold_mm)?;
    let mut metrics = format_table(&[("prediction", summary)]);
    metrics.push('\n');
    metrics += &summary.to_kv("");
    write(&out.join("metrics.txt"), metrics)?;
    write(
        &out.join("breakdown.txt"),
        format_breakdown(&per_landmark_breakdown(&errors, cfg.threshold_mm), cfg.threshold_mm),
    )?;
    let mut csv = String::from("scan,landmark,error_mm\n");
    for ((name, ..), errs) in cases.iter().zip(&errors) {
        for (lm, e) in errs {
            let _ = writeln!(csv, "{name},{lm},{e}");
        }
    }
    write(&out.join("errors.csv"), csv)?;
    if mip {
        for (name, p, r, vol) in &cases {
            let Some(v) = vol else { continue };
            let vol = load_volume(v)?;
            for (axis, tag) in ["x", "y", "z"].iter().enumerate() {
                render_mip(&vol, p, r, axis)?.save_ppm(out.join(format!("{name}_mip_{tag}.ppm")))?;
            }
        }
    }
    progress(
        "evaluate",
        format!(
            "scans={} mean={:.3} median={:.3} max={:.3} over_{}mm={:.2}%",
            summary.scans, summary.mean, summary.median, summary.max, cfg.threshold_mm, summary.percent_over
        ),
    );
    Ok(())
}

/// Mean over the reference-visible atlas landmarks of the distance between
/// the inverse-mapped atlas position and the reference.
pub fn mapping_error(fit: &crate::atlas::FitResult, atlas: &Atlas, reference: &LandmarkSet) -> Result<f64> {
    let inv = fit.transform.invert()?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for lm in reference.visible() {
        if let Some(a) = atlas.get(&lm.name) {
            let p = inv.apply(a);
            let g = lm.position;
            sum += ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2) + (p[2] - g[2]).powi(2)).sqrt();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InsufficientLandmarks { needed: 1, found: 0 });
    }
    Ok(sum / n as f64)
}

/// Mean mapping error per threshold; scans whose fit fails are counted
/// separately. Returns `(d_atlas, mean error, failures)`.
pub fn sweep_d_atlas(
    detections: &[LandmarkSet],
    references: &[LandmarkSet],
    atlas: &Atlas,
    base: &AtlasConfig,
    values: &[f64],
) -> Vec<(f64, f64, usize)> {
    values
        .iter()
        .map(|&d| {
            let cfg = AtlasConfig { d_atlas: d, ..*base };
            let errs: Vec<Option<f64>> = detections
                .par_iter()
                .zip(references)
                .map(|(det, r)| iterative_refine_fit(det, atlas, &cfg).and_then(|f| mapping_error(&f, atlas, r)).ok())
                .collect();
            let ok: Vec<f64> = errs.iter().flatten().copied().collect();
            let mean = if ok.is_empty() { f64::INFINITY } else { ok.iter().sum::<f64>() / ok.len() as f64 };
            (d, mean, errs.len() - ok.len())
        })
        .collect()
}

/// Index of the lowest error; ties go to the smallest threshold.
pub fn best_sweep_value(rows: &[(f64, f64, usize)]) -> Option<usize> {
    (0..rows.len()).min_by(|&a, &b| {
        rows[a].1.total_cmp(&rows[b].1).then(rows[a].0.total_cmp(&rows[b].0))
    })
}

pub fn cmd_sweep(cfg: &RunConfig, manifest: &Path, split: Split, bundle: Option<&Path>, out: &Path) -> Result<()> {
    let m = Manifest::load(manifest)?;
    let scans: Vec<Scan> = load_scans(&m, split)?;
    let references: Vec<LandmarkSet> = scans.iter().map(|s| s.landmarks.clone()).collect();
    let (atlas, detections, base) = match bundle {
        Some(b) => {
            let mut pipe = Pipeline::load(b)?;
            pipe.config = cfg.layer_onto(&pipe.config)?;
            progress("sweep", format!("running pass 0 on {} scans", scans.len()));
            let det = scans
                .par_iter()
                .map(|s| run_pass0(&s.volume, &pipe).map(|o| o.raw))
                .collect::<Result<Vec<_>>>()?;
            (pipe.atlas.clone(), det, pipe.config.atlas)
        }
        None => {
            let usable: Vec<LandmarkSet> = references
                .iter()
                .filter(|l| l.visible().count() >= cfg.pipeline.atlas.min_inliers)
                .cloned()
                .collect();
            (build_atlas(&usable)?, references.clone(), cfg.pipeline.atlas)
        }
    };
    let rows = sweep_d_atlas(&detections, &references, &atlas, &base, &cfg.sweep_values);
    let mut text = String::from("d_atlas_mm mean_mapping_error_mm failures\n");
    for (d, e, f) in &rows {
        let _ = writeln!(text, "{d} {e:.6} {f}");
        progress("sweep", format!("d_atlas={d} mean_mapping_error={e:.6} failures={f}"));
    }
    if let Some(i) = best_sweep_value(&rows) {
        let _ = writeln!(text, "best d_atlas={}", rows[i].0);
    }
    write(&out.join("sweep.txt"), text)?;
    Ok(())
}
