//! Localisation error metrics, per-landmark failure counts, report tables
//! and maximum intensity projection images.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{Domain, LandmarkSet, Status, Volume3D, HU_SCALE};

/// Per-landmark errors of one scan, in reference order. A landmark visible
/// in the reference but absent from the prediction has error `+inf`.
pub type ScanErrors = Vec<(String, f64)>;

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}

/// World-mm distances for landmarks visible in the reference and not
/// uncertain in the prediction.
pub fn localisation_errors(pred: &LandmarkSet, reference: &LandmarkSet) -> ScanErrors {
    let mut out = Vec::new();
    for r in reference.iter().filter(|r| r.status == Status::Visible) {
        match pred.get(&r.name).map(|p| (p.status, p.position)) {
            Some((Status::Visible, p)) => out.push((r.name.clone(), dist(p, r.position))),
            Some((Status::Uncertain, _)) => {}
            Some((Status::Absent, _)) | None => out.push((r.name.clone(), f64::INFINITY)),
        }
    }
    out
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummaryMetrics {
    /// Cross-scan mean of per-scan mean errors, mm.
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    /// Percentage of the pooled landmarks with error above `threshold`,
    /// detection failures included.
    pub percent_over: f64,
    pub threshold: f64,
    pub scans: usize,
    /// Scans without a single finite error.
    pub scans_excluded: usize,
    pub landmarks: usize,
    /// Reference landmarks missing from the prediction.
    pub failures: usize,
}

impl SummaryMetrics {
    pub fn to_kv(&self, prefix: &str) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("mean_mm", self.mean.to_string()),
            ("median_mm", self.median.to_string()),
            ("max_mm", self.max.to_string()),
            ("percent_over", self.percent_over.to_string()),
            ("threshold_mm", self.threshold.to_string()),
            ("scans", self.scans.to_string()),
            ("scans_excluded", self.scans_excluded.to_string()),
            ("landmarks", self.landmarks.to_string()),
            ("failures", self.failures.to_string()),
        ] {
            let _ = writeln!(s, "{prefix}{k}={v}");
        }
        s
    }
}

/// Per-scan mean/median/max over finite errors, averaged across scans, and
/// the pooled exceedance percentage.
pub fn aggregate_metrics(per_scan: &[ScanErrors], threshold: f64) -> Result<SummaryMetrics> {
    if per_scan.is_empty() {
        return Err(Error::InvalidArgument("no scans to aggregate".into()));
    }
    let (mut sm, mut smed, mut smax) = (0.0, 0.0, 0.0);
    let mut used = 0usize;
    let (mut pooled, mut over, mut failures, mut finite) = (0usize, 0usize, 0usize, 0usize);
    for scan in per_scan {
        let mut e: Vec<f64> = scan.iter().map(|x| x.1).filter(|v| v.is_finite()).collect();
        pooled += scan.len();
        over += scan.iter().filter(|x| x.1 > threshold).count();
        failures += scan.len() - e.len();
        finite += e.len();
        if e.is_empty() {
            continue;
        }
        e.sort_by(f64::total_cmp);
        sm += e.iter().sum::<f64>() / e.len() as f64;
        smed += median(&e);
        smax += e[e.len() - 1];
        used += 1;
    }
    let k = used.max(1) as f64;
    let nan_if_none = |v: f64| if used == 0 { f64::NAN } else { v / k };
    Ok(SummaryMetrics {
        mean: nan_if_none(sm),
        median: nan_if_none(smed),
        max: nan_if_none(smax),
        percent_over: if pooled == 0 { 0.0 } else { 100.0 * over as f64 / pooled as f64 },
        threshold,
        scans: used,
        scans_excluded: per_scan.len() - used,
        landmarks: finite,
        failures,
    })
}

/// Count of errors above `threshold` per landmark name, in first-seen
/// order.
pub fn per_landmark_breakdown(all: &[ScanErrors], threshold: f64) -> Vec<(String, usize)> {
    let mut out: Vec<(String, usize)> = Vec::new();
    for scan in all {
        for (n, e) in scan {
            let i = match out.iter().position(|x| &x.0 == n) {
                Some(i) => i,
                None => {
                    out.push((n.clone(), 0));
                    out.len() - 1
                }
            };
            if *e > threshold {
                out[i].1 += 1;
            }
        }
    }
    out
}

/// Rows of `method | mean | median | max | %>threshold`.
pub fn format_table(rows: &[(&str, SummaryMetrics)]) -> String {
    let thr = rows.first().map_or(4.0, |r| r.1.threshold);
    let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(6).max(6);
    let mut s = String::new();
    let _ = writeln!(s, "{:<width$} | {:>8} | {:>8} | {:>8} | {:>8}", "Method", "Mean", "Median", "Max", format!("%>{thr}mm"));
    let _ = writeln!(s, "{}", "-".repeat(width + 44));
    for (name, m) in rows {
        let _ = writeln!(
            s,
            "{:<width$} | {:>8.2} | {:>8.2} | {:>8.2} | {:>8.2}",
            name, m.mean, m.median, m.max, m.percent_over
        );
    }
    s
}

pub fn format_breakdown(counts: &[(String, usize)], threshold: f64) -> String {
    let mut s = format!("# landmark errors>{threshold}mm\n");
    for (n, c) in counts {
        let _ = writeln!(s, "{n} {c}");
    }
    s
}

/// An 8-bit RGB raster, rows top to bottom.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Image {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let i = 3 * (y as usize * self.width + x as usize);
            self.rgb[i..i + 3].copy_from_slice(&c);
        }
    }

    fn line(&mut self, a: (i64, i64), b: (i64, i64), c: [u8; 3]) {
        let (mut x, mut y) = a;
        let dx = (b.0 - x).abs();
        let dy = -(b.1 - y).abs();
        let sx = if x < b.0 { 1 } else { -1 };
        let sy = if y < b.1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.put(x, y, c);
            if (x, y) == b {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    fn dot(&mut self, p: (i64, i64), c: [u8; 3]) {
        for dy in -1..=1 {
            for dx in -1..=1 {
                self.put(p.0 + dx, p.1 + dy, c);
            }
        }
    }

    /// Binary PPM (P6).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }

    pub fn save_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }
}

const GREEN: [u8; 3] = [0, 255, 0];
const RED: [u8; 3] = [255, 0, 0];
const BLACK: [u8; 3] = [0, 0, 0];

/// Maximum intensity projection along `axis` (0 = x, 1 = y, 2 = z). Image
/// columns follow the lower remaining axis, rows the higher one. HU in
/// `[-1000, 1000]` maps linearly onto `[0, 255]`. Connectors between
/// corresponding landmarks are black, reference points green and
/// predictions red.
pub fn render_mip(vol: &Volume3D, pred: &LandmarkSet, reference: &LandmarkSet, axis: usize) -> Result<Image> {
    if axis > 2 {
        return Err(Error::InvalidArgument(format!("projection axis {axis} not in 0..3")));
    }
    let (u, v) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let d = vol.dims();
    let (w, h) = (d[u], d[v]);
    let mut max = vec![f32::NEG_INFINITY; w * h];
    let g = vol.grid();
    for (i, &val) in vol.data().iter().enumerate() {
        let c = g.coords(i);
        let p = c[v] * w + c[u];
        if val > max[p] {
            max[p] = val;
        }
    }
    let to_hu = |x: f32| match vol.domain() {
        Domain::Normalized => x as f64 / HU_SCALE as f64,
        _ => x as f64,
    };
    let mut img = Image { width: w, height: h, rgb: Vec::with_capacity(3 * w * h) };
    for &m in &max {
        let t = ((to_hu(m) + 1000.0) / 2000.0 * 255.0).round().clamp(0.0, 255.0) as u8;
        img.rgb.extend_from_slice(&[t, t, t]);
    }
    let px = |p: [f64; 3]| {
        let c = g.world_to_continuous(p);
        (c[u].round() as i64, c[v].round() as i64)
    };
    let shown = |s: &LandmarkSet| -> Vec<(String, (i64, i64))> {
        s.iter().filter(|l| l.status != Status::Absent).map(|l| (l.name.clone(), px(l.position))).collect()
    };
    let (rp, pp) = (shown(reference), shown(pred));
    for (n, a) in &rp {
        if let Some((_, b)) = pp.iter().find(|(m, _)| m == n) {
            img.line(*a, *b, BLACK);
        }
    }
    for (_, a) in &rp {
        img.dot(*a, GREEN);
    }
    for (_, b) in &pp {
        img.dot(*b, RED);
    }
    Ok(img)
}
