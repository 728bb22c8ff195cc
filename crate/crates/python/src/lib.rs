//! Python bindings: phantom generation, detection with a trained bundle,
//! evaluation, the affine fit and the command-line entry point.
//!
//! Arrays cross the boundary as nested lists so the module has no numpy
//! dependency.

use std::collections::BTreeMap;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use autocontext::atlas::weighted_affine_fit;
use autocontext::cascade::{detect as run_detect, Pipeline};
use autocontext::error::Error;
use autocontext::evalkit::{aggregate_metrics, localisation_errors};
use autocontext::heatmap::HeatmapSpec;
use autocontext::nnet::FcnModel;
use autocontext::phantom::{generate_dataset as gen_dataset, generate_phantom as gen_phantom, PhantomSpec, SplitCounts};
use autocontext::seeding;
use autocontext::volume::{load_landmarks, load_volume, LandmarkSet};

/// `(name, [x, y, z], certainty, status)` per landmark.
pub type LandmarkRows = Vec<(String, [f64; 3], f64, String)>;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::InvalidArgument(_) | Error::Config(_) | Error::Shape(_) | Error::Format { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

pub fn landmark_rows(set: &LandmarkSet) -> LandmarkRows {
    set.iter().map(|l| (l.name.clone(), l.position, l.certainty, l.status.as_str().to_string())).collect()
}

/// Writes a phantom dataset and returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, train, val, test, seed=0))]
fn generate_dataset(out_dir: &str, train: usize, val: usize, test: usize, seed: u64) -> PyResult<String> {
    gen_dataset(&PhantomSpec::default(), SplitCounts { train, val, test }, seed, out_dir).map_err(to_py)?;
    Ok(std::path::Path::new(out_dir).join("manifest.txt").display().to_string())
}

/// One in-memory phantom: `(dims, spacing, origin, voxels in HU with x
/// fastest, landmarks)`.
#[pyfunction]
#[pyo3(signature = (seed=0, index=0))]
fn generate_phantom(seed: u64, index: u64) -> PyResult<([usize; 3], [f64; 3], [f64; 3], Vec<f32>, LandmarkRows)> {
    let (vol, lm, _) = gen_phantom(&PhantomSpec::default(), &mut seeding::indexed(seed, "phantom", index)).map_err(to_py)?;
    Ok((vol.dims(), vol.spacing(), vol.origin(), vol.data().to_vec(), landmark_rows(&lm)))
}

#[pyfunction]
fn read_landmarks(path: &str) -> PyResult<LandmarkRows> {
    Ok(landmark_rows(&load_landmarks(path).map_err(to_py)?))
}

/// Runs a trained bundle on one volume file.
#[pyfunction]
fn detect(bundle_dir: &str, volume_path: &str) -> PyResult<LandmarkRows> {
    let pipe = Pipeline::load(bundle_dir).map_err(to_py)?;
    let vol = load_volume(volume_path).map_err(to_py)?;
    Ok(landmark_rows(&run_detect(&vol, &pipe).map_err(to_py)?.landmarks))
}

/// Summary metrics of predicted against reference landmark files.
#[pyfunction]
#[pyo3(signature = (pred_paths, ref_paths, threshold_mm=4.0))]
fn evaluate(pred_paths: Vec<String>, ref_paths: Vec<String>, threshold_mm: f64) -> PyResult<BTreeMap<String, f64>> {
    if pred_paths.len() != ref_paths.len() {
        return Err(PyValueError::new_err("prediction and reference lists differ in length"));
    }
    let mut errs = Vec::new();
    for (p, r) in pred_paths.iter().zip(&ref_paths) {
        errs.push(localisation_errors(&load_landmarks(p).map_err(to_py)?, &load_landmarks(r).map_err(to_py)?));
    }
    let m = aggregate_metrics(&errs, threshold_mm).map_err(to_py)?;
    Ok(BTreeMap::from([
        ("mean".to_string(), m.mean),
        ("median".to_string(), m.median),
        ("max".to_string(), m.max),
        ("percent_over".to_string(), m.percent_over),
        ("failures".to_string(), m.failures as f64),
    ]))
}

/// Weighted least-squares affine map of `src` onto `dst` as 3 rows of
/// `[a, b, c, t]`.
#[pyfunction]
#[pyo3(signature = (src, dst, weights=None))]
fn fit_affine(src: Vec<[f64; 3]>, dst: Vec<[f64; 3]>, weights: Option<Vec<f64>>) -> PyResult<[[f64; 4]; 3]> {
    let w = weights.unwrap_or_else(|| vec![1.0; src.len()]);
    let t = weighted_affine_fit(&src, &dst, &w).map_err(to_py)?;
    Ok(std::array::from_fn(|r| [t.linear[r][0], t.linear[r][1], t.linear[r][2], t.translation[r]]))
}

/// Target heatmap value at squared voxel distance `d2`.
#[pyfunction]
#[pyo3(signature = (d2, sigma=1.0, k=1000.0))]
fn heatmap_value(d2: f64, sigma: f64, k: f64) -> PyResult<f64> {
    Ok(HeatmapSpec::new(sigma, k).map_err(to_py)?.temperature(d2))
}

/// Trainable parameters of the network for the given widths.
#[pyfunction]
fn parameter_count(in_channels: usize, n_landmarks: usize, base_filters: usize) -> PyResult<usize> {
    let m = FcnModel::<f32>::new(in_channels, n_landmarks, base_filters, &mut seeding::substream(0, "count"))
        .map_err(to_py)?;
    Ok(m.param_count())
}

/// The command-line interface; returns its exit code.
#[pyfunction]
fn main(args: Vec<String>) -> i32 {
    autocontext::cli::run(std::iter::once("autocontext".to_string()).chain(args))
}

#[pymodule]
fn autocontext_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(generate_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(read_landmarks, m)?)?;
    m.add_function(wrap_pyfunction!(detect, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(fit_affine, m)?)?;
    m.add_function(wrap_pyfunction!(heatmap_value, m)?)?;
    m.add_function(wrap_pyfunction!(parameter_count, m)?)?;
    m.add_function(wrap_pyfunction!(main, m)?)?;
    Ok(())
}
