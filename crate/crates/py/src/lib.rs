//! Python bindings: metrics, loss, synthetic fields, segmentation and the
//! full pipeline. Images cross the boundary as `(width, height, rgb bytes)`.

use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use weedmap_core::classify::{weighted_cross_entropy as wce, LossWeights};
use weedmap_core::config::RunConfig;
use weedmap_core::density::DensityMap;
use weedmap_core::image::FieldImage;
use weedmap_core::metrics::{self, ConfusionCounts};
use weedmap_core::synthfield::{generate, FieldSpec, Preset};
use weedmap_core::vegseg::segment_vegetation;
use weedmap_core::{pipeline, Error};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::MissingArtifact(m) => PyFileNotFoundError::new_err(m),
        Error::Invariant(_) | Error::Leakage(_) => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn config(toml_text: Option<&str>) -> PyResult<RunConfig> {
    RunConfig::from_toml(toml_text.unwrap_or("")).map_err(to_py)
}

/// Mean IoU over classes present in either label list.
#[pyfunction]
fn miou(pred: Vec<usize>, truth: Vec<usize>, classes: usize) -> PyResult<f64> {
    metrics::miou(&pred, &truth, classes).map_err(to_py)
}

/// `(precision, recall, f1)` of one class from a row-major confusion matrix
/// (rows truth, columns prediction); undefined values are None.
#[pyfunction]
fn precision_recall_f1(
    counts: Vec<u64>,
    classes: usize,
    class_index: usize,
) -> PyResult<(Option<f64>, Option<f64>, Option<f64>)> {
    if counts.len() != classes * classes || class_index >= classes {
        return Err(PyValueError::new_err("counts must be classes x classes and class_index < classes"));
    }
    let mut cm = ConfusionCounts::new(classes);
    cm.counts = counts;
    let s = metrics::precision_recall_f1(&cm, class_index);
    Ok((s.precision, s.recall, s.f1))
}

/// `(mean accuracy, mae, rmse)` over `(ground truth, estimate)` pairs.
#[pyfunction]
fn density_errors(pairs: Vec<(f64, f64)>) -> PyResult<(Option<f64>, Option<f64>, Option<f64>)> {
    let r = metrics::density_errors(&pairs).map_err(to_py)?;
    Ok((r.mean_accuracy, r.mae, r.rmse))
}

#[pyfunction]
#[pyo3(signature = (logits, labels, w_crop = 0.33, w_weed = 0.67))]
fn weighted_cross_entropy(logits: Vec<[f64; 2]>, labels: Vec<u8>, w_crop: f64, w_weed: f64) -> PyResult<f64> {
    if logits.len() != labels.len() {
        return Err(PyValueError::new_err("logits and labels differ in length"));
    }
    let w = LossWeights::new(w_crop, w_weed).map_err(to_py)?;
    Ok(wce(&logits, &labels, w))
}

/// Synthetic field: `(width, height, rgb, vegetation mask, class indices)`
/// with classes soil 0, crop 1, weed 2.
#[pyfunction]
#[pyo3(signature = (size, seed, preset = "high_contrast"))]
fn synth_field<'py>(
    py: Python<'py>,
    size: usize,
    seed: u64,
    preset: &str,
) -> PyResult<(usize, usize, Bound<'py, PyBytes>, Bound<'py, PyBytes>, Bound<'py, PyBytes>)> {
    let preset = match preset {
        "high_contrast" => Preset::HighContrast,
        "low_contrast" => Preset::LowContrast,
        p => return Err(PyValueError::new_err(format!("unknown preset {p:?}"))),
    };
    let f = generate(&FieldSpec::preset(preset, size, seed)).map_err(to_py)?;
    let classes: Vec<u8> = f.class_map.indices().into_iter().map(|c| c as u8).collect();
    Ok((
        size,
        size,
        PyBytes::new(py, f.image.pixels()),
        PyBytes::new(py, &f.veg_mask.mask),
        PyBytes::new(py, &classes),
    ))
}

/// Unsupervised vegetation mask (0/1 bytes) of an RGB image.
#[pyfunction]
#[pyo3(signature = (width, height, rgb, config_toml = None))]
fn segment<'py>(
    py: Python<'py>,
    width: usize,
    height: usize,
    rgb: Vec<u8>,
    config_toml: Option<&str>,
) -> PyResult<Bound<'py, PyBytes>> {
    let cfg = config(config_toml)?;
    let image = FieldImage::new(width, height, rgb, "python").map_err(to_py)?;
    let (mask, _) = py
        .detach(|| segment_vegetation(&image, &cfg.segmentation))
        .map_err(to_py)?;
    Ok(PyBytes::new(py, &mask.mask))
}

/// Runs the full pipeline on an image file; returns the run directory.
#[pyfunction]
#[pyo3(signature = (image_path, config_toml = None, annotation_path = None))]
fn run_pipeline(
    py: Python<'_>,
    image_path: PathBuf,
    config_toml: Option<&str>,
    annotation_path: Option<PathBuf>,
) -> PyResult<String> {
    let cfg = config(config_toml)?;
    let run = py
        .detach(|| pipeline::cmd_pipeline(&cfg, &image_path, annotation_path.as_deref()))
        .map_err(to_py)?;
    Ok(run.out_dir.to_string_lossy().into_owned())
}

/// Weed tiles of a density.json as `(row, col, cluster rate)`.
#[pyfunction]
fn weed_tiles(density_json: PathBuf) -> PyResult<Vec<(usize, usize, f64)>> {
    let map = DensityMap::read_json(&density_json).map_err(to_py)?;
    Ok(map.weed_tiles().map(|r| (r.row, r.col, r.cluster_rate)).collect())
}

#[pymodule]
fn weedmap(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(miou, m)?)?;
    m.add_function(wrap_pyfunction!(precision_recall_f1, m)?)?;
    m.add_function(wrap_pyfunction!(density_errors, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(synth_field, m)?)?;
    m.add_function(wrap_pyfunction!(segment, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(weed_tiles, m)?)?;
    Ok(())
}
