//! Python bindings. Configurations and reports cross the boundary as JSON
//! strings; images, masks and softmax maps as flat lists plus a shape.

use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;

use segfilter::ensemble::{self, EnsembleOutput};
use segfilter::metrics;
use segfilter::pipeline::{self, ExperimentConfig};
use segfilter::segmodel::{LabelMask, SoftmaxMap, IGNORE};
use segfilter::synthdata;
use segfilter::tensor::Tensor;
use segfilter::{Error, ErrorKind};

fn to_py(e: Error) -> PyErr {
    match e.kind() {
        ErrorKind::Numerical => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_config(config: Option<&str>) -> PyResult<ExperimentConfig> {
    let cfg = match config {
        Some(s) => ExperimentConfig::from_json(s).map_err(to_py)?,
        None => ExperimentConfig::default(),
    };
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

/// The default experiment configuration as JSON.
#[pyfunction]
fn default_config() -> PyResult<String> {
    serde_json::to_string_pretty(&ExperimentConfig::default()).map_err(json_err)
}

/// SHA-256 of the canonical configuration JSON.
#[pyfunction]
#[pyo3(signature = (config=None))]
fn config_hash(config: Option<&str>) -> PyResult<String> {
    Ok(parse_config(config)?.hash())
}

/// Runs the labeled-only / unfiltered / filtered experiment and returns the
/// report as JSON.
#[pyfunction]
#[pyo3(signature = (config=None))]
fn run_experiment(py: Python<'_>, config: Option<&str>) -> PyResult<String> {
    let cfg = parse_config(config)?;
    let report = py
        .detach(|| pipeline::run_three_arm_experiment(&cfg))
        .map_err(to_py)?;
    serde_json::to_string_pretty(&report).map_err(json_err)
}

/// Runs the experiment once per labeled fraction on one shared dataset.
#[pyfunction]
#[pyo3(signature = (fractions, config=None))]
fn run_sweep(py: Python<'_>, fractions: Vec<f64>, config: Option<&str>) -> PyResult<String> {
    let cfg = parse_config(config)?;
    let report = py
        .detach(|| pipeline::run_fraction_sweep(&cfg, &fractions))
        .map_err(to_py)?;
    serde_json::to_string_pretty(&report).map_err(json_err)
}

/// Finite-difference gradient check of every layer; returns the report JSON.
#[pyfunction]
#[pyo3(signature = (cases_per_layer=24, seed=0, epsilon=1e-3, tolerance=1e-3))]
fn grad_check(cases_per_layer: usize, seed: u64, epsilon: f64, tolerance: f64) -> PyResult<String> {
    let cfg = segfilter::gradcheck::GradCheckConfig {
        cases_per_layer,
        epsilon,
        tolerance,
        seed,
    };
    let report = segfilter::gradcheck::run_gradcheck(&cfg).map_err(to_py)?;
    serde_json::to_string(&report).map_err(json_err)
}

fn mask(height: usize, width: usize, data: Vec<u8>) -> PyResult<LabelMask> {
    LabelMask::new(height, width, data).map_err(to_py)
}

/// Fuses `num_members` softmax maps of shape (C, H, W) given as one flat
/// member-major list; returns the per-pixel argmax of the summed maps as
/// bytes.
#[pyfunction]
fn fuse(probs: Vec<f32>, num_members: usize, num_classes: usize, height: usize, width: usize) -> PyResult<Vec<u8>> {
    let per = num_classes * height * width;
    if num_members == 0 || probs.len() != num_members * per {
        return Err(PyValueError::new_err(format!(
            "expected {num_members} x {per} values, got {}",
            probs.len()
        )));
    }
    let maps = probs
        .chunks(per)
        .map(|c| SoftmaxMap::new(Tensor::new(vec![num_classes, height, width], c.to_vec())?))
        .collect::<segfilter::Result<Vec<_>>>()
        .map_err(to_py)?;
    let out = EnsembleOutput::new(maps, num_members, 1).map_err(to_py)?;
    let (fused, _) = ensemble::fuse(&out).map_err(to_py)?;
    Ok(fused.data().to_vec())
}

/// Per-class IoU (None for classes absent from both masks) and the mIoU.
#[pyfunction]
fn iou(
    pred: Vec<u8>,
    gt: Vec<u8>,
    height: usize,
    width: usize,
    num_classes: usize,
) -> PyResult<(Vec<Option<f64>>, f64)> {
    let cm = metrics::confusion(&mask(height, width, pred)?, &mask(height, width, gt)?, num_classes).map_err(to_py)?;
    let r = metrics::iou(&cm).map_err(to_py)?;
    Ok((r.per_class, r.miou))
}

/// Per-class precision of auto-labels against ground truth.
#[pyfunction]
fn annotation_precision(
    auto: Vec<u8>,
    gt: Vec<u8>,
    height: usize,
    width: usize,
    num_classes: usize,
) -> PyResult<Vec<Option<f64>>> {
    let mut p = metrics::PrecisionCounts::new(num_classes);
    p.accumulate(&mask(height, width, auto)?, &mask(height, width, gt)?, None)
        .map_err(to_py)?;
    Ok(p.precision())
}

/// A synthetic dataset. Unlabeled ground truth is not exposed.
#[pyclass(module = "segfilter_py")]
struct Dataset {
    inner: synthdata::Dataset,
}

#[pymethods]
impl Dataset {
    /// Generates the dataset described by a configuration.
    #[staticmethod]
    #[pyo3(signature = (config=None))]
    fn generate(config: Option<&str>) -> PyResult<Self> {
        let cfg = parse_config(config)?;
        Ok(Self {
            inner: cfg.generate_dataset().map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(dir: &str) -> PyResult<Self> {
        Ok(Self {
            inner: synthdata::Dataset::load(dir).map_err(to_py)?,
        })
    }

    fn save(&self, dir: &str) -> PyResult<()> {
        self.inner.save(dir).map_err(to_py)
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.scene.num_classes
    }

    /// Sample ids of a split: labeled, quality, validation or unlabeled.
    fn ids(&self, split: &str) -> PyResult<Vec<usize>> {
        Ok(match split {
            "unlabeled" => self.inner.unlabeled.ids().to_vec(),
            _ => self.samples(split)?.iter().map(|s| s.id).collect(),
        })
    }

    /// (shape, pixels) of the i-th image of a split.
    fn image(&self, split: &str, index: usize) -> PyResult<(Vec<usize>, Vec<f32>)> {
        let img = if split == "unlabeled" {
            self.inner.unlabeled.images().get(index)
        } else {
            self.samples(split)?.get(index).map(|s| &s.image)
        }
        .ok_or_else(|| PyValueError::new_err(format!("index {index} out of range")))?;
        Ok((img.tensor().shape().to_vec(), img.tensor().data().to_vec()))
    }

    /// (height, width, labels) of the i-th mask of a labeled split.
    fn label(&self, split: &str, index: usize) -> PyResult<(usize, usize, Vec<u8>)> {
        let s = self
            .samples(split)?
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("index {index} out of range")))?;
        Ok((s.label.height(), s.label.width(), s.label.data().to_vec()))
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(labeled={}, unlabeled={}, quality={}, validation={})",
            self.inner.labeled.len(),
            self.inner.unlabeled.len(),
            self.inner.quality.len(),
            self.inner.validation.len()
        )
    }
}

impl Dataset {
    fn samples(&self, split: &str) -> PyResult<&[synthdata::Sample]> {
        match split {
            "labeled" => Ok(&self.inner.labeled),
            "quality" => Ok(&self.inner.quality),
            "validation" => Ok(&self.inner.validation),
            "unlabeled" => Err(PyValueError::new_err("unlabeled samples have no labels")),
            other => Err(PyValueError::new_err(format!("unknown split {other:?}"))),
        }
    }
}

#[pymodule]
fn segfilter_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("IGNORE", IGNORE)?;
    m.add("REPORT_SCHEMA_VERSION", pipeline::REPORT_SCHEMA_VERSION)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Dataset>()?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(config_hash, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(run_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(fuse, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(annotation_precision, m)?)?;
    Ok(())
}
