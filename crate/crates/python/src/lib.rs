//! Python bindings: data generation and PGM I/O, the two models, the full pipeline
//! driven by a run config, metrics, and the command-line front end.

use std::path::PathBuf;

use cellcount::cli::{self, RunConfig, F};
use cellcount::interpret::{saliency, SaliencyTarget};
use cellcount::models::{self, ConfidenceInterval, CountConfig, FpnConfig};
use cellcount::nn::{load_checkpoint, save_checkpoint};
use cellcount::simdata::{self, GenConfig};
use cellcount::{Error, Tensor};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// 8-bit grayscale image.
#[pyclass(name = "GrayImage", module = "pycellcount", skip_from_py_object)]
#[derive(Clone)]
pub struct PyGrayImage {
    inner: simdata::GrayImage,
}

#[pymethods]
impl PyGrayImage {
    #[new]
    fn new(width: usize, height: usize, pixels: Vec<u8>) -> PyResult<Self> {
        let inner = simdata::GrayImage::new(width, height, pixels).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    /// Row-major pixel values.
    #[getter]
    fn pixels(&self) -> Vec<u8> {
        self.inner.pixels.clone()
    }

    fn __repr__(&self) -> String {
        format!("GrayImage({}x{})", self.inner.width, self.inner.height)
    }
}

/// A count with its 95% interval.
#[pyclass(name = "Interval", module = "pycellcount", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyInterval {
    inner: ConfidenceInterval,
}

#[pymethods]
impl PyInterval {
    #[getter]
    fn count(&self) -> f64 {
        self.inner.count
    }

    #[getter]
    fn halfwidth(&self) -> f64 {
        self.inner.halfwidth
    }

    #[getter]
    fn lo(&self) -> f64 {
        self.inner.lo
    }

    #[getter]
    fn hi(&self) -> f64 {
        self.inner.hi
    }

    fn contains(&self, value: f64) -> bool {
        self.inner.contains(value)
    }

    fn __str__(&self) -> String {
        self.inner.to_string()
    }

    fn __repr__(&self) -> String {
        format!("Interval({})", self.inner)
    }
}

/// `count ± 1.96 * exp(logvar / 2)`, lower bound clamped at zero.
#[pyfunction]
fn ci95(count: f64, logvar: f64) -> PyInterval {
    PyInterval {
        inner: models::ci95(count, logvar),
    }
}

/// mse, r2, l1_mean, l1_max and ci_coverage of predictions against truths.
#[pyfunction]
fn metrics<'py>(
    py: Python<'py>,
    preds: Vec<f64>,
    logvars: Vec<f64>,
    truths: Vec<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let m = cellcount::optim::metrics(&preds, &logvars, &truths).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("n", m.n)?;
    d.set_item("mse", m.mse)?;
    d.set_item("r2", m.r2)?;
    d.set_item("l1_mean", m.l1_mean)?;
    d.set_item("l1_max", m.l1_max)?;
    d.set_item("ci_coverage", m.ci_coverage)?;
    Ok(d)
}

/// Renders sample `index` of the synthetic set: `(image, mask, count)`.
/// `desk` selects the small CPU-sized preset instead of the full-scale one.
#[pyfunction]
#[pyo3(signature = (index, seed = 0, desk = true))]
fn generate_sample(index: u64, seed: u64, desk: bool) -> PyResult<(PyGrayImage, PyGrayImage, u32)> {
    let base = if desk {
        GenConfig::desk()
    } else {
        GenConfig::default()
    };
    let cfg = GenConfig { seed, ..base };
    let s = simdata::generate_sample(&cfg, index).map_err(py_err)?;
    Ok((
        PyGrayImage { inner: s.image },
        PyGrayImage { inner: s.mask },
        s.count,
    ))
}

#[pyfunction]
fn read_pgm(path: PathBuf) -> PyResult<PyGrayImage> {
    let inner = simdata::read_pgm(path).map_err(py_err)?;
    Ok(PyGrayImage { inner })
}

#[pyfunction]
fn write_pgm(image: &PyGrayImage, path: PathBuf) -> PyResult<()> {
    simdata::write_pgm(&image.inner, path).map_err(py_err)
}

fn plane_tensor(values: &[f64], height: usize, width: usize) -> PyResult<Tensor<F>> {
    if values.len() != height * width {
        return Err(PyValueError::new_err(format!(
            "expected {} values for {height}x{width}, got {}",
            height * width,
            values.len()
        )));
    }
    Tensor::new(
        &[1, 1, height, width],
        values.iter().map(|&v| v as F).collect(),
    )
    .map_err(py_err)
}

/// Feature pyramid segmenter.
#[pyclass(name = "FpnModel", module = "pycellcount")]
pub struct PyFpnModel {
    inner: models::FpnModel<F>,
}

#[pymethods]
impl PyFpnModel {
    #[new]
    #[pyo3(signature = (seed = 0, width_multiplier = 1.0))]
    fn new(seed: u64, width_multiplier: f64) -> PyResult<Self> {
        let cfg = FpnConfig {
            width_multiplier,
            ..FpnConfig::default()
        };
        let inner = models::FpnModel::new(cfg, seed).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.params.num_trainable()
    }

    fn load(&mut self, path: PathBuf) -> PyResult<()> {
        let ckpt = load_checkpoint::<F>(path).map_err(py_err)?;
        ckpt.restore(&mut self.inner.params).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner.params, None, path).map_err(py_err)
    }

    /// Finest-scale `(width, height, mask, logvar)` at half the image resolution.
    fn segment(&mut self, image: &PyGrayImage) -> PyResult<(usize, usize, Vec<f64>, Vec<f64>)> {
        let x = cli::image_tensor(&image.inner);
        let (mask, logvar) = cli::segment(&mut self.inner, &[x], 1)
            .map_err(py_err)?
            .remove(0);
        Ok((mask.width, mask.height, mask.values, logvar.values))
    }
}

/// VGG-style counter over `height x width` masks.
#[pyclass(name = "CountModel", module = "pycellcount")]
pub struct PyCountModel {
    inner: models::CountModel<F>,
}

#[pymethods]
impl PyCountModel {
    #[new]
    #[pyo3(signature = (height, width, seed = 0, width_multiplier = 1.0, output_scale = 1.0))]
    fn new(
        height: usize,
        width: usize,
        seed: u64,
        width_multiplier: f64,
        output_scale: f64,
    ) -> PyResult<Self> {
        let cfg = CountConfig {
            input_hw: (height, width),
            width_multiplier,
            output_scale,
            ..CountConfig::default()
        };
        let inner = models::CountModel::new(cfg, seed).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.params.num_trainable()
    }

    fn load(&mut self, path: PathBuf) -> PyResult<()> {
        let ckpt = load_checkpoint::<F>(path).map_err(py_err)?;
        ckpt.restore(&mut self.inner.params).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner.params, None, path).map_err(py_err)
    }

    /// Count and interval for one row-major mask.
    fn predict(&mut self, mask: Vec<f64>) -> PyResult<(PyInterval, f64)> {
        let (h, w) = self.inner.config.input_hw;
        let x = plane_tensor(&mask, h, w)?;
        let out = self.inner.predict(&x).map_err(py_err)?;
        Ok((ci95(out.count[0], out.logvar[0]), out.logvar[0]))
    }

    /// Normalized prediction saliency for one mask.
    fn saliency(&mut self, mask: Vec<f64>) -> PyResult<Vec<f64>> {
        let (h, w) = self.inner.config.input_hw;
        let x = plane_tensor(&mask, h, w)?;
        let map =
            saliency(&mut self.inner, &x, SaliencyTarget::Prediction, None).map_err(py_err)?;
        Ok(map.values)
    }
}

/// Flat `key = value` run settings, starting from the full-scale defaults.
#[pyclass(name = "Config", module = "pycellcount", skip_from_py_object)]
#[derive(Clone)]
pub struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (path = None))]
    fn new(path: Option<PathBuf>) -> PyResult<Self> {
        let mut inner = RunConfig::default();
        if let Some(p) = path {
            inner.apply_file(p).map_err(py_err)?;
        }
        Ok(Self { inner })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(py_err)
    }

    fn get(&self, key: &str) -> String {
        self.inner.get(key).to_string()
    }

    fn header(&self) -> String {
        self.inner.header()
    }
}

/// Trained segmenter and counter loaded from the checkpoints a config names.
#[pyclass(name = "Pipeline", module = "pycellcount")]
pub struct PyPipeline {
    fpn: models::FpnModel<F>,
    counter: models::CountModel<F>,
}

#[pymethods]
impl PyPipeline {
    /// Loads both checkpoints for images of `image_height x image_width`.
    #[new]
    fn new(config: &PyConfig, image_height: usize, image_width: usize) -> PyResult<Self> {
        let s = config.inner.settings().map_err(py_err)?;
        let fpn = cli::load_fpn(&s).map_err(py_err)?;
        let counter = cli::load_counter(&s, (image_height, image_width)).map_err(py_err)?;
        Ok(Self { fpn, counter })
    }

    fn predict(&mut self, image: &PyGrayImage) -> PyResult<PyInterval> {
        let p =
            cli::predict_image(&mut self.fpn, &mut self.counter, &image.inner).map_err(py_err)?;
        Ok(PyInterval { inner: p.interval })
    }
}

/// Runs the command-line front end; returns the exit code and the result lines.
#[pyfunction]
fn run(args: Vec<String>) -> (i32, String) {
    let mut out = Vec::new();
    let argv = std::iter::once("cellcount".to_string()).chain(args);
    let code = cli::main_with_args(argv, &mut out);
    (code, String::from_utf8_lossy(&out).into_owned())
}

#[pymodule]
fn pycellcount(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGrayImage>()?;
    m.add_class::<PyInterval>()?;
    m.add_class::<PyFpnModel>()?;
    m.add_class::<PyCountModel>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyPipeline>()?;
    m.add_function(wrap_pyfunction!(ci95, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(generate_sample, m)?)?;
    m.add_function(wrap_pyfunction!(read_pgm, m)?)?;
    m.add_function(wrap_pyfunction!(write_pgm, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
