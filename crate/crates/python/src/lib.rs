//! Python bindings. Structured results (metrics, logs, energy reports) are
//! handed over as plain dicts built from their JSON form.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use spikehsi::checkpoint::{load_checkpoint, save_checkpoint};
use spikehsi::config::RunConfig;
use spikehsi::data::{extract_patches, generate_synthetic, load_cube, normalize, split, PatchSet, SynthParams};
use spikehsi::energy::{energy_totals, ActivityProfile};
use spikehsi::metrics::Metrics;
use spikehsi::network::{build_cnn32h, build_cnn3d_with_patch, Mode, Model, NetworkSpec};
use spikehsi::quant::{calibrate_params, fake_quantize as fq, QuantScheme};
use spikehsi::tensor::Tensor;
use spikehsi::train::{evaluate_ann, evaluate_snn, train_ann as fit_ann, train_snn as fit_snn};

create_exception!(pyspikehsi, SpikeHsiError, PyException);

fn err(e: spikehsi::error::Error) -> PyErr {
    SpikeHsiError::new_err(format!("{}: {e}", e.kind()))
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn parse_mode(mode: &str) -> PyResult<Mode> {
    match mode {
        "ann" => Ok(Mode::Ann),
        "snn" => Ok(Mode::Snn),
        other => Err(PyValueError::new_err(format!("mode must be 'ann' or 'snn', got {other:?}"))),
    }
}

fn parse_scheme(scheme: &str) -> PyResult<QuantScheme> {
    match scheme {
        "affine" => Ok(QuantScheme::Affine),
        "scale" => Ok(QuantScheme::Scale),
        other => Err(PyValueError::new_err(format!("scheme must be 'affine' or 'scale', got {other:?}"))),
    }
}

/// Resolved run configuration; every field has a default.
#[pyclass(name = "RunConfig", module = "pyspikehsi", from_py_object)]
#[derive(Clone)]
pub struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    fn new() -> Self {
        Self {
            inner: RunConfig::default(),
        }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::from_json(text).map_err(err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn patch_size(&self) -> usize {
        self.inner.patch_size()
    }
}

/// Labelled patches, one flat `[1, bands, p, p]` array each.
#[pyclass(name = "PatchSet", module = "pyspikehsi", from_py_object)]
#[derive(Clone)]
pub struct PyPatchSet {
    inner: PatchSet,
}

#[pymethods]
impl PyPatchSet {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    #[getter]
    fn bands(&self) -> Option<usize> {
        self.inner.bands()
    }

    #[getter]
    fn patch_size(&self) -> Option<usize> {
        self.inner.patch_size()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels.clone()
    }

    fn patch(&self, i: usize) -> PyResult<Vec<f64>> {
        self.inner
            .patches
            .get(i)
            .map(|t| t.data().to_vec())
            .ok_or_else(|| PyValueError::new_err(format!("index {i} out of range")))
    }

    /// Stratified split into (train, test).
    fn split(&self, train_fraction: f64, seed: u64) -> PyResult<(Self, Self)> {
        let (a, b) = split(&self.inner, train_fraction, seed).map_err(err)?;
        Ok((Self { inner: a }, Self { inner: b }))
    }

    fn __repr__(&self) -> String {
        format!(
            "PatchSet(len={}, classes={}, bands={:?}, patch_size={:?})",
            self.inner.len(),
            self.inner.num_classes,
            self.inner.bands(),
            self.inner.patch_size()
        )
    }
}

#[pyclass(name = "Model", module = "pyspikehsi", from_py_object)]
#[derive(Clone)]
pub struct PyModel {
    inner: Model,
}

impl PyModel {
    fn patch(&self, values: Vec<f64>) -> PyResult<Tensor> {
        Tensor::new(self.inner.spec.input_shape(), values).map_err(err)
    }
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    #[pyo3(signature = (bands, classes, patch_size=5, seed=0))]
    fn cnn3d(bands: usize, classes: usize, patch_size: usize, seed: u64) -> PyResult<Self> {
        let spec = build_cnn3d_with_patch(bands, classes, patch_size).map_err(err)?;
        Ok(Self {
            inner: Model::init(spec, seed),
        })
    }

    #[staticmethod]
    #[pyo3(signature = (bands, classes, seed=0))]
    fn cnn32h(bands: usize, classes: usize, seed: u64) -> PyResult<Self> {
        let spec = build_cnn32h(bands, classes).map_err(err)?;
        Ok(Self {
            inner: Model::init(spec, seed),
        })
    }

    #[staticmethod]
    #[pyo3(signature = (spec_json, seed=0))]
    fn from_spec(spec_json: &str, seed: u64) -> PyResult<Self> {
        let spec = NetworkSpec::from_json(spec_json).map_err(err)?;
        Ok(Self {
            inner: Model::init(spec, seed),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_checkpoint(&path).map_err(err)?,
        })
    }

    /// Writes a checkpoint directory; `export_bits` stores scale-quantized
    /// integer weights next to the full-precision ones.
    #[pyo3(signature = (path, export_bits=None))]
    fn save(&self, path: PathBuf, export_bits: Option<u32>) -> PyResult<()> {
        save_checkpoint(&self.inner, &path, export_bits).map_err(err)
    }

    #[getter]
    fn mode(&self) -> &'static str {
        match self.inner.spec.mode {
            Mode::Ann => "ann",
            Mode::Snn => "snn",
        }
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    #[getter]
    fn input_shape(&self) -> Vec<usize> {
        self.inner.spec.input_shape()
    }

    #[getter]
    fn thresholds(&self) -> Option<Vec<f64>> {
        self.inner.lif.as_ref().map(|l| l.iter().map(|p| p.threshold).collect())
    }

    #[getter]
    fn leaks(&self) -> Option<Vec<f64>> {
        self.inner.lif.as_ref().map(|l| l.iter().map(|p| p.leak).collect())
    }

    fn spec_json(&self) -> PyResult<String> {
        self.inner.spec.to_json().map_err(err)
    }

    fn ann_logits(&self, patch: Vec<f64>) -> PyResult<Vec<f64>> {
        let x = self.patch(patch)?;
        Ok(self.inner.ann_logits(&x).map_err(err)?.data().to_vec())
    }

    /// Full-precision output potentials after `timesteps` steps.
    #[pyo3(signature = (patch, timesteps=5))]
    fn snn_potentials(&self, patch: Vec<f64>, timesteps: usize) -> PyResult<Vec<f64>> {
        let x = self.patch(patch)?;
        Ok(self.inner.snn_potentials(&x, timesteps).map_err(err)?.data().to_vec())
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(architecture={:?}, mode={}, parameters={})",
            self.inner.spec.architecture,
            self.mode(),
            self.inner.parameter_count()
        )
    }
}

fn config_or_default(config: Option<PyRunConfig>) -> RunConfig {
    config.map(|c| c.inner).unwrap_or_default()
}

/// Synthetic cube, standardized per band and cut into patches.
#[pyfunction]
#[pyo3(signature = (classes=4, bands=32, samples_per_class=60, noise_sigma=0.1, seed=0, patch_size=5))]
fn synthetic_patches(
    classes: usize,
    bands: usize,
    samples_per_class: usize,
    noise_sigma: f64,
    seed: u64,
    patch_size: usize,
) -> PyResult<PyPatchSet> {
    let (cube, labels) = generate_synthetic(&SynthParams {
        classes,
        bands,
        samples_per_class,
        noise_sigma,
        seed,
    })
    .map_err(err)?;
    let inner = extract_patches(&normalize(&cube), &labels, patch_size).map_err(err)?;
    Ok(PyPatchSet { inner })
}

#[pyfunction]
#[pyo3(signature = (path, patch_size, normalized=true))]
fn load_patches(path: PathBuf, patch_size: usize, normalized: bool) -> PyResult<PyPatchSet> {
    let (cube, labels) = load_cube(&path).map_err(err)?;
    let cube = if normalized { normalize(&cube) } else { cube };
    let inner = extract_patches(&cube, &labels, patch_size).map_err(err)?;
    Ok(PyPatchSet { inner })
}

/// Returns `(best_model, epoch_logs)`.
#[pyfunction]
#[pyo3(signature = (model, train, test, config=None))]
fn train_ann(
    py: Python<'_>,
    model: PyModel,
    train: &PyPatchSet,
    test: &PyPatchSet,
    config: Option<PyRunConfig>,
) -> PyResult<(PyModel, Py<PyAny>)> {
    let cfg = config_or_default(config);
    let out = fit_ann(model.inner, &train.inner, &test.inner, &cfg.ann_train_config(), &mut |_| {}).map_err(err)?;
    Ok((PyModel { inner: out.best }, to_py(py, &out.log)?))
}

/// Threshold balancing on `calibration` patches. Returns `(snn, report)`.
#[pyfunction]
#[pyo3(signature = (model, calibration, config=None))]
fn convert(
    py: Python<'_>,
    model: &PyModel,
    calibration: &PyPatchSet,
    config: Option<PyRunConfig>,
) -> PyResult<(PyModel, Py<PyAny>)> {
    let cfg = config_or_default(config);
    let mut cal = cfg.calibration_config();
    let n = calibration.inner.len().min(cal.batch_size);
    cal.batch_size = n.max(1);
    let (snn, report) =
        spikehsi::convert::convert(&model.inner, &calibration.inner.patches[..n], &cal).map_err(err)?;
    Ok((PyModel { inner: snn }, to_py(py, &report)?))
}

/// Q-STDB fine-tuning. Returns `(best_model, epoch_logs)`.
#[pyfunction]
#[pyo3(signature = (model, train, test, config=None))]
fn train_snn(
    py: Python<'_>,
    model: PyModel,
    train: &PyPatchSet,
    test: &PyPatchSet,
    config: Option<PyRunConfig>,
) -> PyResult<(PyModel, Py<PyAny>)> {
    let cfg = config_or_default(config);
    let out = fit_snn(
        model.inner,
        &train.inner,
        &test.inner,
        &cfg.snn_train_config(),
        &cfg.inference,
        &mut |_| {},
    )
    .map_err(err)?;
    Ok((PyModel { inner: out.best }, to_py(py, &out.log)?))
}

/// OA, AA, kappa, per-class accuracy and confusion counts.
#[pyfunction]
#[pyo3(signature = (model, data, mode=None, config=None))]
fn evaluate(
    py: Python<'_>,
    model: &PyModel,
    data: &PyPatchSet,
    mode: Option<&str>,
    config: Option<PyRunConfig>,
) -> PyResult<Py<PyAny>> {
    let mode = mode.map(parse_mode).transpose()?.unwrap_or(model.inner.spec.mode);
    let metrics: Metrics = match mode {
        Mode::Ann => evaluate_ann(&model.inner, &data.inner).map_err(err)?,
        Mode::Snn => {
            let cfg = config_or_default(config);
            evaluate_snn(&model.inner, &data.inner, &cfg.inference).map_err(err)?.metrics
        }
    };
    to_py(py, &metrics)
}

/// Measures spiking activity on `data` and returns the energy report.
#[pyfunction]
#[pyo3(signature = (model, data, config=None))]
fn energy(py: Python<'_>, model: &PyModel, data: &PyPatchSet, config: Option<PyRunConfig>) -> PyResult<Py<PyAny>> {
    let cfg = config_or_default(config);
    let ev = evaluate_snn(&model.inner, &data.inner, &cfg.inference).map_err(err)?;
    let profile =
        ActivityProfile::from_totals(&model.inner.spec, &ev.spike_totals, ev.samples, ev.timesteps).map_err(err)?;
    let report = energy_totals(
        &model.inner.spec,
        &profile,
        cfg.energy.ann_bits,
        cfg.energy.snn_bits,
        &cfg.energy.constants(),
    )
    .map_err(err)?;
    to_py(py, &report)
}

/// Per-tensor fake quantization of a flat list.
#[pyfunction]
#[pyo3(signature = (values, bits, scheme="affine"))]
fn fake_quantize(values: Vec<f64>, bits: u32, scheme: &str) -> PyResult<Vec<f64>> {
    let t = Tensor::from_vec(values);
    let p = calibrate_params(&t, bits, parse_scheme(scheme)?).map_err(err)?;
    Ok(fq(&t, &p).data().to_vec())
}

#[pyfunction]
fn metrics(py: Python<'_>, truth: Vec<usize>, predicted: Vec<usize>, classes: usize) -> PyResult<Py<PyAny>> {
    to_py(py, &Metrics::from_predictions(&truth, &predicted, classes).map_err(err)?)
}

/// Runs the command-line interface in-process; returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    spikehsi::cli::main_with_args(std::iter::once("spikehsi".to_string()).chain(args))
}

#[pymodule]
fn pyspikehsi(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SpikeHsiError", m.py().get_type::<SpikeHsiError>())?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyPatchSet>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synthetic_patches, m)?)?;
    m.add_function(wrap_pyfunction!(load_patches, m)?)?;
    m.add_function(wrap_pyfunction!(train_ann, m)?)?;
    m.add_function(wrap_pyfunction!(convert, m)?)?;
    m.add_function(wrap_pyfunction!(train_snn, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(energy, m)?)?;
    m.add_function(wrap_pyfunction!(fake_quantize, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
