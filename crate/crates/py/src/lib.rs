//! Python bindings: configuration, the synthetic generator, diffusion
//! schedules, metrics, and the train / forecast pipeline stages.

use std::path::PathBuf;

use hrdiff_core::commands;
use hrdiff_core::config::RunConfig;
use hrdiff_core::diffusion::{sample_laplace, DiffusionSchedule, ScheduleKind};
use hrdiff_core::experiments::{self, SweepAxis};
use hrdiff_core::series::ActivityLabel;
use hrdiff_core::synthgen;
use hrdiff_core::util::rng_for;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn err(e: hrdiff_core::Error) -> PyErr {
    match e {
        hrdiff_core::Error::Io(_) | hrdiff_core::Error::Diverged { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// A full run configuration. `Config()` gives the defaults; `Config(toml)`
/// parses a TOML document with the same sections as the CLI config file.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (toml=None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(t) => RunConfig::from_toml_str(t).map_err(err)?,
            None => RunConfig::default(),
        };
        Ok(PyConfig { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyConfig { inner: RunConfig::load(&path).map_err(err)? })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.run.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.run.seed = seed;
    }

    /// Short hash recorded in every artifact.
    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml_string().map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        json(&self.inner)
    }
}

/// Noise schedule with 1-indexed accessors.
#[pyclass(name = "Schedule")]
struct PySchedule {
    inner: DiffusionSchedule,
}

#[pymethods]
impl PySchedule {
    #[new]
    fn new(kind: &str, steps: usize) -> PyResult<Self> {
        let kind: ScheduleKind = kind.parse().map_err(err)?;
        Ok(PySchedule { inner: DiffusionSchedule::build(kind, steps).map_err(err)? })
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }

    fn betas(&self) -> Vec<f64> {
        (1..=self.inner.steps()).map(|s| self.inner.beta(s)).collect()
    }

    fn alpha_bars(&self) -> Vec<f64> {
        (1..=self.inner.steps()).map(|s| self.inner.alpha_bar(s)).collect()
    }

    /// Laplace scale of the accumulated noise at each step.
    fn laplace_scales(&self) -> Vec<f64> {
        (1..=self.inner.steps()).map(|s| self.inner.b(s)).collect()
    }
}

/// A trained model loaded from a checkpoint.
#[pyclass(name = "Model")]
struct PyModel {
    path: PathBuf,
    meta: experiments::ModelMeta,
    parameters: usize,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (model, meta) = experiments::load_model(&path).map_err(err)?;
        Ok(PyModel { path, meta, parameters: model.parameter_count() })
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.parameters
    }

    #[getter]
    fn window(&self) -> usize {
        self.meta.model.window
    }

    /// Checkpoint metadata (model config, normalizer, training settings) as JSON.
    fn meta_json(&self) -> PyResult<String> {
        json(&self.meta)
    }

    /// Forecasts the minutes after the history CSV; returns BPM values and
    /// writes `forecast.csv` / `forecast.json` under `out`.
    #[pyo3(signature = (history_csv, activity, out, seed=0))]
    fn forecast(&self, history_csv: PathBuf, activity: &str, out: PathBuf, seed: u64) -> PyResult<Vec<f64>> {
        let label: ActivityLabel = activity.parse().map_err(err)?;
        let cfg = RunConfig::default().with_seed(Some(seed));
        commands::run_forecast(&cfg, &self.path, &history_csv, label, &out).map_err(err)
    }
}

/// Generates the synthetic cohort and writes it as CSV files under `out`;
/// returns (patients, samples, segments).
#[pyfunction]
fn generate(config: &PyConfig, out: PathBuf) -> PyResult<(usize, usize, usize)> {
    let s = commands::run_generate(&config.inner, &out).map_err(err)?;
    Ok((s.patients, s.samples, s.segments))
}

/// Per-activity median HR of a generated cohort, keyed by label.
#[pyfunction]
fn activity_medians(config: &PyConfig) -> PyResult<Vec<(String, f64)>> {
    let data = synthgen::generate(&config.inner.generator, config.inner.run.seed).map_err(err)?;
    let series = hrdiff_core::pipeline::annotate_generated(&data).map_err(err)?;
    let mut out = Vec::new();
    for label in ActivityLabel::ACTIVITIES {
        let mut v: Vec<f64> = series
            .iter()
            .flat_map(|p| p.samples.iter().filter(|s| s.activity == label).map(|s| s.hr))
            .collect();
        if !v.is_empty() {
            out.push((label.to_string(), hrdiff_core::util::median(&mut v)));
        }
    }
    Ok(out)
}

/// Runs preprocessing; `data` is a cohort directory or None for synthetic data.
#[pyfunction]
#[pyo3(signature = (config, out, data=None))]
fn preprocess(config: &PyConfig, out: PathBuf, data: Option<PathBuf>) -> PyResult<()> {
    commands::run_preprocess(&config.inner, data.as_deref(), &out).map_err(err)
}

/// Trains and evaluates; returns the training report as JSON.
#[pyfunction]
#[pyo3(signature = (config, out, data=None))]
fn train(py: Python<'_>, config: &PyConfig, out: PathBuf, data: Option<PathBuf>) -> PyResult<String> {
    let cfg = config.inner.clone();
    let report = py
        .detach(move || commands::run_train(&cfg, data.as_deref(), &out))
        .map_err(err)?;
    json(&report)
}

/// Retrains along an axis (`schedule`, `steps` or `loss`); returns the table as JSON.
#[pyfunction]
#[pyo3(signature = (config, axis, out, data=None))]
fn sweep(py: Python<'_>, config: &PyConfig, axis: &str, out: PathBuf, data: Option<PathBuf>) -> PyResult<String> {
    let axis: SweepAxis = axis.parse().map_err(err)?;
    let cfg = config.inner.clone();
    let tables = py
        .detach(move || commands::run_sweep(&cfg, data.as_deref(), &[axis], &out))
        .map_err(err)?;
    json(&tables[0])
}

/// MAE, MAPE (percent), RMSE and R² (None when the truth is constant).
#[pyfunction]
fn metrics(y_true: Vec<f64>, y_pred: Vec<f64>) -> PyResult<(f64, f64, f64, Option<f64>)> {
    let m = experiments::metrics(&y_true, &y_pred).map_err(err)?;
    Ok((m.mae, m.mape, m.rmse, m.r2))
}

/// Draws `n` Laplace(0, b) values from a seeded stream.
#[pyfunction]
#[pyo3(signature = (n, b=1.0, seed=0))]
fn laplace(n: usize, b: f64, seed: u64) -> Vec<f64> {
    sample_laplace(n, b, &mut rng_for(seed, 0, 0))
}

#[pymodule]
fn hrdiff(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PySchedule>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(activity_medians, m)?)?;
    m.add_function(wrap_pyfunction!(preprocess, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(laplace, m)?)?;
    Ok(())
}
