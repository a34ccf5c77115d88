//! Python bindings: configurations, models, single episodes, training and
//! BLER estimation.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use fbcode::channel::{derive_seed, rng_from_seed};
use fbcode::codec::{run_episode, Snrs};
use fbcode::config::{desk_scale_config, reference_config, ExperimentConfig, FeedbackMode};
use fbcode::evaluation::{estimate_bler, power_audit, EstimateOptions};
use fbcode::networks;
use fbcode::training::{curriculum_snrs, lr_at, train_loop, TrainOptions};
use fbcode::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Archive { .. } => PyIOError::new_err(e.to_string()),
        Error::Numerical(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_mode(mode: &str) -> PyResult<FeedbackMode> {
    match mode {
        "active" => Ok(FeedbackMode::Active),
        "passive" => Ok(FeedbackMode::Passive),
        "systematic_first" => Ok(FeedbackMode::SystematicFirst),
        other => Err(PyValueError::new_err(format!("unknown feedback mode `{other}`"))),
    }
}

/// Experiment configuration.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    /// The full-size reference setup.
    #[staticmethod]
    fn reference() -> Self {
        PyConfig { inner: reference_config() }
    }

    /// The small setup used for quick learning experiments.
    #[staticmethod]
    #[pyo3(signature = (mode = "active"))]
    fn desk(mode: &str) -> PyResult<Self> {
        Ok(PyConfig { inner: desk_scale_config(parse_mode(mode)?) })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(PyConfig { inner: ExperimentConfig::from_toml(text).map_err(to_py)? })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    /// Returns a copy with `key=value` overrides applied.
    fn with_overrides(&self, overrides: Vec<String>) -> PyResult<Self> {
        Ok(PyConfig { inner: self.inner.with_overrides(&overrides).map_err(to_py)? })
    }

    /// List of violated invariants (empty when valid).
    fn violations(&self) -> Vec<String> {
        self.inner.validate().violations
    }

    /// Forward uses, feedback uses and direction changes per message.
    fn accounting(&self) -> (usize, usize, usize) {
        let a = self.inner.protocol.accounting();
        (a.forward_uses, a.feedback_uses, a.direction_changes)
    }

    /// Curriculum SNRs `(ff_db, fb_db)` at a batch index.
    fn curriculum_snrs(&self, batch_index: u64) -> (f64, f64) {
        let s = curriculum_snrs(batch_index, &self.inner.train, Snrs::from_protocol(&self.inner.protocol));
        (s.ff_db, s.fb_db)
    }

    fn lr_at(&self, batch_index: u64) -> f64 {
        lr_at(batch_index, &self.inner.train)
    }

    #[getter]
    fn message_bits(&self) -> usize {
        self.inner.protocol.message_bits
    }

    #[getter]
    fn rounds(&self) -> usize {
        self.inner.protocol.rounds
    }

    #[getter]
    fn feedback_mode(&self) -> String {
        self.inner.protocol.feedback_mode.to_string()
    }

    fn __repr__(&self) -> String {
        let p = &self.inner.protocol;
        format!(
            "Config(K={}, m={}, l={}, T={}, mode={}, hash={})",
            p.message_bits,
            p.m,
            p.l,
            p.rounds,
            p.feedback_mode,
            self.inner.hash()
        )
    }
}

/// The parity, feedback and decoder networks with their normalization
/// statistics.
#[pyclass(name = "Model")]
struct PyModel {
    inner: networks::Model<f32>,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config, seed = 0))]
    fn new(config: &PyConfig, seed: u64) -> PyResult<Self> {
        Ok(PyModel { inner: networks::Model::new(&config.inner, seed).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = fbcode::archive::load_model::<f32>(&path).map_err(to_py)?;
        Ok(PyModel { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        fbcode::archive::save_model(&self.inner, &path, Default::default()).map_err(to_py)
    }

    /// Freezes normalization statistics from one calibration batch.
    #[pyo3(signature = (batch = 10000, seed = 0))]
    fn freeze(&mut self, batch: usize, seed: u64) -> PyResult<()> {
        networks::freeze_stats(&mut self.inner, batch, &mut rng_from_seed(derive_seed(seed, "freeze"))).map_err(to_py)
    }

    #[getter]
    fn is_frozen(&self) -> bool {
        self.inner.is_frozen()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params.num_scalars()
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig { inner: self.inner.config.clone() }
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner.params.names().to_vec()
    }

    /// Runs one message through all rounds and returns its symbol trace.
    #[pyo3(signature = (bits, snr_ff_db = None, snr_fb_db = None, seed = 0))]
    fn run_episode<'py>(
        &self,
        py: Python<'py>,
        bits: Vec<u8>,
        snr_ff_db: Option<f64>,
        snr_fb_db: Option<f64>,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let p = &self.inner.config.protocol;
        let snrs = Snrs::new(snr_ff_db.unwrap_or(p.snr_ff_db), snr_fb_db.unwrap_or(p.snr_fb_db));
        let tr = run_episode(&self.inner, &bits, snrs, &mut rng_from_seed(seed)).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("forward", tr.forward)?;
        d.set_item("forward_rx", tr.forward_rx)?;
        d.set_item("feedback", tr.feedback)?;
        d.set_item("feedback_rx", tr.feedback_rx)?;
        d.set_item("logits", tr.logits)?;
        d.set_item("labels", tr.labels)?;
        d.set_item("decoded_bits", tr.decoded_bits)?;
        Ok(d)
    }

    /// Monte-Carlo BLER at one SNR pair.
    #[allow(clippy::too_many_arguments)]
    #[pyo3(signature = (snr_ff_db, snr_fb_db, min_errors = 100, max_trials = 100_000_000, batch = 10000, seed = 0))]
    fn estimate_bler<'py>(
        &self,
        py: Python<'py>,
        snr_ff_db: f64,
        snr_fb_db: f64,
        min_errors: u64,
        max_trials: u64,
        batch: usize,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let opts = EstimateOptions { min_errors, max_trials, messages_per_batch: batch, shards: 1, seed };
        let p = estimate_bler(&self.inner, Snrs::new(snr_ff_db, snr_fb_db), &opts).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("snr_ff_db", p.snr_ff_db)?;
        d.set_item("snr_fb_db", p.snr_fb_db)?;
        d.set_item("trials", p.trials)?;
        d.set_item("block_errors", p.block_errors)?;
        d.set_item("bler", p.bler)?;
        d.set_item("ci95", (p.ci95_low, p.ci95_high))?;
        d.set_item("per_block_error_rate", p.per_block_error_rate)?;
        d.set_item("cap_hit", p.cap_hit)?;
        d.set_item("wall_time", p.wall_time)?;
        Ok(d)
    }

    /// Average forward and feedback power over `messages` random messages.
    #[pyo3(signature = (messages = 10000, seed = 0))]
    fn power(&self, messages: usize, seed: u64) -> PyResult<(f64, f64)> {
        let snrs = Snrs::from_protocol(&self.inner.config.protocol);
        let a = power_audit(&self.inner, messages, 10_000, snrs, seed).map_err(to_py)?;
        Ok((a.forward_power, a.feedback_power))
    }
}

/// Trains a model and returns the path of the final archive.
#[pyfunction]
#[pyo3(signature = (config, out_dir, log_every = 0))]
fn train(py: Python<'_>, config: &PyConfig, out_dir: PathBuf, log_every: u64) -> PyResult<String> {
    let cfg = config.inner.clone();
    let opts = TrainOptions { out_dir, log_every, ..Default::default() };
    let outcome = py.detach(|| train_loop::<f32>(&cfg, &opts)).map_err(to_py)?;
    Ok(outcome.archive.map(|p| p.display().to_string()).unwrap_or_default())
}

#[pymodule]
fn fbcode_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
