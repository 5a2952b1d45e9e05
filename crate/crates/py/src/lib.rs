//! Python bindings: configs, models, training, BER evaluation and the CLI.

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use simlink::channel::{dbm_to_watts as dbm_to_w, ChannelProvider};
use simlink::checkpoint::Checkpoint;
use simlink::config::RunConfig;
use simlink::deploy::{quantize_model, PhaseMap, Quantization};
use simlink::emnn::EmnnModel;
use simlink::error::Error;
use simlink::evaluator::{monte_carlo_ber, pretrain_model, recipe, untrained_model};
use simlink::metasurface::Polarization;
use simlink::trainer::{train, TrainPhase};
use simlink::wavemath::RngStreams;

create_exception!(pysimlink, SimlinkError, PyException);

fn err(e: Error) -> PyErr {
    SimlinkError::new_err(e.to_string())
}

fn parse_mode(mode: &str) -> PyResult<Polarization> {
    match mode {
        "single" => Ok(Polarization::Single),
        "dual" => Ok(Polarization::Dual),
        other => Err(PyValueError::new_err(format!("mode must be 'single' or 'dual', got '{other}'"))),
    }
}

fn mode_name(mode: Polarization) -> &'static str {
    match mode {
        Polarization::Single => "single",
        Polarization::Dual => "dual",
    }
}

/// Run configuration. Overrides use the CLI's `dotted.key=value` syntax.
#[pyclass(name = "Config", module = "pysimlink", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    /// Built-in full-scale defaults with optional overrides.
    #[new]
    #[pyo3(signature = (overrides = None))]
    fn new(overrides: Option<Vec<String>>) -> PyResult<Self> {
        let base = RunConfig::default().to_toml().map_err(err)?;
        Self::from_toml(&base, overrides)
    }

    #[staticmethod]
    #[pyo3(signature = (path, overrides = None))]
    fn load(path: std::path::PathBuf, overrides: Option<Vec<String>>) -> PyResult<Self> {
        let inner = RunConfig::load(&path, &overrides.unwrap_or_default()).map_err(err)?;
        Ok(PyConfig { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (text, overrides = None))]
    fn from_toml(text: &str, overrides: Option<Vec<String>>) -> PyResult<Self> {
        let inner = RunConfig::from_toml(text, "python", &overrides.unwrap_or_default()).map_err(err)?;
        Ok(PyConfig { inner })
    }

    /// Copy with further overrides applied.
    fn with_overrides(&self, overrides: Vec<String>) -> PyResult<Self> {
        Self::from_toml(&self.to_toml()?, Some(overrides))
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(err)
    }

    fn hash(&self) -> PyResult<String> {
        self.inner.hash().map_err(err)
    }

    #[pyo3(signature = (mode = "single"))]
    fn validate(&self, mode: &str) -> PyResult<()> {
        self.inner.validate_mode(parse_mode(mode)?).map_err(err)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    fn __repr__(&self) -> String {
        let hash = self.inner.hash().unwrap_or_default();
        format!("Config(hash={}, seed={})", &hash[..hash.len().min(8)], self.inner.seed)
    }
}

/// A trainable end-to-end link model.
#[pyclass(name = "Model", module = "pysimlink", from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: EmnnModel,
}

#[pymethods]
impl PyModel {
    /// Freshly initialised model for `cfg`.
    #[staticmethod]
    #[pyo3(signature = (cfg, mode = "single"))]
    fn untrained(cfg: &PyConfig, mode: &str) -> PyResult<Self> {
        let inner = untrained_model(&cfg.inner, parse_mode(mode)?).map_err(err)?;
        Ok(PyModel { inner })
    }

    /// Pretrains on the statistical channel. Returns the model and its per-epoch losses.
    #[staticmethod]
    #[pyo3(signature = (cfg, mode = "single"))]
    fn pretrain(py: Python<'_>, cfg: &PyConfig, mode: &str) -> PyResult<(Self, Vec<f64>)> {
        let mode = parse_mode(mode)?;
        let cfg = cfg.inner.clone();
        let (inner, metrics) = py.detach(move || pretrain_model(&cfg, mode)).map_err(err)?;
        Ok((PyModel { inner }, metrics.losses()))
    }

    #[staticmethod]
    fn load_checkpoint(path: std::path::PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(err)?;
        Ok(PyModel { inner: ck.model })
    }

    /// Finetunes in place on instantaneous channel `channel_index`; returns the losses.
    #[pyo3(signature = (cfg, channel_index = 0, epochs = None))]
    fn finetune(&mut self, py: Python<'_>, cfg: &PyConfig, channel_index: u64, epochs: Option<usize>) -> PyResult<Vec<f64>> {
        let cfg = cfg.inner.clone();
        let mut model = self.inner.clone();
        let metrics = py
            .detach(|| {
                let streams = RngStreams::new(cfg.seed).split("python-finetune", 0);
                let ch = cfg.channel_spec(model.spec.polarization).realization(&streams, channel_index)?;
                let mut tc = cfg.finetune_config(channel_index);
                if let Some(e) = epochs {
                    tc.epochs = e;
                }
                train(&mut model, &mut ChannelProvider::instantaneous(ch), &tc, TrainPhase::Finetune, |_, _, _| Ok(()))
            })
            .map_err(err)?;
        self.inner = model;
        Ok(metrics.losses())
    }

    /// Monte-Carlo BER per power: one dict per point.
    #[pyo3(signature = (cfg, powers_dbm = None, seed = None))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        cfg: &PyConfig,
        powers_dbm: Option<Vec<f64>>,
        seed: Option<u64>,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let cfg = &cfg.inner;
        let powers = powers_dbm.unwrap_or_else(|| cfg.evaluation.powers_dbm.clone());
        let seed = seed.unwrap_or(cfg.seed);
        let spec = cfg.channel_spec(self.inner.spec.polarization);
        let rec = recipe(cfg);
        let model = &self.inner;
        let points = py.detach(|| monte_carlo_ber(model, &spec, &rec, &powers, seed)).map_err(err)?;
        points
            .iter()
            .map(|p| {
                let d = PyDict::new(py);
                d.set_item("power_dbm", p.value)?;
                d.set_item("mode", mode_name(p.mode))?;
                d.set_item("ber", p.aggregate_ber)?;
                d.set_item("half_width", p.aggregate_half_width)?;
                d.set_item("user_ber", p.ber.clone())?;
                d.set_item("bits", p.bits.iter().sum::<u64>())?;
                d.set_item("errors", p.errors.iter().sum::<u64>())?;
                d.set_item("replicas", p.replicas)?;
                d.set_item("dropped", p.dropped)?;
                Ok(d)
            })
            .collect()
    }

    /// Copy with every metasurface phase rounded to a `bits`-bit codebook.
    fn quantized(&self, bits: u32) -> PyResult<Self> {
        Ok(PyModel {
            inner: quantize_model(&self.inner, bits).map_err(err)?,
        })
    }

    /// Phase map text of the transmit stack, or of user `user`'s receive stack.
    #[pyo3(signature = (bits = 8, user = None))]
    fn phase_map(&self, bits: u32, user: Option<usize>) -> PyResult<String> {
        let q = Quantization::new(bits).map_err(err)?;
        let stack = match user {
            None => self.inner.tx_stack(),
            Some(j) if j < self.inner.spec.users() => self.inner.rx_stack(j),
            Some(j) => return Err(PyValueError::new_err(format!("no user {j}"))),
        };
        Ok(PhaseMap::from_stack(&stack, q).map_err(err)?.to_text())
    }

    #[getter]
    fn mode(&self) -> &'static str {
        mode_name(self.inner.spec.polarization)
    }

    #[getter]
    fn bits_per_user(&self) -> Vec<usize> {
        self.inner.spec.bits_per_user.clone()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.store.iter().map(|(_, p)| p.data.len()).sum()
    }

    fn __repr__(&self) -> String {
        format!("Model(mode={}, bits_per_user={:?})", self.mode(), self.inner.spec.bits_per_user)
    }
}

#[pyfunction]
fn dbm_to_watts(dbm: f64) -> f64 {
    dbm_to_w(dbm)
}

/// Runs the command-line front end with `args` (without the program name); returns its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    py.detach(|| simlink::cli::run(std::iter::once("simlink".to_string()).chain(args)))
}

#[pymodule]
fn pysimlink(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SimlinkError", m.py().get_type::<SimlinkError>())?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(dbm_to_watts, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
