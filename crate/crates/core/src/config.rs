//! Run configuration: a TOML document whose shipped defaults are the
//! full-scale simulation settings, plus `key=value` overrides.
//!
//! Unknown keys are rejected at every level. Device spacings are given in
//! wavelengths of the centre frequency.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{ChannelSpec, PathLossModel, PhaseOffsets, Scene};
use crate::emnn::{ModelSpec, PowerPolicy};
use crate::error::{Error, Result};
use crate::metasurface::{subcarrier_frequencies, PanelLayout, Polarization, Side};
use crate::trainer::TrainConfig;
#[cfg(test)]
use crate::trainer::PowerDraw;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    pub center_frequency_hz: f64,
    pub wavelength_m: f64,
    pub bandwidth_hz: f64,
    pub subcarriers: usize,
    pub users: usize,
    pub bs_position: [f64; 3],
    pub user_positions: Vec<[f64; 3]>,
    pub bits_per_user: Vec<usize>,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            center_frequency_hz: 28e9,
            wavelength_m: 0.0107,
            bandwidth_hz: 100e6,
            subcarriers: 32,
            users: 3,
            bs_position: [0.0, 0.0, 0.0],
            user_positions: vec![[10.0, 0.0, 20.0], [20.0, 0.0, 20.0], [0.0, 0.0, 30.0]],
            bits_per_user: vec![32, 16, 8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    pub epsilon: f64,
    pub xpd: f64,
    pub scatterers: usize,
    pub reference_distance_m: f64,
    pub path_loss_exponent: f64,
    pub shadowing_db: f64,
    pub noise_power_dbm: f64,
    pub rician_k_db: f64,
    pub mean_excess_delay_s: f64,
    /// Polarisation phase offsets of dual-polarised links.
    pub phase_offsets: PhaseOffsets,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            epsilon: 0.2,
            xpd: 4.0,
            scatterers: 100,
            reference_distance_m: 1.0,
            path_loss_exponent: 3.5,
            shadowing_db: 9.0,
            noise_power_dbm: -110.0,
            rician_k_db: 10.0,
            mean_excess_delay_s: 100e-9,
            phase_offsets: PhaseOffsets::default(),
        }
    }
}

/// Geometry of one device family (single- or dual-polarised).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeviceConfig {
    pub layers_tx: usize,
    pub layers_rx: usize,
    pub units_tx: [usize; 2],
    pub units_rx: [usize; 2],
    pub antennas_tx: [usize; 2],
    pub antennas_rx: [usize; 2],
    pub unit_spacing_tx: f64,
    pub unit_spacing_rx: f64,
    pub layer_spacing_tx: f64,
    pub layer_spacing_rx: f64,
}

impl DeviceConfig {
    fn with_antennas(tx: [usize; 2], rx: [usize; 2]) -> Self {
        DeviceConfig {
            layers_tx: 3,
            layers_rx: 3,
            units_tx: [10, 10],
            units_rx: [10, 10],
            antennas_tx: tx,
            antennas_rx: rx,
            unit_spacing_tx: 0.5,
            unit_spacing_rx: 0.5,
            layer_spacing_tx: 0.5,
            layer_spacing_rx: 0.5,
        }
    }

    fn single_default() -> Self {
        Self::with_antennas([4, 4], [3, 3])
    }

    fn dual_default() -> Self {
        Self::with_antennas([3, 3], [2, 2])
    }
}

fn default_sim() -> DeviceConfig {
    DeviceConfig::single_default()
}

fn default_dpsim() -> DeviceConfig {
    DeviceConfig::dual_default()
}

impl Default for DeviceConfig {
    fn default() -> Self {
        Self::single_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub mode: Polarization,
    pub power_policy: PowerPolicy,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub inject_noise: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            mode: Polarization::Single,
            power_policy: PowerPolicy::PerSymbol,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            inject_noise: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Training on the statistical channel (also used by `train`).
    pub pretrain: TrainConfig,
    /// Per-channel finetuning on an instantaneous realization.
    pub finetune: TrainConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            pretrain: TrainConfig::default(),
            finetune: TrainConfig {
                epochs: 200,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Test symbols per replica and power point.
    pub test_scale: usize,
    pub monte_carlo: usize,
    pub powers_dbm: Vec<f64>,
    /// Symbols per forward pass during measurement.
    pub chunk: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            test_scale: 100_000,
            monte_carlo: 100,
            powers_dbm: vec![0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0],
            chunk: 1000,
        }
    }
}

/// Variable a sweep varies, one at a time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVar {
    /// Test transmit power in dBm.
    PowerDbm,
    /// Units per side of every TX and RX layer (`n × n`).
    Units,
    /// Layer count of TX and RX devices.
    Layers,
    /// TX antennas per side (`a × a`) for both device families.
    Antennas,
    Subcarriers,
    /// Bits per user, equal for every user.
    Bits,
    /// Polarisation conversion ratio; XPD follows.
    Epsilon,
}

impl SweepVar {
    pub fn name(self) -> &'static str {
        match self {
            SweepVar::PowerDbm => "power_dbm",
            SweepVar::Units => "units",
            SweepVar::Layers => "layers",
            SweepVar::Antennas => "antennas",
            SweepVar::Subcarriers => "subcarriers",
            SweepVar::Bits => "bits",
            SweepVar::Epsilon => "epsilon",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub variable: SweepVar,
    /// Grid values; empty means the evaluation powers for a power sweep.
    pub values: Vec<f64>,
    pub modes: Vec<Polarization>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            variable: SweepVar::PowerDbm,
            values: Vec::new(),
            modes: vec![Polarization::Single, Polarization::Dual],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeployConfig {
    /// Phase quantisation bits for exported phase maps.
    pub phase_bits: u32,
}

impl Default for DeployConfig {
    fn default() -> Self {
        DeployConfig { phase_bits: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    pub system: SystemConfig,
    pub channel: ChannelConfig,
    #[serde(default = "default_sim")]
    pub sim: DeviceConfig,
    #[serde(default = "default_dpsim")]
    pub dpsim: DeviceConfig,
    pub network: NetworkConfig,
    pub training: TrainingConfig,
    pub evaluation: EvaluationConfig,
    pub sweep: SweepConfig,
    pub deploy: DeployConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: "runs".into(),
            system: SystemConfig::default(),
            channel: ChannelConfig::default(),
            sim: DeviceConfig::single_default(),
            dpsim: DeviceConfig::dual_default(),
            network: NetworkConfig::default(),
            training: TrainingConfig::default(),
            evaluation: EvaluationConfig::default(),
            sweep: SweepConfig::default(),
            deploy: DeployConfig::default(),
        }
    }
}

/// Parses `text` as a TOML value; bare words fall back to strings.
fn parse_override_value(text: &str) -> toml::Value {
    let doc = format!("v = {text}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(text.into())),
        Err(_) => toml::Value::String(text.into()),
    }
}

/// Applies `a.b.c=value` to a TOML table, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| Error::parse("--set", format!("expected key=value, got `{assignment}`")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::parse("--set", format!("malformed key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::parse("--set", format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_override_value(value.trim()));
    Ok(())
}

impl RunConfig {
    /// Parses a TOML document and applies overrides. Does not validate.
    pub fn from_toml(text: &str, origin: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::parse(origin, e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        RunConfig::deserialize(table).map_err(|e| Error::parse(origin, e.to_string()))
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, &path.display().to_string(), overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("serialising config: {e}")))
    }

    /// SHA-256 of the canonical TOML form, hex encoded.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn device(&self, mode: Polarization) -> &DeviceConfig {
        match mode {
            Polarization::Single => &self.sim,
            Polarization::Dual => &self.dpsim,
        }
    }

    pub fn frequencies(&self) -> Vec<f64> {
        subcarrier_frequencies(self.system.center_frequency_hz, self.system.bandwidth_hz, self.system.subcarriers)
    }

    pub fn layouts(&self, mode: Polarization) -> (PanelLayout, PanelLayout) {
        let d = self.device(mode);
        let wl = self.system.wavelength_m;
        let tx = PanelLayout {
            side: Side::Tx,
            units_x: d.units_tx[0],
            units_y: d.units_tx[1],
            unit_spacing: d.unit_spacing_tx * wl,
            layer_spacing: d.layer_spacing_tx * wl,
            layer_count: d.layers_tx,
            antennas_x: d.antennas_tx[0],
            antennas_y: d.antennas_tx[1],
        };
        let rx = PanelLayout {
            side: Side::Rx,
            units_x: d.units_rx[0],
            units_y: d.units_rx[1],
            unit_spacing: d.unit_spacing_rx * wl,
            layer_spacing: d.layer_spacing_rx * wl,
            layer_count: d.layers_rx,
            antennas_x: d.antennas_rx[0],
            antennas_y: d.antennas_rx[1],
        };
        (tx, rx)
    }

    pub fn model_spec(&self, mode: Polarization) -> ModelSpec {
        let (tx, rx) = self.layouts(mode);
        ModelSpec {
            polarization: mode,
            tx,
            rx,
            frequencies: self.frequencies(),
            bits_per_user: self.system.bits_per_user.clone(),
            power_policy: self.network.power_policy,
            bn_momentum: self.network.bn_momentum,
            bn_eps: self.network.bn_eps,
            noise_power_dbm: self.channel.noise_power_dbm,
            inject_noise: self.network.inject_noise,
        }
    }

    pub fn channel_spec(&self, mode: Polarization) -> ChannelSpec {
        let (tx, rx) = self.layouts(mode);
        let c = &self.channel;
        ChannelSpec {
            scene: Scene {
                bs_position: self.system.bs_position,
                user_positions: self.system.user_positions.clone(),
                scatterers: c.scatterers,
                rician_k_db: c.rician_k_db,
                mean_excess_delay: c.mean_excess_delay_s,
                path_loss: PathLossModel {
                    reference_distance: c.reference_distance_m,
                    exponent: c.path_loss_exponent,
                    shadowing_db: c.shadowing_db,
                    wavelength: self.system.wavelength_m,
                },
                epsilon: c.epsilon,
                phase_offsets: c.phase_offsets,
            },
            tx,
            rx,
            frequencies: self.frequencies(),
            polarization: mode,
        }
    }

    /// Checks cross-field consistency for the configured mode.
    pub fn validate(&self) -> Result<()> {
        self.validate_mode(self.network.mode)
    }

    pub fn validate_mode(&self, mode: Polarization) -> Result<()> {
        let s = &self.system;
        if s.users != s.user_positions.len() || s.users != s.bits_per_user.len() {
            return Err(Error::config(format!(
                "system.users = {} but {} user positions and {} bit allocations",
                s.users,
                s.user_positions.len(),
                s.bits_per_user.len()
            )));
        }
        if !(s.wavelength_m > 0.0 && s.center_frequency_hz > 0.0 && s.bandwidth_hz >= 0.0) {
            return Err(Error::config("wavelength, centre frequency and bandwidth must be positive"));
        }
        let c = &self.channel;
        if !(c.epsilon > 0.0 && c.epsilon < 1.0) {
            return Err(Error::config(format!("channel.epsilon must lie in (0, 1), got {}", c.epsilon)));
        }
        let implied = (1.0 - c.epsilon) / c.epsilon;
        if (c.xpd - implied).abs() > 1e-9 * implied.max(1.0) {
            return Err(Error::config(format!(
                "channel.xpd = {} disagrees with epsilon {} (implies {implied})",
                c.xpd, c.epsilon
            )));
        }
        let e = &self.evaluation;
        if e.test_scale == 0 || e.monte_carlo == 0 || e.chunk == 0 {
            return Err(Error::config("evaluation test_scale, monte_carlo and chunk must be positive"));
        }
        if self.deploy.phase_bits == 0 || self.deploy.phase_bits > 16 {
            return Err(Error::config("deploy.phase_bits must lie in 1..=16"));
        }
        self.training.pretrain.validate()?;
        self.training.finetune.validate()?;
        self.model_spec(mode).validate()?;
        self.channel_spec(mode).validate()
    }

    /// Copy with one sweep variable set to `value`.
    pub fn with_sweep_value(&self, var: SweepVar, value: f64) -> Result<RunConfig> {
        let count = || -> Result<usize> {
            if value >= 1.0 && value.fract() == 0.0 && value < 1e6 {
                Ok(value as usize)
            } else {
                Err(Error::config(format!("{} needs a positive integer, got {value}", var.name())))
            }
        };
        let mut c = self.clone();
        match var {
            SweepVar::PowerDbm => {
                if !value.is_finite() {
                    return Err(Error::config("sweep power must be finite"));
                }
                c.evaluation.powers_dbm = vec![value];
            }
            SweepVar::Units => {
                let n = count()?;
                for d in [&mut c.sim, &mut c.dpsim] {
                    d.units_tx = [n, n];
                    d.units_rx = [n, n];
                }
            }
            SweepVar::Layers => {
                let n = count()?;
                for d in [&mut c.sim, &mut c.dpsim] {
                    d.layers_tx = n;
                    d.layers_rx = n;
                }
            }
            SweepVar::Antennas => {
                let n = count()?;
                for d in [&mut c.sim, &mut c.dpsim] {
                    d.antennas_tx = [n, n];
                }
            }
            SweepVar::Subcarriers => c.system.subcarriers = count()?,
            SweepVar::Bits => {
                let n = count()?;
                c.system.bits_per_user = vec![n; c.system.users];
            }
            SweepVar::Epsilon => {
                c.channel.epsilon = value;
                c.channel.xpd = (1.0 - value) / value;
            }
        }
        Ok(c)
    }

    /// Trainer configuration with its seed derived from the master seed.
    pub fn pretrain_config(&self, salt: u64) -> TrainConfig {
        TrainConfig {
            seed: self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(salt),
            ..self.training.pretrain.clone()
        }
    }

    pub fn finetune_config(&self, salt: u64) -> TrainConfig {
        TrainConfig {
            seed: self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(salt ^ 0x5151),
            ..self.training.finetune.clone()
        }
    }
}

/// Reference list of `(dotted key, value)` pairs the shipped defaults must reproduce.
pub fn parse_manifest(text: &str) -> Result<Vec<(String, toml::Value)>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| Error::parse("manifest", format!("bad line `{l}`")))?;
            Ok((k.trim().to_string(), parse_override_value(v.trim())))
        })
        .collect()
}

/// Looks up a dotted key in a serialised config.
pub fn lookup<'a>(table: &'a toml::Table, key: &str) -> Option<&'a toml::Value> {
    let mut parts = key.split('.');
    let mut cur = table.get(parts.next()?)?;
    for p in parts {
        cur = cur.as_table()?.get(p)?;
    }
    Some(cur)
}
