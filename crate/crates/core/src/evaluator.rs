//! Monte-Carlo BER measurement and one-variable sweeps.
//!
//! Replicas run concurrently; each owns a model clone, its own channel
//! realization and its own random streams, and results are merged in
//! replica order so reports do not depend on scheduling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{dbm_to_watts, ChannelProvider, ChannelRealization, ChannelSpec};
use crate::config::{RunConfig, SweepVar};
use crate::emnn::{build_model, hard_decision, random_bits, EmnnModel, Mode};
use crate::error::{Error, Result};
use crate::metasurface::{Polarization, PropagationSet};
use crate::trainer::{train, TrainConfig, TrainMetrics, TrainPhase};
use crate::wavemath::{RMat, RngStreams, StreamRng};

/// Wald 95% quantile.
const Z95: f64 = 1.959963984540054;

/// Anything that turns transmitted bits into per-user soft bits.
pub trait Link: Sync {
    fn bits_per_user(&self) -> Vec<usize>;

    fn receive(
        &self,
        bits: &RMat,
        channel: &ChannelRealization,
        power: &[f64],
        noise: &mut StreamRng,
    ) -> Result<Vec<RMat>>;
}

impl Link for EmnnModel {
    fn bits_per_user(&self) -> Vec<usize> {
        self.spec.bits_per_user.clone()
    }

    fn receive(
        &self,
        bits: &RMat,
        channel: &ChannelRealization,
        power: &[f64],
        noise: &mut StreamRng,
    ) -> Result<Vec<RMat>> {
        Ok(self.forward(bits, channel, power, noise, Mode::Eval)?.soft)
    }
}

/// Bits tested and errors per user.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BerCounts {
    pub bits: Vec<u64>,
    pub errors: Vec<u64>,
}

impl BerCounts {
    pub fn zeros(users: usize) -> Self {
        BerCounts {
            bits: vec![0; users],
            errors: vec![0; users],
        }
    }

    pub fn ber(&self, j: usize) -> f64 {
        ratio(self.errors[j], self.bits[j])
    }

    pub fn aggregate(&self) -> f64 {
        ratio(self.errors.iter().sum(), self.bits.iter().sum())
    }

    pub fn total_bits(&self) -> u64 {
        self.bits.iter().sum()
    }

    pub fn merge(&mut self, other: &BerCounts) {
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a += b;
        }
        for (a, b) in self.errors.iter_mut().zip(&other.errors) {
            *a += b;
        }
    }
}

fn ratio(e: u64, n: u64) -> f64 {
    if n == 0 {
        0.0
    } else {
        e as f64 / n as f64
    }
}

/// Wald 95% half-width for `errors` out of `n`.
pub fn wald_half_width(errors: u64, n: u64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = ratio(errors, n);
    Z95 * (p * (1.0 - p) / n as f64).sqrt()
}

/// Transmitted bits and hard decisions of one measured chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct Transcript {
    pub bits: RMat,
    pub decided: Vec<RMat>,
}

/// Counts hard-decision errors over `n_symbols` random bit vectors at
/// transmit power `power_w`. A statistical provider is redrawn per chunk.
pub fn measure_ber(
    link: &dyn Link,
    provider: &mut ChannelProvider,
    power_w: f64,
    n_symbols: usize,
    seed: u64,
    chunk: usize,
    mut transcript: Option<&mut Vec<Transcript>>,
) -> Result<BerCounts> {
    if chunk == 0 {
        return Err(Error::config("measurement chunk must be positive"));
    }
    let alloc = link.bits_per_user();
    let total: usize = alloc.iter().sum();
    let streams = RngStreams::new(seed);
    let mut counts = BerCounts::zeros(alloc.len());
    let mut done = 0;
    let mut k = 0u64;
    while done < n_symbols {
        let rows = chunk.min(n_symbols - done);
        let channel = provider.provide()?;
        let bits = random_bits(rows, total, &mut streams.stream("test_bits", k));
        let soft = link.receive(&bits, &channel, &vec![power_w; rows], &mut streams.stream("test_noise", k))?;
        let decided: Vec<RMat> = soft.iter().map(hard_decision).collect();
        let mut start = 0;
        for (j, (d, &nb)) in decided.iter().zip(&alloc).enumerate() {
            let sent = bits.col_slice(start, nb);
            counts.bits[j] += (rows * nb) as u64;
            counts.errors[j] += sent.as_slice().iter().zip(d.as_slice()).filter(|(a, b)| a != b).count() as u64;
            start += nb;
        }
        if let Some(t) = transcript.as_deref_mut() {
            t.push(Transcript { bits, decided });
        }
        done += rows;
        k += 1;
    }
    Ok(counts)
}

/// One BER point of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BerPoint {
    pub mode: Polarization,
    pub value: f64,
    pub ber: Vec<f64>,
    pub bits: Vec<u64>,
    pub errors: Vec<u64>,
    pub half_width: Vec<f64>,
    pub aggregate_ber: f64,
    pub aggregate_half_width: f64,
    pub replicas: usize,
    pub dropped: usize,
    /// Standard deviation of the aggregate BER across replicas.
    pub replica_std: f64,
}

impl BerPoint {
    fn from_replicas(mode: Polarization, value: f64, per_replica: &[BerCounts], dropped: usize, users: usize) -> Self {
        let mut pooled = BerCounts::zeros(users);
        for c in per_replica {
            pooled.merge(c);
        }
        let aggs: Vec<f64> = per_replica.iter().map(BerCounts::aggregate).collect();
        let mean = aggs.iter().sum::<f64>() / aggs.len().max(1) as f64;
        let var = if aggs.len() > 1 {
            aggs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (aggs.len() - 1) as f64
        } else {
            0.0
        };
        let total_err: u64 = pooled.errors.iter().sum();
        BerPoint {
            mode,
            value,
            ber: (0..users).map(|j| pooled.ber(j)).collect(),
            half_width: (0..users).map(|j| wald_half_width(pooled.errors[j], pooled.bits[j])).collect(),
            aggregate_ber: pooled.aggregate(),
            aggregate_half_width: wald_half_width(total_err, pooled.total_bits()),
            bits: pooled.bits,
            errors: pooled.errors,
            replicas: per_replica.len(),
            dropped,
            replica_std: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedPoint {
    pub mode: Polarization,
    pub value: f64,
    pub reason: String,
}

pub const REPORT_FORMAT: &str = "simlink-ber-report";
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BerReport {
    pub format: String,
    pub version: u32,
    pub variable: String,
    pub values: Vec<f64>,
    pub points: Vec<BerPoint>,
    pub skipped: Vec<SkippedPoint>,
    pub config_hash: String,
    pub seed: u64,
}

const CSV_HEADER: [&str; 12] = [
    "variable",
    "value",
    "mode",
    "user",
    "ber",
    "bits",
    "errors",
    "half_width",
    "aggregate_ber",
    "aggregate_half_width",
    "replicas",
    "dropped",
];

fn mode_label(m: Polarization) -> &'static str {
    match m {
        Polarization::Single => "sim",
        Polarization::Dual => "dpsim",
    }
}

fn parse_mode(s: &str) -> Option<Polarization> {
    match s {
        "sim" => Some(Polarization::Single),
        "dpsim" => Some(Polarization::Dual),
        _ => None,
    }
}

/// A CSV row as read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub variable: String,
    pub value: f64,
    pub mode: Polarization,
    pub user: usize,
    pub ber: f64,
    pub bits: u64,
    pub errors: u64,
    pub half_width: f64,
    pub aggregate_ber: f64,
    pub aggregate_half_width: f64,
    pub replicas: usize,
    pub dropped: usize,
}

impl BerReport {
    pub fn new(variable: &str, config_hash: &str, seed: u64) -> Self {
        BerReport {
            format: REPORT_FORMAT.into(),
            version: REPORT_VERSION,
            variable: variable.into(),
            values: Vec::new(),
            points: Vec::new(),
            skipped: Vec::new(),
            config_hash: config_hash.into(),
            seed,
        }
    }

    /// One row per point and user. Floats use the shortest round-trip form.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::config(format!("writing report CSV: {e}"));
        w.write_record(CSV_HEADER).map_err(err)?;
        for p in &self.points {
            for j in 0..p.ber.len() {
                w.write_record([
                    self.variable.clone(),
                    p.value.to_string(),
                    mode_label(p.mode).to_string(),
                    j.to_string(),
                    p.ber[j].to_string(),
                    p.bits[j].to_string(),
                    p.errors[j].to_string(),
                    p.half_width[j].to_string(),
                    p.aggregate_ber.to_string(),
                    p.aggregate_half_width.to_string(),
                    p.replicas.to_string(),
                    p.dropped.to_string(),
                ])
                .map_err(err)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::config(format!("writing report CSV: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::config(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::config(format!("serialising report: {e}")))
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let r: BerReport = serde_json::from_str(text).map_err(|e| Error::parse(origin, e.to_string()))?;
        if r.format != REPORT_FORMAT || r.version != REPORT_VERSION {
            return Err(Error::parse(origin, format!("not a {REPORT_FORMAT} v{REPORT_VERSION} file")));
        }
        Ok(r)
    }
}

/// Parses a report CSV back into rows.
pub fn parse_report_csv(text: &str, origin: &str) -> Result<Vec<CsvRow>> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let headers = rd.headers().map_err(|e| Error::parse(origin, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(Error::parse(origin, format!("unexpected header {headers:?}")));
    }
    let mut rows = Vec::new();
    for (n, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(origin, e.to_string()))?;
        let bad = |field: &str| Error::parse(origin, format!("record {}: bad {field}", n + 1));
        let f = |i: usize, name: &str| rec[i].parse::<f64>().map_err(|_| bad(name));
        let u = |i: usize, name: &str| rec[i].parse::<u64>().map_err(|_| bad(name));
        rows.push(CsvRow {
            variable: rec[0].to_string(),
            value: f(1, "value")?,
            mode: parse_mode(&rec[2]).ok_or_else(|| bad("mode"))?,
            user: u(3, "user")? as usize,
            ber: f(4, "ber")?,
            bits: u(5, "bits")?,
            errors: u(6, "errors")?,
            half_width: f(7, "half_width")?,
            aggregate_ber: f(8, "aggregate_ber")?,
            aggregate_half_width: f(9, "aggregate_half_width")?,
            replicas: u(10, "replicas")? as usize,
            dropped: u(11, "dropped")? as usize,
        });
    }
    Ok(rows)
}

/// How each Monte-Carlo replica is finetuned and measured.
#[derive(Debug, Clone, PartialEq)]
pub struct Recipe {
    pub replicas: usize,
    pub finetune: TrainConfig,
    pub test_symbols: usize,
    pub chunk: usize,
}

/// Per-replica outcome: counts per requested power, or the reason it was dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicaOutcome {
    pub index: usize,
    pub result: std::result::Result<Vec<BerCounts>, String>,
}

fn mix(seed: u64, tag: u64) -> u64 {
    RngStreams::new(seed).split("mix", tag).master()
}

/// Runs replica `r`: draw its instantaneous channel, finetune a clone of
/// `base` on it, then measure at each power.
fn run_replica(
    base: &EmnnModel,
    spec: &ChannelSpec,
    recipe: &Recipe,
    powers_dbm: &[f64],
    seed: u64,
    r: usize,
) -> Result<ReplicaOutcome> {
    let streams = RngStreams::new(seed).split("replica-channel", 0);
    let channel = spec.realization(&streams, r as u64)?;
    let mut model = base.clone();
    if recipe.finetune.epochs > 0 {
        let cfg = TrainConfig {
            seed: mix(recipe.finetune.seed, r as u64),
            ..recipe.finetune.clone()
        };
        let mut provider = ChannelProvider::instantaneous(channel.clone());
        match train(&mut model, &mut provider, &cfg, TrainPhase::Finetune, |_, _, _| Ok(())) {
            Ok(_) => {}
            Err(e @ Error::Diverged { .. }) => {
                return Ok(ReplicaOutcome {
                    index: r,
                    result: Err(e.to_string()),
                })
            }
            Err(e) => return Err(e),
        }
    }
    let mut provider = ChannelProvider::instantaneous(channel);
    let counts = powers_dbm
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            measure_ber(
                &model,
                &mut provider,
                dbm_to_watts(p),
                recipe.test_symbols,
                mix(seed, (r as u64) << 16 | k as u64),
                recipe.chunk,
                None,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ReplicaOutcome {
        index: r,
        result: Ok(counts),
    })
}

/// Runs the replicas concurrently; the result is in replica order.
pub fn run_replicas(
    base: &EmnnModel,
    spec: &ChannelSpec,
    recipe: &Recipe,
    powers_dbm: &[f64],
    seed: u64,
) -> Result<Vec<ReplicaOutcome>> {
    if recipe.replicas == 0 {
        return Err(Error::config("Monte-Carlo needs at least one replica"));
    }
    (0..recipe.replicas)
        .into_par_iter()
        .map(|r| run_replica(base, spec, recipe, powers_dbm, seed, r))
        .collect()
}

/// Merges replica outcomes into one point per power.
pub fn merge_replicas(
    outcomes: &[ReplicaOutcome],
    mode: Polarization,
    values: &[f64],
    users: usize,
) -> Result<Vec<BerPoint>> {
    let kept: Vec<&Vec<BerCounts>> = outcomes.iter().filter_map(|o| o.result.as_ref().ok()).collect();
    let dropped = outcomes.len() - kept.len();
    if kept.is_empty() {
        return Err(Error::State(format!("all {} replicas diverged", outcomes.len())));
    }
    Ok(values
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let per: Vec<BerCounts> = kept.iter().map(|c| c[k].clone()).collect();
            BerPoint::from_replicas(mode, v, &per, dropped, users)
        })
        .collect())
}

/// BER point per test power averaged over finetuned replicas.
pub fn monte_carlo_ber(
    base: &EmnnModel,
    spec: &ChannelSpec,
    recipe: &Recipe,
    powers_dbm: &[f64],
    seed: u64,
) -> Result<Vec<BerPoint>> {
    let out = run_replicas(base, spec, recipe, powers_dbm, seed)?;
    merge_replicas(&out, base.spec.polarization, powers_dbm, base.spec.users())
}

/// Fresh model for `mode` with its initialisation seed derived from the master seed.
pub fn untrained_model(cfg: &RunConfig, mode: Polarization) -> Result<EmnnModel> {
    cfg.validate_mode(mode)?;
    let spec = cfg.model_spec(mode);
    let prop = PropagationSet::build(&spec.tx, &spec.rx, &spec.frequencies)?;
    build_model(&spec, prop, mix(cfg.seed, 1))
}

/// Trains a fresh model on the statistical channel of `cfg`.
pub fn pretrain_model(cfg: &RunConfig, mode: Polarization) -> Result<(EmnnModel, TrainMetrics)> {
    let mut model = untrained_model(cfg, mode)?;
    let streams = RngStreams::new(cfg.seed).split("pretrain-channel", 0);
    let mut provider = ChannelProvider::statistical(cfg.channel_spec(mode), streams)?;
    let metrics = train(&mut model, &mut provider, &cfg.pretrain_config(2), TrainPhase::Pretrain, |_, _, _| Ok(()))?;
    Ok((model, metrics))
}

pub fn recipe(cfg: &RunConfig) -> Recipe {
    Recipe {
        replicas: cfg.evaluation.monte_carlo,
        finetune: cfg.finetune_config(3),
        test_symbols: cfg.evaluation.test_scale,
        chunk: cfg.evaluation.chunk,
    }
}

/// Power used for sweeps over anything other than power: the top configured power.
fn sweep_test_power(cfg: &RunConfig) -> Result<f64> {
    cfg.evaluation
        .powers_dbm
        .iter()
        .copied()
        .fold(None, |m: Option<f64>, p| Some(m.map_or(p, |m| m.max(p))))
        .ok_or_else(|| Error::config("evaluation.powers_dbm is empty"))
}

/// Runs the configured sweep: for each mode and grid value, pretrain,
/// finetune per replica and measure. Infeasible points are skipped with a reason.
pub fn sweep(cfg: &RunConfig, mut progress: impl FnMut(&str)) -> Result<BerReport> {
    let var = cfg.sweep.variable;
    let values = if cfg.sweep.values.is_empty() && var == SweepVar::PowerDbm {
        cfg.evaluation.powers_dbm.clone()
    } else {
        cfg.sweep.values.clone()
    };
    if values.is_empty() {
        return Err(Error::config("sweep grid is empty"));
    }
    if cfg.sweep.modes.is_empty() {
        return Err(Error::config("sweep needs at least one mode"));
    }
    let mut report = BerReport::new(var.name(), &cfg.hash()?, cfg.seed);
    report.values = values.clone();
    for &mode in &cfg.sweep.modes {
        if var == SweepVar::PowerDbm {
            if let Err(e) = cfg.validate_mode(mode) {
                for &v in &values {
                    report.skipped.push(SkippedPoint {
                        mode,
                        value: v,
                        reason: e.to_string(),
                    });
                }
                continue;
            }
            progress(&format!("{}: pretraining", mode_label(mode)));
            let (model, _) = pretrain_model(cfg, mode)?;
            progress(&format!("{}: {} replicas x {} powers", mode_label(mode), cfg.evaluation.monte_carlo, values.len()));
            report.points.extend(monte_carlo_ber(&model, &cfg.channel_spec(mode), &recipe(cfg), &values, mix(cfg.seed, 4))?);
            continue;
        }
        for &v in &values {
            let point = match cfg.with_sweep_value(var, v).and_then(|c| c.validate_mode(mode).map(|_| c)) {
                Ok(c) => c,
                Err(e) => {
                    progress(&format!("{} {}={v}: skipped ({e})", mode_label(mode), var.name()));
                    report.skipped.push(SkippedPoint {
                        mode,
                        value: v,
                        reason: e.to_string(),
                    });
                    continue;
                }
            };
            progress(&format!("{} {}={v}", mode_label(mode), var.name()));
            let (model, _) = pretrain_model(&point, mode)?;
            let p = sweep_test_power(&point)?;
            let mut pts = monte_carlo_ber(&model, &point.channel_spec(mode), &recipe(&point), &[p], mix(cfg.seed, 4))?;
            for pt in &mut pts {
                pt.value = v;
            }
            report.points.extend(pts);
        }
    }
    Ok(report)
}
