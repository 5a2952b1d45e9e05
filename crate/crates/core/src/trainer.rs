//! Mini-batch training, transmit-power randomisation and the
//! pretrain → finetune workflow.
//!
//! One epoch is one mini-batch: draw a channel (per the redraw cadence),
//! draw `batch_size` bit vectors and per-sample transmit powers, run the
//! traced forward pass, back-propagate the BCE loss and take one optimizer
//! step. Every random draw comes from a named stream keyed by the epoch,
//! so identical configurations reproduce bit-identical parameters.

use std::time::Instant;

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::channel::{dbm_to_watts, watts_to_dbm, ChannelProvider, ChannelRealization};
use crate::emnn::{random_bits, rx_group, ue_group, EmnnModel, Mode, TraceOptions, GROUP_BS, GROUP_TX};
use crate::error::{Error, Result};
use crate::wavemath::{bce_value, CompGraph, OptimizerSettings, OptimizerState, RMat, RngStreams};

/// Soft-bit clamp used before taking logarithms.
pub const P_MIN: f64 = 1e-12;

/// Distribution of the per-sample transmit power.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PowerDraw {
    Fixed { dbm: f64 },
    /// `lo + (hi − lo)·u` dBm with `u ~ Beta(a, b)`.
    Beta { a: f64, b: f64, lo_dbm: f64, hi_dbm: f64 },
}

impl Default for PowerDraw {
    fn default() -> Self {
        PowerDraw::Beta {
            a: 2.0,
            b: 2.0,
            lo_dbm: 0.0,
            hi_dbm: 30.0,
        }
    }
}

impl PowerDraw {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PowerDraw::Fixed { dbm } if dbm.is_finite() => Ok(()),
            PowerDraw::Fixed { .. } => Err(Error::config("fixed power must be finite")),
            PowerDraw::Beta { a, b, lo_dbm, hi_dbm } => {
                if !(a > 0.0 && b > 0.0) {
                    return Err(Error::config(format!("Beta shape parameters must be positive, got ({a}, {b})")));
                }
                if !(lo_dbm < hi_dbm && lo_dbm.is_finite() && hi_dbm.is_finite()) {
                    return Err(Error::config(format!("power bounds need lo < hi, got [{lo_dbm}, {hi_dbm}]")));
                }
                Ok(())
            }
        }
    }
}

/// Draws one transmit power in watts.
pub fn sample_power(policy: &PowerDraw, rng: &mut impl Rng) -> Result<f64> {
    policy.validate()?;
    Ok(match *policy {
        PowerDraw::Fixed { dbm } => dbm_to_watts(dbm),
        PowerDraw::Beta { a, b, lo_dbm, hi_dbm } => {
            let beta = Beta::new(a, b).map_err(|e| Error::config(format!("Beta({a}, {b}): {e}")))?;
            dbm_to_watts(lo_dbm + (hi_dbm - lo_dbm) * beta.sample(rng))
        }
    })
}

/// Mean BCE over the batch, summed over bits, with soft bits clamped to `[p_min, 1 − p_min]`.
pub fn bce_loss(bits: &RMat, soft: &RMat) -> Result<f64> {
    if bits.shape() != soft.shape() {
        return Err(Error::config(format!(
            "BCE shapes differ: bits {:?}, soft {:?}",
            bits.shape(),
            soft.shape()
        )));
    }
    Ok(bce_value(soft, bits, P_MIN))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerSettings,
    /// Epochs between learning-rate decays; 0 disables decay.
    pub lr_decay_interval: usize,
    pub power: PowerDraw,
    /// Epochs between channel redraws of a statistical provider.
    pub channel_cadence: usize,
    /// Parameter groups excluded from the gradient map.
    pub frozen: Vec<String>,
    /// Epochs between checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    /// Derived from the run's master seed rather than read from config files.
    #[serde(skip)]
    pub seed: u64,
    /// Attempts to resample bit vectors whose transmit signal is all zero
    /// before letting them through as silence.
    pub degenerate_retries: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 2000,
            batch_size: 1000,
            optimizer: OptimizerSettings::default(),
            lr_decay_interval: 100,
            power: PowerDraw::default(),
            channel_cadence: 1,
            frozen: Vec::new(),
            checkpoint_every: 0,
            seed: 0,
            degenerate_retries: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if self.channel_cadence == 0 {
            return Err(Error::config("channel cadence must be at least 1"));
        }
        self.optimizer.validate()?;
        self.power.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainPhase {
    Train,
    Pretrain,
    Finetune,
}

impl TrainPhase {
    pub fn label(self) -> &'static str {
        match self {
            TrainPhase::Train => "train",
            TrainPhase::Pretrain => "pretrain",
            TrainPhase::Finetune => "finetune",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: TrainPhase,
    pub loss: f64,
    pub lr: f64,
    /// `(group, ‖∇‖₂)` for every parameter group, frozen ones reporting 0.
    pub grad_norms: Vec<(String, f64)>,
    pub power_mean_dbm: f64,
    pub power_min_dbm: f64,
    pub power_max_dbm: f64,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub epochs: Vec<EpochMetrics>,
}

impl TrainMetrics {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    /// CSV header; `groups` fixes the gradient-norm columns.
    pub fn csv_header(groups: &[String]) -> Vec<String> {
        let mut h: Vec<String> = ["epoch", "phase", "loss", "lr", "power_mean_dbm", "power_min_dbm", "power_max_dbm"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        h.extend(groups.iter().map(|g| format!("grad_norm.{g}")));
        h
    }

    /// One record per epoch. Wall-clock time is left out so reruns produce identical bytes.
    pub fn csv_records(&self) -> Vec<Vec<String>> {
        self.epochs
            .iter()
            .map(|e| {
                let mut r = vec![
                    e.epoch.to_string(),
                    e.phase.label().to_string(),
                    format!("{:e}", e.loss),
                    format!("{:e}", e.lr),
                    format!("{:.6}", e.power_mean_dbm),
                    format!("{:.6}", e.power_min_dbm),
                    format!("{:.6}", e.power_max_dbm),
                ];
                r.extend(e.grad_norms.iter().map(|(_, n)| format!("{n:e}")));
                r
            })
            .collect()
    }
}

/// Trainable groups of a model in a fixed order.
pub fn parameter_groups(model: &EmnnModel) -> Vec<String> {
    let mut g = vec![GROUP_BS.to_string(), GROUP_TX.to_string()];
    for j in 0..model.spec.users() {
        g.push(rx_group(j));
        g.push(ue_group(j));
    }
    g
}

/// Result of one traced pass plus its gradients.
pub struct Step {
    pub loss: f64,
    pub grads: crate::wavemath::Gradients,
    pub bn_stats: Vec<Vec<crate::wavemath::BatchStats>>,
}

/// Forward + backward on one batch. Degenerate transmit rows get fresh bit
/// vectors from `retry` up to `retries` times, then pass as silence.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_gradients<R: Rng, Q: Rng>(
    model: &EmnnModel,
    bits: &mut RMat,
    channel: &ChannelRealization,
    power: &[f64],
    noise: &mut R,
    retry: &mut Q,
    retries: usize,
    frozen: &[String],
) -> Result<Step> {
    let mut attempt = 0;
    loop {
        let mut g = CompGraph::new();
        let opts = TraceOptions {
            frozen: frozen.to_vec(),
            allow_zero: attempt >= retries,
        };
        match model.trace(&mut g, bits, channel, power, noise, Mode::Train, &opts) {
            Ok(tr) => {
                let loss = model.loss(&mut g, &tr, bits, P_MIN)?;
                let value = g.real(loss)?[(0, 0)];
                let mut grads = g.backward(loss)?;
                // Frozen leaves never enter the map; drop anything else that slipped in.
                let store = &model.store;
                let frozen_ids: Vec<_> = grads
                    .iter()
                    .map(|(id, _)| id)
                    .filter(|id| frozen.iter().any(|f| *f == store.get(*id).group))
                    .collect();
                for id in frozen_ids {
                    grads.remove(id);
                }
                return Ok(Step {
                    loss: value,
                    grads,
                    bn_stats: tr.bn_stats,
                });
            }
            Err(Error::DegenerateInput { rows }) => {
                for r in rows {
                    for v in bits.row_mut(r) {
                        *v = if retry.random::<bool>() { 1.0 } else { 0.0 };
                    }
                }
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

/// Trains `model` in place. Returns per-epoch metrics; on a non-finite loss
/// or update the parameters of the last good epoch are kept and
/// [`Error::Diverged`] is returned.
pub fn train(
    model: &mut EmnnModel,
    provider: &mut ChannelProvider,
    cfg: &TrainConfig,
    phase: TrainPhase,
    mut checkpoint: impl FnMut(usize, &EmnnModel, &OptimizerState) -> Result<()>,
) -> Result<TrainMetrics> {
    cfg.validate()?;
    for f in &cfg.frozen {
        if model.store.ids_in_group(f).is_empty() {
            return Err(Error::config(format!("frozen group `{f}` does not exist")));
        }
    }
    let streams = RngStreams::new(cfg.seed).split(phase.label(), 0);
    let groups = parameter_groups(model);
    let mut opt = OptimizerState::new(cfg.optimizer, &model.store);
    let mut metrics = TrainMetrics::default();
    let mut channel: Option<ChannelRealization> = None;
    let start = Instant::now();

    for epoch in 0..cfg.epochs {
        if channel.is_none() || epoch % cfg.channel_cadence == 0 {
            channel = Some(provider.provide()?);
        }
        let ch = channel.as_ref().expect("drawn above");
        let mut bits = random_bits(cfg.batch_size, model.spec.total_bits(), &mut streams.stream("bits", epoch as u64));
        let mut prng = streams.stream("power", epoch as u64);
        let power = (0..cfg.batch_size)
            .map(|_| sample_power(&cfg.power, &mut prng))
            .collect::<Result<Vec<_>>>()?;
        let diverged = || Error::Diverged {
            epoch,
            restored_from: epoch.saturating_sub(1),
        };
        let step = match loss_and_gradients(
            model,
            &mut bits,
            ch,
            &power,
            &mut streams.stream("noise", epoch as u64),
            &mut streams.stream("resample", epoch as u64),
            cfg.degenerate_retries,
            &cfg.frozen,
        ) {
            Ok(s) => s,
            Err(Error::NonFinite { .. }) => return Err(diverged()),
            Err(e) => return Err(e),
        };
        if !step.loss.is_finite() {
            return Err(diverged());
        }
        let snapshot = model.store.clone();
        if opt.step(&mut model.store, &step.grads).is_err()
            || model.store.iter().any(|(_, p)| p.data.iter().any(|v| !v.is_finite()))
        {
            model.store = snapshot;
            return Err(diverged());
        }
        model.update_running(&step.bn_stats);

        let dbm: Vec<f64> = power.iter().map(|&p| watts_to_dbm(p)).collect();
        metrics.epochs.push(EpochMetrics {
            epoch,
            phase,
            loss: step.loss,
            lr: opt.lr,
            grad_norms: groups
                .iter()
                .map(|g| (g.clone(), step.grads.group_norm(&model.store, g)))
                .collect(),
            power_mean_dbm: dbm.iter().sum::<f64>() / dbm.len() as f64,
            power_min_dbm: dbm.iter().copied().fold(f64::INFINITY, f64::min),
            power_max_dbm: dbm.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            wall_clock_s: start.elapsed().as_secs_f64(),
        });
        if cfg.lr_decay_interval > 0 && (epoch + 1) % cfg.lr_decay_interval == 0 {
            opt.decay_lr();
        }
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
            checkpoint(epoch, model, &opt)?;
        }
    }
    Ok(metrics)
}

/// Pretrains on the statistical provider, then finetunes the same
/// parameters on the instantaneous one with a fresh optimizer state.
pub fn pretrain_then_finetune(
    model: &mut EmnnModel,
    statistical: &mut ChannelProvider,
    instantaneous: &mut ChannelProvider,
    pre: &TrainConfig,
    fine: &TrainConfig,
) -> Result<(TrainMetrics, TrainMetrics)> {
    let a = train(model, statistical, pre, TrainPhase::Pretrain, |_, _, _| Ok(()))?;
    let b = train(model, instantaneous, fine, TrainPhase::Finetune, |_, _, _| Ok(()))?;
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wavemath::{OptimizerKind, Param, ParamKind, ParamStore, Gradients};

    #[test]
    fn fixed_power_is_exact() {
        let mut r = RngStreams::new(0).stream("p", 0);
        assert_eq!(sample_power(&PowerDraw::Fixed { dbm: 30.0 }, &mut r).unwrap(), 1.0);
    }

    #[test]
    fn uniform_beta_mean() {
        let mut r = RngStreams::new(3).stream("p", 0);
        let pol = PowerDraw::Beta {
            a: 1.0,
            b: 1.0,
            lo_dbm: 0.0,
            hi_dbm: 30.0,
        };
        let n = 10_000;
        let mean = (0..n).map(|_| watts_to_dbm(sample_power(&pol, &mut r).unwrap())).sum::<f64>() / n as f64;
        assert!((mean - 15.0).abs() < 0.5, "{mean}");
    }

    #[test]
    fn bad_power_policy_rejected() {
        let mut r = RngStreams::new(0).stream("p", 0);
        let pol = PowerDraw::Beta {
            a: 2.0,
            b: 2.0,
            lo_dbm: 10.0,
            hi_dbm: 10.0,
        };
        assert!(matches!(sample_power(&pol, &mut r), Err(Error::Config(_))));
    }

    #[test]
    fn bce_examples() {
        let b = RMat::from_vec(1, 3, vec![1.0, 0.0, 1.0]).unwrap();
        assert_eq!(bce_loss(&b, &b).unwrap(), 0.0);
        let half = RMat::from_vec(1, 56, vec![0.5; 56]).unwrap();
        let bits = RMat::from_vec(1, 56, (0..56).map(|i| (i % 2) as f64).collect()).unwrap();
        let l = bce_loss(&bits, &half).unwrap();
        assert!((l - 56.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((l - 38.82).abs() < 0.005);
        let two = RMat::from_vec(2, 3, vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0]).unwrap();
        let s1 = RMat::from_vec(1, 3, vec![0.7, 0.2, 0.4]).unwrap();
        let s2 = RMat::from_vec(2, 3, vec![0.7, 0.2, 0.4, 0.7, 0.2, 0.4]).unwrap();
        assert!((bce_loss(&two, &s2).unwrap() - bce_loss(&b, &s1).unwrap()).abs() < 1e-15);
        assert!(bce_loss(&b, &s2).is_err());
    }

    #[test]
    fn sgd_step_matches_hand_update() {
        // Three scalars: a weight, a bias and a phase near the wrap point.
        let mut store = ParamStore::new();
        for (name, kind, v) in [("w", ParamKind::Weight, 0.3), ("b", ParamKind::Bias, -1.2), ("t", ParamKind::Phase, 6.2)] {
            store.push(Param {
                name: name.into(),
                group: "g".into(),
                kind,
                rows: 1,
                cols: 1,
                data: vec![v],
            });
        }
        let settings = OptimizerSettings {
            kind: OptimizerKind::Sgd,
            learning_rate: 0.1,
            ..Default::default()
        };
        let mut opt = OptimizerState::new(settings, &store);
        let mut grads = Gradients::default();
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for (id, g) in ids.iter().zip([0.5, -2.0, -1.0]) {
            grads.insert(*id, vec![g]);
        }
        opt.step(&mut store, &grads).unwrap();
        assert!((store.get(ids[0]).data[0] - (0.3 - 0.05)).abs() < 1e-12);
        assert!((store.get(ids[1]).data[0] - (-1.2 + 0.2)).abs() < 1e-12);
        let t = 6.2 + 0.1 - std::f64::consts::TAU;
        assert!((store.get(ids[2]).data[0] - t).abs() < 1e-12);
    }

    #[test]
    fn csv_has_no_clock_column() {
        let h = TrainMetrics::csv_header(&["bs_dnn".into()]);
        assert_eq!(h.len(), 8);
        assert!(!h.iter().any(|c| c.contains("clock")));
    }
}
