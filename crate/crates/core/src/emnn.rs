//! The electromagnetic neural network: BS-DNN, TX metasurface layers,
//! channel layer, per-user RX metasurface layers and UE-DNNs.
//!
//! Real/complex bridging: the BS-DNN output and every UE-DNN input are laid
//! out subcarrier-major; within a subcarrier each antenna port occupies two
//! consecutive slots `(re, im)`. Dual-polarised ports are polarisation-major
//! (`port = p · A + a`). Slot of port `a` on subcarrier `i` with `P` ports
//! per subcarrier: `2 · (i · P + a)` for the real part, `+1` for the imaginary.
//!
//! The received signal is divided by the receiver noise standard deviation
//! before the first batch normalisation, so the UE-DNN sees signals in
//! units of the noise floor regardless of absolute path loss.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{complex_noise, dbm_to_watts, ChannelRealization};
use crate::error::{Error, Result};
use crate::metasurface::{MetasurfaceStack, PanelLayout, Polarization, PropagationSet, Side};
use crate::wavemath::{
    xavier_init, BatchStats, CMat, CompGraph, NodeId, Param, ParamId, ParamKind, ParamStore, RMat,
    RngStreams,
};

pub const GROUP_BS: &str = "bs_dnn";
pub const GROUP_TX: &str = "tx_sim";

pub fn rx_group(j: usize) -> String {
    format!("rx_sim.{j}")
}

pub fn ue_group(j: usize) -> String {
    format!("ue_dnn.{j}")
}

/// How the power-control layer distributes the budget `P_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PowerPolicy {
    /// One scale for the whole symbol: `Σ_i ‖x_i‖² = P_t`.
    PerSymbol,
    /// Every subcarrier at `‖x_i‖² = P_t / N^c`.
    PerSubcarrier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Batch statistics in batch normalisation; degenerate transmit rows are errors.
    Train,
    /// Running statistics; degenerate rows transmit nothing.
    Eval,
}

/// Static description of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub polarization: Polarization,
    pub tx: PanelLayout,
    pub rx: PanelLayout,
    pub frequencies: Vec<f64>,
    pub bits_per_user: Vec<usize>,
    pub power_policy: PowerPolicy,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub noise_power_dbm: f64,
    /// Add receiver noise in the forward pass.
    pub inject_noise: bool,
}

impl ModelSpec {
    pub fn users(&self) -> usize {
        self.bits_per_user.len()
    }

    pub fn total_bits(&self) -> usize {
        self.bits_per_user.iter().sum()
    }

    pub fn subcarriers(&self) -> usize {
        self.frequencies.len()
    }

    pub fn pols(&self) -> usize {
        self.polarization.count()
    }

    /// Complex TX ports per subcarrier.
    pub fn tx_ports(&self) -> usize {
        self.pols() * self.tx.antennas()
    }

    /// Complex RX ports per user and subcarrier.
    pub fn rx_ports(&self) -> usize {
        self.pols() * self.rx.antennas()
    }

    pub fn noise_power(&self) -> f64 {
        dbm_to_watts(self.noise_power_dbm)
    }

    /// Width of every layer as `(module, layer, width)`, per user for the RX side.
    pub fn layer_widths(&self) -> Vec<(String, String, usize)> {
        let (nb, nc, p) = (self.total_bits(), self.subcarriers(), self.pols());
        let (m, n, j) = (self.tx.units(), self.rx.units(), self.users());
        let mut out = vec![
            ("BS DNN".into(), "input".into(), nb),
            ("BS DNN".into(), "linear 1".into(), nb * nc),
            ("BS DNN".into(), "linear 2".into(), nb * nc),
            ("BS DNN".into(), "linear 3".into(), 2 * self.tx_ports() * nc),
            ("BS DNN".into(), "power control".into(), 2 * self.tx_ports() * nc),
        ];
        for l in 1..=self.tx.layer_count {
            out.push(("TX SIM".into(), format!("transmission {l}"), 2 * p * m));
            out.push(("TX SIM".into(), format!("metasurface {l}"), 2 * p * m));
        }
        out.push(("channel".into(), "channel".into(), 2 * p * j * n));
        for k in (1..=self.rx.layer_count).rev() {
            out.push(("RX SIM".into(), format!("metasurface {k}"), 2 * p * j * n));
            let w = if k == 1 { 2 * self.rx_ports() * j * nc } else { 2 * p * j * n };
            out.push(("RX SIM".into(), format!("transmission {k}"), w));
        }
        for (jj, &bits) in self.bits_per_user.iter().enumerate() {
            let ue = format!("UE DNN {jj}");
            out.push((ue.clone(), "batch norm 1".into(), 2 * self.rx_ports() * nc));
            out.push((ue.clone(), "linear 1".into(), nb * nc));
            out.push((ue.clone(), "batch norm 2".into(), nb * nc));
            out.push((ue.clone(), "linear 2".into(), bits));
            out.push((ue.clone(), "batch norm 3".into(), bits));
            out.push((ue, "sigmoid".into(), bits));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.tx.validate()?;
        self.rx.validate()?;
        if self.tx.side != Side::Tx || self.rx.side != Side::Rx {
            return Err(Error::config("model needs a TX layout and an RX layout"));
        }
        if self.frequencies.is_empty() {
            return Err(Error::config("model needs at least one subcarrier"));
        }
        if self.bits_per_user.is_empty() || self.bits_per_user.contains(&0) {
            return Err(Error::config(format!(
                "every user needs at least one bit, got {:?}",
                self.bits_per_user
            )));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) || !(self.bn_eps > 0.0) {
            return Err(Error::config("batch-norm momentum must lie in (0, 1] and eps be positive"));
        }
        if !self.noise_power_dbm.is_finite() {
            return Err(Error::config("noise power must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BnIds {
    pub scale: ParamId,
    pub shift: ParamId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UeIds {
    pub bn: [BnIds; 3],
    pub linear: [LinearIds; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelIds {
    pub bs: [LinearIds; 3],
    /// One phase vector per TX layer, length `pols · M`, polarisation-major.
    pub tx_phase: Vec<ParamId>,
    /// `rx_phase[j][k-1]`, length `pols · N`.
    pub rx_phase: Vec<Vec<ParamId>>,
    pub ue: Vec<UeIds>,
}

/// Running statistics of one batch-norm layer. Empty vectors mean no batch
/// has been seen yet, in which case mean 0 and variance 1 are used.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub updates: u64,
}

impl RunningStats {
    fn resolved(&self, width: usize) -> (Vec<f64>, Vec<f64>) {
        if self.mean.is_empty() {
            (vec![0.0; width], vec![1.0; width])
        } else {
            (self.mean.clone(), self.var.clone())
        }
    }

    fn update(&mut self, batch: &BatchStats, momentum: f64) {
        let width = batch.mean.len();
        let (mut mean, mut var) = self.resolved(width);
        let unbias = if batch.count > 1 {
            batch.count as f64 / (batch.count - 1) as f64
        } else {
            1.0
        };
        for c in 0..width {
            mean[c] = (1.0 - momentum) * mean[c] + momentum * batch.mean[c];
            var[c] = (1.0 - momentum) * var[c] + momentum * batch.var[c] * unbias;
        }
        self.mean = mean;
        self.var = var;
        self.updates += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmnnModel {
    pub spec: ModelSpec,
    pub prop: PropagationSet,
    pub store: ParamStore,
    pub ids: ModelIds,
    /// `running[j][0..3]`.
    pub running: Vec<Vec<RunningStats>>,
}

fn push_linear(
    store: &mut ParamStore,
    group: &str,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> Result<LinearIds> {
    let weight = store.push(Param {
        name: format!("{group}.{name}.weight"),
        group: group.into(),
        kind: ParamKind::Weight,
        rows: fan_out,
        cols: fan_in,
        data: xavier_init(fan_in, fan_out, rng)?,
    });
    let bias = store.push(Param {
        name: format!("{group}.{name}.bias"),
        group: group.into(),
        kind: ParamKind::Bias,
        rows: 1,
        cols: fan_out,
        data: vec![0.0; fan_out],
    });
    Ok(LinearIds { weight, bias })
}

fn push_bn(store: &mut ParamStore, group: &str, name: &str, width: usize) -> BnIds {
    let scale = store.push(Param {
        name: format!("{group}.{name}.scale"),
        group: group.into(),
        kind: ParamKind::BnScale,
        rows: 1,
        cols: width,
        data: vec![1.0; width],
    });
    let shift = store.push(Param {
        name: format!("{group}.{name}.shift"),
        group: group.into(),
        kind: ParamKind::BnShift,
        rows: 1,
        cols: width,
        data: vec![0.0; width],
    });
    BnIds { scale, shift }
}

fn push_phases(store: &mut ParamStore, group: &str, name: &str, len: usize, rng: &mut impl Rng) -> ParamId {
    store.push(Param {
        name: format!("{group}.{name}.phase"),
        group: group.into(),
        kind: ParamKind::Phase,
        rows: 1,
        cols: len,
        data: (0..len).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect(),
    })
}

/// Builds a freshly initialised model: Xavier weights, zero biases,
/// uniform phases, unit batch-norm scales and empty running statistics.
pub fn build_model(spec: &ModelSpec, prop: PropagationSet, seed: u64) -> Result<EmnnModel> {
    spec.validate()?;
    check_prop(spec, &prop)?;
    let streams = RngStreams::new(seed);
    let mut rng = streams.stream("init", 0);
    let mut store = ParamStore::new();
    let (nb, nc, pols) = (spec.total_bits(), spec.subcarriers(), spec.pols());
    let tx_out = 2 * spec.tx_ports() * nc;
    let bs = [
        push_linear(&mut store, GROUP_BS, "linear1", nb, nb * nc, &mut rng)?,
        push_linear(&mut store, GROUP_BS, "linear2", nb * nc, nb * nc, &mut rng)?,
        push_linear(&mut store, GROUP_BS, "linear3", nb * nc, tx_out, &mut rng)?,
    ];
    let tx_phase = (1..=spec.tx.layer_count)
        .map(|l| push_phases(&mut store, GROUP_TX, &format!("layer{l}"), pols * spec.tx.units(), &mut rng))
        .collect();
    let mut rx_phase = Vec::new();
    let mut ue = Vec::new();
    let rx_in = 2 * spec.rx_ports() * nc;
    for (j, &bits) in spec.bits_per_user.iter().enumerate() {
        let g = rx_group(j);
        rx_phase.push(
            (1..=spec.rx.layer_count)
                .map(|k| push_phases(&mut store, &g, &format!("layer{k}"), pols * spec.rx.units(), &mut rng))
                .collect(),
        );
        let g = ue_group(j);
        let bn0 = push_bn(&mut store, &g, "bn1", rx_in);
        let l1 = push_linear(&mut store, &g, "linear1", rx_in, nb * nc, &mut rng)?;
        let bn1 = push_bn(&mut store, &g, "bn2", nb * nc);
        let l2 = push_linear(&mut store, &g, "linear2", nb * nc, bits, &mut rng)?;
        let bn2 = push_bn(&mut store, &g, "bn3", bits);
        ue.push(UeIds {
            bn: [bn0, bn1, bn2],
            linear: [l1, l2],
        });
    }
    Ok(EmnnModel {
        spec: spec.clone(),
        prop,
        store,
        ids: ModelIds {
            bs,
            tx_phase,
            rx_phase,
            ue,
        },
        running: vec![vec![RunningStats::default(); 3]; spec.users()],
    })
}

fn check_prop(spec: &ModelSpec, prop: &PropagationSet) -> Result<()> {
    if prop.subcarriers() != spec.subcarriers() {
        return Err(Error::config(format!(
            "propagation set has {} subcarriers, model {}",
            prop.subcarriers(),
            spec.subcarriers()
        )));
    }
    let (m, n) = (spec.tx.units(), spec.rx.units());
    for i in 0..prop.subcarriers() {
        let (tx, rx) = (&prop.tx[i], &prop.rx[i]);
        if tx.len() != spec.tx.layer_count || rx.len() != spec.rx.layer_count {
            return Err(Error::config("propagation set layer count does not match the model"));
        }
        for (l, v) in tx.iter().enumerate() {
            let want = if l == 0 { (m, spec.tx.antennas()) } else { (m, m) };
            if v.shape() != want {
                return Err(Error::config(format!(
                    "TX transmission layer {}: expected {:?}, found {:?}",
                    l + 1,
                    want,
                    v.shape()
                )));
            }
        }
        for (k, u) in rx.iter().enumerate() {
            let want = if k == 0 { (spec.rx.antennas(), n) } else { (n, n) };
            if u.shape() != want {
                return Err(Error::config(format!(
                    "RX transmission layer {}: expected {:?}, found {:?}",
                    k + 1,
                    want,
                    u.shape()
                )));
            }
        }
    }
    if !prop.is_finite() {
        return Err(Error::config("propagation set has non-finite entries"));
    }
    Ok(())
}

/// Per-forward measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Batch-mean transmit power per subcarrier, watts.
    pub tx_power: Vec<f64>,
    /// `rx_power[j][i]`: batch-mean noiseless received power, watts.
    pub rx_power: Vec<Vec<f64>>,
    /// Per-user received signal-to-noise ratio, dB.
    pub snr_db: Vec<f64>,
}

/// Node handles of one traced forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Per-user soft bits, `batch × N^bit_j`.
    pub soft: Vec<NodeId>,
    /// Power-controlled BS-DNN output.
    pub tx_signal: NodeId,
    /// Batch statistics of every batch norm (train mode only), `[j][0..3]`.
    pub bn_stats: Vec<Vec<BatchStats>>,
    pub diagnostics: Diagnostics,
}

/// Options of a traced forward pass.
#[derive(Debug, Clone, Default)]
pub struct TraceOptions {
    /// Parameter groups recorded without gradients.
    pub frozen: Vec<String>,
    /// Map all-zero transmit rows to silence instead of failing.
    pub allow_zero: bool,
}

/// Per-user soft bits plus diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub soft: Vec<RMat>,
    pub diagnostics: Diagnostics,
}

fn finite(g: &CompGraph, id: NodeId, stage: impl FnOnce() -> String) -> Result<NodeId> {
    if g.is_finite(id) {
        Ok(id)
    } else {
        Err(Error::NonFinite { stage: stage() })
    }
}

impl EmnnModel {
    pub fn tx_stack(&self) -> MetasurfaceStack {
        stack_from(&self.spec.tx, self.spec.polarization, &self.store, &self.ids.tx_phase)
    }

    pub fn rx_stack(&self, j: usize) -> MetasurfaceStack {
        stack_from(&self.spec.rx, self.spec.polarization, &self.store, &self.ids.rx_phase[j])
    }

    /// Columns of the full bit vector that belong to user `j`.
    pub fn bit_range(&self, j: usize) -> std::ops::Range<usize> {
        let start: usize = self.spec.bits_per_user[..j].iter().sum();
        start..start + self.spec.bits_per_user[j]
    }

    fn check_channel(&self, channel: &ChannelRealization) -> Result<()> {
        if channel.polarization != self.spec.polarization {
            return Err(Error::config(format!(
                "{:?} channel for a {:?} model",
                channel.polarization, self.spec.polarization
            )));
        }
        if channel.users.len() != self.spec.users() {
            return Err(Error::config(format!(
                "channel has {} users, model {}",
                channel.users.len(),
                self.spec.users()
            )));
        }
        let p = self.spec.pols();
        let want = (p * self.spec.rx.units(), p * self.spec.tx.units());
        for (j, u) in channel.users.iter().enumerate() {
            if u.matrices.len() != self.spec.subcarriers() {
                return Err(Error::config(format!("channel of user {j} has wrong subcarrier count")));
            }
            if let Some(m) = u.matrices.iter().find(|m| m.shape() != want) {
                return Err(Error::config(format!(
                    "channel layer of user {j}: expected {:?}, found {:?}",
                    want,
                    m.shape()
                )));
            }
        }
        Ok(())
    }

    /// Records the forward pass into `g`. Noise is drawn from `noise` when
    /// the model injects noise.
    pub fn trace<R: Rng>(
        &self,
        g: &mut CompGraph,
        bits: &RMat,
        channel: &ChannelRealization,
        power: &[f64],
        noise: &mut R,
        mode: Mode,
        opts: &TraceOptions,
    ) -> Result<Trace> {
        let spec = &self.spec;
        if bits.cols() != spec.total_bits() {
            return Err(Error::config(format!(
                "bit vectors of length {} for a model with {} bits",
                bits.cols(),
                spec.total_bits()
            )));
        }
        let batch = bits.rows();
        if power.len() != batch || power.iter().any(|p| !(*p > 0.0 && p.is_finite())) {
            return Err(Error::config("need one positive finite transmit power per batch row"));
        }
        self.check_channel(channel)?;
        let trainable = |group: &str| !opts.frozen.iter().any(|f| f == group);
        let param = |g: &mut CompGraph, id: ParamId| {
            let group = &self.store.get(id).group;
            g.param(&self.store, id, trainable(group))
        };
        let (nc, pols) = (spec.subcarriers(), spec.pols());

        // BS-DNN.
        let mut h = g.input_real(bits.clone());
        for (k, lin) in self.ids.bs.iter().enumerate() {
            let w = param(g, lin.weight);
            let b = param(g, lin.bias);
            let z = g.linear(h, w, b)?;
            let a = g.relu(z)?;
            h = finite(g, a, || format!("bs_dnn.linear{}", k + 1))?;
        }
        let groups = match spec.power_policy {
            PowerPolicy::PerSymbol => 1,
            PowerPolicy::PerSubcarrier => nc,
        };
        let tx_signal = g.power_scale(h, power, groups, opts.allow_zero)?;
        let tx_signal = finite(g, tx_signal, || "power_control".into())?;

        let tx_ports = spec.tx_ports();
        let noise_power = spec.noise_power();
        let rx_scale = 1.0 / noise_power.sqrt();
        let mut per_user: Vec<Vec<NodeId>> = vec![Vec::with_capacity(nc); spec.users()];
        let mut tx_power = Vec::with_capacity(nc);
        let mut rx_power = vec![Vec::with_capacity(nc); spec.users()];
        let tx_thetas: Vec<NodeId> = self.ids.tx_phase.iter().map(|&id| param(g, id)).collect();
        let rx_thetas: Vec<Vec<NodeId>> = self
            .ids
            .rx_phase
            .iter()
            .map(|layers| layers.iter().map(|&id| param(g, id)).collect())
            .collect();

        for i in 0..nc {
            let x = g.to_complex(tx_signal, 2 * i * tx_ports, tx_ports)?;
            tx_power.push(mean_col_power(g.complex(x)?));

            // T_i = Φ^L V^L ⋯ Φ^1 V^1 (block-diagonal over polarisations).
            let v1 = g.input_complex(self.prop.tx[i][0].block_diag(pols));
            let mut t = g.phase_rows(v1, &tx_thetas[0..1])?;
            for l in 1..spec.tx.layer_count {
                let v = g.input_complex(self.prop.tx[i][l].clone());
                let vt = g.matmul(v, t, pols)?;
                t = g.phase_rows(vt, &tx_thetas[l..l + 1])?;
            }
            let t = finite(g, t, || format!("tx_sim.subcarrier{i}"))?;

            for j in 0..spec.users() {
                let gm = g.input_complex(channel.matrix(j, i).clone());
                let w0 = g.matmul(gm, t, 1)?;
                let mut w = finite(g, w0, || format!("channel.user{j}.subcarrier{i}"))?;
                for k in (0..spec.rx.layer_count).rev() {
                    let pw = g.phase_rows(w, &rx_thetas[j][k..k + 1])?;
                    let u = g.input_complex(self.prop.rx[i][k].clone());
                    w = g.matmul(u, pw, pols)?;
                }
                let w = finite(g, w, || format!("rx_sim.{j}.subcarrier{i}"))?;
                let y = g.matmul(w, x, 1)?;
                rx_power[j].push(mean_col_power(g.complex(y)?));
                let y = if spec.inject_noise {
                    let n = complex_noise(spec.rx_ports(), batch, noise_power, noise);
                    g.add_const(y, &n)?
                } else {
                    y
                };
                per_user[j].push(finite(g, y, || format!("received.user{j}.subcarrier{i}"))?);
            }
        }

        let mut soft = Vec::with_capacity(spec.users());
        let mut bn_stats = Vec::with_capacity(spec.users());
        for (j, ids) in self.ids.ue.iter().enumerate() {
            let mut h = g.to_real(&per_user[j], rx_scale)?;
            let mut stats = Vec::with_capacity(3);
            for layer in 0..3 {
                let (sc, sh) = (param(g, ids.bn[layer].scale), param(g, ids.bn[layer].shift));
                let (mean, var) = self.running[j][layer].resolved(g.real(h)?.cols());
                let running = match mode {
                    Mode::Train => None,
                    Mode::Eval => Some((mean.as_slice(), var.as_slice())),
                };
                let (out, st) = g.batch_norm(h, sc, sh, spec.bn_eps, running)?;
                h = finite(g, out, || format!("ue_dnn.{j}.bn{}", layer + 1))?;
                stats.extend(st);
                if layer < 2 {
                    let lin = ids.linear[layer];
                    let (w, b) = (param(g, lin.weight), param(g, lin.bias));
                    let z = g.linear(h, w, b)?;
                    let a = g.relu(z)?;
                    h = finite(g, a, || format!("ue_dnn.{j}.linear{}", layer + 1))?;
                }
            }
            let out = g.sigmoid(h)?;
            soft.push(finite(g, out, || format!("ue_dnn.{j}.sigmoid"))?);
            bn_stats.push(stats);
        }

        let ports_r = spec.rx_ports() as f64;
        let snr_db = rx_power
            .iter()
            .map(|p| {
                let s: f64 = p.iter().sum();
                10.0 * (s / (nc as f64 * ports_r * noise_power)).log10()
            })
            .collect();
        Ok(Trace {
            soft,
            tx_signal,
            bn_stats,
            diagnostics: Diagnostics {
                tx_power,
                rx_power,
                snr_db,
            },
        })
    }

    /// Sum of the per-user BCE losses, i.e. BCE over all transmitted bits.
    pub fn loss(&self, g: &mut CompGraph, trace: &Trace, bits: &RMat, p_min: f64) -> Result<NodeId> {
        let mut total: Option<NodeId> = None;
        for (j, &s) in trace.soft.iter().enumerate() {
            let r = self.bit_range(j);
            let target = bits.col_slice(r.start, r.len());
            let l = g.bce(s, &target, p_min)?;
            total = Some(match total {
                None => l,
                Some(t) => g.add(t, l)?,
            });
        }
        total.ok_or_else(|| Error::config("model has no users"))
    }

    /// Folds the batch statistics of a training pass into the running statistics.
    pub fn update_running(&mut self, stats: &[Vec<BatchStats>]) {
        let m = self.spec.bn_momentum;
        for (run, st) in self.running.iter_mut().zip(stats) {
            for (r, s) in run.iter_mut().zip(st) {
                r.update(s, m);
            }
        }
    }

    /// Forward pass without gradient bookkeeping.
    pub fn forward<R: Rng>(
        &self,
        bits: &RMat,
        channel: &ChannelRealization,
        power: &[f64],
        noise: &mut R,
        mode: Mode,
    ) -> Result<ForwardOutput> {
        let mut g = CompGraph::new();
        let opts = TraceOptions {
            frozen: Vec::new(),
            allow_zero: mode == Mode::Eval,
        };
        let tr = self.trace(&mut g, bits, channel, power, noise, mode, &opts)?;
        Ok(ForwardOutput {
            soft: tr.soft.iter().map(|&s| g.real(s).cloned()).collect::<Result<_>>()?,
            diagnostics: tr.diagnostics,
        })
    }

    /// Checks that every metasurface coefficient has unit modulus.
    pub fn max_modulus_error(&self) -> f64 {
        self.store
            .iter()
            .filter(|(_, p)| p.kind == ParamKind::Phase)
            .flat_map(|(_, p)| p.data.iter())
            .map(|t| (Complex64::from_polar(1.0, *t).norm() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

fn mean_col_power(m: &CMat) -> f64 {
    let total: f64 = m.as_slice().iter().map(|z| z.norm_sqr()).sum();
    total / m.cols().max(1) as f64
}

fn stack_from(layout: &PanelLayout, pol: Polarization, store: &ParamStore, ids: &[ParamId]) -> MetasurfaceStack {
    let units = layout.units();
    MetasurfaceStack {
        layout: *layout,
        polarization: pol,
        phases: ids
            .iter()
            .map(|&id| store.get(id).data.chunks(units).map(<[f64]>::to_vec).collect())
            .collect(),
    }
}

/// Scales each row of `signal` (`batch × 2·ports·N^c`, subcarrier-major) to its budget.
pub fn power_control(
    signal: &RMat,
    power: &[f64],
    policy: PowerPolicy,
    subcarriers: usize,
) -> Result<RMat> {
    let mut g = CompGraph::new();
    let x = g.input_real(signal.clone());
    let groups = match policy {
        PowerPolicy::PerSymbol => 1,
        PowerPolicy::PerSubcarrier => subcarriers,
    };
    let y = g.power_scale(x, power, groups, false)?;
    Ok(g.real(y)?.clone())
}

/// `1` where the soft bit is at least 0.5 (ties decide 1), else `0`.
pub fn hard_decision(soft: &RMat) -> RMat {
    let data = soft.as_slice().iter().map(|&s| if s >= 0.5 { 1.0 } else { 0.0 }).collect();
    RMat::from_vec(soft.rows(), soft.cols(), data).expect("same shape")
}

/// Uniform random bit vectors, one per row.
pub fn random_bits(rows: usize, bits: usize, rng: &mut impl Rng) -> RMat {
    let data = (0..rows * bits).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
    RMat::from_vec(rows, bits, data).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{ChannelSpec, PathLossModel, Scene};
    use crate::metasurface::subcarrier_frequencies;
    use crate::wavemath::StreamRng;

    const LAMBDA: f64 = 0.0107;

    pub(crate) fn layout(side: Side, n: usize, a: usize, layers: usize) -> PanelLayout {
        PanelLayout {
            side,
            units_x: n,
            units_y: n,
            unit_spacing: LAMBDA / 2.0,
            layer_spacing: LAMBDA / 2.0,
            layer_count: layers,
            antennas_x: a,
            antennas_y: a,
        }
    }

    fn spec(pol: Polarization, bits: Vec<usize>, nc: usize) -> ModelSpec {
        ModelSpec {
            polarization: pol,
            tx: layout(Side::Tx, 3, 2, 1),
            rx: layout(Side::Rx, 3, 2, 1),
            frequencies: subcarrier_frequencies(28e9, 100e6, nc),
            bits_per_user: bits,
            power_policy: PowerPolicy::PerSymbol,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            noise_power_dbm: -110.0,
            inject_noise: false,
        }
    }

    fn channel_for(spec: &ModelSpec, seed: u64) -> ChannelRealization {
        let users = (0..spec.users()).map(|j| [10.0 * (j + 1) as f64, 0.0, 20.0]).collect();
        ChannelSpec {
            scene: Scene {
                bs_position: [0.0; 3],
                user_positions: users,
                scatterers: 4,
                rician_k_db: 10.0,
                mean_excess_delay: 100e-9,
                path_loss: PathLossModel {
                    reference_distance: 1.0,
                    exponent: 3.5,
                    shadowing_db: 0.0,
                    wavelength: LAMBDA,
                },
                epsilon: 0.2,
                phase_offsets: Default::default(),
            },
            tx: spec.tx,
            rx: spec.rx,
            frequencies: spec.frequencies.clone(),
            polarization: spec.polarization,
        }
        .realization(&RngStreams::new(seed), 0)
        .unwrap()
    }

    fn model(spec: &ModelSpec, seed: u64) -> EmnnModel {
        let prop = PropagationSet::build(&spec.tx, &spec.rx, &spec.frequencies).unwrap();
        build_model(spec, prop, seed).unwrap()
    }

    fn rng() -> StreamRng {
        RngStreams::new(0).stream("noise", 0)
    }

    #[test]
    fn table_two_output_widths() {
        let mut s = spec(Polarization::Single, vec![32, 16, 8], 32);
        s.tx = layout(Side::Tx, 10, 4, 3);
        s.rx = layout(Side::Rx, 10, 3, 3);
        let w = s.layer_widths();
        let bs3 = w.iter().find(|(m, l, _)| m == "BS DNN" && l == "linear 3").unwrap();
        assert_eq!(bs3.2, 1024);
        s.polarization = Polarization::Dual;
        s.tx = layout(Side::Tx, 10, 3, 3);
        s.rx = layout(Side::Rx, 10, 2, 3);
        let w = s.layer_widths();
        let bs3 = w.iter().find(|(m, l, _)| m == "BS DNN" && l == "linear 3").unwrap();
        assert_eq!(bs3.2, 1152);
        let rx1 = w.iter().find(|(m, l, _)| m == "RX SIM" && l == "transmission 1").unwrap();
        assert_eq!(rx1.2, 4 * 3 * 4 * 32);
    }

    #[test]
    fn build_is_deterministic_and_shaped() {
        let s = spec(Polarization::Dual, vec![4, 2], 2);
        let a = model(&s, 5);
        assert_eq!(a, model(&s, 5));
        assert_ne!(a.store, model(&s, 6).store);
        let w3 = a.store.get(a.ids.bs[2].weight);
        assert_eq!((w3.rows, w3.cols), (2 * 2 * 4 * 2, 6 * 2));
        assert_eq!(a.store.get(a.ids.tx_phase[0]).len(), 18);
        assert!(a
            .store
            .iter()
            .filter(|(_, p)| p.kind == ParamKind::Phase)
            .all(|(_, p)| p.data.iter().all(|t| (0.0..std::f64::consts::TAU).contains(t))));
    }

    #[test]
    fn bad_propagation_shape_names_layer() {
        let s = spec(Polarization::Single, vec![2], 1);
        let mut prop = PropagationSet::build(&s.tx, &s.rx, &s.frequencies).unwrap();
        prop.rx[0][0] = CMat::zeros(3, 9);
        let err = build_model(&s, prop, 1).unwrap_err().to_string();
        assert!(err.contains("RX transmission layer 1"), "{err}");
    }

    #[test]
    fn power_control_policies() {
        let sig = RMat::from_vec(2, 8, (0..16).map(|v| v as f64 * 0.3 - 1.0).collect()).unwrap();
        let out = power_control(&sig, &[4.0, 0.5], PowerPolicy::PerSymbol, 2).unwrap();
        for (r, p) in [(0, 4.0), (1, 0.5)] {
            let tot: f64 = out.row(r).iter().map(|v| v * v).sum();
            assert!((tot - p).abs() < 1e-10 * p);
        }
        let again = power_control(&out, &[4.0, 0.5], PowerPolicy::PerSymbol, 2).unwrap();
        for (a, b) in again.as_slice().iter().zip(out.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        // Subcarrier powers 1 and 3, budget 4: both become 2.
        let sig = RMat::from_vec(1, 4, vec![1.0, 0.0, 3f64.sqrt(), 0.0]).unwrap();
        let out = power_control(&sig, &[4.0], PowerPolicy::PerSubcarrier, 2).unwrap();
        assert!((out[(0, 0)].powi(2) - 2.0).abs() < 1e-12);
        assert!((out[(0, 2)].powi(2) - 2.0).abs() < 1e-12);
        let zero = RMat::zeros(1, 4);
        assert!(matches!(
            power_control(&zero, &[1.0], PowerPolicy::PerSymbol, 2),
            Err(Error::DegenerateInput { .. })
        ));
    }

    #[test]
    fn hard_decision_ties_go_to_one() {
        let s = RMat::from_vec(1, 5, vec![0.9, 0.1, 0.2, 0.7, 0.5]).unwrap();
        assert_eq!(hard_decision(&s).as_slice(), &[1.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn output_lengths_per_user() {
        let s = spec(Polarization::Single, vec![32, 16, 8], 2);
        let m = model(&s, 1);
        let ch = channel_for(&s, 2);
        let bits = random_bits(6, 56, &mut rng());
        let out = m.forward(&bits, &ch, &[1.0; 6], &mut rng(), Mode::Eval).unwrap();
        let lens: Vec<usize> = out.soft.iter().map(|s| s.cols()).collect();
        assert_eq!(lens, vec![32, 16, 8]);
        assert!(out.soft.iter().all(|s| s.as_slice().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn noiseless_forward_is_deterministic() {
        let s = spec(Polarization::Dual, vec![3, 2], 2);
        let m = model(&s, 1);
        let ch = channel_for(&s, 2);
        let bits = random_bits(5, 5, &mut rng());
        let a = m.forward(&bits, &ch, &[0.3; 5], &mut rng(), Mode::Train).unwrap();
        let b = m.forward(&bits, &ch, &[0.3; 5], &mut RngStreams::new(9).stream("x", 0), Mode::Train).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn transmit_power_matches_budget_per_row() {
        let s = spec(Polarization::Single, vec![4], 2);
        let m = model(&s, 3);
        let ch = channel_for(&s, 2);
        let bits = random_bits(16, 4, &mut RngStreams::new(4).stream("b", 0));
        let power: Vec<f64> = (0..16).map(|r| 0.01 * (r + 1) as f64).collect();
        let mut g = CompGraph::new();
        let opts = TraceOptions {
            allow_zero: true,
            ..Default::default()
        };
        let tr = m.trace(&mut g, &bits, &ch, &power, &mut rng(), Mode::Train, &opts).unwrap();
        let x = g.real(tr.tx_signal).unwrap();
        for r in 0..16 {
            let tot: f64 = x.row(r).iter().map(|v| v * v).sum();
            if tot > 0.0 {
                assert!((tot - power[r]).abs() <= 1e-10 * power[r]);
            }
        }
    }

    #[test]
    fn wave_domain_path_matches_chain_product() {
        // One user, one subcarrier: received = R G T x, using the metasurface chains.
        use crate::metasurface::{rx_chain, tx_chain};
        use crate::wavemath::cmatmul;
        let mut s = spec(Polarization::Single, vec![3], 1);
        s.tx.layer_count = 2;
        s.rx.layer_count = 3;
        let m = model(&s, 8);
        let ch = channel_for(&s, 1);
        let bits = random_bits(4, 3, &mut rng());
        let mut g = CompGraph::new();
        let opts = TraceOptions {
            allow_zero: true,
            ..Default::default()
        };
        let tr = m.trace(&mut g, &bits, &ch, &[1.0; 4], &mut rng(), Mode::Train, &opts).unwrap();
        let xs = g.real(tr.tx_signal).unwrap().clone();
        let t = tx_chain(&m.tx_stack(), &m.prop, 0).unwrap();
        let r = rx_chain(&m.rx_stack(0), &m.prop, 0).unwrap();
        let h = cmatmul(&r, &cmatmul(ch.matrix(0, 0), &t).unwrap()).unwrap();
        let x = CMat::from_fn(4, 4, |p, b| Complex64::new(xs[(b, 2 * p)], xs[(b, 2 * p + 1)]));
        let y = cmatmul(&h, &x).unwrap();
        // The UE input is the received signal over the noise standard deviation.
        let mut g2 = CompGraph::new();
        let yn = g2.input_complex(y);
        let expect = g2.to_real(&[yn], 1.0 / s.noise_power().sqrt()).unwrap();
        let expect = g2.real(expect).unwrap();
        // Recover the UE input from the graph: node right before the first batch norm.
        let got = (0..g.len())
            .rev()
            .filter_map(|id| g.real(id).ok().filter(|v| v.shape() == expect.shape()).map(|v| (id, v)))
            .find(|(_, v)| {
                v.as_slice()
                    .iter()
                    .zip(expect.as_slice())
                    .all(|(a, b)| (a - b).abs() <= 1e-9 * b.abs().max(1.0))
            });
        assert!(got.is_some());
    }

    #[test]
    fn mismatched_channel_rejected() {
        let s = spec(Polarization::Single, vec![2], 1);
        let m = model(&s, 1);
        let ch = channel_for(&spec(Polarization::Dual, vec![2], 1), 2);
        let bits = random_bits(2, 2, &mut rng());
        assert!(matches!(
            m.forward(&bits, &ch, &[1.0; 2], &mut rng(), Mode::Eval),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn nan_phase_names_the_stage() {
        let s = spec(Polarization::Single, vec![2], 1);
        let mut m = model(&s, 1);
        let id = m.ids.tx_phase[0];
        m.store.get_mut(id).data[0] = f64::NAN;
        let ch = channel_for(&s, 2);
        let bits = RMat::from_vec(2, 2, vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        match m.forward(&bits, &ch, &[1.0; 2], &mut rng(), Mode::Eval) {
            Err(Error::NonFinite { stage }) => assert_eq!(stage, "tx_sim.subcarrier0"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn running_statistics_update_with_momentum() {
        let mut r = RunningStats::default();
        let b = BatchStats {
            mean: vec![2.0],
            var: vec![3.0],
            count: 4,
        };
        r.update(&b, 0.1);
        assert!((r.mean[0] - 0.2).abs() < 1e-15);
        assert!((r.var[0] - (0.9 + 0.1 * 4.0)).abs() < 1e-15);
    }
}
