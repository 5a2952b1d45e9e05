//! Reverse-mode differentiation over a recorded computation.
//!
//! Nodes are evaluated eagerly as they are appended, so the node list is
//! always in topological order and every value needed by the backward pass
//! is cached on its node. The vocabulary is limited to what the
//! electromagnetic network needs.
//!
//! Complex adjoints use the convention `ḡ = ∂L/∂Re z + j ∂L/∂Im z`, under
//! which `out = A·X` back-propagates as `ḡ_X = Aᴴ ḡ_out`, `ḡ_A = ḡ_out Xᴴ`.

use num_complex::Complex64;

use super::matrix::{block_matmul, cmatmul, CMat, RMat};
use super::params::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Real(RMat),
    Complex(CMat),
}

impl Value {
    fn is_finite(&self) -> bool {
        match self {
            Value::Real(m) => m.is_finite(),
            Value::Complex(m) => m.is_finite(),
        }
    }

    fn add_assign(&mut self, other: Value) {
        match (self, other) {
            (Value::Real(a), Value::Real(b)) => {
                for (x, y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                    *x += y;
                }
            }
            (Value::Complex(a), Value::Complex(b)) => {
                for (x, y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                    *x += y;
                }
            }
            _ => unreachable!("gradient kind mismatch"),
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf {
        param: Option<ParamId>,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Relu {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: RMat,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    PowerScale {
        x: NodeId,
        groups: usize,
        scales: Vec<f64>,
        norms_sq: Vec<f64>,
    },
    ToComplex {
        x: NodeId,
        offset: usize,
    },
    PhaseRows {
        x: NodeId,
        thetas: Vec<NodeId>,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
        blocks: usize,
    },
    AddConst {
        x: NodeId,
    },
    ToReal {
        xs: Vec<NodeId>,
        scale: f64,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Bce {
        x: NodeId,
        target: RMat,
        p_min: f64,
    },
    SumRe {
        x: NodeId,
    },
    SumAbsSq {
        x: NodeId,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Value,
    requires_grad: bool,
}

/// Statistics of one batch-norm application in batch mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance over the batch.
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, Default)]
pub struct CompGraph {
    nodes: Vec<Node>,
}

impl CompGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Value, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn requires(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Value {
        &self.nodes[id].value
    }

    pub fn real(&self, id: NodeId) -> Result<&RMat> {
        match &self.nodes[id].value {
            Value::Real(m) => Ok(m),
            Value::Complex(_) => Err(Error::config(format!("node {id} is complex, expected real"))),
        }
    }

    pub fn complex(&self, id: NodeId) -> Result<&CMat> {
        match &self.nodes[id].value {
            Value::Complex(m) => Ok(m),
            Value::Real(_) => Err(Error::config(format!("node {id} is real, expected complex"))),
        }
    }

    pub fn is_finite(&self, id: NodeId) -> bool {
        self.nodes[id].value.is_finite()
    }

    /// Fixed real input (bits, constants). Never receives a gradient.
    pub fn input_real(&mut self, m: RMat) -> NodeId {
        self.push(Op::Leaf { param: None }, Value::Real(m), false)
    }

    /// Fixed complex input (propagation matrices, channel, noise).
    pub fn input_complex(&mut self, m: CMat) -> NodeId {
        self.push(Op::Leaf { param: None }, Value::Complex(m), false)
    }

    /// Parameter leaf. `trainable = false` records the value without a gradient entry.
    pub fn param(&mut self, store: &ParamStore, id: ParamId, trainable: bool) -> NodeId {
        let p = store.get(id);
        let m = RMat::from_vec(p.rows, p.cols, p.data.clone()).expect("param shape");
        let op = Op::Leaf {
            param: trainable.then_some(id),
        };
        self.push(op, Value::Real(m), trainable)
    }

    /// `y = x Wᵀ + b`, with `x: B×in`, `W: out×in`, `b: 1×out`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.real(x)?, self.real(w)?, self.real(b)?);
        if xv.cols() != wv.cols() || bv.cols() * bv.rows() != wv.rows() {
            return Err(Error::config(format!(
                "linear: input {:?}, weight {:?}, bias {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let (batch, fin, fout) = (xv.rows(), wv.cols(), wv.rows());
        let mut out = RMat::zeros(batch, fout);
        for r in 0..batch {
            let xr = xv.row(r);
            let orow = out.row_mut(r);
            for (o, (wrow, bias)) in orow
                .iter_mut()
                .zip((0..fout).map(|k| wv.row(k)).zip(bv.as_slice()))
            {
                let mut acc = *bias;
                for i in 0..fin {
                    acc += xr[i] * wrow[i];
                }
                *o = acc;
            }
        }
        let rg = self.requires(&[x, w, b]);
        Ok(self.push(Op::Linear { x, w, b }, Value::Real(out), rg))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let mut out = self.real(x)?.clone();
        for v in out.as_mut_slice() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let rg = self.requires(&[x]);
        Ok(self.push(Op::Relu { x }, Value::Real(out), rg))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let mut out = self.real(x)?.clone();
        for v in out.as_mut_slice() {
            *v = sigmoid(*v);
        }
        let rg = self.requires(&[x]);
        Ok(self.push(Op::Sigmoid { x }, Value::Real(out), rg))
    }

    /// Batch normalisation over rows. With `running = None` the batch's own
    /// statistics are used and returned; otherwise the supplied `(mean, var)`.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(NodeId, Option<BatchStats>)> {
        let xv = self.real(x)?;
        let (batch, feat) = xv.shape();
        let (gv, bv) = (self.real(gamma)?, self.real(beta)?);
        if gv.as_slice().len() != feat || bv.as_slice().len() != feat {
            return Err(Error::config(format!(
                "batch norm over {feat} features with scale/shift of length {}/{}",
                gv.as_slice().len(),
                bv.as_slice().len()
            )));
        }
        let (mean, var, stats) = match running {
            Some((m, v)) => {
                if m.len() != feat || v.len() != feat {
                    return Err(Error::config("batch norm running statistics have wrong length"));
                }
                (m.to_vec(), v.to_vec(), None)
            }
            None => {
                if batch == 0 {
                    return Err(Error::config("batch norm on an empty batch"));
                }
                let mut mean = vec![0.0; feat];
                for r in 0..batch {
                    for (m, v) in mean.iter_mut().zip(xv.row(r)) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= batch as f64);
                let mut var = vec![0.0; feat];
                for r in 0..batch {
                    for ((s, v), m) in var.iter_mut().zip(xv.row(r)).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= batch as f64);
                let st = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count: batch,
                };
                (mean, var, Some(st))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = RMat::zeros(batch, feat);
        let mut out = RMat::zeros(batch, feat);
        let (g, b) = (gv.as_slice(), bv.as_slice());
        for r in 0..batch {
            let xr = xv.row(r);
            for c in 0..feat {
                let h = (xr[c] - mean[c]) * inv_std[c];
                xhat[(r, c)] = h;
                out[(r, c)] = g[c] * h + b[c];
            }
        }
        let rg = self.requires(&[x, gamma, beta]);
        let batch_stats = stats.is_some();
        let id = self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            Value::Real(out),
            rg,
        );
        Ok((id, stats))
    }

    /// Row-wise power normalisation: the `cols/groups` slots of each group in
    /// row `r` are rescaled to squared norm `power[r] / groups`. Rows with an
    /// all-zero group are reported unless `allow_zero`, in which case they map to zero.
    pub fn power_scale(
        &mut self,
        x: NodeId,
        power: &[f64],
        groups: usize,
        allow_zero: bool,
    ) -> Result<NodeId> {
        let xv = self.real(x)?;
        let (batch, cols) = xv.shape();
        if power.len() != batch || groups == 0 || cols % groups != 0 {
            return Err(Error::config(format!(
                "power scale: {batch} rows, {} budgets, {cols} columns in {groups} groups",
                power.len()
            )));
        }
        let width = cols / groups;
        let mut scales = vec![0.0; batch * groups];
        let mut norms_sq = vec![0.0; batch * groups];
        let mut zero_rows = Vec::new();
        let mut out = xv.clone();
        for r in 0..batch {
            for g in 0..groups {
                let seg = &xv.row(r)[g * width..(g + 1) * width];
                let n2: f64 = seg.iter().map(|v| v * v).sum();
                norms_sq[r * groups + g] = n2;
                let s = if n2 > 0.0 {
                    (power[r] / groups as f64 / n2).sqrt()
                } else {
                    if zero_rows.last() != Some(&r) {
                        zero_rows.push(r);
                    }
                    0.0
                };
                scales[r * groups + g] = s;
                for v in &mut out.row_mut(r)[g * width..(g + 1) * width] {
                    *v *= s;
                }
            }
        }
        if !zero_rows.is_empty() && !allow_zero {
            return Err(Error::DegenerateInput { rows: zero_rows });
        }
        let rg = self.requires(&[x]);
        Ok(self.push(
            Op::PowerScale {
                x,
                groups,
                scales,
                norms_sq,
            },
            Value::Real(out),
            rg,
        ))
    }

    /// Reads `ports` complex values from real columns `[offset, offset + 2·ports)`
    /// laid out as `(re, im)` pairs; the result is `ports × batch`.
    pub fn to_complex(&mut self, x: NodeId, offset: usize, ports: usize) -> Result<NodeId> {
        let xv = self.real(x)?;
        if offset + 2 * ports > xv.cols() {
            return Err(Error::config("to_complex: slice out of range"));
        }
        let batch = xv.rows();
        let out = CMat::from_fn(ports, batch, |p, b| {
            Complex64::new(xv[(b, offset + 2 * p)], xv[(b, offset + 2 * p + 1)])
        });
        let rg = self.requires(&[x]);
        Ok(self.push(Op::ToComplex { x, offset }, Value::Complex(out), rg))
    }

    /// `diag(e^{jθ}) · X` where θ is the concatenation of the given phase leaves.
    pub fn phase_rows(&mut self, x: NodeId, thetas: &[NodeId]) -> Result<NodeId> {
        let mut theta = Vec::new();
        for &t in thetas {
            theta.extend_from_slice(self.real(t)?.as_slice());
        }
        let xv = self.complex(x)?;
        if theta.len() != xv.rows() {
            return Err(Error::config(format!(
                "phase layer of {} units applied to {} rows",
                theta.len(),
                xv.rows()
            )));
        }
        let out = xv.phase_rows(&theta);
        let mut deps = thetas.to_vec();
        deps.push(x);
        let rg = self.requires(&deps);
        Ok(self.push(
            Op::PhaseRows {
                x,
                thetas: thetas.to_vec(),
            },
            Value::Complex(out),
            rg,
        ))
    }

    /// `blockdiag(A, …, A) · B` with `blocks` copies of `A`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId, blocks: usize) -> Result<NodeId> {
        let out = if blocks == 1 {
            cmatmul(self.complex(a)?, self.complex(b)?)?
        } else {
            block_matmul(self.complex(a)?, self.complex(b)?, blocks)?
        };
        let rg = self.requires(&[a, b]);
        Ok(self.push(Op::MatMul { a, b, blocks }, Value::Complex(out), rg))
    }

    /// `x + c` for a constant `c` (receiver noise).
    pub fn add_const(&mut self, x: NodeId, c: &CMat) -> Result<NodeId> {
        let out = self.complex(x)?.add(c)?;
        let rg = self.requires(&[x]);
        Ok(self.push(Op::AddConst { x }, Value::Complex(out), rg))
    }

    /// Concatenates `ports × batch` complex blocks into a `batch × Σ2·ports`
    /// real matrix of `(re, im)` pairs, multiplied by `scale`.
    pub fn to_real(&mut self, xs: &[NodeId], scale: f64) -> Result<NodeId> {
        let mut batch = None;
        let mut width = 0;
        for &x in xs {
            let v = self.complex(x)?;
            if *batch.get_or_insert(v.cols()) != v.cols() {
                return Err(Error::config("to_real: blocks disagree on batch size"));
            }
            width += 2 * v.rows();
        }
        let batch = batch.unwrap_or(0);
        let mut out = RMat::zeros(batch, width);
        let mut off = 0;
        for &x in xs {
            let v = self.complex(x)?;
            for p in 0..v.rows() {
                for b in 0..batch {
                    let z = v[(p, b)];
                    out[(b, off + 2 * p)] = scale * z.re;
                    out[(b, off + 2 * p + 1)] = scale * z.im;
                }
            }
            off += 2 * v.rows();
        }
        let rg = self.requires(xs);
        Ok(self.push(
            Op::ToReal {
                xs: xs.to_vec(),
                scale,
            },
            Value::Real(out),
            rg,
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.real(a)?, self.real(b)?);
        if av.shape() != bv.shape() {
            return Err(Error::config("add: shape mismatch"));
        }
        let data = av.as_slice().iter().zip(bv.as_slice()).map(|(x, y)| x + y).collect();
        let out = RMat::from_vec(av.rows(), av.cols(), data)?;
        let rg = self.requires(&[a, b]);
        Ok(self.push(Op::Add { a, b }, Value::Real(out), rg))
    }

    /// Mean-over-batch binary cross-entropy, summed over bit positions.
    /// Log arguments are floored at `p_min`.
    pub fn bce(&mut self, x: NodeId, target: &RMat, p_min: f64) -> Result<NodeId> {
        let xv = self.real(x)?;
        if xv.shape() != target.shape() {
            return Err(Error::config(format!(
                "bce: soft bits {:?} vs targets {:?}",
                xv.shape(),
                target.shape()
            )));
        }
        let loss = bce_value(xv, target, p_min);
        let rg = self.requires(&[x]);
        Ok(self.push(
            Op::Bce {
                x,
                target: target.clone(),
                p_min,
            },
            Value::Real(RMat::scalar(loss)),
            rg,
        ))
    }

    pub fn sum_re(&mut self, x: NodeId) -> Result<NodeId> {
        let s: f64 = self.complex(x)?.as_slice().iter().map(|z| z.re).sum();
        let rg = self.requires(&[x]);
        Ok(self.push(Op::SumRe { x }, Value::Real(RMat::scalar(s)), rg))
    }

    pub fn sum_abs_sq(&mut self, x: NodeId) -> Result<NodeId> {
        let s: f64 = self.complex(x)?.as_slice().iter().map(|z| z.norm_sqr()).sum();
        let rg = self.requires(&[x]);
        Ok(self.push(Op::SumAbsSq { x }, Value::Real(RMat::scalar(s)), rg))
    }

    /// Gradients of the scalar `loss` with respect to every trainable leaf
    /// it depends on. Fixed leaves never appear in the result.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let Some(node) = self.nodes.get(loss) else {
            return Err(Error::State(format!(
                "backward from node {loss} which has not been computed ({} nodes recorded)",
                self.nodes.len()
            )));
        };
        match &node.value {
            Value::Real(m) if m.shape() == (1, 1) => {}
            _ => return Err(Error::State("backward needs a real scalar loss".into())),
        }
        let mut grads: Vec<Option<Value>> = vec![None; loss + 1];
        grads[loss] = Some(Value::Real(RMat::scalar(1.0)));
        let mut out = Gradients::default();

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Value>], id: NodeId, g: Value) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut grads[id] {
            Some(acc) => acc.add_assign(g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    fn propagate(
        &self,
        id: NodeId,
        g: Value,
        grads: &mut [Option<Value>],
        out: &mut Gradients,
    ) -> Result<()> {
        let node = &self.nodes[id];
        match (&node.op, g) {
            (Op::Leaf { param }, Value::Real(g)) => {
                if let Some(pid) = param {
                    out.insert(*pid, g.into_vec());
                }
            }
            (Op::Leaf { .. }, Value::Complex(_)) => {}
            (Op::Linear { x, w, b }, Value::Real(gy)) => {
                let (xv, wv) = (self.real(*x)?, self.real(*w)?);
                let (batch, fin, fout) = (xv.rows(), wv.cols(), wv.rows());
                if self.wants(*x) {
                    let mut gx = RMat::zeros(batch, fin);
                    for r in 0..batch {
                        let gr = gy.row(r);
                        let gxr = gx.row_mut(r);
                        for (k, gk) in gr.iter().enumerate() {
                            if *gk == 0.0 {
                                continue;
                            }
                            for (o, wv) in gxr.iter_mut().zip(wv.row(k)) {
                                *o += gk * wv;
                            }
                        }
                    }
                    self.accumulate(grads, *x, Value::Real(gx));
                }
                if self.wants(*w) {
                    let mut gw = RMat::zeros(fout, fin);
                    for r in 0..batch {
                        let xr = xv.row(r);
                        for (k, gk) in gy.row(r).iter().enumerate() {
                            if *gk == 0.0 {
                                continue;
                            }
                            for (o, xv) in gw.row_mut(k).iter_mut().zip(xr) {
                                *o += gk * xv;
                            }
                        }
                    }
                    self.accumulate(grads, *w, Value::Real(gw));
                }
                if self.wants(*b) {
                    let bshape = self.real(*b)?.shape();
                    let mut gb = RMat::zeros(bshape.0, bshape.1);
                    for r in 0..batch {
                        for (o, v) in gb.as_mut_slice().iter_mut().zip(gy.row(r)) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *b, Value::Real(gb));
                }
            }
            (Op::Relu { x }, Value::Real(mut gy)) => {
                let xv = self.real(*x)?;
                for (g, v) in gy.as_mut_slice().iter_mut().zip(xv.as_slice()) {
                    if *v <= 0.0 {
                        *g = 0.0;
                    }
                }
                self.accumulate(grads, *x, Value::Real(gy));
            }
            (Op::Sigmoid { x }, Value::Real(mut gy)) => {
                let Value::Real(s) = &node.value else { unreachable!() };
                for (g, s) in gy.as_mut_slice().iter_mut().zip(s.as_slice()) {
                    *g *= s * (1.0 - s);
                }
                self.accumulate(grads, *x, Value::Real(gy));
            }
            (
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                },
                Value::Real(gy),
            ) => {
                let (batch, feat) = gy.shape();
                let mut sum_g = vec![0.0; feat];
                let mut sum_gx = vec![0.0; feat];
                for r in 0..batch {
                    for c in 0..feat {
                        sum_g[c] += gy[(r, c)];
                        sum_gx[c] += gy[(r, c)] * xhat[(r, c)];
                    }
                }
                if self.wants(*gamma) {
                    let sh = self.real(*gamma)?.shape();
                    let m = RMat::from_vec(sh.0, sh.1, sum_gx.clone())?;
                    self.accumulate(grads, *gamma, Value::Real(m));
                }
                if self.wants(*beta) {
                    let sh = self.real(*beta)?.shape();
                    let m = RMat::from_vec(sh.0, sh.1, sum_g.clone())?;
                    self.accumulate(grads, *beta, Value::Real(m));
                }
                if self.wants(*x) {
                    let gam = self.real(*gamma)?.as_slice();
                    let mut gx = RMat::zeros(batch, feat);
                    let n = batch as f64;
                    for r in 0..batch {
                        for c in 0..feat {
                            let k = gam[c] * inv_std[c];
                            gx[(r, c)] = if *batch_stats {
                                k / n * (n * gy[(r, c)] - sum_g[c] - xhat[(r, c)] * sum_gx[c])
                            } else {
                                k * gy[(r, c)]
                            };
                        }
                    }
                    self.accumulate(grads, *x, Value::Real(gx));
                }
            }
            (
                Op::PowerScale {
                    x,
                    groups,
                    scales,
                    norms_sq,
                },
                Value::Real(gy),
            ) => {
                let xv = self.real(*x)?;
                let (batch, cols) = xv.shape();
                let width = cols / groups;
                let mut gx = RMat::zeros(batch, cols);
                for r in 0..batch {
                    for g in 0..*groups {
                        let s = scales[r * groups + g];
                        let n2 = norms_sq[r * groups + g];
                        if n2 == 0.0 {
                            continue;
                        }
                        let range = g * width..(g + 1) * width;
                        let xs = &xv.row(r)[range.clone()];
                        let gs = &gy.row(r)[range.clone()];
                        let dot: f64 = xs.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for ((o, xv), gv) in gx.row_mut(r)[range].iter_mut().zip(xs).zip(gs) {
                            *o = s * (gv - xv * dot / n2);
                        }
                    }
                }
                self.accumulate(grads, *x, Value::Real(gx));
            }
            (Op::ToComplex { x, offset }, Value::Complex(gz)) => {
                let sh = self.real(*x)?.shape();
                let mut gx = RMat::zeros(sh.0, sh.1);
                for p in 0..gz.rows() {
                    for b in 0..gz.cols() {
                        let z = gz[(p, b)];
                        gx[(b, offset + 2 * p)] = z.re;
                        gx[(b, offset + 2 * p + 1)] = z.im;
                    }
                }
                self.accumulate(grads, *x, Value::Real(gx));
            }
            (Op::PhaseRows { x, thetas }, Value::Complex(gz)) => {
                let Value::Complex(outv) = &node.value else { unreachable!() };
                let cols = gz.cols();
                let mut row = 0;
                for &t in thetas {
                    let n = self.real(t)?.as_slice().len();
                    if self.wants(t) {
                        let mut gt = vec![0.0; n];
                        for (k, gtk) in gt.iter_mut().enumerate() {
                            let r = row + k;
                            let mut acc = 0.0;
                            for c in 0..cols {
                                let (gv, ov) = (gz[(r, c)], outv[(r, c)]);
                                // Re(conj(ḡ) · j · out)
                                acc += gv.im * ov.re - gv.re * ov.im;
                            }
                            *gtk = acc;
                        }
                        let sh = self.real(t)?.shape();
                        self.accumulate(grads, t, Value::Real(RMat::from_vec(sh.0, sh.1, gt)?));
                    }
                    row += n;
                }
                if self.wants(*x) {
                    let mut theta = Vec::with_capacity(gz.rows());
                    for &t in thetas {
                        theta.extend(self.real(t)?.as_slice().iter().map(|v| -v));
                    }
                    self.accumulate(grads, *x, Value::Complex(gz.phase_rows(&theta)));
                }
            }
            (Op::MatMul { a, b, blocks }, Value::Complex(gz)) => {
                let (av, bv) = (self.complex(*a)?, self.complex(*b)?);
                if self.wants(*b) {
                    let ga = av.adjoint();
                    let gb = if *blocks == 1 {
                        cmatmul(&ga, &gz)?
                    } else {
                        block_matmul(&ga, &gz, *blocks)?
                    };
                    self.accumulate(grads, *b, Value::Complex(gb));
                }
                if self.wants(*a) {
                    let (ar, ac) = av.shape();
                    let mut ga = CMat::zeros(ar, ac);
                    for blk in 0..*blocks {
                        let gblk = gz.block(blk * ar, 0, ar, gz.cols());
                        let bblk = bv.block(blk * ac, 0, ac, bv.cols());
                        let part = cmatmul(&gblk, &bblk.adjoint())?;
                        for (o, p) in ga.as_mut_slice().iter_mut().zip(part.as_slice()) {
                            *o += p;
                        }
                    }
                    self.accumulate(grads, *a, Value::Complex(ga));
                }
            }
            (Op::AddConst { x }, g @ Value::Complex(_)) => {
                self.accumulate(grads, *x, g);
            }
            (Op::ToReal { xs, scale }, Value::Real(gy)) => {
                let mut off = 0;
                for &x in xs {
                    let v = self.complex(x)?;
                    let (ports, batch) = v.shape();
                    if self.wants(x) {
                        let gz = CMat::from_fn(ports, batch, |p, b| {
                            Complex64::new(
                                scale * gy[(b, off + 2 * p)],
                                scale * gy[(b, off + 2 * p + 1)],
                            )
                        });
                        self.accumulate(grads, x, Value::Complex(gz));
                    }
                    off += 2 * ports;
                }
            }
            (Op::Add { a, b }, Value::Real(gy)) => {
                self.accumulate(grads, *a, Value::Real(gy.clone()));
                self.accumulate(grads, *b, Value::Real(gy));
            }
            (Op::Bce { x, target, p_min }, Value::Real(gl)) => {
                let xv = self.real(*x)?;
                let scale = gl[(0, 0)] / xv.rows() as f64;
                let data = xv
                    .as_slice()
                    .iter()
                    .zip(target.as_slice())
                    .map(|(s, t)| scale * (-t / s.max(*p_min) + (1.0 - t) / (1.0 - s).max(*p_min)))
                    .collect();
                let gx = RMat::from_vec(xv.rows(), xv.cols(), data)?;
                self.accumulate(grads, *x, Value::Real(gx));
            }
            (Op::SumRe { x }, Value::Real(gl)) => {
                let sh = self.complex(*x)?.shape();
                let g = Complex64::new(gl[(0, 0)], 0.0);
                let gz = CMat::from_fn(sh.0, sh.1, |_, _| g);
                self.accumulate(grads, *x, Value::Complex(gz));
            }
            (Op::SumAbsSq { x }, Value::Real(gl)) => {
                let gz = self.complex(*x)?.scale(Complex64::new(2.0 * gl[(0, 0)], 0.0));
                self.accumulate(grads, *x, Value::Complex(gz));
            }
            (op, _) => {
                return Err(Error::State(format!("gradient kind mismatch at {op:?}")));
            }
        }
        Ok(())
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `−(1/B) Σ_rows Σ_cols [t·ln max(ŝ, p_min) + (1−t)·ln max(1−ŝ, p_min)]`.
pub fn bce_value(soft: &RMat, target: &RMat, p_min: f64) -> f64 {
    let mut acc = 0.0;
    for (s, t) in soft.as_slice().iter().zip(target.as_slice()) {
        if *t != 0.0 {
            acc -= t * s.max(p_min).ln();
        }
        if *t != 1.0 {
            acc -= (1.0 - t) * (1.0 - s).max(p_min).ln();
        }
    }
    acc / soft.rows().max(1) as f64
}
