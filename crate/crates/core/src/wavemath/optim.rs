//! Parameter updates: plain SGD and AdamW with decoupled weight decay.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamKind, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adamw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSettings {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// Multiplier applied to the learning rate at each decay point, in `(0, 1]`.
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            kind: OptimizerKind::Adamw,
            learning_rate: 0.005,
            decay: 1.0 / 1.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl OptimizerSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be finite and non-negative"));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::config("learning-rate decay must lie in (0, 1]"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight decay must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub settings: OptimizerSettings,
    pub lr: f64,
    pub steps: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// Wraps a phase into `[0, 2π)`.
pub fn wrap_phase(theta: f64) -> f64 {
    let w = theta.rem_euclid(TAU);
    if w >= TAU {
        0.0
    } else {
        w
    }
}

impl OptimizerState {
    pub fn new(settings: OptimizerSettings, store: &ParamStore) -> Self {
        let shapes: Vec<Vec<f64>> = match settings.kind {
            OptimizerKind::Sgd => Vec::new(),
            OptimizerKind::Adamw => store.iter().map(|(_, p)| vec![0.0; p.len()]).collect(),
        };
        OptimizerState {
            settings,
            lr: settings.learning_rate,
            steps: 0,
            m: shapes.clone(),
            v: shapes,
        }
    }

    /// Applies one update. A non-finite gradient aborts before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        grads.check_shapes(store)?;
        if let Some(id) = grads.first_non_finite() {
            return Err(Error::NonFinite {
                stage: format!("gradient of {}", store.get(id).name),
            });
        }
        self.steps += 1;
        let s = self.settings;
        let t = self.steps as i32;
        for (id, g) in grads.iter() {
            let p = store.get_mut(id);
            match s.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in p.data.iter_mut().zip(g) {
                        *w -= self.lr * g;
                    }
                }
                OptimizerKind::Adamw => {
                    let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
                    let bc1 = 1.0 - s.beta1.powi(t);
                    let bc2 = 1.0 - s.beta2.powi(t);
                    let decay = if p.kind == ParamKind::Weight {
                        s.weight_decay
                    } else {
                        0.0
                    };
                    for (((w, g), m), v) in p.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = s.beta1 * *m + (1.0 - s.beta1) * g;
                        *v = s.beta2 * *v + (1.0 - s.beta2) * g * g;
                        let mhat = *m / bc1;
                        let vhat = *v / bc2;
                        *w -= self.lr * decay * *w;
                        *w -= self.lr * mhat / (vhat.sqrt() + s.eps);
                    }
                }
            }
            if p.kind == ParamKind::Phase {
                p.data.iter_mut().for_each(|th| *th = wrap_phase(*th));
            }
        }
        Ok(())
    }

    pub fn decay_lr(&mut self) {
        self.lr *= self.settings.decay;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wavemath::params::{Param, ParamId};

    fn store(kind: ParamKind, v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.push(Param {
            name: "p".into(),
            group: "g".into(),
            kind,
            rows: 1,
            cols: 1,
            data: vec![v],
        });
        s
    }

    fn grads(v: f64) -> Gradients {
        let mut g = Gradients::default();
        g.insert(ParamId(0), vec![v]);
        g
    }

    fn sgd(lr: f64) -> OptimizerSettings {
        OptimizerSettings {
            kind: OptimizerKind::Sgd,
            learning_rate: lr,
            ..Default::default()
        }
    }

    #[test]
    fn sgd_step() {
        let mut s = store(ParamKind::Weight, 1.0);
        let mut opt = OptimizerState::new(sgd(0.1), &s);
        opt.step(&mut s, &grads(2.0)).unwrap();
        assert!((s.get(ParamId(0)).data[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        for settings in [
            sgd(0.1),
            OptimizerSettings {
                weight_decay: 0.0,
                ..Default::default()
            },
        ] {
            let mut s = store(ParamKind::Weight, 0.7);
            let mut opt = OptimizerState::new(settings, &s);
            for _ in 0..5 {
                opt.step(&mut s, &grads(0.0)).unwrap();
            }
            assert_eq!(s.get(ParamId(0)).data[0], 0.7);
        }
    }

    #[test]
    fn phase_wraps_after_step() {
        let mut s = store(ParamKind::Phase, 6.2);
        let mut opt = OptimizerState::new(sgd(1.0), &s);
        opt.step(&mut s, &grads(-0.2)).unwrap();
        let expect = 6.4 - std::f64::consts::TAU;
        assert!((s.get(ParamId(0)).data[0] - expect).abs() < 1e-12);
        assert!((expect - 0.117).abs() < 1e-3);
    }

    #[test]
    fn nan_gradient_aborts_without_update() {
        let mut s = store(ParamKind::Weight, 1.0);
        let mut opt = OptimizerState::new(OptimizerSettings::default(), &s);
        assert!(matches!(opt.step(&mut s, &grads(f64::NAN)), Err(Error::NonFinite { .. })));
        assert_eq!(s.get(ParamId(0)).data[0], 1.0);
        assert_eq!(opt.steps, 0);
    }

    #[test]
    fn wrap_never_returns_two_pi() {
        for v in [-1e-18, -TAU, TAU, 3.0 * TAU - 1e-17, 0.0] {
            let w = wrap_phase(v);
            assert!((0.0..TAU).contains(&w), "{v} -> {w}");
        }
    }
}
