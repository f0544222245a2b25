use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::models::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    /// global gradient-norm ceiling; `None` disables clipping
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.02,
            eps: 1e-8,
            max_grad_norm: Some(1.0),
        }
    }
}

/// Moments are kept for trainable parameters only.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub hyper: AdamW,
    pub step: u64,
    pub m: BTreeMap<String, Mat>,
    pub v: BTreeMap<String, Mat>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// global norm before clipping
    pub grad_norm: f64,
    pub clipped: bool,
}

impl OptimizerState {
    pub fn new(hyper: AdamW) -> Self {
        Self {
            hyper,
            ..Self::default()
        }
    }

    /// Fresh zero moments for the given parameters.
    pub fn reset<'a>(&mut self, store: &ParamStore, trainable: impl IntoIterator<Item = &'a String>) -> Result<()> {
        self.step = 0;
        self.m.clear();
        self.v.clear();
        for name in trainable {
            let p = store
                .get(name)
                .ok_or_else(|| Error::MissingParameter(name.clone()))?;
            self.m.insert(name.clone(), Mat::zeros(p.dim()));
            self.v.insert(name.clone(), Mat::zeros(p.dim()));
        }
        Ok(())
    }
}

/// One AdamW update with decoupled weight decay:
/// `θ ← θ − lr · (m̂ / (√v̂ + ε) + wd · θ)`.
///
/// Only parameters with moments are touched; gradients for anything else
/// are ignored.
pub fn opt_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Mat>,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<StepStats> {
    let mut sq = 0.0;
    for (name, g) in grads {
        if !state.m.contains_key(name) {
            continue;
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
        sq += g.iter().map(|x| x * x).sum::<f64>();
    }
    let grad_norm = sq.sqrt();
    let h = state.hyper;
    let factor = match h.max_grad_norm {
        Some(max) if grad_norm > max => max / grad_norm,
        _ => 1.0,
    };

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);
    for (name, m) in state.m.iter_mut() {
        let v = state.v.get_mut(name).expect("moments are created in pairs");
        let p = params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParameter(name.clone()))?;
        let zero;
        let g = match grads.get(name) {
            Some(g) => g,
            None => {
                zero = Mat::zeros(p.dim());
                &zero
            }
        };
        ndarray::Zip::from(&mut *p)
            .and(&mut *m)
            .and(&mut *v)
            .and(g)
            .for_each(|p, m, v, &g| {
                let g = g * factor;
                *m = h.beta1 * *m + (1.0 - h.beta1) * g;
                *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * (m_hat / (v_hat.sqrt() + h.eps) + h.weight_decay * *p);
            });
    }
    Ok(StepStats {
        grad_norm,
        clipped: factor < 1.0,
    })
}
