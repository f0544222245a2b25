use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::lora::{lora_a_name, lora_b_name, LoraConfig};
use super::params::{normal, ParamStore};
use crate::autograd::{Graph, Mat, Var};
use crate::error::Result;

/// Read-only view of the parameters plus forward-pass switches.
pub struct Ctx<'a> {
    pub store: &'a ParamStore,
    pub lora: Option<&'a LoraConfig>,
    /// `Some` enables dropout on the adapter path.
    pub rng: Option<ChaCha8Rng>,
}

impl<'a> Ctx<'a> {
    pub fn eval(store: &'a ParamStore, lora: Option<&'a LoraConfig>) -> Self {
        Self { store, lora, rng: None }
    }
}

/// `y = x · W + b` with `W: (inp, out)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub inp: usize,
    pub out: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, inp: usize, out: usize, bias: bool) -> Self {
        Self { name: name.into(), inp, out, bias }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    /// Normal weights with standard deviation `gain / sqrt(inp)`, zero bias.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng, gain: f64) {
        let std = gain / (self.inp as f64).sqrt();
        store.insert(self.weight_name(), normal(rng, self.inp, self.out, std));
        if self.bias {
            store.insert(self.bias_name(), Mat::zeros((1, self.out)));
        }
    }

    pub fn forward(&self, g: &mut Graph, cx: &mut Ctx, x: Var) -> Result<Var> {
        let wname = self.weight_name();
        let w = g.param(cx.store, &wname)?;
        let mut y = g.matmul(x, w);
        if let Some(cfg) = cx.lora {
            let a_name = lora_a_name(&wname);
            if cx.store.contains(&a_name) {
                let a = g.param(cx.store, &a_name)?;
                let b = g.param(cx.store, &lora_b_name(&wname))?;
                let mut xin = x;
                if let (Some(rng), true) = (cx.rng.as_mut(), cfg.dropout > 0.0) {
                    let keep = 1.0 - cfg.dropout;
                    let (r, c) = g.shape(x);
                    let mask = Mat::from_shape_fn((r, c), |_| {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    });
                    let m = g.constant(mask);
                    xin = g.mul(x, m);
                }
                let xa = g.matmul(xin, a);
                let xab = g.matmul(xa, b);
                let delta = g.scale(xab, cfg.scale());
                y = g.add(y, delta);
            }
        }
        if self.bias {
            let b = g.param(cx.store, &self.bias_name())?;
            y = g.add_row(y, b);
        }
        Ok(y)
    }
}

/// Learned per-feature gain applied after RMS normalization.
#[derive(Clone, Debug)]
pub struct RmsNorm {
    pub name: String,
    pub dim: usize,
}

impl RmsNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self { name: name.into(), dim }
    }

    pub fn gain_name(&self) -> String {
        format!("{}.gain", self.name)
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.insert(self.gain_name(), Mat::ones((1, self.dim)));
    }

    pub fn forward(&self, g: &mut Graph, cx: &Ctx, x: Var) -> Result<Var> {
        let n = g.rms_norm(x);
        let gain = g.param(cx.store, &self.gain_name())?;
        Ok(g.mul_row(n, gain))
    }
}
