use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Ctx, Linear, RmsNorm};
use super::params::ParamStore;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::synthworld::{FrameSeq, View, CLIP_FRAMES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d: usize,
    pub n_blocks: usize,
    pub hidden: usize,
}

/// Per-frame visual encoder: flatten projection, pre-norm residual MLP
/// blocks, normalized output projection. Emits `(16, d)` features.
#[derive(Clone, Debug)]
pub struct VisualEncoder {
    pub view: View,
    pub prefix: String,
    pub in_dim: usize,
    pub d: usize,
    proj_in: Linear,
    blocks: Vec<(RmsNorm, Linear, Linear)>,
    out_norm: RmsNorm,
    proj_out: Linear,
}

impl VisualEncoder {
    pub fn new(view: View, in_dim: usize, cfg: &EncoderConfig) -> Self {
        let prefix = format!("enc_{}", view.as_str());
        let blocks = (0..cfg.n_blocks)
            .map(|i| {
                (
                    RmsNorm::new(format!("{prefix}.block{i}.norm"), cfg.d),
                    Linear::new(format!("{prefix}.block{i}.fc1"), cfg.d, cfg.hidden, true),
                    Linear::new(format!("{prefix}.block{i}.fc2"), cfg.hidden, cfg.d, true),
                )
            })
            .collect();
        Self {
            view,
            in_dim,
            d: cfg.d,
            proj_in: Linear::new(format!("{prefix}.proj_in"), in_dim, cfg.d, true),
            blocks,
            out_norm: RmsNorm::new(format!("{prefix}.out_norm"), cfg.d),
            proj_out: Linear::new(format!("{prefix}.proj_out"), cfg.d, cfg.d, true),
            prefix,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.proj_in.init(store, rng, 1.0);
        for (norm, fc1, fc2) in &self.blocks {
            norm.init(store);
            fc1.init(store, rng, 1.0);
            fc2.init(store, rng, 0.5);
        }
        self.out_norm.init(store);
        self.proj_out.init(store, rng, 1.0);
    }

    pub fn proj_out_names(&self) -> [String; 2] {
        [self.proj_out.weight_name(), self.proj_out.bias_name()]
    }

    /// Encodes a sampled clip into a `(16, d)` feature sequence.
    pub fn encode(&self, g: &mut Graph, cx: &mut Ctx, frames: &FrameSeq) -> Result<Var> {
        if frames.view != self.view {
            return Err(Error::ViewMismatch {
                expected: self.view.as_str().into(),
                actual: frames.view.as_str().into(),
            });
        }
        let (t, dim) = frames.frames.dim();
        if t != CLIP_FRAMES || dim != self.in_dim {
            return Err(Error::Shape(format!(
                "{} encoder expects ({CLIP_FRAMES}, {}), got ({t}, {dim})",
                self.prefix, self.in_dim
            )));
        }
        let x = g.constant(frames.frames.clone());
        self.forward(g, cx, x)
    }

    pub fn forward(&self, g: &mut Graph, cx: &mut Ctx, x: Var) -> Result<Var> {
        let mut h = self.proj_in.forward(g, cx, x)?;
        for (norm, fc1, fc2) in &self.blocks {
            let n = norm.forward(g, cx, h)?;
            let a = fc1.forward(g, cx, n)?;
            let a = g.gelu(a);
            let b = fc2.forward(g, cx, a)?;
            h = g.add(h, b);
        }
        let n = self.out_norm.forward(g, cx, h)?;
        self.proj_out.forward(g, cx, n)
    }
}
