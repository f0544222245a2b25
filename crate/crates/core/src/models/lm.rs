//! Word-level decoder-only language model with a visual prefix slot.
//!
//! The input sequence is `[prefix rows; <bos>; tokens]`. Attention is
//! causal over the whole sequence, so row `k` of the output depends only on
//! the prefix and tokens up to `k`. Output projection is tied to the token
//! embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Ctx, Linear, RmsNorm};
use super::params::{normal, ParamStore};
use super::vocab::BOS;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub d: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
    pub max_len: usize,
}

#[derive(Clone, Debug)]
struct Block {
    attn_norm: RmsNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    mlp_norm: RmsNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct TinyLm {
    pub cfg: LmConfig,
    pub vocab_size: usize,
    blocks: Vec<Block>,
    final_norm: RmsNorm,
}

pub const TOK_EMB: &str = "lm.tok_emb";
pub const POS_EMB: &str = "lm.pos_emb";

impl TinyLm {
    pub fn new(cfg: LmConfig, vocab_size: usize) -> Result<Self> {
        if cfg.n_heads == 0 || cfg.d % cfg.n_heads != 0 {
            return Err(Error::Shape(format!(
                "width {} is not divisible into {} heads",
                cfg.d, cfg.n_heads
            )));
        }
        let d = cfg.d;
        let blocks = (0..cfg.n_blocks)
            .map(|i| {
                let p = format!("lm.block{i}");
                Block {
                    attn_norm: RmsNorm::new(format!("{p}.attn_norm"), d),
                    wq: Linear::new(format!("{p}.attn.wq"), d, d, false),
                    wk: Linear::new(format!("{p}.attn.wk"), d, d, false),
                    wv: Linear::new(format!("{p}.attn.wv"), d, d, false),
                    wo: Linear::new(format!("{p}.attn.wo"), d, d, false),
                    mlp_norm: RmsNorm::new(format!("{p}.mlp_norm"), d),
                    fc1: Linear::new(format!("{p}.mlp.fc1"), d, cfg.mlp_hidden, true),
                    fc2: Linear::new(format!("{p}.mlp.fc2"), cfg.mlp_hidden, d, true),
                }
            })
            .collect();
        Ok(Self {
            vocab_size,
            blocks,
            final_norm: RmsNorm::new("lm.final_norm", d),
            cfg,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        store.insert(TOK_EMB, normal(rng, self.vocab_size, self.cfg.d, 0.3));
        store.insert(POS_EMB, normal(rng, self.cfg.max_len, self.cfg.d, 0.1));
        for b in &self.blocks {
            b.attn_norm.init(store);
            b.wq.init(store, rng, 1.0);
            b.wk.init(store, rng, 1.0);
            b.wv.init(store, rng, 1.0);
            b.wo.init(store, rng, 0.5);
            b.mlp_norm.init(store);
            b.fc1.init(store, rng, 1.0);
            b.fc2.init(store, rng, 0.5);
        }
        self.final_norm.init(store);
    }

    /// Logits of shape `(tokens.len() + 1, |V|)`: row `k` predicts the token
    /// that follows `<bos>, tokens[..k]`.
    pub fn logits(&self, g: &mut Graph, cx: &mut Ctx, prefix: Option<Var>, tokens: &[usize]) -> Result<Var> {
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::OutOfVocabulary {
                id,
                vocab: self.vocab_size,
            });
        }
        let plen = match prefix {
            Some(p) => {
                let (rows, cols) = g.shape(p);
                if cols != self.cfg.d {
                    return Err(Error::Shape(format!(
                        "prefix width {cols} does not match model width {}",
                        self.cfg.d
                    )));
                }
                rows
            }
            None => 0,
        };
        let len = plen + 1 + tokens.len();
        if len > self.cfg.max_len {
            return Err(Error::Shape(format!(
                "sequence of {len} exceeds max_len {}",
                self.cfg.max_len
            )));
        }
        let ids: Vec<usize> = std::iter::once(BOS).chain(tokens.iter().copied()).collect();
        let table = g.param(cx.store, TOK_EMB)?;
        let emb = g.gather(table, &ids)?;
        let x = match prefix {
            Some(p) => g.concat_rows(&[p, emb])?,
            None => emb,
        };
        let pos_table = g.param(cx.store, POS_EMB)?;
        let positions: Vec<usize> = (0..len).collect();
        let pos = g.gather(pos_table, &positions)?;
        let mut h = g.add(x, pos);

        let heads = self.cfg.n_heads;
        let dh = self.cfg.d / heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        for b in &self.blocks {
            let n = b.attn_norm.forward(g, cx, h)?;
            let q = b.wq.forward(g, cx, n)?;
            let k = b.wk.forward(g, cx, n)?;
            let v = b.wv.forward(g, cx, n)?;
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let (c0, c1) = (hd * dh, (hd + 1) * dh);
                let (qh, kh, vh) = if heads == 1 {
                    (q, k, v)
                } else {
                    (g.slice_cols(q, c0, c1), g.slice_cols(k, c0, c1), g.slice_cols(v, c0, c1))
                };
                let scores = g.matmul_t(qh, kh);
                let scores = g.scale(scores, inv_sqrt);
                let att = g.causal_softmax(scores);
                outs.push(g.matmul(att, vh));
            }
            let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
            let o = b.wo.forward(g, cx, cat)?;
            h = g.add(h, o);

            let n = b.mlp_norm.forward(g, cx, h)?;
            let a = b.fc1.forward(g, cx, n)?;
            let a = g.gelu(a);
            let m = b.fc2.forward(g, cx, a)?;
            h = g.add(h, m);
        }
        let h = g.slice_rows(h, plen, len);
        let h = self.final_norm.forward(g, cx, h)?;
        Ok(g.matmul_t(h, table))
    }
}
