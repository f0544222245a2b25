//! Stand-in for a pretrained language model.
//!
//! The full-scale method starts from an instruction-tuned LLM that already knows how to
//! describe content placed in its context. The tiny LM here is taught the
//! same skill on text alone: each training sequence may carry a prefix of
//! noise rows in which the embeddings of the sentence's content words are
//! planted, so the model learns to read words off its prefix. The visual
//! encoders later learn to write into that prefix.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::optim::{opt_step, AdamW, OptimizerState};
use super::plan::schedule;
use super::{sequence, Sequence};
use crate::autograd::{GradScope, Graph, Mat};
use crate::error::Result;
use crate::models::{Exo2Ego, TOK_EMB};
use crate::synthworld::{narration_text, Object, Verb};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub seed: u64,
    /// prefix lengths seen during pretraining (visual prefixes are 16 or 32)
    pub prefix_lengths: Vec<usize>,
    /// share of sequences that carry a prefix
    pub prefix_prob: f64,
    /// share of sequences preceded by an instruction
    pub prompt_prob: f64,
    pub noise_std: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 16,
            lr: 3e-3,
            warmup_ratio: 0.05,
            seed: 7,
            prefix_lengths: vec![16, 32],
            prefix_prob: 0.85,
            prompt_prob: 0.5,
            noise_std: 0.2,
        }
    }
}

/// Content words of a narration: the verb phrase and the object.
fn content_words(verb: Verb, object: Object) -> Vec<String> {
    verb.phrase()
        .split_whitespace()
        .map(str::to_string)
        .chain(std::iter::once(object.word().to_string()))
        .collect()
}

/// Mean loss per step.
pub fn pretrain_lm(model: &mut Exo2Ego, instructions: &[String], cfg: &PretrainConfig) -> Result<Vec<f64>> {
    if cfg.steps == 0 {
        return Ok(Vec::new());
    }
    let lm_names: Vec<String> = model.params.names().filter(|n| n.starts_with("lm.")).cloned().collect();
    let mut opt = OptimizerState::new(AdamW::default());
    opt.reset(&model.params, &lm_names)?;
    let scope = GradScope::Only(lm_names.iter().cloned().collect());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = model.config.d;
    let vsize = model.vocab.len();
    let mut curve = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut g = Graph::new(scope.clone());
        let mut cx = model.ctx();
        let mut losses = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let verb = *Verb::ALL.choose(&mut rng).unwrap();
            let object = *Object::ALL.choose(&mut rng).unwrap();
            let prompt = if !instructions.is_empty() && rng.random::<f64>() < cfg.prompt_prob {
                instructions[rng.random_range(0..instructions.len())].as_str()
            } else {
                ""
            };
            let seq: Sequence = sequence(&model.vocab, prompt, &narration_text(verb, object));
            let prefix = if rng.random::<f64>() < cfg.prefix_prob {
                let len = *cfg.prefix_lengths.choose(&mut rng).unwrap();
                let mut select = Mat::zeros((len, vsize));
                let mut rows: Vec<usize> = (0..len).collect();
                rows.shuffle(&mut rng);
                let mut free = rows.into_iter();
                for w in content_words(verb, object) {
                    let id = model.vocab.id(&w);
                    let copies = rng.random_range(1..=4);
                    for r in free.by_ref().take(copies) {
                        select[[r, id]] = rng.random_range(0.6..1.4);
                    }
                }
                let noise = Mat::from_shape_fn((len, d), |_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * cfg.noise_std
                });
                let s = g.constant(select);
                let table = g.param(cx.store, TOK_EMB)?;
                let planted = g.matmul(s, table);
                let n = g.constant(noise);
                Some(g.add(planted, n))
            } else {
                None
            };
            let logits = model.lm_logits(&mut g, &mut cx, prefix, &seq.tokens)?;
            losses.push(g.cross_entropy(logits, &seq.targets, &seq.mask)?);
        }
        let loss = g.mean_of(&losses)?;
        curve.push(g.scalar(loss));
        let grads = g.backward(loss).into_param_grads();
        drop(cx);
        let lr = schedule(step + 1, cfg.steps, cfg.lr, cfg.warmup_ratio);
        opt_step(&mut model.params, &grads, &mut opt, lr)?;
    }
    Ok(curve)
}
