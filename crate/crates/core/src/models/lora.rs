//! Low-rank adapters on frozen weight matrices.
//!
//! Weights here use the row-vector convention `y = x · W` with
//! `W: (in, out)`. An adapter adds `scale · (x · A) · B` with `A: (in, r)`
//! and `B: (r, out)`, `scale = alpha / r`. This is the transpose of the
//! column convention `W x + scale · B (A x)`; parameter counts and the
//! merged weight `W + scale · A · B` are the same.

use ndarray::{Array2, LinalgScalar};
use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{normal, ParamStore};
use crate::autograd::Mat;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    /// glob patterns over weight names
    pub targets: Vec<String>,
}

impl LoraConfig {
    /// rank 128, alpha 256, dropout 0.1 on every attention and MLP matrix
    pub fn paper() -> Self {
        Self {
            rank: 128,
            alpha: 256.0,
            dropout: 0.1,
            targets: default_targets(),
        }
    }

    /// Same alpha/rank ratio at a size that trains in seconds.
    pub fn toy() -> Self {
        Self {
            rank: 4,
            alpha: 8.0,
            dropout: 0.0,
            targets: default_targets(),
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

fn default_targets() -> Vec<String> {
    vec!["lm.*.attn.w*.weight".into(), "lm.*.mlp.fc*.weight".into()]
}

pub fn lora_a_name(weight: &str) -> String {
    format!("lora.{weight}.a")
}

pub fn lora_b_name(weight: &str) -> String {
    format!("lora.{weight}.b")
}

fn targets(store: &ParamStore, cfg: &LoraConfig) -> Vec<String> {
    store
        .matching(&cfg.targets)
        .into_iter()
        .filter(|n| !n.starts_with("lora.") && n.ends_with(".weight"))
        .collect()
}

/// Adds an `(A, B)` pair for every matched matrix. `B` starts at zero so the
/// wrapped model computes exactly what the base model did. Returns the
/// number of added scalar parameters.
pub fn lora_wrap(store: &mut ParamStore, cfg: &LoraConfig, rng: &mut impl Rng) -> Result<usize> {
    if cfg.rank == 0 || cfg.alpha <= 0.0 || !(0.0..1.0).contains(&cfg.dropout) {
        return Err(Error::Shape(format!(
            "invalid LoRA config: rank {}, alpha {}, dropout {}",
            cfg.rank, cfg.alpha, cfg.dropout
        )));
    }
    let names = targets(store, cfg);
    if names.is_empty() {
        return Err(Error::NoLoraTarget(cfg.targets.clone()));
    }
    let mut added = 0;
    for name in names {
        let (inp, out) = store.get(&name).unwrap().dim();
        let a = normal(rng, inp, cfg.rank, 1.0 / (inp as f64).sqrt());
        store.insert(lora_a_name(&name), a);
        store.insert(lora_b_name(&name), Mat::zeros((cfg.rank, out)));
        added += cfg.rank * (inp + out);
    }
    Ok(added)
}

/// Folds every adapter into its base weight and removes the adapter
/// parameters. Returns the number of merged matrices.
pub fn lora_merge(store: &mut ParamStore, cfg: &LoraConfig) -> Result<usize> {
    let bases: Vec<String> = store
        .names()
        .filter_map(|n| n.strip_prefix("lora.")?.strip_suffix(".a").map(str::to_string))
        .collect();
    for base in &bases {
        let a = store.remove(&lora_a_name(base)).unwrap();
        let b = store
            .remove(&lora_b_name(base))
            .ok_or_else(|| Error::MissingParameter(lora_b_name(base)))?;
        let w = store
            .get_mut(base)
            .ok_or_else(|| Error::MissingParameter(base.clone()))?;
        *w = merged_weight(w, &a, &b, cfg.scale());
    }
    Ok(bases.len())
}

/// `x · W + scale · (x · A) · B`
pub fn adapter_forward<T>(x: &Array2<T>, w: &Array2<T>, a: &Array2<T>, b: &Array2<T>, scale: T) -> Array2<T>
where
    T: LinalgScalar + Float,
{
    let base = x.dot(w);
    let delta = x.dot(a).dot(b).mapv(|v| v * scale);
    base + delta
}

/// `W + scale · A · B`
pub fn merged_weight<T>(w: &Array2<T>, a: &Array2<T>, b: &Array2<T>, scale: T) -> Array2<T>
where
    T: LinalgScalar + Float,
{
    w + &a.dot(b).mapv(|v| v * scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store() -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        s.insert("lm.block0.attn.wq.weight", normal(&mut rng, 6, 6, 0.3));
        s.insert("lm.block0.mlp.fc1.weight", normal(&mut rng, 6, 10, 0.3));
        s.insert("lm.block0.mlp.fc1.bias", Mat::zeros((1, 10)));
        s.insert("enc_ego.proj_in.weight", normal(&mut rng, 4, 6, 0.3));
        s
    }

    #[test]
    fn wrap_counts_and_targets() {
        let mut s = store();
        let cfg = LoraConfig::toy();
        let added = lora_wrap(&mut s, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(added, 4 * (6 + 6) + 4 * (6 + 10));
        assert!(s.contains("lora.lm.block0.attn.wq.weight.a"));
        assert!(!s.contains("lora.enc_ego.proj_in.weight.a"));
        assert_eq!(s.get("lora.lm.block0.mlp.fc1.weight.b").unwrap().dim(), (4, 10));
    }

    #[test]
    fn wrap_without_targets_fails() {
        let mut s = store();
        let cfg = LoraConfig {
            targets: vec!["nothing.*".into()],
            ..LoraConfig::toy()
        };
        assert!(matches!(
            lora_wrap(&mut s, &cfg, &mut ChaCha8Rng::seed_from_u64(1)),
            Err(Error::NoLoraTarget(_))
        ));
    }

    #[test]
    fn merge_folds_adapters() {
        let mut s = store();
        let cfg = LoraConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        lora_wrap(&mut s, &cfg, &mut rng).unwrap();
        let name = "lm.block0.attn.wq.weight";
        *s.get_mut(&lora_b_name(name)).unwrap() = normal(&mut rng, 4, 6, 0.5);
        let x = normal(&mut rng, 3, 6, 1.0);
        let via_adapter = adapter_forward(
            &x,
            s.get(name).unwrap(),
            s.get(&lora_a_name(name)).unwrap(),
            s.get(&lora_b_name(name)).unwrap(),
            cfg.scale(),
        );
        assert_eq!(lora_merge(&mut s, &cfg).unwrap(), 2);
        assert!(!s.names().any(|n| n.starts_with("lora.")));
        let merged = x.dot(s.get(name).unwrap());
        let diff = (&merged - &via_adapter).iter().fold(0.0f64, |a, b| a.max(b.abs()));
        assert!(diff < 1e-12);
    }
}
