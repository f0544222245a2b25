use exo2ego::autograd::{GradScope, Graph, Mat};
use exo2ego::models::lora::{adapter_forward, lora_a_name, lora_b_name, merged_weight};
use exo2ego::models::{
    concat_guidance, Direction, Exo2Ego, LoraConfig, MappingArch, ModelConfig, Vocab,
};
use exo2ego::synthworld::{FrameSeq, View, CLIP_FRAMES};
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn randn(rows: usize, cols: usize, seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Mat::from_shape_fn((rows, cols), |_| StandardNormal.sample(&mut rng))
}

fn max_abs(a: &Mat, b: &Mat) -> f64 {
    (a - b).iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn vocab() -> Vocab {
    Vocab::build(["C picks up the red cup", "C puts down the knife"])
}

#[derive(Debug, Clone)]
struct Shape {
    heads: usize,
    head_dim: usize,
    blocks: usize,
    hidden: usize,
    rank: usize,
    alpha: f64,
    seed: u64,
}

fn shapes() -> impl Strategy<Value = Shape> {
    (1usize..4, 2usize..9, 1usize..4, 4usize..40, 1usize..9, 0.5f64..32.0, any::<u64>()).prop_map(
        |(heads, head_dim, blocks, hidden, rank, alpha, seed)| Shape {
            heads,
            head_dim,
            blocks,
            hidden,
            rank,
            alpha,
            seed,
        },
    )
}

fn model_for(s: &Shape) -> Exo2Ego {
    let cfg = ModelConfig {
        d: s.heads * s.head_dim,
        lm_blocks: s.blocks,
        lm_heads: s.heads,
        lm_mlp_hidden: s.hidden,
        lora: LoraConfig {
            rank: s.rank,
            alpha: s.alpha,
            dropout: 0.0,
            ..LoraConfig::toy()
        },
        seed: s.seed,
        ..ModelConfig::toy()
    };
    Exo2Ego::new(cfg, 5, 7, vocab()).unwrap()
}

fn logits(m: &Exo2Ego, prefix: &Mat, tokens: &[usize]) -> Mat {
    let mut g = Graph::new(GradScope::None);
    let mut cx = m.ctx();
    let p = g.constant(prefix.clone());
    let out = m.lm_logits(&mut g, &mut cx, Some(p), tokens).unwrap();
    g.value(out).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn adapter_algebra(s in shapes()) {
        let mut m = model_for(&s);
        let d = m.config.d;
        let prefix = randn(6, d, s.seed ^ 1);
        let tokens: Vec<usize> = (0..5).map(|i| 4 + i % (m.vocab.len() - 4)).collect();
        let base = logits(&m, &prefix, &tokens);
        let before: Vec<String> = m.params.names().cloned().collect();

        let added = m.enable_lora().unwrap();
        // four square attention matrices and the two MLP matrices per block
        let per_block = 4 * s.rank * (d + d) + s.rank * (d + s.hidden) + s.rank * (s.hidden + d);
        prop_assert_eq!(added, s.blocks * per_block);
        let adapter_scalars: usize = m
            .params
            .iter()
            .filter(|(n, _)| n.starts_with("lora."))
            .map(|(_, v)| v.len())
            .sum();
        prop_assert_eq!(adapter_scalars, added);
        prop_assert_eq!(m.params.len(), before.len() + 12 * s.blocks);

        let wrapped = logits(&m, &prefix, &tokens);
        prop_assert_eq!(max_abs(&base, &wrapped), 0.0);

        // move the adapters off zero, then fold them in
        let bs: Vec<String> = m.params.names().filter(|n| n.ends_with(".b")).cloned().collect();
        for (i, n) in bs.iter().enumerate() {
            let (r, c) = m.params.get(n).unwrap().dim();
            *m.params.get_mut(n).unwrap() = randn(r, c, s.seed ^ (100 + i as u64)) * 0.2;
        }
        let adapted = logits(&m, &prefix, &tokens);
        prop_assert!(max_abs(&base, &adapted) > 0.0);
        let snapshot = m.params.clone();
        prop_assert_eq!(m.merge_lora().unwrap(), 6 * s.blocks);
        prop_assert_eq!(&m.params.names().cloned().collect::<Vec<_>>(), &before);
        let merged = logits(&m, &prefix, &tokens);
        prop_assert!(max_abs(&adapted, &merged) <= 1e-9);

        // single precision, per wrapped matrix
        let scale = s.alpha as f32 / s.rank as f32;
        for n in before.iter().filter(|n| snapshot.contains(&lora_a_name(n))) {
            let w = snapshot.get(n).unwrap().mapv(|v| v as f32);
            let a = snapshot.get(&lora_a_name(n)).unwrap().mapv(|v| v as f32);
            let b = snapshot.get(&lora_b_name(n)).unwrap().mapv(|v| v as f32);
            let x = randn(4, w.nrows(), s.seed ^ 7).mapv(|v| v as f32);
            let via_adapter = adapter_forward(&x, &w, &a, &b, scale);
            let via_merge = x.dot(&merged_weight(&w, &a, &b, scale));
            let err = (&via_adapter - &via_merge).iter().fold(0.0f32, |acc, v| acc.max(v.abs()));
            prop_assert!(err <= 1e-5, "{n}: {err:e}");
        }
    }
}

#[test]
fn adapters_only_touch_language_model_matrices() {
    let mut m = Exo2Ego::new(ModelConfig::toy(), 5, 7, vocab()).unwrap();
    m.enable_lora().unwrap();
    for n in m.params.names().filter(|n| n.starts_with("lora.")) {
        let base = n.strip_prefix("lora.").unwrap().rsplit_once('.').unwrap().0;
        assert!(base.starts_with("lm.") && base.ends_with(".weight"), "{n}");
        assert!(m.params.contains(base));
    }
    assert_eq!(m.enable_lora().unwrap(), 0);
}

#[test]
fn parameter_names_fall_into_the_five_groups() {
    for arch in [MappingArch::Residual, MappingArch::FullyConnected] {
        let mut cfg = ModelConfig::toy();
        cfg.mapping.arch = arch;
        let m = Exo2Ego::new(cfg, 5, 7, vocab()).unwrap();
        for n in m.params.names() {
            let group = n.split('.').next().unwrap();
            assert!(["enc_ego", "enc_exo", "map_f", "map_g", "lm"].contains(&group), "{n}");
        }
        let f: Vec<String> = m.params.names().filter(|n| n.starts_with("map_f.")).map(|n| n[6..].to_string()).collect();
        let g: Vec<String> = m.params.names().filter(|n| n.starts_with("map_g.")).map(|n| n[6..].to_string()).collect();
        assert_eq!(f, g);
        assert!(!f.is_empty());
    }
}

#[test]
fn same_seed_same_weights() {
    let a = Exo2Ego::new(ModelConfig::toy(), 5, 7, vocab()).unwrap();
    let b = Exo2Ego::new(ModelConfig::toy(), 5, 7, vocab()).unwrap();
    assert_eq!(a.params, b.params);
    let c = Exo2Ego::new(ModelConfig { seed: 1, ..ModelConfig::toy() }, 5, 7, vocab()).unwrap();
    assert_ne!(a.params.digest_all(), c.params.digest_all());
}

fn clip(view: View, dim: usize, seed: u64) -> FrameSeq {
    FrameSeq {
        frames: randn(CLIP_FRAMES, dim, seed),
        timestamps: (0..CLIP_FRAMES).map(|i| i as f64 / 8.0).collect(),
        fps: 8.0,
        view,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn forward_shapes_hold_for_any_input(
        ego_dim in 1usize..40,
        exo_dim in 1usize..40,
        n_tokens in 0usize..20,
        fc in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mut cfg = ModelConfig::toy();
        if fc {
            cfg.mapping.arch = MappingArch::FullyConnected;
        }
        let d = cfg.d;
        let m = Exo2Ego::new(cfg, ego_dim, exo_dim, vocab()).unwrap();
        let mut g = Graph::new(GradScope::None);
        let mut cx = m.ctx();
        let x = m.encode(&mut g, &mut cx, &clip(View::Ego, ego_dim, seed)).unwrap();
        let y = m.encode(&mut g, &mut cx, &clip(View::Exo, exo_dim, seed ^ 1)).unwrap();
        prop_assert_eq!(g.shape(x), (CLIP_FRAMES, d));
        prop_assert_eq!(g.shape(y), (CLIP_FRAMES, d));
        let fx = m.map_apply(&mut g, &mut cx, Direction::F, x).unwrap();
        let gy = m.map_apply(&mut g, &mut cx, Direction::G, y).unwrap();
        prop_assert_eq!(g.shape(fx), (CLIP_FRAMES, d));
        prop_assert_eq!(g.shape(gy), (CLIP_FRAMES, d));
        let prefix = concat_guidance(&mut g, x, fx).unwrap();
        prop_assert_eq!(g.shape(prefix), (2 * CLIP_FRAMES, d));
        let tokens: Vec<usize> = (0..n_tokens).map(|i| i % m.vocab.len()).collect();
        let l = m.lm_logits(&mut g, &mut cx, Some(prefix), &tokens).unwrap();
        prop_assert_eq!(g.shape(l), (1 + n_tokens, m.vocab.len()));
        prop_assert!(g.value(l).iter().all(|v| v.is_finite()));
    }
}

#[test]
fn mismatched_inputs_are_rejected() {
    let m = Exo2Ego::new(ModelConfig::toy(), 5, 7, vocab()).unwrap();
    let mut g = Graph::new(GradScope::None);
    let mut cx = m.ctx();
    assert!(m.encode(&mut g, &mut cx, &clip(View::Ego, 6, 0)).is_err());
    let short = g.constant(Array2::zeros((3, m.config.d)));
    let long = g.constant(Array2::zeros((4, m.config.d)));
    assert!(concat_guidance(&mut g, short, long).is_err());
    let too_long: Vec<usize> = vec![4; m.config.max_len];
    assert!(m.lm_logits(&mut g, &mut cx, None, &too_long).is_err());
    assert!(m.lm_logits(&mut g, &mut cx, None, &[m.vocab.len()]).is_err());
    let narrow = g.constant(Array2::zeros((2, m.config.d + 1)));
    assert!(m.lm_logits(&mut g, &mut cx, Some(narrow), &[4]).is_err());
}
