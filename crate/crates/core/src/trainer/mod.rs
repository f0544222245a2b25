//! The progressive schedule: initialization, then stages 1 to 3, each with
//! its own trainable/frozen partition, objectives and hyperparameters.

mod checkpoint;
mod optim;
mod plan;
mod pretrain;

pub use checkpoint::{checkpoint_load, checkpoint_save, CheckpointManifest, CHECKPOINT_SCHEMA};
pub use optim::{opt_step, AdamW, OptimizerState, StepStats};
pub use plan::{
    lr_at, paper_hyper, pattern_overlap, stage_plan, Ablation, Hyper, Profile, StageConfig, StageId,
    StageOverrides, ToyScale,
};
pub use pretrain::{pretrain_lm, PretrainConfig};

use std::collections::BTreeSet;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{GradScope, Graph, Mat, Var};
use crate::corpus::{self, InstructionTemplate, TaskType};
use crate::error::{Error, Result};
use crate::losses::{self, LossBreakdown, LossParts};
use crate::models::vocab::EOS;
use crate::models::{concat_guidance, Ctx, Direction, Exo2Ego, ModelConfig, Vocab};
use crate::synthworld::{all_narrations, ClipPair, View, CLIP_FRAMES};

/// Exocentric camera used for training and probing.
pub const TRAIN_CAMERA: usize = 0;

/// A token sequence with next-token targets. `targets[k]` is what logit
/// row `k` predicts; prompt positions are masked out.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

pub fn sequence(vocab: &Vocab, prompt: &str, answer: &str) -> Sequence {
    let p = vocab.encode(prompt);
    let a = vocab.encode(answer);
    let tokens: Vec<usize> = p.iter().chain(&a).copied().collect();
    let targets = tokens.iter().copied().chain(std::iter::once(EOS)).collect();
    let mask = std::iter::repeat_n(false, p.len())
        .chain(std::iter::repeat_n(true, a.len() + 1))
        .collect();
    Sequence { tokens, targets, mask }
}

/// Captioning instructions used in stage 3 and at evaluation.
pub fn caption_instructions(seed: u64) -> Result<Vec<String>> {
    let spec = InstructionTemplate::default_for(TaskType::Captioning, "synthworld");
    Ok(corpus::render_instructions(&spec, seed)?.instructions)
}

/// Vocabulary over every narration sentence and instruction.
pub fn build_vocab(instructions: &[String]) -> Vocab {
    let narrations = all_narrations();
    Vocab::build(narrations.iter().chain(instructions).map(String::as_str))
}

/// Model, optimizer and provenance carried from stage to stage.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Exo2Ego,
    pub opt: OptimizerState,
    pub lineage: Vec<StageId>,
    /// stages run without their prerequisite
    pub skipped: Vec<String>,
    pub global_step: u64,
    pub instructions: Vec<String>,
    pub seed: u64,
    pub config_hash: String,
}

impl TrainState {
    /// Builds a fresh model and pretrains its language model on text.
    pub fn new(model_cfg: ModelConfig, ego_dim: usize, exo_dim: usize, pretrain: &PretrainConfig) -> Result<Self> {
        let seed = model_cfg.seed;
        let instructions = caption_instructions(seed)?;
        let vocab = build_vocab(&instructions);
        let mut model = Exo2Ego::new(model_cfg, ego_dim, exo_dim, vocab)?;
        pretrain_lm(&mut model, &instructions, pretrain)?;
        Ok(Self {
            model,
            opt: OptimizerState::new(AdamW::default()),
            lineage: Vec::new(),
            skipped: Vec::new(),
            global_step: 0,
            instructions,
            seed,
            config_hash: String::new(),
        })
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: StageId,
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub vtg: f64,
    pub ccl_forward: f64,
    pub ccl_backward: f64,
    pub kl: f64,
    pub total: f64,
    pub w_vtg: f64,
    pub w_ccl: f64,
    pub w_ccl_backward: f64,
    pub w_kl: f64,
    pub grad_norm: f64,
}

/// Held-out alignment between `F(x)` and real exocentric features.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentProbe {
    pub pairs: usize,
    pub cycle_forward: f64,
    pub cycle_backward: f64,
    pub kl: f64,
    /// nearest `y` (L1) to each `F(x)` is its own pair
    pub retrieval_top1: f64,
}

impl AlignmentProbe {
    pub fn cycle(&self) -> f64 {
        self.cycle_forward + self.cycle_backward
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage_id: StageId,
    pub ablation: Option<Ablation>,
    pub steps: usize,
    pub records: Vec<StepRecord>,
    pub wall_time_s: f64,
    pub probe_before: Option<AlignmentProbe>,
    pub final_eval: Option<AlignmentProbe>,
    pub frozen_digest_before: String,
    pub frozen_digest_after: String,
    pub trainable_params: usize,
    pub frozen_params: usize,
    pub lineage: Vec<StageId>,
    pub config: StageConfig,
}

impl TrainReport {
    /// Mean total loss over the first and last 10% of steps.
    pub fn leading_trailing(&self) -> (f64, f64) {
        decile_means(&self.records.iter().map(|r| r.total).collect::<Vec<_>>())
    }
}

pub fn decile_means(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let k = (xs.len() / 10).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (mean(&xs[..k]), mean(&xs[xs.len() - k..]))
}

/// Optional side channels of [`run_stage`].
#[derive(Default)]
pub struct RunOptions<'a> {
    /// newline-delimited JSON step log
    pub log: Option<&'a mut dyn Write>,
    /// pairs used for the before/after alignment probe
    pub heldout: Option<&'a [ClipPair]>,
}

fn stack_frames(batch: &[&ClipPair], view: View) -> Mat {
    fn pick(p: &ClipPair, view: View) -> &Mat {
        match view {
            View::Ego => &p.ego.frames,
            View::Exo => &p.exo[TRAIN_CAMERA].frames,
        }
    }
    let dim = pick(batch[0], view).ncols();
    let mut out = Mat::zeros((batch.len() * CLIP_FRAMES, dim));
    for (i, p) in batch.iter().enumerate() {
        out.slice_mut(ndarray::s![i * CLIP_FRAMES..(i + 1) * CLIP_FRAMES, ..])
            .assign(pick(p, view));
    }
    out
}

fn check_pair(model: &Exo2Ego, p: &ClipPair) -> Result<()> {
    let bad = |m: String| Err(Error::Shape(format!("clip {}: {m}", p.id)));
    if p.ego.frames.dim() != (CLIP_FRAMES, model.ego_dim) {
        return bad(format!("ego frames {:?}", p.ego.frames.dim()));
    }
    match p.exo.get(TRAIN_CAMERA) {
        Some(x) if x.frames.dim() == (CLIP_FRAMES, model.exo_dim) => Ok(()),
        Some(x) => bad(format!("exo frames {:?}", x.frames.dim())),
        None => bad("no exocentric view".into()),
    }
}

/// Encodes a batch of clips stacked as `(B·16, d)`.
pub fn encode_batch(model: &Exo2Ego, g: &mut Graph, cx: &mut Ctx, batch: &[&ClipPair], view: View) -> Result<Var> {
    let x = g.constant(stack_frames(batch, view));
    model.encoder(view).forward(g, cx, x)
}

fn rows_of(g: &mut Graph, stacked: Var, i: usize) -> Var {
    g.slice_rows(stacked, i * CLIP_FRAMES, (i + 1) * CLIP_FRAMES)
}

/// Mean VTG over samples, each with its own prefix.
fn vtg_over(model: &Exo2Ego, g: &mut Graph, cx: &mut Ctx, prefixes: &[Var], seqs: &[&Sequence]) -> Result<Var> {
    let mut per = Vec::with_capacity(prefixes.len());
    for (&p, s) in prefixes.iter().zip(seqs) {
        let logits = model.lm_logits(g, cx, Some(p), &s.tokens)?;
        per.push(losses::vtg_loss(g, logits, &s.targets, &s.mask)?);
    }
    g.mean_of(&per)
}

/// Builds the stage objective for one batch.
fn batch_objective(
    model: &Exo2Ego,
    g: &mut Graph,
    cx: &mut Ctx,
    cfg: &StageConfig,
    batch: &[&ClipPair],
    seqs: &[Sequence],
) -> Result<(Var, LossParts)> {
    let spec = &cfg.losses;
    let seq_refs: Vec<&Sequence> = seqs.iter().collect();
    let n = batch.len();
    let mut parts = LossParts::default();
    let (mut vtg, mut ccl, mut kl) = (None, None, None);
    match cfg.stage_id {
        StageId::Init | StageId::S1 => {
            let mut prefixes = Vec::new();
            let mut all_seqs = Vec::new();
            let views: &[View] = if cfg.stage_id == StageId::Init {
                &[View::Ego, View::Exo]
            } else {
                &[View::Exo]
            };
            for &view in views {
                let feats = encode_batch(model, g, cx, batch, view)?;
                for i in 0..n {
                    prefixes.push(rows_of(g, feats, i));
                    all_seqs.push(seq_refs[i]);
                }
            }
            if spec.vtg.is_some() {
                vtg = Some(vtg_over(model, g, cx, &prefixes, &all_seqs)?);
            }
        }
        StageId::S2 | StageId::S3 => {
            let x = encode_batch(model, g, cx, batch, View::Ego)?;
            let fx = model.map_apply(g, cx, Direction::F, x)?;
            if spec.vtg.is_some() {
                let mut prefixes = Vec::with_capacity(n);
                for i in 0..n {
                    let xi = rows_of(g, x, i);
                    let fi = rows_of(g, fx, i);
                    prefixes.push(concat_guidance(g, xi, fi)?);
                }
                vtg = Some(vtg_over(model, g, cx, &prefixes, &seq_refs)?);
            }
            if spec.ccl.is_some() || spec.kl.is_some() {
                let y = encode_batch(model, g, cx, batch, View::Exo)?;
                if spec.ccl.is_some() {
                    let (mf, mg) = (&model.map_f, &model.map_g);
                    let cxc = &mut *cx;
                    let cell = std::cell::RefCell::new(cxc);
                    let mut f = |g: &mut Graph, v: Var| mf.forward(g, &mut cell.borrow_mut(), v);
                    let mut gm = |g: &mut Graph, v: Var| mg.forward(g, &mut cell.borrow_mut(), v);
                    ccl = Some(losses::ccl(g, &mut f, &mut gm, &[x], &[y], spec.forward_only_ccl)?);
                }
                if spec.kl.is_some() {
                    kl = Some(losses::kl_align(g, y, fx, spec.kl_temperature)?);
                }
            }
        }
    }
    parts.vtg = vtg.map(|v| g.scalar(v));
    if let Some((f, b)) = ccl {
        parts.ccl_forward = Some(g.scalar(f));
        parts.ccl_backward = Some(g.scalar(b));
    }
    parts.kl = kl.map(|v| g.scalar(v));
    let total = losses::combine(g, spec, vtg, ccl, kl)?;
    Ok((total, parts))
}

/// Resolves the freeze patterns against the model's parameter names.
pub fn partition(model: &Exo2Ego, cfg: &StageConfig) -> Result<(BTreeSet<String>, BTreeSet<String>)> {
    let trainable = model.params.matching(&cfg.trainable);
    let frozen = model.params.matching(&cfg.frozen);
    let overlap: Vec<String> = trainable.intersection(&frozen).cloned().collect();
    if !overlap.is_empty() {
        return Err(Error::FreezeOverlap(overlap));
    }
    let uncovered: Vec<String> = model
        .params
        .names()
        .filter(|n| !trainable.contains(*n) && !frozen.contains(*n))
        .cloned()
        .collect();
    if !uncovered.is_empty() {
        return Err(Error::FreezeUncovered(uncovered));
    }
    Ok((trainable, frozen))
}

fn check_lineage(state: &mut TrainState, cfg: &StageConfig) -> Result<()> {
    let Some(pre) = cfg.stage_id.prerequisite() else {
        return Ok(());
    };
    if state.lineage.contains(&pre) {
        return Ok(());
    }
    if cfg.allow_skip {
        state.skipped.push(format!("{} without {}", cfg.stage_id, pre));
        return Ok(());
    }
    Err(Error::Lineage {
        stage: cfg.stage_id.to_string(),
        missing: pre.to_string(),
    })
}

/// Brings the model into the shape the stage expects (adapters, mapping
/// architecture).
fn prepare_model(state: &mut TrainState, cfg: &StageConfig) -> Result<()> {
    if let Some(arch) = cfg.mapping_arch {
        if arch != state.model.config.mapping.arch {
            if cfg.stage_id == StageId::S3 {
                return Err(Error::InfeasibleConfig(format!(
                    "stage s3 cannot switch the trained mapping networks to {arch:?}"
                )));
            }
            state.model.set_mapping_arch(arch);
        }
    }
    if cfg.lora {
        state.model.enable_lora()?;
    }
    Ok(())
}

/// Runs one stage in place. On divergence the model is restored to its
/// state at stage start and an error is returned.
pub fn run_stage(state: &mut TrainState, cfg: &StageConfig, pairs: &[ClipPair], opts: RunOptions) -> Result<TrainReport> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyInput("training pairs"));
    }
    for p in pairs {
        check_pair(&state.model, p)?;
    }
    let RunOptions { mut log, heldout } = opts;
    check_lineage(state, cfg)?;
    prepare_model(state, cfg)?;
    let (trainable, frozen) = partition(&state.model, cfg)?;
    let frozen_before = state.model.params.digest(&frozen);
    let snapshot = state.model.params.clone();
    state.opt.hyper.max_grad_norm = Some(cfg.grad_clip);
    state.opt.reset(&state.model.params, &trainable)?;

    let probe_before = match heldout {
        Some(h) if cfg.stage_id == StageId::S2 => Some(alignment_probe(&state.model, h)?),
        _ => None,
    };

    let start = Instant::now();
    let steps_per_epoch = pairs.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let scope = GradScope::Only(trainable.clone());
    let mut records = Vec::with_capacity(total_steps);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9));
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&ClipPair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let seqs: Vec<Sequence> = batch
                .iter()
                .map(|p| {
                    let prompt = if cfg.stage_id == StageId::S3 && !state.instructions.is_empty() {
                        state.instructions[rng.random_range(0..state.instructions.len())].as_str()
                    } else {
                        ""
                    };
                    sequence(&state.model.vocab, prompt, &p.text)
                })
                .collect();

            let mut g = Graph::new(scope.clone());
            let mut cx = state.model.train_ctx(cfg.seed ^ (step as u64) << 1);
            let (total, parts) = batch_objective(&state.model, &mut g, &mut cx, cfg, &batch, &seqs)?;
            let value = g.scalar(total);
            if !value.is_finite() {
                state.model.params = snapshot;
                return Err(Error::Diverged { step });
            }
            let breakdown: LossBreakdown = losses::total_stage_loss(&cfg.losses, &parts)?;
            let grads = g.backward(total).into_param_grads();
            drop(cx);
            drop(g);
            let lr = lr_at(step + 1, total_steps, cfg);
            let stats = match opt_step(&mut state.model.params, &grads, &mut state.opt, lr) {
                Ok(s) => s,
                Err(e) => {
                    state.model.params = snapshot;
                    return Err(e);
                }
            };
            let rec = StepRecord {
                stage: cfg.stage_id,
                step,
                epoch,
                lr,
                vtg: breakdown.vtg,
                ccl_forward: breakdown.ccl_forward,
                ccl_backward: breakdown.ccl_backward,
                kl: breakdown.kl,
                total: value,
                w_vtg: breakdown.weights.0,
                w_ccl: breakdown.weights.1,
                w_ccl_backward: cfg.losses.ccl_backward_weight(),
                w_kl: breakdown.weights.2,
                grad_norm: stats.grad_norm,
            };
            if let Some(w) = log.as_deref_mut() {
                serde_json::to_writer(&mut *w, &rec)?;
                w.write_all(b"\n")?;
            }
            records.push(rec);
            step += 1;
        }
    }
    state.global_step += step as u64;

    let frozen_after = state.model.params.digest(&frozen);
    if frozen_after != frozen_before {
        return Err(Error::FreezeViolated(cfg.stage_id.to_string()));
    }
    state.lineage.push(cfg.stage_id);
    let final_eval = match heldout {
        Some(h) if matches!(cfg.stage_id, StageId::S2 | StageId::S3) => Some(alignment_probe(&state.model, h)?),
        _ => None,
    };
    let count = |set: &BTreeSet<String>| set.iter().map(|n| state.model.params.get(n).map_or(0, Mat::len)).sum();
    Ok(TrainReport {
        stage_id: cfg.stage_id,
        ablation: cfg.ablation,
        steps: step,
        records,
        wall_time_s: start.elapsed().as_secs_f64(),
        probe_before,
        final_eval,
        frozen_digest_before: frozen_before,
        frozen_digest_after: frozen_after,
        trainable_params: count(&trainable),
        frozen_params: count(&frozen),
        lineage: state.lineage.clone(),
        config: cfg.clone(),
    })
}

/// Cycle error, KL and `F(x) → y` retrieval over held-out pairs.
pub fn alignment_probe(model: &Exo2Ego, pairs: &[ClipPair]) -> Result<AlignmentProbe> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("probe pairs"));
    }
    let batch: Vec<&ClipPair> = pairs.iter().collect();
    let mut g = Graph::new(GradScope::None);
    let mut cx = model.ctx();
    let x = encode_batch(model, &mut g, &mut cx, &batch, View::Ego)?;
    let y = encode_batch(model, &mut g, &mut cx, &batch, View::Exo)?;
    let fx = model.map_apply(&mut g, &mut cx, Direction::F, x)?;
    let gfx = model.map_apply(&mut g, &mut cx, Direction::G, fx)?;
    let gy = model.map_apply(&mut g, &mut cx, Direction::G, y)?;
    let fgy = model.map_apply(&mut g, &mut cx, Direction::F, gy)?;
    let kl = losses::kl_align(&mut g, y, fx, 1.0)?;
    let mae = |a: &Mat, b: &Mat| (a - b).mapv(f64::abs).mean().unwrap_or(0.0);
    let (xv, yv, fxv) = (g.value(x), g.value(y), g.value(fx));
    let n = pairs.len();
    let mut hits = 0;
    for i in 0..n {
        let fi = fxv.slice(ndarray::s![i * CLIP_FRAMES..(i + 1) * CLIP_FRAMES, ..]);
        let best = (0..n)
            .map(|j| {
                let yj = yv.slice(ndarray::s![j * CLIP_FRAMES..(j + 1) * CLIP_FRAMES, ..]);
                let d: f64 = (&fi - &yj).iter().map(|v| v.abs()).sum();
                (j, d)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .map(|(j, _)| j);
        if best == Some(i) {
            hits += 1;
        }
    }
    Ok(AlignmentProbe {
        pairs: n,
        cycle_forward: mae(g.value(gfx), xv),
        cycle_backward: mae(g.value(fgy), yv),
        kl: g.scalar(kl),
        retrieval_top1: hits as f64 / n as f64,
    })
}
