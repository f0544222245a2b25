use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossSpec;
use crate::models::{glob_match, MappingArch};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageId {
    Init,
    S1,
    S2,
    S3,
}

impl StageId {
    pub const ALL: [StageId; 4] = [StageId::Init, StageId::S1, StageId::S2, StageId::S3];

    pub fn as_str(self) -> &'static str {
        match self {
            StageId::Init => "init",
            StageId::S1 => "s1",
            StageId::S2 => "s2",
            StageId::S3 => "s3",
        }
    }

    /// Stage that must already be in the lineage.
    pub fn prerequisite(self) -> Option<StageId> {
        match self {
            StageId::Init => None,
            StageId::S1 => Some(StageId::Init),
            StageId::S2 => Some(StageId::S1),
            StageId::S3 => Some(StageId::S2),
        }
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StageId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "stage",
                value: s.to_string(),
            })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    PaperDefault,
    #[default]
    Toy,
}

impl Profile {
    pub fn as_str(self) -> &'static str {
        match self {
            Profile::PaperDefault => "paper-default",
            Profile::Toy => "toy",
        }
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-default" => Ok(Profile::PaperDefault),
            "toy" => Ok(Profile::Toy),
            _ => Err(Error::Unknown {
                kind: "profile",
                value: s.to_string(),
            }),
        }
    }
}

/// Loss and freeze ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// only the `G(F(x)) ≈ x` cycle
    FwdOnlyCcl,
    NoCcl,
    NoKl,
    /// two-layer fully connected mapping networks
    FcMapping,
    /// exocentric encoder also tuned in stage 2
    ExoTrainable,
    /// egocentric encoder kept frozen in stage 3
    FrozenEncoderS3,
    /// stage 2 without the text-generation term
    NoVtgS2,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::FwdOnlyCcl,
        Ablation::NoCcl,
        Ablation::NoKl,
        Ablation::FcMapping,
        Ablation::ExoTrainable,
        Ablation::FrozenEncoderS3,
        Ablation::NoVtgS2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::FwdOnlyCcl => "fwd-only-ccl",
            Ablation::NoCcl => "no-ccl",
            Ablation::NoKl => "no-kl",
            Ablation::FcMapping => "fc-mapping",
            Ablation::ExoTrainable => "exo-trainable",
            Ablation::FrozenEncoderS3 => "frozen-encoder-s3",
            Ablation::NoVtgS2 => "no-vtg-s2",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "ablation",
                value: s.to_string(),
            })
    }
}

/// Optimization hyperparameters of one stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub lr: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

/// Learning rate, warmup ratio, epochs and global batch of each stage.
/// Stages 1 and 2 share a column.
pub fn paper_hyper(stage: StageId) -> Hyper {
    match stage {
        StageId::Init => Hyper {
            lr: 1e-3,
            warmup_ratio: 0.1,
            epochs: 5,
            batch_size: 512,
        },
        StageId::S1 | StageId::S2 => Hyper {
            lr: 1e-4,
            warmup_ratio: 0.03,
            epochs: 2,
            batch_size: 256,
        },
        StageId::S3 => Hyper {
            lr: 2e-5,
            warmup_ratio: 0.03,
            epochs: 1,
            batch_size: 64,
        },
    }
}

/// Scaling applied by the toy profile. Batch sizes shrink by one common
/// divisor; learning rates and epochs grow so that a few hundred steps on a
/// tiny model still converge.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyScale {
    pub batch_divisor: usize,
    pub lr_multiplier: f64,
    pub epoch_multiplier: usize,
}

impl Default for ToyScale {
    fn default() -> Self {
        Self {
            batch_divisor: 32,
            lr_multiplier: 10.0,
            epoch_multiplier: 2,
        }
    }
}

impl ToyScale {
    pub fn apply(&self, h: Hyper) -> Hyper {
        Hyper {
            lr: h.lr * self.lr_multiplier,
            warmup_ratio: h.warmup_ratio,
            epochs: h.epochs * self.epoch_multiplier.max(1),
            batch_size: (h.batch_size / self.batch_divisor.max(1)).max(1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage_id: StageId,
    pub profile: Profile,
    pub trainable: Vec<String>,
    pub frozen: Vec<String>,
    pub losses: LossSpec,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// reference schedule before any profile scaling
    pub paper: Hyper,
    /// attach LoRA adapters before the stage
    pub lora: bool,
    pub ablation: Option<Ablation>,
    /// mapping architecture the stage requires; `None` keeps the model's
    pub mapping_arch: Option<MappingArch>,
    pub grad_clip: f64,
    /// run even if the prerequisite stage is missing (recorded)
    pub allow_skip: bool,
    pub dataset_ref: String,
    pub seed: u64,
}

/// Per-run changes on top of a stage plan.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageOverrides {
    pub lr: Option<f64>,
    pub warmup_ratio: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub toy_scale: Option<ToyScale>,
    pub extra_trainable: Vec<String>,
    pub extra_frozen: Vec<String>,
    pub loss_weights: Option<(f64, f64, f64)>,
    pub kl_temperature: Option<f64>,
    pub grad_clip: Option<f64>,
    pub allow_skip: bool,
    pub dataset_ref: Option<String>,
}

fn pats(p: &[&str]) -> Vec<String> {
    p.iter().map(|s| s.to_string()).collect()
}

fn freeze_sets(stage: StageId) -> (Vec<String>, Vec<String>) {
    match stage {
        StageId::Init => (
            pats(&["enc_ego.*", "enc_exo.*"]),
            pats(&["lm.*", "map_f.*", "map_g.*", "lora.*"]),
        ),
        StageId::S1 => (
            pats(&["enc_exo.*"]),
            pats(&["enc_ego.*", "lm.*", "map_f.*", "map_g.*", "lora.*"]),
        ),
        StageId::S2 => (
            pats(&["enc_ego.*", "map_f.*", "map_g.*"]),
            pats(&["enc_exo.*", "lm.*", "lora.*"]),
        ),
        StageId::S3 => (
            pats(&["lora.*", "enc_ego.*", "map_f.*"]),
            pats(&["lm.*", "enc_exo.*", "map_g.*"]),
        ),
    }
}

fn move_pattern(from: &mut Vec<String>, to: &mut Vec<String>, pattern: &str) {
    from.retain(|p| p != pattern);
    if !to.iter().any(|p| p == pattern) {
        to.push(pattern.to_string());
    }
}

/// Pattern pairs that can select a common parameter name.
pub fn pattern_overlap(trainable: &[String], frozen: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    for t in trainable {
        for f in frozen {
            if glob_match(t, f) || glob_match(f, t) {
                out.push(format!("{t} / {f}"));
            }
        }
    }
    out
}

/// Default plan for a stage, with profile scaling, ablation preset and
/// overrides applied in that order.
pub fn stage_plan(
    stage: StageId,
    profile: Profile,
    ablation: Option<Ablation>,
    overrides: &StageOverrides,
) -> Result<StageConfig> {
    let paper = paper_hyper(stage);
    let hyper = match profile {
        Profile::PaperDefault => paper,
        Profile::Toy => overrides.toy_scale.unwrap_or_default().apply(paper),
    };
    let (mut trainable, mut frozen) = freeze_sets(stage);
    let mut losses = match stage {
        StageId::S2 => LossSpec::all(),
        _ => LossSpec::vtg_only(),
    };
    let mut mapping_arch = None;

    match (ablation, stage) {
        (Some(Ablation::FwdOnlyCcl), StageId::S2) => losses.forward_only_ccl = true,
        (Some(Ablation::NoCcl), StageId::S2) => losses.ccl = None,
        (Some(Ablation::NoKl), StageId::S2) => losses.kl = None,
        (Some(Ablation::NoVtgS2), StageId::S2) => losses.vtg = None,
        (Some(Ablation::ExoTrainable), StageId::S2) => move_pattern(&mut frozen, &mut trainable, "enc_exo.*"),
        (Some(Ablation::FrozenEncoderS3), StageId::S3) => {
            move_pattern(&mut trainable, &mut frozen, "enc_ego.*")
        }
        (Some(Ablation::FcMapping), _) => mapping_arch = Some(MappingArch::FullyConnected),
        _ => {}
    }

    for p in &overrides.extra_trainable {
        move_pattern(&mut frozen, &mut trainable, p);
    }
    for p in &overrides.extra_frozen {
        if trainable.contains(p) {
            return Err(Error::FreezeOverlap(vec![p.clone()]));
        }
        if !frozen.contains(p) {
            frozen.push(p.clone());
        }
    }
    let overlap = pattern_overlap(&trainable, &frozen);
    if !overlap.is_empty() {
        return Err(Error::FreezeOverlap(overlap));
    }

    if let Some((v, c, k)) = overrides.loss_weights {
        losses.vtg = losses.vtg.map(|_| v);
        losses.ccl = losses.ccl.map(|_| c);
        losses.kl = losses.kl.map(|_| k);
    }
    if let Some(t) = overrides.kl_temperature {
        losses.kl_temperature = t;
    }

    let cfg = StageConfig {
        stage_id: stage,
        profile,
        trainable,
        frozen,
        losses,
        lr: overrides.lr.unwrap_or(hyper.lr),
        warmup_ratio: overrides.warmup_ratio.unwrap_or(hyper.warmup_ratio),
        epochs: overrides.epochs.unwrap_or(hyper.epochs),
        batch_size: overrides.batch_size.unwrap_or(hyper.batch_size),
        paper,
        lora: stage == StageId::S3,
        ablation,
        mapping_arch,
        grad_clip: overrides.grad_clip.unwrap_or(1.0),
        allow_skip: overrides.allow_skip,
        dataset_ref: overrides.dataset_ref.clone().unwrap_or_default(),
        seed: overrides.seed.unwrap_or(0),
    };
    cfg.validate()?;
    Ok(cfg)
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InfeasibleConfig(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad(format!("warmup ratio must be in [0, 1), got {}", self.warmup_ratio));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive".into());
        }
        if !(self.grad_clip > 0.0) {
            return bad(format!("gradient clip must be positive, got {}", self.grad_clip));
        }
        Ok(())
    }
}

/// Linear warmup to `cfg.lr`, then cosine decay to zero at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &StageConfig) -> f64 {
    schedule(step, total_steps, cfg.lr, cfg.warmup_ratio)
}

pub(crate) fn schedule(step: usize, total_steps: usize, lr: f64, warmup_ratio: f64) -> f64 {
    let total = total_steps.max(1) as f64;
    let step = (step as f64).min(total);
    let warmup = warmup_ratio * total;
    if step < warmup {
        return lr * step / warmup;
    }
    if total <= warmup {
        return lr;
    }
    let progress = (step - warmup) / (total - warmup);
    (lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())).max(0.0)
}
