//! Parameterized components: the two visual encoders, the `F`/`G` mapping
//! networks, the tiny language model and its low-rank adapters.
//!
//! Every parameter lives in one [`ParamStore`] under a stable dotted name
//! (`enc_ego.*`, `enc_exo.*`, `map_f.*`, `map_g.*`, `lm.*`, `lora.*`), which
//! is what the trainer's freeze sets are written against.

mod encoder;
mod layers;
mod lm;
pub mod lora;
mod mapping;
mod params;
pub mod vocab;

pub use encoder::{EncoderConfig, VisualEncoder};
pub use layers::{Ctx, Linear, RmsNorm};
pub use lm::{LmConfig, TinyLm, POS_EMB, TOK_EMB};
pub use lora::{lora_merge, lora_wrap, LoraConfig};
pub use mapping::{Direction, MappingArch, MappingConfig, MappingNet};
pub use params::{glob_match, ParamStore};
pub use vocab::Vocab;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::synthworld::{FrameSeq, View, CLIP_FRAMES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub enc_blocks: usize,
    pub enc_hidden: usize,
    pub mapping: MappingConfig,
    pub lm_blocks: usize,
    pub lm_heads: usize,
    pub lm_mlp_hidden: usize,
    pub max_len: usize,
    pub lora: LoraConfig,
    pub seed: u64,
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self {
            d: 32,
            enc_blocks: 2,
            enc_hidden: 64,
            mapping: MappingConfig::default(),
            lm_blocks: 2,
            lm_heads: 2,
            lm_mlp_hidden: 64,
            max_len: 64,
            lora: LoraConfig::toy(),
            seed: 0,
        }
    }

    pub fn paper_default() -> Self {
        Self {
            d: 64,
            enc_hidden: 128,
            lm_mlp_hidden: 128,
            lm_heads: 4,
            lora: LoraConfig::paper(),
            ..Self::toy()
        }
    }

    fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            d: self.d,
            n_blocks: self.enc_blocks,
            hidden: self.enc_hidden,
        }
    }

    fn lm(&self) -> LmConfig {
        LmConfig {
            d: self.d,
            n_blocks: self.lm_blocks,
            n_heads: self.lm_heads,
            mlp_hidden: self.lm_mlp_hidden,
            max_len: self.max_len,
        }
    }
}

/// The full two-branch model.
#[derive(Clone, Debug)]
pub struct Exo2Ego {
    pub config: ModelConfig,
    pub ego_dim: usize,
    pub exo_dim: usize,
    pub vocab: Vocab,
    pub enc_ego: VisualEncoder,
    pub enc_exo: VisualEncoder,
    pub map_f: MappingNet,
    pub map_g: MappingNet,
    pub lm: TinyLm,
    pub params: ParamStore,
    pub lora_active: bool,
}

impl Exo2Ego {
    pub fn new(config: ModelConfig, ego_dim: usize, exo_dim: usize, vocab: Vocab) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let enc_ego = VisualEncoder::new(View::Ego, ego_dim, &config.encoder());
        let enc_exo = VisualEncoder::new(View::Exo, exo_dim, &config.encoder());
        let map_f = MappingNet::new(Direction::F, config.d, &config.mapping);
        let map_g = MappingNet::new(Direction::G, config.d, &config.mapping);
        let lm = TinyLm::new(config.lm(), vocab.len())?;
        let mut params = ParamStore::new();
        enc_ego.init(&mut params, &mut rng);
        enc_exo.init(&mut params, &mut rng);
        map_f.init(&mut params, &mut rng);
        map_g.init(&mut params, &mut rng);
        lm.init(&mut params, &mut rng);
        Ok(Self {
            config,
            ego_dim,
            exo_dim,
            vocab,
            enc_ego,
            enc_exo,
            map_f,
            map_g,
            lm,
            params,
            lora_active: false,
        })
    }

    fn lora(&self) -> Option<&LoraConfig> {
        self.lora_active.then_some(&self.config.lora)
    }

    /// Deterministic forward context (no dropout).
    pub fn ctx(&self) -> Ctx<'_> {
        Ctx::eval(&self.params, self.lora())
    }

    /// Training context; dropout on adapters is seeded.
    pub fn train_ctx(&self, seed: u64) -> Ctx<'_> {
        Ctx {
            store: &self.params,
            lora: self.lora(),
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn encoder(&self, view: View) -> &VisualEncoder {
        match view {
            View::Ego => &self.enc_ego,
            View::Exo => &self.enc_exo,
        }
    }

    pub fn mapping(&self, dir: Direction) -> &MappingNet {
        match dir {
            Direction::F => &self.map_f,
            Direction::G => &self.map_g,
        }
    }

    /// Encodes frames with the encoder matching their view.
    pub fn encode(&self, g: &mut Graph, cx: &mut Ctx, frames: &FrameSeq) -> Result<Var> {
        self.encoder(frames.view).encode(g, cx, frames)
    }

    pub fn map_apply(&self, g: &mut Graph, cx: &mut Ctx, dir: Direction, x: Var) -> Result<Var> {
        self.mapping(dir).forward(g, cx, x)
    }

    pub fn lm_logits(&self, g: &mut Graph, cx: &mut Ctx, prefix: Option<Var>, tokens: &[usize]) -> Result<Var> {
        self.lm.logits(g, cx, prefix, tokens)
    }

    /// Attaches adapters (idempotent). Returns the number of added scalars.
    pub fn enable_lora(&mut self) -> Result<usize> {
        if self.lora_active {
            return Ok(0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x10_4a);
        let added = lora_wrap(&mut self.params, &self.config.lora, &mut rng)?;
        self.lora_active = true;
        Ok(added)
    }

    /// Replaces both mapping networks with freshly initialized ones of the
    /// given architecture. Only meaningful before the mappings are trained.
    pub fn set_mapping_arch(&mut self, arch: MappingArch) {
        if self.config.mapping.arch == arch {
            return;
        }
        for net in [&self.map_f, &self.map_g] {
            let prefix = format!("{}.", net.direction.prefix());
            let stale: Vec<String> = self.params.names().filter(|n| n.starts_with(&prefix)).cloned().collect();
            for n in stale {
                self.params.remove(&n);
            }
        }
        self.config.mapping.arch = arch;
        let d = self.config.d;
        self.map_f = MappingNet::new(Direction::F, d, &self.config.mapping);
        self.map_g = MappingNet::new(Direction::G, d, &self.config.mapping);
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x3a99);
        self.map_f.init(&mut self.params, &mut rng);
        self.map_g.init(&mut self.params, &mut rng);
    }

    pub fn merge_lora(&mut self) -> Result<usize> {
        let n = lora_merge(&mut self.params, &self.config.lora)?;
        self.lora_active = false;
        Ok(n)
    }
}

/// Demonstrator guidance followed by the learner's own features:
/// `[mapped; ego]`, shape `(2T, d)`.
pub fn concat_guidance(g: &mut Graph, ego: Var, mapped: Var) -> Result<Var> {
    let (te, de) = g.shape(ego);
    let (tm, dm) = g.shape(mapped);
    if de != dm || te != tm {
        return Err(Error::Shape(format!(
            "guidance ({tm}, {dm}) and ego features ({te}, {de}) differ"
        )));
    }
    g.concat_rows(&[mapped, ego])
}

/// Expected feature shape for one clip.
pub fn feature_shape(cfg: &ModelConfig) -> (usize, usize) {
    (CLIP_FRAMES, cfg.d)
}
