use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Ctx, Linear};
use super::params::ParamStore;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// ego → exo
    F,
    /// exo → ego
    G,
}

impl Direction {
    pub fn prefix(self) -> &'static str {
        match self {
            Direction::F => "map_f",
            Direction::G => "map_g",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MappingArch {
    /// down-projection, residual blocks, up-projection
    #[default]
    Residual,
    /// plain two-layer fully connected net (architecture ablation)
    FullyConnected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MappingConfig {
    pub arch: MappingArch,
    /// bottleneck width; `None` means `d / 2`
    pub width: Option<usize>,
    pub n_blocks: usize,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self {
            arch: MappingArch::Residual,
            width: None,
            n_blocks: 9,
        }
    }
}

#[derive(Clone, Debug)]
enum Body {
    Residual {
        down: Linear,
        blocks: Vec<(Linear, Linear)>,
        up: Linear,
    },
    FullyConnected {
        fc1: Linear,
        fc2: Linear,
    },
}

/// Shape-preserving `(T, d) → (T, d)` map between the two feature spaces.
#[derive(Clone, Debug)]
pub struct MappingNet {
    pub direction: Direction,
    pub d: usize,
    body: Body,
}

impl MappingNet {
    pub fn new(direction: Direction, d: usize, cfg: &MappingConfig) -> Self {
        let p = direction.prefix();
        let body = match cfg.arch {
            MappingArch::Residual => {
                let w = cfg.width.unwrap_or(d / 2).max(1);
                Body::Residual {
                    down: Linear::new(format!("{p}.down"), d, w, true),
                    blocks: (0..cfg.n_blocks)
                        .map(|i| {
                            (
                                Linear::new(format!("{p}.block{i}.fc1"), w, w, true),
                                Linear::new(format!("{p}.block{i}.fc2"), w, w, true),
                            )
                        })
                        .collect(),
                    up: Linear::new(format!("{p}.up"), w, d, true),
                }
            }
            MappingArch::FullyConnected => Body::FullyConnected {
                fc1: Linear::new(format!("{p}.fc1"), d, d, true),
                fc2: Linear::new(format!("{p}.fc2"), d, d, true),
            },
        };
        Self { direction, d, body }
    }

    pub fn residual_blocks(&self) -> usize {
        match &self.body {
            Body::Residual { blocks, .. } => blocks.len(),
            Body::FullyConnected { .. } => 0,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        match &self.body {
            Body::Residual { down, blocks, up } => {
                down.init(store, rng, 1.0);
                for (fc1, fc2) in blocks {
                    fc1.init(store, rng, 1.0);
                    // near-identity residual stack at initialization
                    fc2.init(store, rng, 0.1);
                }
                up.init(store, rng, 1.0);
            }
            Body::FullyConnected { fc1, fc2 } => {
                fc1.init(store, rng, 1.0);
                fc2.init(store, rng, 1.0);
            }
        }
    }

    /// Names of the residual-block parameters.
    pub fn block_param_names(&self) -> Vec<String> {
        match &self.body {
            Body::Residual { blocks, .. } => blocks
                .iter()
                .flat_map(|(a, b)| [a.weight_name(), a.bias_name(), b.weight_name(), b.bias_name()])
                .collect(),
            Body::FullyConnected { .. } => Vec::new(),
        }
    }

    pub fn forward(&self, g: &mut Graph, cx: &mut Ctx, x: Var) -> Result<Var> {
        let (_, d) = g.shape(x);
        if d != self.d {
            return Err(Error::Shape(format!(
                "{} expects feature width {}, got {d}",
                self.direction.prefix(),
                self.d
            )));
        }
        match &self.body {
            Body::Residual { down, blocks, up } => {
                let mut h = down.forward(g, cx, x)?;
                for (fc1, fc2) in blocks {
                    let a = fc1.forward(g, cx, h)?;
                    let a = g.gelu(a);
                    let b = fc2.forward(g, cx, a)?;
                    h = g.add(h, b);
                }
                up.forward(g, cx, h)
            }
            Body::FullyConnected { fc1, fc2 } => {
                let a = fc1.forward(g, cx, x)?;
                let a = g.gelu(a);
                fc2.forward(g, cx, a)
            }
        }
    }
}
