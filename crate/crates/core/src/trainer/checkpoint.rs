//! Checkpoint directory layout:
//!
//! ```text
//! manifest.json
//! params/<name>.bin     one array file per parameter, 64-bit
//! opt/<name>.m.bin      first moments of the trainable parameters
//! opt/<name>.v.bin      second moments
//! ```
//!
//! The manifest records a SHA-256 for every file, the stage lineage and
//! everything needed to rebuild the model.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{AdamW, OptimizerState};
use super::{StageId, TrainState};
use crate::arrayfile::{self, DType};
use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::models::{Exo2Ego, ModelConfig, ParamStore, Vocab};

pub const CHECKPOINT_SCHEMA: &str = "exo2ego-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub schema: String,
    /// last completed stage
    pub stage: Option<StageId>,
    pub lineage: Vec<StageId>,
    pub skipped: Vec<String>,
    pub step: u64,
    pub config_hash: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub ego_dim: usize,
    pub exo_dim: usize,
    pub lora_active: bool,
    pub vocab: Vocab,
    pub instructions: Vec<String>,
    pub optimizer: AdamW,
    pub optimizer_step: u64,
    pub param_names: Vec<String>,
    /// relative path → SHA-256 of the file bytes
    pub files: BTreeMap<String, String>,
}

fn param_file(name: &str) -> String {
    format!("params/{name}.bin")
}

fn moment_file(name: &str, which: &str) -> String {
    format!("opt/{name}.{which}.bin")
}

fn meta(name: &str, kind: &str) -> BTreeMap<String, serde_json::Value> {
    BTreeMap::from([
        ("name".to_string(), serde_json::json!(name)),
        ("kind".to_string(), serde_json::json!(kind)),
    ])
}

pub fn checkpoint_save(state: &TrainState, dir: &Path) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir.join("params"))?;
    fs::create_dir_all(dir.join("opt"))?;
    let mut files = BTreeMap::new();
    for (name, m) in state.model.params.iter() {
        let rel = param_file(name);
        files.insert(rel.clone(), arrayfile::write(&dir.join(&rel), m, DType::F64, meta(name, "param"))?);
    }
    for (which, moments) in [("m", &state.opt.m), ("v", &state.opt.v)] {
        for (name, m) in moments {
            let rel = moment_file(name, which);
            files.insert(rel.clone(), arrayfile::write(&dir.join(&rel), m, DType::F64, meta(name, which))?);
        }
    }
    let manifest = CheckpointManifest {
        schema: CHECKPOINT_SCHEMA.to_string(),
        stage: state.lineage.last().copied(),
        lineage: state.lineage.clone(),
        skipped: state.skipped.clone(),
        step: state.global_step,
        config_hash: state.config_hash.clone(),
        seed: state.seed,
        model: state.model.config.clone(),
        ego_dim: state.model.ego_dim,
        exo_dim: state.model.exo_dim,
        lora_active: state.model.lora_active,
        vocab: state.model.vocab.clone(),
        instructions: state.instructions.clone(),
        optimizer: state.opt.hyper,
        optimizer_step: state.opt.step,
        param_names: state.model.params.names().cloned().collect(),
        files,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

fn read_verified(dir: &Path, rel: &str, manifest: &CheckpointManifest, owner: &str) -> Result<Mat> {
    let path = dir.join(rel);
    let bytes = fs::read(&path).map_err(|e| {
        Error::CorruptCheckpoint(format!("cannot read {rel} for parameter `{owner}`: {e}"))
    })?;
    let expected = manifest
        .files
        .get(rel)
        .ok_or_else(|| Error::CorruptCheckpoint(format!("no hash recorded for {rel}")))?;
    if &arrayfile::sha256_hex(&bytes) != expected {
        return Err(Error::CorruptCheckpoint(format!("hash mismatch for {rel}")));
    }
    let (_, m) = arrayfile::decode(&bytes, &path.display().to_string())?;
    Ok(m)
}

pub fn checkpoint_load(dir: &Path) -> Result<TrainState> {
    let text = fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| Error::CorruptCheckpoint(format!("cannot read manifest.json: {e}")))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::CorruptCheckpoint(format!("manifest.json: {e}")))?;
    if manifest.schema != CHECKPOINT_SCHEMA {
        return Err(Error::CorruptCheckpoint(format!("unknown schema {}", manifest.schema)));
    }
    let mut params = ParamStore::new();
    for name in &manifest.param_names {
        params.insert(name.clone(), read_verified(dir, &param_file(name), &manifest, name)?);
    }
    let mut opt = OptimizerState::new(manifest.optimizer);
    opt.step = manifest.optimizer_step;
    for rel in manifest.files.keys() {
        let Some(rest) = rel.strip_prefix("opt/") else {
            continue;
        };
        let (name, which) = match (rest.strip_suffix(".m.bin"), rest.strip_suffix(".v.bin")) {
            (Some(n), _) => (n, "m"),
            (_, Some(n)) => (n, "v"),
            _ => return Err(Error::CorruptCheckpoint(format!("unexpected file {rel}"))),
        };
        let m = read_verified(dir, rel, &manifest, name)?;
        let target = if which == "m" { &mut opt.m } else { &mut opt.v };
        target.insert(name.to_string(), m);
    }

    let mut model = Exo2Ego::new(
        manifest.model.clone(),
        manifest.ego_dim,
        manifest.exo_dim,
        manifest.vocab.clone(),
    )?;
    for name in params.names() {
        let fresh_shape = model.params.get(name).map(Mat::dim);
        let is_adapter = name.starts_with("lora.");
        if !is_adapter && fresh_shape != Some(params.get(name).unwrap().dim()) {
            return Err(Error::CorruptCheckpoint(format!(
                "parameter `{name}` does not fit the recorded model config"
            )));
        }
    }
    if let Some(missing) = model.params.names().find(|n| !params.contains(n)) {
        return Err(Error::CorruptCheckpoint(format!("parameter `{missing}` is not listed")));
    }
    model.params = params;
    model.lora_active = manifest.lora_active;
    Ok(TrainState {
        model,
        opt,
        lineage: manifest.lineage,
        skipped: manifest.skipped,
        global_step: manifest.step,
        instructions: manifest.instructions,
        seed: manifest.seed,
        config_hash: manifest.config_hash,
    })
}
