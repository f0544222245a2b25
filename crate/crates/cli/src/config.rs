use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use exo2ego::arrayfile::sha256_hex;
use exo2ego::corpus::Split;
use exo2ego::evalharness::{EvalProtocol, EvalTask, PoolMode};
use exo2ego::models::ModelConfig;
use exo2ego::synthworld::DatasetConfig;
use exo2ego::trainer::{PretrainConfig, Profile, StageId, StageOverrides};
use serde::{Deserialize, Serialize};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "EXO2EGO_OUT";

/// How evaluation items are drawn from a dataset split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub protocol: EvalProtocol,
    pub split: Split,
    pub tasks: Vec<EvalTask>,
    /// upper bound on items per task
    pub max_items: BTreeMap<EvalTask, usize>,
    pub pool: PoolMode,
    /// keep each candidate set's gold positions equally frequent
    pub balance_mcq: bool,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            protocol: EvalProtocol::default(),
            split: Split::Test,
            tasks: vec![EvalTask::Mcq, EvalTask::Open, EvalTask::Retrieval],
            max_items: BTreeMap::from([(EvalTask::Mcq, 500), (EvalTask::Open, 100), (EvalTask::Retrieval, 100)]),
            pool: PoolMode::Inter,
            balance_mcq: false,
            seed: 0,
        }
    }
}

/// Everything a run depends on besides its input data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    /// where the run writes; not part of the hash
    pub output_dir: String,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub stages: BTreeMap<StageId, StageOverrides>,
    pub eval: EvalSettings,
    /// held-out pairs used for the stage-2 alignment probe
    pub probe_pairs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Toy)
    }
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        Self {
            profile,
            seed: 0,
            output_dir: String::new(),
            dataset: DatasetConfig::default(),
            model: match profile {
                Profile::Toy => ModelConfig::toy(),
                Profile::PaperDefault => ModelConfig::paper_default(),
            },
            pretrain: PretrainConfig::default(),
            stages: BTreeMap::new(),
            eval: EvalSettings::default(),
            probe_pairs: 100,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| anyhow::anyhow!("{}:{}:{}: {e}", path.display(), e.line(), e.column()))
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir.clear();
        let text = serde_json::to_string(&c).expect("config serializes");
        sha256_hex(text.as_bytes())[..16].to_string()
    }

    /// Overrides for one stage with the run seed filled in.
    pub fn overrides(&self, stage: StageId) -> StageOverrides {
        let mut ov = self.stages.get(&stage).cloned().unwrap_or_default();
        ov.seed.get_or_insert(self.seed);
        ov
    }
}

/// `config.json` of a run directory: created on first use, then fixed.
pub fn resolve_run_config(run: &Path, explicit: Option<&Path>) -> Result<RunConfig> {
    let stored = run.join("config.json");
    let given = explicit.map(RunConfig::load).transpose()?;
    if stored.exists() {
        let existing = RunConfig::load(&stored)?;
        if let Some(g) = given {
            if g.hash() != existing.hash() {
                bail!(
                    "run directory {} was created with config {}, got {}",
                    run.display(),
                    existing.hash(),
                    g.hash()
                );
            }
        }
        return Ok(existing);
    }
    let mut cfg = given.unwrap_or_default();
    cfg.output_dir = run.display().to_string();
    write_json(&stored, &cfg)?;
    Ok(cfg)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

/// Exclusive writer lock on a directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub const FILE: &'static str = ".lock";

    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        let path = dir.join(Self::FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => bail!(
                "{} is locked by another command (remove {} if no command is running)",
                dir.display(),
                path.display()
            ),
            Err(e) => Err(e).with_context(|| format!("cannot lock {}", dir.display())),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.output_dir = "/elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn config_round_trips() {
        let mut c = RunConfig::default();
        c.stages.insert(
            StageId::S2,
            StageOverrides {
                epochs: Some(3),
                ..StageOverrides::default()
            },
        );
        let text = serde_json::to_string(&c).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn misspelled_field_is_reported_with_position() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, "{\n  \"seed\": 3,\n  \"sead\": 4\n}\n").unwrap();
        let msg = format!("{:#}", RunConfig::load(&p).unwrap_err());
        assert!(msg.contains("c.json:3:") && msg.contains("sead"), "{msg}");
        fs::write(&p, "{\"seed\": 3}").unwrap();
        assert_eq!(RunConfig::load(&p).unwrap().seed, 3);
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let held = RunLock::acquire(dir.path()).unwrap();
        assert!(RunLock::acquire(dir.path()).is_err());
        drop(held);
        RunLock::acquire(dir.path()).unwrap();
    }
}
