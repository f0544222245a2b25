use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use exo2ego::arrayfile::sha256_hex;
use exo2ego::corpus::{compute_alpha, corpus_stats, CorpusManifest, NarrationTrack, StatsReport};
use exo2ego::evalharness::{
    balance_items, clip_items, read_items, run_eval, write_items, BagOfWords, EvalItem, EvalReport, EvalTask,
};
use exo2ego::synthworld::{DatasetConfig, RenderMode, SynthDataset, WorldConfig};
use exo2ego::trainer::{
    checkpoint_load, checkpoint_save, run_stage, stage_plan, Ablation, RunOptions, StageId, TrainReport, TrainState,
};
use serde::{Deserialize, Serialize};

use crate::config::{resolve_run_config, write_json, RunConfig, RunLock};

// ---------------------------------------------------------------- corpus

/// Reads one file holding a narration track or a list of them. Parse
/// errors carry `path:line:column`.
pub fn read_tracks(path: &Path) -> Result<Vec<NarrationTrack>> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    // parse strictly first so the diagnostic points at the offending line
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| anyhow!("{}:{}:{}: {e}", path.display(), e.line(), e.column()))?;
    let tracks = match value {
        serde_json::Value::Array(_) => serde_json::from_str::<Vec<NarrationTrack>>(&text),
        _ => serde_json::from_str::<NarrationTrack>(&text).map(|t| vec![t]),
    }
    .map_err(|e| anyhow!("{}:{}:{}: {e}", path.display(), e.line(), e.column()))?;
    for t in &tracks {
        t.validate().map_err(|e| anyhow!("{}: {e}", path.display()))?;
    }
    Ok(tracks)
}

fn json_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("cannot read directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    Ok(files)
}

#[derive(Debug, Serialize)]
pub struct CorpusSummary {
    pub tracks: usize,
    pub clips: usize,
    pub dropped: usize,
    pub alpha_s: f64,
    pub config_hash: String,
}

pub fn build_clips(input: &Path, out: &Path, name: &str, alpha: Option<f64>) -> Result<CorpusSummary> {
    let files = json_files(input)?;
    let mut tracks = Vec::new();
    let mut digests = Vec::new();
    for f in &files {
        tracks.extend(read_tracks(f)?);
        digests.push(sha256_hex(&fs::read(f)?));
    }
    if tracks.is_empty() {
        bail!("no tracks found in {}", input.display());
    }
    let alpha = match alpha {
        Some(a) => a,
        None => compute_alpha(&tracks)?,
    };
    let _lock = RunLock::acquire(out)?;
    let mut manifest = CorpusManifest::build(name, &tracks, alpha)?;
    let key = serde_json::json!({ "name": name, "alpha_s": alpha, "inputs": digests });
    manifest.config_hash = sha256_hex(key.to_string().as_bytes())[..16].to_string();
    fs::write(out.join("manifest.json"), manifest.to_json()?)?;
    let stats = manifest_stats(&manifest)?;
    write_json(&out.join("stats.json"), &stats)?;
    fs::write(out.join("stats.md"), stats.to_markdown())?;
    Ok(CorpusSummary {
        tracks: manifest.tracks.len(),
        clips: manifest.clip_count(),
        dropped: manifest.tracks.iter().map(|t| t.dropped).sum(),
        alpha_s: alpha,
        config_hash: manifest.config_hash,
    })
}

pub fn manifest_stats(m: &CorpusManifest) -> Result<StatsReport> {
    let clips: Vec<_> = m.all_clips().cloned().collect();
    let texts: Vec<String> = clips.iter().map(|c| c.text.clone()).collect();
    Ok(corpus_stats(&clips, &texts)?)
}

pub fn load_manifest(path: &Path) -> Result<CorpusManifest> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    CorpusManifest::from_json(&text).map_err(|e| anyhow!("{}: {e}", path.display()))
}

// ---------------------------------------------------------------- synth

#[derive(Debug, Serialize, Deserialize)]
pub struct SynthSummary {
    pub config_hash: String,
    pub dataset_digest: String,
    /// ground-truth view maps, linear mode only
    pub map_digest: Option<String>,
    pub pairs: BTreeMap<String, usize>,
    pub config: DatasetConfig,
}

fn dataset_hash(cfg: &DatasetConfig) -> String {
    sha256_hex(serde_json::to_string(cfg).expect("config serializes").as_bytes())[..16].to_string()
}

/// Files a previous `synth` may have left; only these are removed by `--force`.
const DATASET_FILES: [&str; 3] = ["manifest.json", "pairs.json", "synth.json"];

fn clear_dataset(dir: &Path) -> Result<()> {
    for f in DATASET_FILES {
        let p = dir.join(f);
        if p.exists() {
            fs::remove_file(p)?;
        }
    }
    let frames = dir.join("frames");
    if frames.exists() {
        fs::remove_dir_all(frames)?;
    }
    Ok(())
}

fn non_empty(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

pub fn synth(out: &Path, cfg: &DatasetConfig, force: bool) -> Result<SynthSummary> {
    let had_data = non_empty(out);
    let _lock = RunLock::acquire(out)?;
    if had_data {
        if !force {
            bail!("{} is not empty (pass --force to overwrite)", out.display());
        }
        let foreign: Vec<String> = fs::read_dir(out)?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| !DATASET_FILES.contains(&n.as_str()) && n != "frames" && n != RunLock::FILE)
            .collect();
        if !foreign.is_empty() {
            bail!("{} holds files that are not part of a dataset: {foreign:?}", out.display());
        }
    }
    clear_dataset(out)?;
    let ds = SynthDataset::generate(cfg)?;
    let digest = ds.save(out)?;
    let summary = SynthSummary {
        config_hash: dataset_hash(cfg),
        dataset_digest: digest,
        map_digest: (cfg.world.mode == RenderMode::Linear).then(|| ds.map_digest.clone()),
        pairs: BTreeMap::from([
            ("train".to_string(), ds.splits.train.len()),
            ("val".to_string(), ds.splits.val.len()),
            ("test".to_string(), ds.splits.test.len()),
        ]),
        config: cfg.clone(),
    };
    write_json(&out.join("synth.json"), &summary)?;
    Ok(summary)
}

pub fn dataset_config(mode: RenderMode, episodes: usize, seed: u64) -> DatasetConfig {
    DatasetConfig {
        world: match mode {
            RenderMode::Linear => WorldConfig::linear(),
            RenderMode::Gridworld => WorldConfig::default(),
        },
        n_episodes: episodes,
        seed,
        ..DatasetConfig::default()
    }
}

fn load_dataset(dir: &Path) -> Result<(SynthDataset, String)> {
    if !dir.join("pairs.json").exists() {
        bail!("{} is not a dataset directory (run `synth` first)", dir.display());
    }
    let ds = SynthDataset::load(dir).with_context(|| format!("cannot load dataset {}", dir.display()))?;
    let summary: Option<SynthSummary> = fs::read_to_string(dir.join("synth.json"))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());
    let digest = summary.map(|s| s.dataset_digest).unwrap_or_default();
    Ok((ds, digest))
}

// ---------------------------------------------------------------- train

pub fn stage_dir_name(stage: StageId, ablation: Option<Ablation>) -> String {
    match ablation {
        Some(a) => format!("{stage}-{a}"),
        None => stage.to_string(),
    }
}

pub fn stage_dir(run: &Path, name: &str) -> PathBuf {
    run.join("stages").join(name)
}

/// Starting state for a stage: an explicit checkpoint, else the nearest
/// completed predecessor in this run, else a fresh model.
fn starting_state(
    run: &Path,
    cfg: &RunConfig,
    stage: StageId,
    from: Option<&Path>,
    dims: (usize, usize),
) -> Result<TrainState> {
    if let Some(dir) = from {
        return Ok(checkpoint_load(dir)?);
    }
    let mut pre = stage.prerequisite();
    while let Some(p) = pre {
        let ckpt = stage_dir(run, p.as_str()).join("checkpoint");
        if ckpt.join("manifest.json").exists() {
            return Ok(checkpoint_load(&ckpt)?);
        }
        pre = p.prerequisite();
    }
    Ok(TrainState::new(cfg.model.clone(), dims.0, dims.1, &cfg.pretrain)?)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageOutput {
    pub config_hash: String,
    pub dataset_digest: String,
    pub skipped: Vec<String>,
    pub report: TrainReport,
}

pub struct TrainArgs<'a> {
    pub run: &'a Path,
    pub data: &'a Path,
    pub stage: StageId,
    pub ablation: Option<Ablation>,
    pub allow_skip: bool,
    pub from: Option<&'a Path>,
    pub config: Option<&'a Path>,
    pub force: bool,
}

pub fn train(a: &TrainArgs) -> Result<StageOutput> {
    let _lock = RunLock::acquire(a.run)?;
    let cfg = resolve_run_config(a.run, a.config)?;
    let hash = cfg.hash();
    let name = stage_dir_name(a.stage, a.ablation);
    let out = stage_dir(a.run, &name);
    if out.join("report.json").exists() && !a.force {
        bail!("stage output {} exists (pass --force to retrain)", out.display());
    }
    let (ds, digest) = load_dataset(a.data)?;
    let dims = (ds.config.world.ego_dim(), ds.config.world.exo_dim());
    let mut state = starting_state(a.run, &cfg, a.stage, a.from, dims)?;
    if (state.model.ego_dim, state.model.exo_dim) != dims {
        bail!(
            "checkpoint expects frame sizes {:?}, dataset has {:?}",
            (state.model.ego_dim, state.model.exo_dim),
            dims
        );
    }
    state.config_hash = hash.clone();

    let mut ov = cfg.overrides(a.stage);
    ov.allow_skip |= a.allow_skip;
    ov.dataset_ref.get_or_insert_with(|| digest.clone());
    let plan = stage_plan(a.stage, cfg.profile, a.ablation, &ov)?;

    if out.exists() {
        fs::remove_dir_all(&out)?;
    }
    fs::create_dir_all(&out)?;
    let probe: Vec<_> = ds.splits.val.iter().take(cfg.probe_pairs).cloned().collect();
    let mut log = BufWriter::new(fs::File::create(out.join("log.jsonl"))?);
    let head = serde_json::json!({ "config_hash": hash, "stage": a.stage, "ablation": a.ablation });
    writeln!(log, "{head}")?;
    let report = run_stage(
        &mut state,
        &plan,
        &ds.splits.train,
        RunOptions {
            log: Some(&mut log),
            heldout: (!probe.is_empty()).then_some(&probe[..]),
        },
    )?;
    drop(log);
    checkpoint_save(&state, &out.join("checkpoint"))?;
    let output = StageOutput {
        config_hash: hash,
        dataset_digest: digest,
        skipped: state.skipped.clone(),
        report,
    };
    write_json(&out.join("report.json"), &output)?;
    Ok(output)
}

// ---------------------------------------------------------------- eval

pub struct EvalArgs<'a> {
    pub run: &'a Path,
    pub data: &'a Path,
    pub stage: &'a str,
    pub checkpoint: Option<&'a Path>,
    pub items: Option<&'a Path>,
}

/// Items for every configured task, drawn from the configured split, and
/// the number of clips per task whose distractor pool was too small.
pub fn build_items(
    cfg: &RunConfig,
    state: &TrainState,
    ds: &SynthDataset,
) -> Result<(Vec<EvalItem>, BTreeMap<EvalTask, usize>)> {
    let e = &cfg.eval;
    let pairs = ds.splits.get(e.split);
    let question = state.instructions.first().map(String::as_str).unwrap_or("");
    let hash = cfg.hash();
    let mut out = Vec::new();
    let mut skipped = BTreeMap::new();
    for &task in &e.tasks {
        let (mut items, n) = clip_items(pairs, task, question, e.pool, &BagOfWords, e.seed)?;
        skipped.insert(task, n);
        if task == EvalTask::Mcq && e.balance_mcq {
            items = balance_items(&items);
        }
        if let Some(&n) = e.max_items.get(&task) {
            items.truncate(n);
        }
        for it in &mut items {
            it.provenance.push(format!("config:{hash}"));
        }
        out.extend(items);
    }
    Ok((out, skipped))
}

#[derive(Debug)]
pub struct EvalOutput {
    pub report: EvalReport,
    pub skipped: BTreeMap<EvalTask, usize>,
}

pub fn eval(a: &EvalArgs) -> Result<EvalOutput> {
    let _lock = RunLock::acquire(a.run)?;
    let stored = a.run.join("config.json");
    if !stored.exists() {
        bail!("{} has no config.json (train a stage first)", a.run.display());
    }
    let cfg = RunConfig::load(&stored)?;
    let ckpt = a
        .checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| stage_dir(a.run, a.stage).join("checkpoint"));
    if !ckpt.join("manifest.json").exists() {
        bail!("no checkpoint at {}", ckpt.display());
    }
    let state = checkpoint_load(&ckpt)?;
    let (ds, _) = load_dataset(a.data)?;
    let out = a.run.join("eval").join(a.stage);
    fs::create_dir_all(&out)?;
    let (items, skipped) = match a.items {
        Some(p) => (read_items(p)?, BTreeMap::new()),
        None => build_items(&cfg, &state, &ds)?,
    };
    if items.is_empty() {
        bail!("no evaluation items (the {} split is too small for every task)", cfg.eval.split.as_str());
    }
    write_items(&out.join("items.jsonl"), &items)?;
    let clips = ds.splits.get(cfg.eval.split);
    let mut report = run_eval(&state, &items, clips, &cfg.eval.protocol)?;
    report.config_hash = cfg.hash();
    write_json(&out.join("metrics.json"), &report)?;
    fs::write(out.join("metrics.md"), report.to_markdown())?;
    Ok(EvalOutput { report, skipped })
}
