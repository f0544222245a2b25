//! Benchmark construction and scoring over the synthetic eval splits.
//!
//! Items are built the way the public benchmarks were: the gold answer plus
//! the most similar wrong answers from an answer pool. A model answers an
//! item by scoring every candidate's text-generation loss given the clip;
//! the lowest loss is its prediction.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{GradScope, Graph, Var};
use crate::error::{Error, Result};
use crate::losses;
use crate::models::vocab::EOS;
use crate::models::{concat_guidance, Ctx, Direction, Exo2Ego};
use crate::synthworld::{ClipPair, View, CLIP_FRAMES};
use crate::trainer::{encode_batch, sequence, StageId, TrainState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalTask {
    Mcq,
    Open,
    Retrieval,
    Multilabel,
}

impl EvalTask {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalTask::Mcq => "mcq",
            EvalTask::Open => "open",
            EvalTask::Retrieval => "retrieval",
            EvalTask::Multilabel => "multilabel",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub item_id: String,
    /// clip the item is asked about
    pub clip_id: String,
    /// prompt placed before every candidate
    pub question: String,
    pub candidates: Vec<String>,
    pub gold_index: usize,
    pub task_type: EvalTask,
    pub provenance: Vec<String>,
}

impl EvalItem {
    pub fn gold(&self) -> &str {
        &self.candidates[self.gold_index]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| {
            Err(Error::InvalidItem {
                id: self.item_id.clone(),
                reason,
            })
        };
        let n = self.candidates.len();
        if self.gold_index >= n {
            return bad(format!("gold_index {} out of range for {n} candidates", self.gold_index));
        }
        let distinct: BTreeSet<&String> = self.candidates.iter().collect();
        if distinct.len() != n {
            return bad("candidates are not pairwise distinct".into());
        }
        match self.task_type {
            EvalTask::Mcq | EvalTask::Retrieval if ![4, 5, 10].contains(&n) => {
                bad(format!("{n} candidates, expected 4, 5 or 10"))
            }
            _ => Ok(()),
        }
    }
}

/// Text similarity used to rank distractors.
pub trait SimilarityFn {
    type Embedding;

    fn name(&self) -> &str;
    fn embed(&self, text: &str) -> Self::Embedding;
    /// In `[-1, 1]`; 1 for identical non-empty inputs.
    fn score(&self, a: &Self::Embedding, b: &Self::Embedding) -> f64;

    fn similarity(&self, a: &str, b: &str) -> f64 {
        self.score(&self.embed(a), &self.embed(b))
    }
}

/// Cosine between the sets of lowercased word tokens.
#[derive(Clone, Copy, Debug, Default)]
pub struct BagOfWords;

impl SimilarityFn for BagOfWords {
    type Embedding = BTreeSet<String>;

    fn name(&self) -> &str {
        "bag-of-words-cosine"
    }

    fn embed(&self, text: &str) -> BTreeSet<String> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect()
    }

    fn score(&self, a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
        if a.is_empty() || b.is_empty() {
            return 0.0;
        }
        let shared = a.intersection(b).count() as f64;
        shared / ((a.len() * b.len()) as f64).sqrt()
    }
}

/// Distinct pool strings in first-seen order, minus `exclude`.
fn remaining<'a>(pool: &'a [String], exclude: &BTreeSet<&str>) -> Vec<&'a str> {
    let mut seen = BTreeSet::new();
    pool.iter()
        .map(String::as_str)
        .filter(|s| !exclude.contains(s) && seen.insert(*s))
        .collect()
}

/// The `k` strings most similar to `anchor`. Ties go to the
/// lexicographically smaller string, then to the earlier pool position.
fn most_similar<'a, S: SimilarityFn>(anchor: &str, others: &[&'a str], k: usize, sim: &S) -> Vec<&'a str> {
    let a = sim.embed(anchor);
    let mut ranked: Vec<(f64, &str, usize)> = others
        .iter()
        .enumerate()
        .map(|(i, s)| (sim.score(&a, &sim.embed(s)), *s, i))
        .collect();
    ranked.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(y.1)).then(x.2.cmp(&y.2)));
    ranked.into_iter().take(k).map(|(_, s, _)| s).collect()
}

fn item_seed(item_id: &str, seed: u64) -> u64 {
    let digest = Sha256::digest(item_id.as_bytes());
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(head) ^ seed
}

/// Gold plus the `k` most similar wrong answers, shuffled per item.
pub fn build_mcq<S: SimilarityFn>(
    item_id: &str,
    question: &str,
    gold: &str,
    pool: &[String],
    k: usize,
    sim: &S,
    seed: u64,
) -> Result<EvalItem> {
    if !pool.iter().any(|s| s == gold) {
        return Err(Error::InvalidItem {
            id: item_id.to_string(),
            reason: "gold answer is not in the pool".into(),
        });
    }
    let others = remaining(pool, &BTreeSet::from([gold]));
    if others.len() < k {
        return Err(Error::InsufficientPool {
            need: k,
            have: others.len(),
        });
    }
    let mut candidates: Vec<String> = std::iter::once(gold)
        .chain(most_similar(gold, &others, k, sim))
        .map(str::to_string)
        .collect();
    candidates.shuffle(&mut ChaCha8Rng::seed_from_u64(item_seed(item_id, seed)));
    let gold_index = candidates.iter().position(|c| c == gold).unwrap();
    Ok(EvalItem {
        item_id: item_id.to_string(),
        clip_id: String::new(),
        question: question.to_string(),
        candidates,
        gold_index,
        task_type: EvalTask::Mcq,
        provenance: Vec::new(),
    })
}

pub const EXPANDED_CANDIDATES: usize = 10;

/// Grows a 5-way item to 10 by appending the pool strings closest to the gold.
pub fn expand_candidates<S: SimilarityFn>(item: &EvalItem, pool: &[String], sim: &S) -> Result<EvalItem> {
    item.validate()?;
    if item.candidates.len() != 5 {
        return Err(Error::InvalidItem {
            id: item.item_id.clone(),
            reason: format!("expansion needs 5 candidates, got {}", item.candidates.len()),
        });
    }
    let taken: BTreeSet<&str> = item.candidates.iter().map(String::as_str).collect();
    let others = remaining(pool, &taken);
    let need = EXPANDED_CANDIDATES - item.candidates.len();
    if others.len() < need {
        return Err(Error::InsufficientPool {
            need,
            have: others.len(),
        });
    }
    let mut out = item.clone();
    out.candidates
        .extend(most_similar(item.gold(), &others, need, sim).into_iter().map(str::to_string));
    Ok(out)
}

pub fn score_mcq(predictions: &BTreeMap<String, usize>, items: &[EvalItem]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let missing: Vec<String> = items
        .iter()
        .filter(|it| !predictions.contains_key(&it.item_id))
        .map(|it| it.item_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingPredictions(missing));
    }
    let correct = items
        .iter()
        .filter(|it| predictions[&it.item_id] == it.gold_index)
        .count();
    Ok(correct as f64 / items.len() as f64)
}

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Lowercase, punctuation stripped, articles dropped.
pub fn normalize_answer(s: &str) -> Vec<String> {
    s.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty() && !ARTICLES.contains(w))
        .map(str::to_string)
        .collect()
}

/// Exact-match accuracy and a 0 to 5 score equal to 5 × token F1.
pub fn score_open(pred: &str, gold: &str) -> (u8, f64) {
    let p = normalize_answer(pred);
    let g = normalize_answer(gold);
    if p == g {
        return (1, 5.0);
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for w in &g {
        *counts.entry(w).or_default() += 1;
    }
    let mut overlap = 0usize;
    for w in &p {
        if let Some(c) = counts.get_mut(w.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return (0, 0.0);
    }
    let precision = overlap as f64 / p.len() as f64;
    let recall = overlap as f64 / g.len() as f64;
    (0, 5.0 * 2.0 * precision * recall / (precision + recall))
}

/// Average precision of one ranking given relevance flags in rank order.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

pub fn mean_ap(per_query: &[Vec<bool>]) -> Result<f64> {
    if per_query.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for (q, flags) in per_query.iter().enumerate() {
        total += average_precision(flags).ok_or(Error::NoRelevant(q))?;
    }
    Ok(total / per_query.len() as f64)
}

fn dcg(gains: &[f64]) -> f64 {
    gains
        .iter()
        .enumerate()
        .map(|(i, g)| g / ((i + 2) as f64).log2())
        .sum()
}

/// Linear-gain nDCG.
pub fn ndcg(gains: &[f64], ideal: &[f64]) -> Result<f64> {
    if let Some(g) = gains.iter().chain(ideal).find(|g| !g.is_finite() || **g < 0.0) {
        return Err(Error::NonFinite(format!("gain {g} (gains must be finite and non-negative)")));
    }
    let idcg = dcg(ideal);
    if idcg == 0.0 {
        return Err(Error::ZeroIdeal);
    }
    Ok(dcg(gains) / idcg)
}

/// Index of the smallest loss; the first one on ties.
pub fn argmin(losses: &[f64]) -> Option<usize> {
    losses
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
}

/// Where the distractor pool for a clip comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    /// narrations of clips from other episodes
    Inter,
    /// narrations of other clips in the same episode
    Intra,
}

/// Items for every clip whose pool is large enough. Returns the items and
/// the number of clips skipped for lack of distractors.
pub fn clip_items<S: SimilarityFn>(
    pairs: &[ClipPair],
    task: EvalTask,
    question: &str,
    mode: PoolMode,
    sim: &S,
    seed: u64,
) -> Result<(Vec<EvalItem>, usize)> {
    let mut by_episode: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for p in pairs {
        by_episode.entry(&p.episode_id).or_default().push(&p.text);
    }
    let mut pools: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for ep in by_episode.keys() {
        let pool: Vec<String> = by_episode
            .iter()
            .filter(|(other, _)| (mode == PoolMode::Inter) != (*other == ep))
            .flat_map(|(_, texts)| texts.iter().map(|t| t.to_string()))
            .collect();
        pools.insert(ep, pool);
    }

    let mut items = Vec::new();
    let mut skipped = 0;
    for p in pairs {
        let mut pool = vec![p.text.clone()];
        pool.extend(pools[p.episode_id.as_str()].iter().cloned());
        let id = format!("{}:{}", task.as_str(), p.id);
        let built = match task {
            EvalTask::Mcq => build_mcq(&id, question, &p.text, &pool, 4, sim, seed),
            EvalTask::Retrieval => build_mcq(&id, question, &p.text, &pool, 4, sim, seed)
                .and_then(|it| expand_candidates(&it, &pool, sim)),
            EvalTask::Open => Ok(EvalItem {
                item_id: id.clone(),
                clip_id: String::new(),
                question: question.to_string(),
                candidates: vec![p.text.clone()],
                gold_index: 0,
                task_type: EvalTask::Open,
                provenance: Vec::new(),
            }),
            EvalTask::Multilabel => return Err(Error::UnsupportedTask(task.as_str().into())),
        };
        match built {
            Ok(mut item) => {
                item.task_type = task;
                item.clip_id = p.id.clone();
                item.provenance = vec![format!("episode:{}", p.episode_id), format!("pool:{mode:?}").to_lowercase()];
                items.push(item);
            }
            Err(Error::InsufficientPool { .. }) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((items, skipped))
}

/// Subset in which every candidate set is asked equally often about each
/// of its members, so a model that ignores the clip scores exactly chance.
/// Sets whose members do not all occur as gold are dropped; within a set
/// the first items in input order are kept.
pub fn balance_items(items: &[EvalItem]) -> Vec<EvalItem> {
    let mut groups: BTreeMap<Vec<&str>, Vec<&EvalItem>> = BTreeMap::new();
    for it in items {
        let mut key: Vec<&str> = it.candidates.iter().map(String::as_str).collect();
        key.sort_unstable();
        groups.entry(key).or_default().push(it);
    }
    let mut keep = BTreeSet::new();
    for (key, members) in &groups {
        let mut per_gold: BTreeMap<&str, Vec<&str>> = key.iter().map(|k| (*k, Vec::new())).collect();
        for it in members {
            per_gold.get_mut(it.gold()).unwrap().push(&it.item_id);
        }
        let quota = per_gold.values().map(Vec::len).min().unwrap_or(0);
        for ids in per_gold.values() {
            keep.extend(ids.iter().take(quota).copied());
        }
    }
    items.iter().filter(|it| keep.contains(it.item_id.as_str())).cloned().collect()
}

pub fn write_items(path: &Path, items: &[EvalItem]) -> Result<()> {
    let mut out = fs::File::create(path)?;
    for it in items {
        writeln!(out, "{}", serde_json::to_string(it)?)?;
    }
    Ok(())
}

pub fn read_items(path: &Path) -> Result<Vec<EvalItem>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut items = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: EvalItem = serde_json::from_str(&line).map_err(|e| Error::InvalidItem {
            id: format!("{}:{}", path.display(), i + 1),
            reason: e.to_string(),
        })?;
        item.validate()?;
        items.push(item);
    }
    Ok(items)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub name: String,
    /// longest generated answer for open items, in tokens
    pub max_answer_tokens: usize,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            name: "synthworld".into(),
            max_answer_tokens: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemOutcome {
    pub item_id: String,
    pub task_type: EvalTask,
    /// chosen candidate; `None` for open items
    pub predicted: Option<usize>,
    pub correct: bool,
    /// generated text for open items
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub items: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub open_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ndcg: Option<f64>,
}

impl TaskMetrics {
    /// Headline number of the task.
    pub fn primary(&self) -> Option<f64> {
        self.accuracy.or(self.map)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub config_hash: String,
    pub lineage: Vec<StageId>,
    pub tasks: BTreeMap<EvalTask, TaskMetrics>,
    /// mean of the per-task headline numbers
    pub aggregate: f64,
    pub outcomes: Vec<ItemOutcome>,
}

impl EvalReport {
    pub fn to_markdown(&self) -> String {
        let lineage: Vec<&str> = self.lineage.iter().map(|s| s.as_str()).collect();
        let mut s = format!(
            "# Evaluation: {}\n\nlineage: {}  \nconfig: `{}`\n\n",
            self.protocol,
            lineage.join(" → "),
            self.config_hash
        );
        s.push_str("| task | items | accuracy | score | mAP | nDCG |\n|---|---:|---:|---:|---:|---:|\n");
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "–".into());
        for (task, m) in &self.tasks {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} |",
                task.as_str(),
                m.items,
                cell(m.accuracy),
                cell(m.open_score),
                cell(m.map),
                cell(m.ndcg)
            );
        }
        let _ = writeln!(s, "\naggregate: {:.4}", self.aggregate);
        s
    }
}

/// Visual prefix for one clip: the learner's features, preceded by the
/// mapped demonstrator guidance once the mapping has been trained.
fn clip_prefix(model: &Exo2Ego, g: &mut Graph, cx: &mut Ctx, clip: &ClipPair, guided: bool) -> Result<Var> {
    let x = encode_batch(model, g, cx, &[clip], View::Ego)?;
    if !guided {
        return Ok(x);
    }
    let fx = model.map_apply(g, cx, Direction::F, x)?;
    concat_guidance(g, x, fx)
}

/// Text-generation loss of every candidate given the clip and question.
pub fn candidate_losses(model: &Exo2Ego, clip: &ClipPair, guided: bool, item: &EvalItem) -> Result<Vec<f64>> {
    let mut g = Graph::new(GradScope::None);
    let mut cx = model.ctx();
    let prefix = clip_prefix(model, &mut g, &mut cx, clip, guided)?;
    item.candidates
        .iter()
        .map(|c| {
            let s = sequence(&model.vocab, &item.question, c);
            let logits = model.lm_logits(&mut g, &mut cx, Some(prefix), &s.tokens)?;
            let loss = losses::vtg_loss(&mut g, logits, &s.targets, &s.mask)?;
            Ok(g.scalar(loss))
        })
        .collect()
}

/// Greedy decoding after the question.
pub fn generate_answer(model: &Exo2Ego, clip: &ClipPair, guided: bool, question: &str, max_tokens: usize) -> Result<String> {
    let mut g = Graph::new(GradScope::None);
    let mut cx = model.ctx();
    let prefix = clip_prefix(model, &mut g, &mut cx, clip, guided)?;
    let mut tokens = model.vocab.encode(question);
    let start = tokens.len();
    let max_len = model.config.max_len.saturating_sub(2 * CLIP_FRAMES);
    for _ in 0..max_tokens {
        if tokens.len() >= max_len {
            break;
        }
        let logits = model.lm_logits(&mut g, &mut cx, Some(prefix), &tokens)?;
        let last = g.value(logits).row(tokens.len());
        let next = last
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap_or(EOS);
        if next == EOS {
            break;
        }
        tokens.push(next);
    }
    Ok(model.vocab.decode(&tokens[start..]))
}

/// Scores `items` against the clips they reference.
pub fn run_eval(state: &TrainState, items: &[EvalItem], clips: &[ClipPair], protocol: &EvalProtocol) -> Result<EvalReport> {
    if !state.lineage.contains(&StageId::Init) {
        return Err(Error::Lineage {
            stage: "eval".into(),
            missing: StageId::Init.as_str().into(),
        });
    }
    if items.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let by_id: BTreeMap<&str, &ClipPair> = clips.iter().map(|c| (c.id.as_str(), c)).collect();
    let guided = state.lineage.contains(&StageId::S2);
    let model = &state.model;

    let mut outcomes = Vec::with_capacity(items.len());
    let mut grouped: BTreeMap<EvalTask, Vec<&EvalItem>> = BTreeMap::new();
    let mut open_scores = Vec::new();
    let mut ranks: Vec<Vec<bool>> = Vec::new();
    let mut ndcgs = Vec::new();
    for item in items {
        item.validate()?;
        if item.task_type == EvalTask::Multilabel {
            return Err(Error::UnsupportedTask(item.task_type.as_str().into()));
        }
        let clip = by_id.get(item.clip_id.as_str()).ok_or_else(|| Error::InvalidItem {
            id: item.item_id.clone(),
            reason: format!("unknown clip `{}`", item.clip_id),
        })?;
        grouped.entry(item.task_type).or_default().push(item);
        let outcome = match item.task_type {
            EvalTask::Open => {
                let answer = generate_answer(model, clip, guided, &item.question, protocol.max_answer_tokens)?;
                let (acc, score) = score_open(&answer, item.gold());
                open_scores.push((acc, score));
                ItemOutcome {
                    item_id: item.item_id.clone(),
                    task_type: item.task_type,
                    predicted: None,
                    correct: acc == 1,
                    answer: Some(answer),
                }
            }
            _ => {
                let losses = candidate_losses(model, clip, guided, item)?;
                if losses.iter().any(|l| !l.is_finite()) {
                    return Err(Error::NonFinite(format!("candidate losses of {}", item.item_id)));
                }
                let predicted = argmin(&losses).unwrap();
                if item.task_type == EvalTask::Retrieval {
                    let mut order: Vec<usize> = (0..losses.len()).collect();
                    order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
                    let flags: Vec<bool> = order.iter().map(|&i| i == item.gold_index).collect();
                    let gains: Vec<f64> = flags.iter().map(|&f| f64::from(u8::from(f))).collect();
                    let mut ideal = gains.clone();
                    ideal.sort_by(|a, b| b.total_cmp(a));
                    ndcgs.push(ndcg(&gains, &ideal)?);
                    ranks.push(flags);
                }
                ItemOutcome {
                    item_id: item.item_id.clone(),
                    task_type: item.task_type,
                    predicted: Some(predicted),
                    correct: predicted == item.gold_index,
                    answer: None,
                }
            }
        };
        outcomes.push(outcome);
    }

    let predictions: BTreeMap<String, usize> = outcomes
        .iter()
        .filter_map(|o| Some((o.item_id.clone(), o.predicted?)))
        .collect();
    let mut tasks = BTreeMap::new();
    for (task, its) in &grouped {
        let owned: Vec<EvalItem> = its.iter().map(|&i| i.clone()).collect();
        let mut m = TaskMetrics {
            items: its.len(),
            ..TaskMetrics::default()
        };
        match task {
            EvalTask::Mcq => m.accuracy = Some(score_mcq(&predictions, &owned)?),
            EvalTask::Open => {
                let n = open_scores.len() as f64;
                m.accuracy = Some(open_scores.iter().map(|s| f64::from(s.0)).sum::<f64>() / n);
                m.open_score = Some(open_scores.iter().map(|s| s.1).sum::<f64>() / n);
            }
            EvalTask::Retrieval => {
                m.map = Some(mean_ap(&ranks)?);
                m.ndcg = Some(ndcgs.iter().sum::<f64>() / ndcgs.len() as f64);
            }
            EvalTask::Multilabel => unreachable!("rejected above"),
        }
        tasks.insert(*task, m);
    }
    let heads: Vec<f64> = tasks.values().filter_map(TaskMetrics::primary).collect();
    Ok(EvalReport {
        protocol: protocol.name.clone(),
        config_hash: state.config_hash.clone(),
        lineage: state.lineage.clone(),
        aggregate: heads.iter().sum::<f64>() / heads.len() as f64,
        tasks,
        outcomes,
    })
}
