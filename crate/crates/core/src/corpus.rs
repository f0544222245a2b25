//! Clip-level corpus construction from timestamp-level narrations.
//!
//! A narration is a single timestamp with a sentence. Each one is widened
//! into a clip whose half-width is `β / (2α)`, where `β` is the video's mean
//! gap between consecutive narrations and `α` the corpus-wide mean of `β`.
//! Neighbouring timestamps (and the video bounds at the ends) clamp the clip
//! so that no clip spills over another narration.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_SCHEMA: &str = "exo2ego-corpus/1";

/// Serde adapter writing seconds as JSON decimals with at least six
/// fractional digits, while keeping the shortest round-trip representation.
pub mod decimal_secs {
    use serde::de::Deserialize;
    use serde::ser::{Error as _, Serialize};
    use serde::{Deserializer, Serializer};
    use serde_json::value::RawValue;

    pub fn format(v: f64) -> String {
        let mut s = format!("{v}");
        if !s.contains('.') {
            s.push('.');
        }
        let frac = s.len() - s.find('.').unwrap() - 1;
        for _ in frac..6 {
            s.push('0');
        }
        s
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if !v.is_finite() {
            return Err(S::Error::custom("non-finite timestamp"));
        }
        let raw = RawValue::from_string(format(*v)).map_err(S::Error::custom)?;
        raw.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        f64::deserialize(d)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NarrationEntry {
    #[serde(with = "decimal_secs")]
    pub t: f64,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NarrationTrack {
    pub video_id: String,
    #[serde(with = "decimal_secs")]
    pub duration_s: f64,
    pub entries: Vec<NarrationEntry>,
    pub annotator_id: String,
}

impl NarrationTrack {
    pub fn timestamps(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|e| e.t)
    }

    /// Checks ordering, bounds and text. Equal consecutive timestamps are
    /// tolerated here; expansion drops the duplicate.
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Error::InvalidTrack {
            video_id: self.video_id.clone(),
            reason,
        };
        if self.entries.is_empty() {
            return Err(Error::EmptyTrack);
        }
        if !(self.duration_s.is_finite() && self.duration_s >= 0.0) {
            return Err(fail(format!("duration {} is not a non-negative number", self.duration_s)));
        }
        let mut prev = f64::NEG_INFINITY;
        for (i, e) in self.entries.iter().enumerate() {
            if !(e.t.is_finite() && 0.0 <= e.t && e.t <= self.duration_s) {
                return Err(fail(format!("entry {i} at {} lies outside [0, {}]", e.t, self.duration_s)));
            }
            if e.t < prev {
                return Err(fail(format!("entry {i} at {} precedes {prev}", e.t)));
            }
            if e.text.trim().is_empty() {
                return Err(fail(format!("entry {i} has empty text")));
            }
            prev = e.t;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipInterval {
    pub index: usize,
    #[serde(with = "decimal_secs")]
    pub start_s: f64,
    #[serde(with = "decimal_secs")]
    pub end_s: f64,
    pub text: String,
    #[serde(with = "decimal_secs")]
    pub beta_s: f64,
}

impl ClipInterval {
    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }
}

/// Output of [`expand_narrations`].
#[derive(Clone, Debug, PartialEq)]
pub struct Expansion {
    pub clips: Vec<ClipInterval>,
    pub beta_s: f64,
    /// entries that produced a zero-length interval
    pub dropped: usize,
}

/// Mean gap between consecutive narration timestamps.
///
/// A single-entry track has no gap and returns `fallback` (the corpus `α`).
/// A track whose timestamps are all equal also falls back, since a clip
/// width of zero is never useful.
pub fn compute_beta(track: &NarrationTrack, fallback: f64) -> Result<f64> {
    let n = track.entries.len();
    if n == 0 {
        return Err(Error::EmptyTrack);
    }
    if n == 1 {
        return Ok(fallback);
    }
    let gaps: f64 = track
        .entries
        .windows(2)
        .map(|w| w[1].t - w[0].t)
        .sum();
    let beta = gaps / (n - 1) as f64;
    Ok(if beta > 0.0 { beta } else { fallback })
}

/// Mean per-video `β` over tracks with at least two entries.
pub fn compute_alpha(tracks: &[NarrationTrack]) -> Result<f64> {
    let betas: Vec<f64> = tracks
        .iter()
        .filter(|t| t.entries.len() >= 2)
        .map(|t| compute_beta(t, f64::NAN))
        .collect::<Result<_>>()?;
    let betas: Vec<f64> = betas.into_iter().filter(|b| b.is_finite()).collect();
    if betas.is_empty() {
        return Err(Error::NoQualifyingTrack);
    }
    Ok(betas.iter().sum::<f64>() / betas.len() as f64)
}

/// Widens every narration into a clip.
pub fn expand_narrations(track: &NarrationTrack, alpha: f64) -> Result<Expansion> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidAlpha(alpha));
    }
    track.validate()?;
    let beta = compute_beta(track, alpha)?;
    let half = beta / (2.0 * alpha);
    let ts: Vec<f64> = track.timestamps().collect();
    let last = ts.len() - 1;

    let mut clips = Vec::with_capacity(ts.len());
    let mut dropped = 0;
    for (i, e) in track.entries.iter().enumerate() {
        if i > 0 && ts[i] == ts[i - 1] {
            dropped += 1;
            continue;
        }
        let lower = if i == 0 { 0.0 } else { ts[i - 1] };
        let upper = if i == last { track.duration_s } else { ts[i + 1] };
        let start_s = (ts[i] - half).max(lower);
        let end_s = (ts[i] + half).min(upper);
        if end_s <= start_s {
            dropped += 1;
            continue;
        }
        clips.push(ClipInterval {
            index: i,
            start_s,
            end_s,
            text: e.text.clone(),
            beta_s: beta,
        });
    }
    Ok(Expansion {
        clips,
        beta_s: beta,
        dropped,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupManifest {
    pub group_id: String,
    pub ego_ref: String,
    pub exo_refs: Vec<String>,
    pub tracks: Vec<NarrationTrack>,
    pub split: Split,
    pub scenario: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RejectReason {
    #[serde(rename = "no-narration")]
    NoNarration,
    #[serde(rename = "bad-exo-count")]
    BadExoCount,
    #[serde(rename = "unresolved-ref")]
    UnresolvedRef,
    #[serde(rename = "held-out-split")]
    HeldOutSplit,
}

impl RejectReason {
    pub fn tag(self) -> &'static str {
        match self {
            RejectReason::NoNarration => "no-narration",
            RejectReason::BadExoCount => "bad-exo-count",
            RejectReason::UnresolvedRef => "unresolved-ref",
            RejectReason::HeldOutSplit => "held-out-split",
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct FilterRules {
    /// Known media references. `None` accepts any non-empty reference.
    pub known_refs: Option<BTreeSet<String>>,
    /// Splits usable for pre-training; defaults to train only.
    pub allowed_splits: Option<BTreeSet<Split>>,
}

impl FilterRules {
    fn resolves(&self, r: &str) -> bool {
        !r.is_empty() && self.known_refs.as_ref().is_none_or(|k| k.contains(r))
    }

    fn allows(&self, split: Split) -> bool {
        match &self.allowed_splits {
            Some(s) => s.contains(&split),
            None => split == Split::Train,
        }
    }

    fn first_failure(&self, g: &GroupManifest) -> Option<RejectReason> {
        let narrated = g
            .tracks
            .iter()
            .any(|t| !t.entries.is_empty());
        if !narrated {
            return Some(RejectReason::NoNarration);
        }
        if !(4..=5).contains(&g.exo_refs.len()) {
            return Some(RejectReason::BadExoCount);
        }
        if !self.resolves(&g.ego_ref) || !g.exo_refs.iter().all(|r| self.resolves(r)) {
            return Some(RejectReason::UnresolvedRef);
        }
        if !self.allows(g.split) {
            return Some(RejectReason::HeldOutSplit);
        }
        None
    }
}

pub fn filter_groups(
    groups: Vec<GroupManifest>,
    rules: &FilterRules,
) -> (Vec<GroupManifest>, Vec<(GroupManifest, RejectReason)>) {
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for g in groups {
        match rules.first_failure(&g) {
            None => kept.push(g),
            Some(r) => rejected.push((g, r)),
        }
    }
    (kept, rejected)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo_s: f64,
    pub hi_s: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub clip_count: usize,
    pub duration_mean_s: f64,
    pub duration_std_s: f64,
    pub pct_under_1s: f64,
    pub max_duration_s: f64,
    pub narration_word_mean: f64,
    pub narration_word_std: f64,
    pub histogram: Vec<HistogramBin>,
    pub std_convention: String,
}

pub const HISTOGRAM_BIN_S: f64 = 0.5;

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn corpus_stats(clips: &[ClipInterval], texts: &[String]) -> Result<StatsReport> {
    if clips.is_empty() {
        return Err(Error::EmptyInput("no clips"));
    }
    let durations: Vec<f64> = clips.iter().map(ClipInterval::duration).collect();
    let (mean, std) = mean_std(&durations);
    let under = durations.iter().filter(|&&d| d < 1.0).count();
    let max = durations.iter().cloned().fold(0.0, f64::max);
    let words: Vec<f64> = texts
        .iter()
        .map(|t| t.split_whitespace().count() as f64)
        .collect();
    let (wmean, wstd) = mean_std(&words);

    let nbins = ((max / HISTOGRAM_BIN_S).ceil() as usize).max(1);
    let mut histogram: Vec<HistogramBin> = (0..nbins)
        .map(|b| HistogramBin {
            lo_s: b as f64 * HISTOGRAM_BIN_S,
            hi_s: (b + 1) as f64 * HISTOGRAM_BIN_S,
            count: 0,
        })
        .collect();
    for d in &durations {
        let b = ((d / HISTOGRAM_BIN_S).floor() as usize).min(nbins - 1);
        histogram[b].count += 1;
    }

    Ok(StatsReport {
        clip_count: clips.len(),
        duration_mean_s: mean,
        duration_std_s: std,
        pct_under_1s: 100.0 * under as f64 / clips.len() as f64,
        max_duration_s: max,
        narration_word_mean: wmean,
        narration_word_std: wstd,
        histogram,
        std_convention: "population".to_string(),
    })
}

impl StatsReport {
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        s.push_str("| statistic | value |\n|---|---|\n");
        s.push_str(&format!("| clips | {} |\n", self.clip_count));
        s.push_str(&format!("| mean duration (s) | {:.4} |\n", self.duration_mean_s));
        s.push_str(&format!("| std duration (s, population) | {:.4} |\n", self.duration_std_s));
        s.push_str(&format!("| clips under 1.0 s (%) | {:.2} |\n", self.pct_under_1s));
        s.push_str(&format!("| max duration (s) | {:.4} |\n", self.max_duration_s));
        s.push_str(&format!("| narration words (mean) | {:.3} |\n", self.narration_word_mean));
        s.push_str(&format!("| narration words (std) | {:.3} |\n", self.narration_word_std));
        s.push_str("\n| duration bin (s) | clips |\n|---|---|\n");
        for b in &self.histogram {
            s.push_str(&format!("| [{:.1}, {:.1}) | {} |\n", b.lo_s, b.hi_s, b.count));
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskType {
    Recognition,
    Qa,
    Captioning,
}

/// Slot-filling template for an instruction bank. Every rendered
/// instruction is `"{opener} {body}"` followed by the answer clause when
/// one is set; `{dataset}` and `{task}` placeholders are substituted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstructionTemplate {
    pub dataset_name: String,
    pub task_type: TaskType,
    pub dataset_description: String,
    pub task_description: String,
    pub openers: Vec<String>,
    pub bodies: Vec<String>,
    pub answer_clause: Option<String>,
}

pub const RECOGNITION_ANSWER_CLAUSE: &str = "Answer with the number of the correct option.";

impl InstructionTemplate {
    pub fn default_for(task_type: TaskType, dataset_name: &str) -> Self {
        let openers = [
            "Watch the clip.",
            "Look at the video.",
            "Observe this egocentric clip.",
            "Study the footage.",
        ];
        let bodies: &[&str] = match task_type {
            TaskType::Captioning => &[
                "Describe what C does.",
                "Narrate the action of C.",
                "What is C doing?",
                "Summarize the {task}.",
            ],
            TaskType::Recognition => &[
                "Which action does C perform?",
                "Identify the {task}.",
                "Pick the action shown in the {dataset} clip.",
            ],
            TaskType::Qa => &[
                "Answer the question about the clip.",
                "Use the {dataset} video to answer.",
                "Respond to the {task}.",
            ],
        };
        let (task_description, answer_clause) = match task_type {
            TaskType::Captioning => ("activity", None),
            TaskType::Recognition => ("action", Some(RECOGNITION_ANSWER_CLAUSE.to_string())),
            TaskType::Qa => ("question", None),
        };
        Self {
            dataset_name: dataset_name.to_string(),
            task_type,
            dataset_description: format!("synthetic egocentric clips from {dataset_name}"),
            task_description: task_description.to_string(),
            openers: openers.iter().map(|s| s.to_string()).collect(),
            bodies: bodies.iter().map(|s| s.to_string()).collect(),
            answer_clause,
        }
    }

    fn fill(&self, s: &str) -> String {
        s.replace("{dataset}", &self.dataset_name)
            .replace("{task}", &self.task_description)
    }

    fn combinations(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for o in &self.openers {
            for b in &self.bodies {
                let mut s = format!("{} {}", self.fill(o), self.fill(b));
                if let Some(clause) = &self.answer_clause {
                    s.push(' ');
                    s.push_str(clause);
                }
                if seen.insert(s.clone()) {
                    out.push(s);
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstructionBank {
    pub dataset_name: String,
    pub task_type: TaskType,
    pub instructions: Vec<String>,
    pub template_seed: u64,
}

pub const INSTRUCTIONS_PER_BANK: usize = 10;

pub fn render_instructions(spec: &InstructionTemplate, seed: u64) -> Result<InstructionBank> {
    let mut combos = spec.combinations();
    if combos.len() < INSTRUCTIONS_PER_BANK {
        return Err(Error::TooFewInstructions(combos.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    combos.shuffle(&mut rng);
    combos.truncate(INSTRUCTIONS_PER_BANK);
    Ok(InstructionBank {
        dataset_name: spec.dataset_name.clone(),
        task_type: spec.task_type,
        instructions: combos,
        template_seed: seed,
    })
}

/// Expanded clips of one narration track.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackClips {
    pub video_id: String,
    pub annotator_id: String,
    #[serde(with = "decimal_secs")]
    pub beta_s: f64,
    pub dropped: usize,
    pub clips: Vec<ClipInterval>,
}

/// The schema-versioned corpus manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub schema: String,
    pub name: String,
    #[serde(with = "decimal_secs")]
    pub alpha_s: f64,
    pub tracks: Vec<TrackClips>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub groups: Vec<GroupManifest>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub instruction_banks: Vec<InstructionBank>,
    #[serde(default)]
    pub config_hash: String,
}

impl CorpusManifest {
    /// Expands each track independently; two annotators of one video yield
    /// two clip lists.
    pub fn build(name: &str, tracks: &[NarrationTrack], alpha: f64) -> Result<Self> {
        let mut out = Vec::with_capacity(tracks.len());
        for t in tracks {
            let e = expand_narrations(t, alpha)?;
            out.push(TrackClips {
                video_id: t.video_id.clone(),
                annotator_id: t.annotator_id.clone(),
                beta_s: e.beta_s,
                dropped: e.dropped,
                clips: e.clips,
            });
        }
        Ok(Self {
            schema: MANIFEST_SCHEMA.to_string(),
            name: name.to_string(),
            alpha_s: alpha,
            tracks: out,
            groups: Vec::new(),
            instruction_banks: Vec::new(),
            config_hash: String::new(),
        })
    }

    pub fn clip_count(&self) -> usize {
        self.tracks.iter().map(|t| t.clips.len()).sum()
    }

    pub fn all_clips(&self) -> impl Iterator<Item = &ClipInterval> {
        self.tracks.iter().flat_map(|t| t.clips.iter())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        if m.schema != MANIFEST_SCHEMA {
            return Err(Error::Unknown {
                kind: "manifest schema",
                value: m.schema,
            });
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn track(ts: &[f64], duration: f64) -> NarrationTrack {
        NarrationTrack {
            video_id: "v".into(),
            duration_s: duration,
            entries: ts
                .iter()
                .enumerate()
                .map(|(i, &t)| NarrationEntry {
                    t,
                    text: format!("C does thing {i}"),
                })
                .collect(),
            annotator_id: "a0".into(),
        }
    }

    #[test]
    fn beta_is_mean_gap() {
        assert_eq!(compute_beta(&track(&[10.0, 12.0, 16.0], 20.0), 1.92).unwrap(), 3.0);
        assert!((compute_beta(&track(&[5.0, 6.92], 20.0), 0.5).unwrap() - 1.92).abs() < 1e-12);
        assert_eq!(compute_beta(&track(&[7.3], 20.0), 1.92).unwrap(), 1.92);
    }

    #[test]
    fn beta_rejects_empty_track() {
        let err = compute_beta(&track(&[], 1.0), 1.0).unwrap_err();
        assert_eq!(err.to_string(), "empty narration track");
    }

    #[test]
    fn alpha_averages_qualifying_tracks() {
        let a = track(&[0.0, 2.0, 4.0], 10.0);
        let b = track(&[0.0, 4.0], 10.0);
        let single = track(&[1.0], 10.0);
        assert_eq!(compute_alpha(&[a.clone(), b, single.clone()]).unwrap(), 3.0);
        assert!((compute_alpha(&[track(&[0.0, 1.92], 5.0)]).unwrap() - 1.92).abs() < 1e-12);
        assert!(matches!(compute_alpha(&[single]), Err(Error::NoQualifyingTrack)));
    }

    #[test]
    fn worked_expansion() {
        let e = expand_narrations(&track(&[10.0, 12.0, 16.0], 20.0), 1.92).unwrap();
        let got: Vec<(f64, f64)> = e.clips.iter().map(|c| (c.start_s, c.end_s)).collect();
        let want = [(9.21875, 10.78125), (11.21875, 12.78125), (15.21875, 16.78125)];
        for (g, w) in got.iter().zip(want) {
            assert!((g.0 - w.0).abs() < 1e-9 && (g.1 - w.1).abs() < 1e-9, "{g:?} vs {w:?}");
        }
        assert_eq!(e.dropped, 0);
    }

    #[test]
    fn wide_clips_truncate_at_neighbours() {
        // β = 1, α = 0.25 → half-width 2
        let e = expand_narrations(&track(&[0.0, 1.0], 2.5), 0.25).unwrap();
        assert_eq!((e.clips[0].start_s, e.clips[0].end_s), (0.0, 1.0));
        assert_eq!((e.clips[1].start_s, e.clips[1].end_s), (0.0, 2.5));
    }

    #[test]
    fn duplicate_timestamps_drop_one_clip() {
        let e = expand_narrations(&track(&[3.0, 3.0], 10.0), 1.92).unwrap();
        assert_eq!(e.clips.len(), 1);
        assert_eq!(e.dropped, 1);
        assert!(e.clips[0].duration() > 0.0);
    }

    #[test]
    fn non_positive_alpha_is_rejected() {
        assert!(matches!(
            expand_narrations(&track(&[1.0, 2.0], 3.0), 0.0),
            Err(Error::InvalidAlpha(_))
        ));
    }

    fn group(id: &str, tracks: usize, exo: usize, split: Split) -> GroupManifest {
        GroupManifest {
            group_id: id.into(),
            ego_ref: format!("{id}/ego"),
            exo_refs: (0..exo).map(|k| format!("{id}/exo{k}")).collect(),
            tracks: (0..tracks).map(|_| track(&[1.0, 2.0], 3.0)).collect(),
            split,
            scenario: "cooking".into(),
        }
    }

    #[test]
    fn filter_reports_first_failing_reason() {
        let groups = vec![
            group("ok", 1, 4, Split::Train),
            group("silent", 0, 4, Split::Test),
            group("heldout", 2, 5, Split::Test),
            group("few", 1, 3, Split::Train),
        ];
        let (kept, rejected) = filter_groups(groups, &FilterRules::default());
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].group_id, "ok");
        let reasons: Vec<_> = rejected.iter().map(|(g, r)| (g.group_id.as_str(), r.tag())).collect();
        assert_eq!(
            reasons,
            [("silent", "no-narration"), ("heldout", "held-out-split"), ("few", "bad-exo-count")]
        );
    }

    #[test]
    fn filter_checks_reference_resolution() {
        let rules = FilterRules {
            known_refs: Some(["g/ego".to_string()].into_iter().collect()),
            allowed_splits: None,
        };
        let (kept, rejected) = filter_groups(vec![group("g", 1, 4, Split::Train)], &rules);
        assert!(kept.is_empty());
        assert_eq!(rejected[0].1, RejectReason::UnresolvedRef);
    }

    fn clip(d: f64) -> ClipInterval {
        ClipInterval {
            index: 0,
            start_s: 1.0,
            end_s: 1.0 + d,
            text: "x".into(),
            beta_s: 1.0,
        }
    }

    #[test]
    fn stats_match_hand_arithmetic() {
        let r = corpus_stats(&[clip(0.5), clip(1.5)], &["a b".into(), "a b c d".into()]).unwrap();
        assert!((r.duration_mean_s - 1.0).abs() < 1e-12);
        assert!((r.duration_std_s - 0.5).abs() < 1e-12);
        assert_eq!(r.pct_under_1s, 50.0);
        assert_eq!(r.narration_word_mean, 3.0);
        assert_eq!(r.histogram.iter().map(|b| b.count).sum::<usize>(), 2);

        let one = corpus_stats(&[clip(0.68)], &[]).unwrap();
        assert!((one.duration_mean_s - 0.68).abs() < 1e-12);
        assert_eq!(one.duration_std_s, 0.0);
        assert_eq!(one.pct_under_1s, 100.0);
        assert!(corpus_stats(&[], &[]).is_err());
    }

    #[test]
    fn exactly_one_second_is_not_under_one_second() {
        let r = corpus_stats(&[clip(1.0)], &[]).unwrap();
        assert_eq!(r.pct_under_1s, 0.0);
    }

    #[test]
    fn instruction_banks_are_deterministic_and_distinct() {
        let spec = InstructionTemplate::default_for(TaskType::Captioning, "toy");
        let a = render_instructions(&spec, 7).unwrap();
        let b = render_instructions(&spec, 7).unwrap();
        let c = render_instructions(&spec, 8).unwrap();
        assert_eq!(a, b);
        for bank in [&a, &c] {
            let distinct: BTreeSet<_> = bank.instructions.iter().collect();
            assert_eq!(distinct.len(), INSTRUCTIONS_PER_BANK);
        }
    }

    #[test]
    fn recognition_instructions_carry_answer_clause() {
        let spec = InstructionTemplate::default_for(TaskType::Recognition, "toy");
        let bank = render_instructions(&spec, 3).unwrap();
        assert!(bank
            .instructions
            .iter()
            .all(|s| s.ends_with(RECOGNITION_ANSWER_CLAUSE)));
    }

    #[test]
    fn too_few_combinations_is_an_error() {
        let mut spec = InstructionTemplate::default_for(TaskType::Qa, "toy");
        spec.openers.truncate(3);
        assert!(matches!(
            render_instructions(&spec, 0),
            Err(Error::TooFewInstructions(9))
        ));
    }

    #[test]
    fn timestamps_keep_six_fractional_digits() {
        assert_eq!(decimal_secs::format(9.21875), "9.218750");
        assert_eq!(decimal_secs::format(12.0), "12.000000");
        assert_eq!(decimal_secs::format(0.1 + 0.2), "0.30000000000000004");
        let m = CorpusManifest::build("c", &[track(&[10.0, 12.0, 16.0], 20.0)], 1.92).unwrap();
        let json = m.to_json().unwrap();
        assert!(json.contains("\"start_s\": 9.218750"));
        assert_eq!(CorpusManifest::from_json(&json).unwrap(), m);
    }
}
