//! Procedural stand-in for synchronized egocentric/exocentric recordings.
//!
//! An episode is a short program of `(time, verb, object)` steps performed by
//! an agent on an `N × N` grid. Two renderers turn it into frames:
//!
//! * **gridworld**: exocentric cameras see the full occupancy grid (one per
//!   rotation of the grid), the egocentric view is a `(2r+1) × (2r+1)` crop
//!   centred on the agent.
//! * **linear**: every frame is a fixed linear image of the per-frame latent
//!   state, `ego_t = M_ego z_t` and `exo_t = M_exo z_t`, so the exact
//!   cross-view map `T* = M_exo M_ego⁻¹` is known.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::s;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::arrayfile::{self, DType};
use crate::autograd::Mat;
use crate::corpus::{
    self, ClipInterval, CorpusManifest, GroupManifest, NarrationEntry, NarrationTrack, Split,
};
use crate::error::{Error, Result};

/// Frames per clip after sampling.
pub const CLIP_FRAMES: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verb {
    Pick,
    Put,
    Open,
    Close,
    Wash,
    Cut,
}

impl Verb {
    pub const ALL: [Verb; 6] = [
        Verb::Pick,
        Verb::Put,
        Verb::Open,
        Verb::Close,
        Verb::Wash,
        Verb::Cut,
    ];

    pub fn phrase(self) -> &'static str {
        match self {
            Verb::Pick => "picks up",
            Verb::Put => "puts down",
            Verb::Open => "opens",
            Verb::Close => "closes",
            Verb::Wash => "washes",
            Verb::Cut => "cuts",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Object {
    Cup,
    Bowl,
    Knife,
    Drawer,
    Egg,
    Pan,
    Plate,
    Lid,
}

impl Object {
    pub const ALL: [Object; 8] = [
        Object::Cup,
        Object::Bowl,
        Object::Knife,
        Object::Drawer,
        Object::Egg,
        Object::Pan,
        Object::Plate,
        Object::Lid,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Object::Cup => "cup",
            Object::Bowl => "bowl",
            Object::Knife => "knife",
            Object::Drawer => "drawer",
            Object::Egg => "egg",
            Object::Pan => "pan",
            Object::Plate => "plate",
            Object::Lid => "lid",
        }
    }
}

/// Narration sentence for one program step.
pub fn narration_text(verb: Verb, object: Object) -> String {
    format!("C {} the {}", verb.phrase(), object.word())
}

/// Every sentence the narrator can produce.
pub fn all_narrations() -> Vec<String> {
    Verb::ALL
        .iter()
        .flat_map(|&v| Object::ALL.iter().map(move |&o| narration_text(v, o)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderMode {
    Gridworld,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub mode: RenderMode,
    /// seed for the per-world fixed quantities (view matrices)
    pub world_seed: u64,
    pub grid_size: usize,
    pub ego_radius: usize,
    pub n_objects: usize,
    pub n_actions: usize,
    pub duration_s: f64,
    pub fps: f64,
    pub latent_dim: usize,
    pub n_exo: usize,
    pub gap_min_s: f64,
    pub gap_max_s: f64,
    /// an action is visible within this distance of its timestamp
    pub action_window_s: f64,
    pub latent_noise: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            mode: RenderMode::Gridworld,
            world_seed: 17,
            grid_size: 7,
            ego_radius: 2,
            n_objects: 6,
            n_actions: 6,
            duration_s: 16.0,
            fps: 4.0,
            latent_dim: 16,
            n_exo: 4,
            gap_min_s: 1.5,
            gap_max_s: 2.5,
            action_window_s: 1.0,
            latent_noise: 0.05,
        }
    }
}

impl WorldConfig {
    pub fn linear() -> Self {
        Self {
            mode: RenderMode::Linear,
            ..Self::default()
        }
    }

    pub fn raw_frame_count(&self) -> usize {
        (self.duration_s * self.fps).round() as usize
    }

    fn channels(&self) -> usize {
        1 + Object::ALL.len() + Verb::ALL.len()
    }

    /// Semantic part of the latent: verb code, object code, agent position.
    fn semantic_dim() -> usize {
        Verb::ALL.len() + Object::ALL.len() + 2
    }

    pub fn ego_dim(&self) -> usize {
        match self.mode {
            RenderMode::Linear => self.latent_dim,
            RenderMode::Gridworld => (2 * self.ego_radius + 1).pow(2) * self.channels(),
        }
    }

    pub fn exo_dim(&self) -> usize {
        match self.mode {
            RenderMode::Linear => self.latent_dim,
            RenderMode::Gridworld => self.grid_size.pow(2) * self.channels(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InfeasibleConfig(m));
        if self.grid_size == 0 || self.fps <= 0.0 || self.duration_s <= 0.0 {
            return bad("grid size, fps and duration must be positive".into());
        }
        if self.n_objects == 0 || self.n_objects > Object::ALL.len() {
            return bad(format!("n_objects must be in 1..={}", Object::ALL.len()));
        }
        if self.n_objects + 1 > self.grid_size * self.grid_size {
            return bad(format!(
                "{} objects plus the agent do not fit on a {}x{} grid",
                self.n_objects, self.grid_size, self.grid_size
            ));
        }
        if self.n_actions == 0 {
            return bad("n_actions must be positive".into());
        }
        if !(0.0 < self.gap_min_s && self.gap_min_s <= self.gap_max_s) {
            return bad("require 0 < gap_min_s <= gap_max_s".into());
        }
        let span = 1.5 + (self.n_actions - 1) as f64 * self.gap_max_s;
        if span > self.duration_s - 0.5 {
            return bad(format!(
                "{} actions need up to {span} s but the episode lasts {} s",
                self.n_actions, self.duration_s
            ));
        }
        if self.latent_dim < Self::semantic_dim() {
            return bad(format!("latent_dim must be at least {}", Self::semantic_dim()));
        }
        if !(1..=5).contains(&self.n_exo) {
            return bad("n_exo must be in 1..=5".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgramStep {
    pub t: f64,
    pub verb: Verb,
    pub object: Object,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub id: String,
    pub seed: u64,
    pub program: Vec<ProgramStep>,
    pub duration_s: f64,
    pub fps: f64,
    /// `(frames, latent_dim)`
    pub latent_states: Mat,
    pub objects: Vec<(Object, (usize, usize))>,
    pub agent_path: Vec<(usize, usize)>,
}

impl Episode {
    fn frame_time(&self, k: usize) -> f64 {
        k as f64 / self.fps
    }

    /// Index of the program step visible at time `t`, if any.
    fn active_step(&self, t: f64, window: f64) -> Option<usize> {
        self.program
            .iter()
            .enumerate()
            .map(|(i, s)| (i, (s.t - t).abs()))
            .filter(|&(_, d)| d <= window)
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
    }

    fn object_cell(&self, o: Object) -> (usize, usize) {
        self.objects
            .iter()
            .find(|(obj, _)| *obj == o)
            .map(|(_, c)| *c)
            .expect("program only references placed objects")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Ego,
    Exo,
}

impl View {
    pub fn as_str(self) -> &'static str {
        match self {
            View::Ego => "ego",
            View::Exo => "exo",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameSeq {
    /// `(T, view_dim)`
    pub frames: Mat,
    pub timestamps: Vec<f64>,
    pub fps: f64,
    pub view: View,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipPair {
    pub id: String,
    pub episode_id: String,
    pub interval: ClipInterval,
    pub ego: FrameSeq,
    pub exo: Vec<FrameSeq>,
    pub text: String,
}

fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    g.qr().q()
}

fn to_mat(m: &DMatrix<f64>) -> Mat {
    Mat::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

fn to_dmatrix(m: &Mat) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

/// Fixed per-world quantities.
#[derive(Clone, Debug)]
pub struct World {
    pub config: WorldConfig,
    m_ego: Option<Mat>,
    m_exo: Vec<Mat>,
}

impl World {
    pub fn new(config: WorldConfig) -> Result<Self> {
        config.validate()?;
        let (m_ego, m_exo) = match config.mode {
            RenderMode::Gridworld => (None, Vec::new()),
            RenderMode::Linear => {
                let mut rng = ChaCha8Rng::seed_from_u64(config.world_seed);
                let n = config.latent_dim;
                // well-conditioned: singular values in [0.6, 1.4]
                let draw = |rng: &mut ChaCha8Rng| {
                    let u = random_orthogonal(n, rng);
                    let v = random_orthogonal(n, rng);
                    let sv = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(n, |_, _| {
                        rng.random_range(0.6..1.4)
                    }));
                    to_mat(&(u * sv * v.transpose()))
                };
                let ego = draw(&mut rng);
                let exo = (0..config.n_exo).map(|_| draw(&mut rng)).collect();
                (Some(ego), exo)
            }
        };
        Ok(Self {
            config,
            m_ego,
            m_exo,
        })
    }

    /// `T* = M_exo · M_ego⁻¹` for an exocentric camera (linear mode only).
    pub fn ground_truth_map(&self, camera: usize) -> Option<Mat> {
        let m_ego = self.m_ego.as_ref()?;
        let inv = to_dmatrix(m_ego).try_inverse()?;
        Some(to_mat(&(to_dmatrix(&self.m_exo[camera]) * inv)))
    }

    /// Digest of the linear view matrices; empty for gridworld.
    pub fn map_digest(&self) -> String {
        let Some(ego) = &self.m_ego else {
            return String::new();
        };
        let mut bytes = Vec::new();
        for m in std::iter::once(ego).chain(self.m_exo.iter()) {
            for x in m.iter() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        arrayfile::sha256_hex(&bytes)
    }

    pub fn gen_episode(&self, seed: u64) -> Result<Episode> {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let n = cfg.grid_size;

        let mut cells: Vec<(usize, usize)> =
            (0..n).flat_map(|r| (0..n).map(move |c| (r, c))).collect();
        cells.shuffle(&mut rng);
        let mut kinds = Object::ALL.to_vec();
        kinds.shuffle(&mut rng);
        let objects: Vec<(Object, (usize, usize))> = kinds
            .into_iter()
            .take(cfg.n_objects)
            .zip(cells.iter().copied())
            .collect();
        let start_cell = cells[cfg.n_objects];

        let mut program = Vec::with_capacity(cfg.n_actions);
        let mut t = rng.random_range(0.5..1.5);
        for _ in 0..cfg.n_actions {
            let verb = Verb::ALL[rng.random_range(0..Verb::ALL.len())];
            let object = objects[rng.random_range(0..objects.len())].0;
            program.push(ProgramStep { t, verb, object });
            t += rng.random_range(cfg.gap_min_s..=cfg.gap_max_s);
        }

        let frames = cfg.raw_frame_count();
        let mut ep = Episode {
            id: format!("ep{seed:06}"),
            seed,
            program,
            duration_s: cfg.duration_s,
            fps: cfg.fps,
            latent_states: Mat::zeros((frames, cfg.latent_dim)),
            objects,
            agent_path: Vec::with_capacity(frames),
        };

        // agent walks between the objects it acts on, arriving at each step time
        let mut waypoints = vec![(0.0, start_cell)];
        for s in &ep.program {
            waypoints.push((s.t, ep.object_cell(s.object)));
        }
        for k in 0..frames {
            let tk = ep.frame_time(k);
            let seg = waypoints.windows(2).find(|w| tk <= w[1].0);
            let cell = match seg {
                Some(w) => {
                    let (t0, a) = w[0];
                    let (t1, b) = w[1];
                    let f = ((tk - t0) / (t1 - t0)).clamp(0.0, 1.0);
                    let lerp = |x: usize, y: usize| (x as f64 + f * (y as f64 - x as f64)).round() as usize;
                    (lerp(a.0, b.0), lerp(a.1, b.1))
                }
                None => waypoints.last().unwrap().1,
            };
            ep.agent_path.push(cell);
        }

        let nv = Verb::ALL.len();
        let no = Object::ALL.len();
        let denom = (n.max(2) - 1) as f64;
        for k in 0..frames {
            let tk = ep.frame_time(k);
            let active = ep
                .active_step(tk, cfg.action_window_s)
                .map(|i| (ep.program[i].verb, ep.program[i].object));
            let (r, c) = ep.agent_path[k];
            let mut z = ep.latent_states.row_mut(k);
            if let Some((verb, object)) = active {
                z[verb as usize] = 1.0;
                z[nv + object as usize] = 1.0;
            }
            z[nv + no] = r as f64 / denom - 0.5;
            z[nv + no + 1] = c as f64 / denom - 0.5;
            for j in 0..cfg.latent_dim {
                let e: f64 = StandardNormal.sample(&mut rng);
                z[j] += cfg.latent_noise * e;
            }
        }
        Ok(ep)
    }

    fn grid_frame(&self, ep: &Episode, k: usize) -> ndarray::Array3<f64> {
        let cfg = &self.config;
        let n = cfg.grid_size;
        let nv = Verb::ALL.len();
        let no = Object::ALL.len();
        let mut g = ndarray::Array3::<f64>::zeros((n, n, cfg.channels()));
        let (ar, ac) = ep.agent_path[k];
        g[[ar, ac, 0]] = 1.0;
        for &(o, (r, c)) in &ep.objects {
            g[[r, c, 1 + o as usize]] = 1.0;
        }
        if let Some(i) = ep.active_step(ep.frame_time(k), cfg.action_window_s) {
            let s = &ep.program[i];
            let (r, c) = ep.object_cell(s.object);
            g[[r, c, 1 + no + s.verb as usize]] = 1.0;
        }
        debug_assert_eq!(cfg.channels(), 1 + no + nv);
        g
    }

    /// Rotates the grid by `camera` quarter turns; cameras 4+ also mirror it.
    fn camera_view(grid: &ndarray::Array3<f64>, camera: usize) -> ndarray::Array3<f64> {
        let n = grid.dim().0;
        let mut out = grid.clone();
        for (r, c) in (0..n).flat_map(|r| (0..n).map(move |c| (r, c))) {
            let (mut rr, mut cc) = (r, c);
            for _ in 0..(camera % 4) {
                (rr, cc) = (cc, n - 1 - rr);
            }
            if camera >= 4 {
                (rr, cc) = (cc, rr);
            }
            out.slice_mut(s![rr, cc, ..]).assign(&grid.slice(s![r, c, ..]));
        }
        out
    }

    pub fn render_exo(&self, ep: &Episode, camera: usize) -> FrameSeq {
        let cfg = &self.config;
        let frames = cfg.raw_frame_count();
        let mut out = Mat::zeros((frames, cfg.exo_dim()));
        for k in 0..frames {
            match cfg.mode {
                RenderMode::Linear => {
                    let v = self.m_exo[camera].dot(&ep.latent_states.row(k));
                    out.row_mut(k).assign(&v);
                }
                RenderMode::Gridworld => {
                    let g = Self::camera_view(&self.grid_frame(ep, k), camera);
                    out.row_mut(k).assign(&ndarray::Array1::from_iter(g.iter().copied()));
                }
            }
        }
        FrameSeq {
            frames: out,
            timestamps: (0..frames).map(|k| ep.frame_time(k)).collect(),
            fps: ep.fps,
            view: View::Exo,
        }
    }

    pub fn render_ego(&self, ep: &Episode) -> FrameSeq {
        let cfg = &self.config;
        let frames = cfg.raw_frame_count();
        let mut out = Mat::zeros((frames, cfg.ego_dim()));
        let rad = cfg.ego_radius as isize;
        let n = cfg.grid_size as isize;
        for k in 0..frames {
            match cfg.mode {
                RenderMode::Linear => {
                    let v = self.m_ego.as_ref().unwrap().dot(&ep.latent_states.row(k));
                    out.row_mut(k).assign(&v);
                }
                RenderMode::Gridworld => {
                    let g = self.grid_frame(ep, k);
                    let (ar, ac) = ep.agent_path[k];
                    let side = 2 * rad + 1;
                    let ch = cfg.channels();
                    let mut row = out.row_mut(k);
                    for dr in -rad..=rad {
                        for dc in -rad..=rad {
                            let (r, c) = (ar as isize + dr, ac as isize + dc);
                            if r < 0 || c < 0 || r >= n || c >= n {
                                continue;
                            }
                            let base = (((dr + rad) * side + (dc + rad)) as usize) * ch;
                            for q in 0..ch {
                                row[base + q] = g[[r as usize, c as usize, q]];
                            }
                        }
                    }
                }
            }
        }
        FrameSeq {
            frames: out,
            timestamps: (0..frames).map(|k| ep.frame_time(k)).collect(),
            fps: ep.fps,
            view: View::Ego,
        }
    }

    pub fn make_clip_pairs(&self, ep: &Episode, alpha: f64) -> Result<Vec<ClipPair>> {
        let track = narrate(ep)?;
        let expansion = corpus::expand_narrations(&track, alpha)?;
        let ego = self.render_ego(ep);
        let exo: Vec<FrameSeq> = (0..self.config.n_exo)
            .map(|c| self.render_exo(ep, c))
            .collect();
        Ok(expansion
            .clips
            .into_iter()
            .map(|interval| {
                let idx = clip_frame_indices(&interval, ep.fps, ego.frames.nrows());
                ClipPair {
                    id: format!("{}-c{:02}", ep.id, interval.index),
                    episode_id: ep.id.clone(),
                    ego: take_frames(&ego, &idx),
                    exo: exo.iter().map(|x| take_frames(x, &idx)).collect(),
                    text: interval.text.clone(),
                    interval,
                }
            })
            .collect())
    }
}

/// Narration track with one entry per program step.
pub fn narrate(ep: &Episode) -> Result<NarrationTrack> {
    if ep.program.is_empty() {
        return Err(Error::EmptyProgram);
    }
    Ok(NarrationTrack {
        video_id: ep.id.clone(),
        duration_s: ep.duration_s,
        entries: ep
            .program
            .iter()
            .map(|s| NarrationEntry {
                t: s.t,
                text: narration_text(s.verb, s.object),
            })
            .collect(),
        annotator_id: "synth".to_string(),
    })
}

/// Raw frame indices for a clip: the frames whose timestamps fall inside
/// the interval, resampled to [`CLIP_FRAMES`] positions with
/// `round_half_up(j · count / 16)`. Clips shorter than one frame period use
/// the nearest frame; short clips repeat frames.
pub fn clip_frame_indices(clip: &ClipInterval, fps: f64, total: usize) -> Vec<usize> {
    let last_frame = total.saturating_sub(1);
    let first = ((clip.start_s * fps - 1e-9).ceil().max(0.0) as usize).min(last_frame);
    let last = ((clip.end_s * fps + 1e-9).floor().max(0.0) as usize).min(last_frame);
    let (first, count) = if first > last {
        let mid = (0.5 * (clip.start_s + clip.end_s) * fps).round() as usize;
        (mid.min(last_frame), 1)
    } else {
        (first, last - first + 1)
    };
    (0..CLIP_FRAMES)
        .map(|j| {
            let pos = (j * count) as f64 / CLIP_FRAMES as f64;
            first + ((pos + 0.5).floor() as usize).min(count - 1)
        })
        .collect()
}

fn take_frames(seq: &FrameSeq, idx: &[usize]) -> FrameSeq {
    let mut frames = Mat::zeros((idx.len(), seq.frames.ncols()));
    for (row, &i) in idx.iter().enumerate() {
        frames.row_mut(row).assign(&seq.frames.row(i));
    }
    FrameSeq {
        frames,
        timestamps: idx.iter().map(|&i| seq.timestamps[i]).collect(),
        fps: seq.fps,
        view: seq.view,
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<ClipPair>,
    pub val: Vec<ClipPair>,
    pub test: Vec<ClipPair>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[ClipPair] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn split_of_episode(&self, episode_id: &str) -> Option<Split> {
        Split::ALL
            .into_iter()
            .find(|&s| self.get(s).iter().any(|p| p.episode_id == episode_id))
    }
}

/// Assigns whole episodes to train/val/test.
pub fn split_dataset(pairs: Vec<ClipPair>, ratios: [f64; 3], seed: u64) -> Result<Splits> {
    if ratios.iter().any(|r| *r < 0.0 || !r.is_finite()) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::InvalidRatios(ratios));
    }
    let mut episodes: Vec<String> = pairs
        .iter()
        .map(|p| p.episode_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    episodes.shuffle(&mut rng);
    let n = episodes.len();
    let n_train = ((ratios[0] * n as f64).round() as usize).min(n);
    let n_val = ((ratios[1] * n as f64).round() as usize).min(n - n_train);
    let assignment: BTreeMap<String, Split> = episodes
        .into_iter()
        .enumerate()
        .map(|(i, e)| {
            let s = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (e, s)
        })
        .collect();
    let mut out = Splits::default();
    for p in pairs {
        match assignment[&p.episode_id] {
            Split::Train => out.train.push(p),
            Split::Val => out.val.push(p),
            Split::Test => out.test.push(p),
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub world: WorldConfig,
    pub n_episodes: usize,
    pub seed: u64,
    pub split_ratios: [f64; 3],
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            n_episodes: 60,
            seed: 1,
            split_ratios: [0.8, 0.1, 0.1],
        }
    }
}

/// A generated corpus of clip pairs held in memory.
#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub config: DatasetConfig,
    pub alpha_s: f64,
    pub tracks: Vec<NarrationTrack>,
    pub splits: Splits,
    pub map_digest: String,
}

impl SynthDataset {
    pub fn generate(config: &DatasetConfig) -> Result<Self> {
        let world = World::new(config.world.clone())?;
        let episodes: Vec<Episode> = (0..config.n_episodes as u64)
            .map(|i| world.gen_episode(config.seed.wrapping_mul(1_000_003).wrapping_add(i)))
            .collect::<Result<_>>()?;
        let tracks: Vec<NarrationTrack> = episodes.iter().map(narrate).collect::<Result<_>>()?;
        let alpha = corpus::compute_alpha(&tracks)?;
        let mut pairs = Vec::new();
        for ep in &episodes {
            pairs.extend(world.make_clip_pairs(ep, alpha)?);
        }
        let splits = split_dataset(pairs, config.split_ratios, config.seed)?;
        Ok(Self {
            config: config.clone(),
            alpha_s: alpha,
            tracks,
            splits,
            map_digest: world.map_digest(),
        })
    }

    pub fn corpus_manifest(&self) -> Result<CorpusManifest> {
        let mut m = CorpusManifest::build("synthworld", &self.tracks, self.alpha_s)?;
        m.groups = self
            .tracks
            .iter()
            .map(|t| GroupManifest {
                group_id: t.video_id.clone(),
                ego_ref: format!("{}/ego", t.video_id),
                exo_refs: (0..self.config.world.n_exo)
                    .map(|k| format!("{}/exo{k}", t.video_id))
                    .collect(),
                tracks: vec![t.clone()],
                split: self.splits.split_of_episode(&t.video_id).unwrap_or(Split::Train),
                scenario: "kitchen".to_string(),
            })
            .collect();
        Ok(m)
    }

    /// Writes `manifest.json`, `pairs.json` and `frames/*.bin`; returns the
    /// dataset digest.
    pub fn save(&self, dir: &Path) -> Result<String> {
        let frames_dir = dir.join("frames");
        fs::create_dir_all(&frames_dir)?;
        let mut index = Vec::new();
        let mut hashes = Vec::new();
        for split in Split::ALL {
            for p in self.splits.get(split) {
                let mut write_view = |seq: &FrameSeq, name: String| -> Result<String> {
                    let mut meta = BTreeMap::new();
                    meta.insert("view".into(), serde_json::json!(seq.view.as_str()));
                    meta.insert("fps".into(), serde_json::json!(seq.fps));
                    meta.insert("timestamps".into(), serde_json::json!(seq.timestamps));
                    let h = arrayfile::write(&frames_dir.join(&name), &seq.frames, DType::F32, meta)?;
                    hashes.push(h);
                    Ok(format!("frames/{name}"))
                };
                let ego_file = write_view(&p.ego, format!("{}_ego.bin", p.id))?;
                let exo_files = p
                    .exo
                    .iter()
                    .enumerate()
                    .map(|(k, x)| write_view(x, format!("{}_exo{k}.bin", p.id)))
                    .collect::<Result<Vec<_>>>()?;
                index.push(PairRecord {
                    clip_id: p.id.clone(),
                    episode_id: p.episode_id.clone(),
                    split,
                    text: p.text.clone(),
                    interval: p.interval.clone(),
                    ego_file,
                    exo_files,
                });
            }
        }
        let mut manifest = self.corpus_manifest()?;
        let digest = arrayfile::sha256_hex(hashes.concat().as_bytes());
        manifest.config_hash = digest.clone();
        fs::write(dir.join("manifest.json"), manifest.to_json()?)?;
        let header = DatasetIndex {
            config: self.config.clone(),
            alpha_s: self.alpha_s,
            map_digest: self.map_digest.clone(),
            dataset_digest: digest.clone(),
            pairs: index,
        };
        fs::write(dir.join("pairs.json"), serde_json::to_string_pretty(&header)? + "\n")?;
        Ok(digest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index: DatasetIndex = serde_json::from_str(&fs::read_to_string(dir.join("pairs.json"))?)?;
        let manifest = CorpusManifest::from_json(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let load_view = |file: &str| -> Result<FrameSeq> {
            let (h, frames) = arrayfile::read(&dir.join(file))?;
            let view = match h.meta.get("view").and_then(|v| v.as_str()) {
                Some("ego") => View::Ego,
                _ => View::Exo,
            };
            let timestamps = h
                .meta
                .get("timestamps")
                .and_then(|v| serde_json::from_value(v.clone()).ok())
                .unwrap_or_default();
            let fps = h.meta.get("fps").and_then(|v| v.as_f64()).unwrap_or(index.config.world.fps);
            Ok(FrameSeq {
                frames,
                timestamps,
                fps,
                view,
            })
        };
        let mut splits = Splits::default();
        for r in &index.pairs {
            let pair = ClipPair {
                id: r.clip_id.clone(),
                episode_id: r.episode_id.clone(),
                interval: r.interval.clone(),
                ego: load_view(&r.ego_file)?,
                exo: r.exo_files.iter().map(|f| load_view(f)).collect::<Result<_>>()?,
                text: r.text.clone(),
            };
            match r.split {
                Split::Train => splits.train.push(pair),
                Split::Val => splits.val.push(pair),
                Split::Test => splits.test.push(pair),
            }
        }
        let tracks = manifest
            .groups
            .iter()
            .flat_map(|g| g.tracks.iter().cloned())
            .collect();
        Ok(Self {
            config: index.config,
            alpha_s: index.alpha_s,
            tracks,
            splits,
            map_digest: index.map_digest,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairRecord {
    pub clip_id: String,
    pub episode_id: String,
    pub split: Split,
    pub text: String,
    pub interval: ClipInterval,
    pub ego_file: String,
    pub exo_files: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub config: DatasetConfig,
    pub alpha_s: f64,
    pub map_digest: String,
    pub dataset_digest: String,
    pub pairs: Vec<PairRecord>,
}
