//! Command-line front end: corpus construction, synthesis, staged training,
//! evaluation and reporting, each writing into its own directory.

pub mod commands;
pub mod config;
pub mod plot;
pub mod report;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use exo2ego::synthworld::RenderMode;
use exo2ego::trainer::{Ablation, StageId};

use crate::commands::{EvalArgs, TrainArgs};
use crate::config::{write_json, OUT_ENV};

#[derive(Debug, Parser)]
#[command(name = "exo2ego", version, about = "Exocentric-to-egocentric transfer at desk scale")]
pub struct Cli {
    /// Root for default output locations
    #[arg(long, global = true, env = OUT_ENV, default_value = "runs")]
    pub out_root: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Mode {
    Gridworld,
    Linear,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Expand narration tracks (*.json in a directory) into a clip manifest
    BuildClips {
        input: PathBuf,
        /// Output directory [default: <out-root>/corpus]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Corpus-wide alpha in seconds; computed from the tracks if absent
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, default_value = "corpus")]
        name: String,
    },
    /// Print clip statistics of a corpus manifest
    Stats {
        manifest: PathBuf,
        /// Also write the statistics as JSON here
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Generate a synthetic paired-view dataset
    Synth {
        /// Output directory [default: <out-root>/data]
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "gridworld")]
        mode: Mode,
        #[arg(long, default_value_t = 60)]
        episodes: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Train/val/test shares
        #[arg(long, value_parser = parse_split)]
        split: Option<[f64; 3]>,
        /// Dataset config as JSON; replaces --mode, --episodes, --seed and --split
        #[arg(long)]
        config: Option<PathBuf>,
        /// Replace an existing dataset in the output directory
        #[arg(long)]
        force: bool,
    },
    /// Run one training stage
    Train {
        /// init, s1, s2 or s3
        #[arg(long, value_parser = parse_stage)]
        stage: StageId,
        /// fwd-only-ccl, no-ccl, no-kl, fc-mapping, exo-trainable or frozen-encoder-s3
        #[arg(long, value_parser = parse_ablation)]
        ablation: Option<Ablation>,
        /// Run even if the prerequisite stage is missing (recorded)
        #[arg(long)]
        allow_skip: bool,
        /// Start from this checkpoint instead of the run's previous stage
        #[arg(long)]
        from: Option<PathBuf>,
        /// Run directory [default: <out-root>/run]
        #[arg(long)]
        run: Option<PathBuf>,
        /// Dataset directory [default: <out-root>/data]
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run config JSON, fixed on the run's first command
        #[arg(long)]
        config: Option<PathBuf>,
        /// Retrain a stage that already has a report
        #[arg(long)]
        force: bool,
    },
    /// Score a stage checkpoint on the evaluation items
    Eval {
        /// Stage directory name, e.g. s3 or s2-no-kl
        #[arg(long)]
        stage: String,
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Items as JSON lines instead of building them from the dataset
        #[arg(long)]
        items: Option<PathBuf>,
    },
    /// Tables (and optional plots) from finished runs
    Report {
        /// Run directories [default: <out-root>/run]
        runs: Vec<PathBuf>,
        /// Output directory [default: <first run>/report]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write SVG plots
        #[arg(long)]
        plots: bool,
    },
}

fn parse_stage(s: &str) -> Result<StageId, String> {
    s.parse().map_err(|e: exo2ego::Error| e.to_string())
}

fn parse_split(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s.split(',').map(|x| x.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    <[f64; 3]>::try_from(v).map_err(|_| "expected three comma-separated shares, e.g. 0.8,0.1,0.1".to_string())
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: exo2ego::Error| e.to_string())
}

/// Exit code for a failed command: 2 when an internal invariant broke,
/// 1 for everything the user can fix.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use exo2ego::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::FreezeViolated(_)
                | E::FreezeUncovered(_)
                | E::Shape(_)
                | E::MissingLossInput(_)
                | E::MissingParameter(_)
                | E::NonFiniteGradient(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

fn default_dir(explicit: Option<PathBuf>, root: &Path, name: &str) -> PathBuf {
    explicit.unwrap_or_else(|| root.join(name))
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let root = cli.out_root;
    match cli.command {
        Command::BuildClips { input, out: dir, alpha, name } => {
            let dir = default_dir(dir, &root, "corpus");
            let s = commands::build_clips(&input, &dir, &name, alpha)?;
            writeln!(
                out,
                "{} tracks, {} clips ({} dropped), alpha {:.6} s -> {}",
                s.tracks,
                s.clips,
                s.dropped,
                s.alpha_s,
                dir.join("manifest.json").display()
            )?;
        }
        Command::Stats { manifest, json } => {
            let stats = commands::manifest_stats(&commands::load_manifest(&manifest)?)?;
            write!(out, "{}", stats.to_markdown())?;
            if let Some(p) = json {
                write_json(&p, &stats)?;
            }
        }
        Command::Synth { out: dir, mode, episodes, seed, split, config, force } => {
            let dir = default_dir(dir, &root, "data");
            let cfg = match config {
                Some(p) => {
                    let text = fs::read_to_string(&p)?;
                    serde_json::from_str(&text)
                        .map_err(|e| anyhow::anyhow!("{}:{}:{}: {e}", p.display(), e.line(), e.column()))?
                }
                None => {
                    let mode = match mode {
                        Mode::Gridworld => RenderMode::Gridworld,
                        Mode::Linear => RenderMode::Linear,
                    };
                    let mut c = commands::dataset_config(mode, episodes, seed);
                    if let Some(s) = split {
                        c.split_ratios = s;
                    }
                    c
                }
            };
            let s = commands::synth(&dir, &cfg, force)?;
            writeln!(
                out,
                "dataset {} (train {}, val {}, test {}) -> {}",
                s.dataset_digest,
                s.pairs["train"],
                s.pairs["val"],
                s.pairs["test"],
                dir.display()
            )?;
            if let Some(m) = &s.map_digest {
                writeln!(out, "ground-truth map {m}")?;
            }
        }
        Command::Train { stage, ablation, allow_skip, from, run, data, config, force } => {
            let run = default_dir(run, &root, "run");
            let data = default_dir(data, &root, "data");
            let o = commands::train(&TrainArgs {
                run: &run,
                data: &data,
                stage,
                ablation,
                allow_skip,
                from: from.as_deref(),
                config: config.as_deref(),
                force,
            })?;
            let r = &o.report;
            let (lead, trail) = r.leading_trailing();
            let lineage: Vec<&str> = r.lineage.iter().map(|s| s.as_str()).collect();
            writeln!(
                out,
                "{}: {} steps, loss {lead:.4} -> {trail:.4}, lineage [{}], config {}",
                commands::stage_dir_name(stage, ablation),
                r.steps,
                lineage.join(", "),
                o.config_hash
            )?;
            for s in &o.skipped {
                writeln!(out, "warning: {s}")?;
            }
        }
        Command::Eval { stage, run, data, checkpoint, items } => {
            let run = default_dir(run, &root, "run");
            let data = default_dir(data, &root, "data");
            let r = commands::eval(&EvalArgs {
                run: &run,
                data: &data,
                stage: &stage,
                checkpoint: checkpoint.as_deref(),
                items: items.as_deref(),
            })?;
            write!(out, "{}", r.report.to_markdown())?;
            for (task, n) in r.skipped.iter().filter(|(_, n)| **n > 0) {
                writeln!(out, "note: {n} {} clips skipped, distractor pool too small", task.as_str())?;
            }
        }
        Command::Report { runs, out: dir, plots } => {
            let runs = if runs.is_empty() { vec![root.join("run")] } else { runs };
            let dir = dir.unwrap_or_else(|| runs[0].join("report"));
            let rep = report::build(&runs, &dir, plots)?;
            fs::create_dir_all(&dir)?;
            fs::write(dir.join("report.md"), rep.to_markdown())?;
            write_json(&dir.join("report.json"), &rep)?;
            write!(out, "{}", rep.to_markdown())?;
        }
    }
    Ok(())
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = if code == 0 { write!(out, "{e}") } else { write!(err, "{e}") };
            return code;
        }
    };
    match run(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            exit_code(&e)
        }
    }
}
