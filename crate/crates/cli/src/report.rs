//! Tables and plots assembled from the artifacts of finished runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use exo2ego::evalharness::{EvalReport, EvalTask};
use exo2ego::trainer::{decile_means, Ablation, StageId, TrainReport};
use serde::Serialize;

use crate::commands::StageOutput;
use crate::plot;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Table {
    pub title: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(title: &str, header: Vec<String>) -> Self {
        Self {
            title: title.to_string(),
            header,
            rows: Vec::new(),
        }
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("### {}\n\n| {} |\n", self.title, self.header.join(" | "));
        let align: Vec<&str> = (0..self.header.len()).map(|i| if i == 0 { "---" } else { "---:" }).collect();
        let _ = writeln!(s, "| {} |", align.join(" | "));
        for r in &self.rows {
            let _ = writeln!(s, "| {} |", r.join(" | "));
        }
        s
    }
}

/// One stage directory: `s2` or `s2-<ablation>`.
#[derive(Clone, Debug)]
struct StageRun {
    name: String,
    stage: StageId,
    ablation: Option<Ablation>,
    output: StageOutput,
}

#[derive(Clone, Debug)]
struct RunArtifacts {
    label: String,
    config_hash: String,
    stages: Vec<StageRun>,
    evals: Vec<(String, EvalReport)>,
}

fn order_key(stage: StageId, ablation: Option<Ablation>) -> (usize, Option<Ablation>) {
    (StageId::ALL.iter().position(|s| *s == stage).unwrap_or(0), ablation)
}

fn parse_name(name: &str) -> Option<(StageId, Option<Ablation>)> {
    let (s, rest) = match name.split_once('-') {
        Some((s, rest)) => (s, Some(rest)),
        None => (name, None),
    };
    let stage = s.parse().ok()?;
    let ablation = match rest {
        Some(r) => Some(r.parse().ok()?),
        None => None,
    };
    Some((stage, ablation))
}

fn subdirs(dir: &Path) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map(|d| d.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect())
        .unwrap_or_default();
    out.sort();
    out
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("malformed {}", path.display()))
}

fn load_run(dir: &Path) -> Result<RunArtifacts> {
    let mut stages = Vec::new();
    for d in subdirs(&dir.join("stages")) {
        let name = d.file_name().unwrap().to_string_lossy().into_owned();
        let Some((stage, ablation)) = parse_name(&name) else {
            continue;
        };
        let report = d.join("report.json");
        if !report.exists() {
            continue;
        }
        stages.push(StageRun {
            name,
            stage,
            ablation,
            output: read_json(&report)?,
        });
    }
    stages.sort_by_key(|s| order_key(s.stage, s.ablation));
    let mut evals = Vec::new();
    for d in subdirs(&dir.join("eval")) {
        let metrics = d.join("metrics.json");
        if metrics.exists() {
            let name = d.file_name().unwrap().to_string_lossy().into_owned();
            evals.push((name, read_json::<EvalReport>(&metrics)?));
        }
    }
    evals.sort_by_key(|(n, _)| parse_name(n).map(|(s, a)| order_key(s, a)));
    let config_hash = stages
        .first()
        .map(|s| s.output.config_hash.clone())
        .or_else(|| evals.first().map(|e| e.1.config_hash.clone()))
        .unwrap_or_default();
    let label = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Ok(RunArtifacts {
        label,
        config_hash,
        stages,
        evals,
    })
}

fn f4(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else {
        "–".to_string()
    }
}

fn opt4(v: Option<f64>) -> String {
    v.map(f4).unwrap_or_else(|| "–".to_string())
}

fn trailing(r: &TrainReport, part: impl Fn(&exo2ego::trainer::StepRecord) -> f64) -> f64 {
    decile_means(&r.records.iter().map(part).collect::<Vec<_>>()).1
}

/// Per-stage losses in the metric × stage layout.
fn stage_table(run: &RunArtifacts) -> Table {
    let base: Vec<&StageRun> = run.stages.iter().filter(|s| s.ablation.is_none()).collect();
    let mut header = vec!["metric".to_string()];
    header.extend(base.iter().map(|s| s.name.clone()));
    let mut t = Table::new("Training stages", header);
    type Row<'a> = (&'a str, Box<dyn Fn(&TrainReport) -> String>);
    let rows: Vec<Row> = vec![
        ("steps", Box::new(|r| r.steps.to_string())),
        ("trainable params", Box::new(|r| r.trainable_params.to_string())),
        ("frozen params", Box::new(|r| r.frozen_params.to_string())),
        ("loss, first 10%", Box::new(|r| f4(r.leading_trailing().0))),
        ("loss, last 10%", Box::new(|r| f4(r.leading_trailing().1))),
        ("vtg, last 10%", Box::new(|r| f4(trailing(r, |x| x.vtg)))),
        ("ccl forward, last 10%", Box::new(|r| f4(trailing(r, |x| x.ccl_forward)))),
        ("ccl backward, last 10%", Box::new(|r| f4(trailing(r, |x| x.ccl_backward)))),
        ("kl, last 10%", Box::new(|r| f4(trailing(r, |x| x.kl)))),
        ("probe cycle, before", Box::new(|r| opt4(r.probe_before.map(|p| p.cycle())))),
        ("probe cycle, after", Box::new(|r| opt4(r.final_eval.map(|p| p.cycle())))),
        ("probe kl, after", Box::new(|r| opt4(r.final_eval.map(|p| p.kl)))),
        ("probe top-1, after", Box::new(|r| opt4(r.final_eval.map(|p| p.retrieval_top1)))),
        ("frozen set unchanged", Box::new(|r| (r.frozen_digest_before == r.frozen_digest_after).to_string())),
    ];
    for (label, f) in rows {
        let mut row = vec![label.to_string()];
        row.extend(base.iter().map(|s| f(&s.output.report)));
        t.rows.push(row);
    }
    t
}

/// Evaluation metrics in the metric × stage layout.
fn eval_table(run: &RunArtifacts) -> Table {
    let mut header = vec!["metric".to_string()];
    header.extend(run.evals.iter().map(|(n, _)| n.clone()));
    let mut t = Table::new("Evaluation by stage", header);
    let tasks: Vec<EvalTask> = {
        let mut v: Vec<EvalTask> = run.evals.iter().flat_map(|(_, r)| r.tasks.keys().copied()).collect();
        v.sort();
        v.dedup();
        v
    };
    for task in tasks {
        let metrics: [(&str, fn(&exo2ego::evalharness::TaskMetrics) -> Option<f64>); 4] = [
            ("accuracy", |m| m.accuracy),
            ("score", |m| m.open_score),
            ("mAP", |m| m.map),
            ("nDCG", |m| m.ndcg),
        ];
        for (name, get) in metrics {
            let cells: Vec<Option<f64>> = run.evals.iter().map(|(_, r)| r.tasks.get(&task).and_then(get)).collect();
            if cells.iter().all(Option::is_none) {
                continue;
            }
            let mut row = vec![format!("{} {name}", task.as_str())];
            row.extend(cells.into_iter().map(opt4));
            t.rows.push(row);
        }
    }
    let mut row = vec!["aggregate".to_string()];
    row.extend(run.evals.iter().map(|(_, r)| f4(r.aggregate)));
    t.rows.push(row);
    t
}

/// One row per preset, next to the unablated run of the same stage.
fn ablation_table(run: &RunArtifacts) -> Option<Table> {
    let ablated: Vec<&StageRun> = run.stages.iter().filter(|s| s.ablation.is_some()).collect();
    if ablated.is_empty() {
        return None;
    }
    let header = ["preset", "stage", "loss, last 10%", "probe cycle", "probe kl", "probe top-1", "eval aggregate"];
    let mut t = Table::new("Ablations", header.iter().map(|s| s.to_string()).collect());
    let evals: BTreeMap<&str, &EvalReport> = run.evals.iter().map(|(n, r)| (n.as_str(), r)).collect();
    let mut stages: Vec<StageId> = ablated.iter().map(|s| s.stage).collect();
    stages.dedup();
    for stage in stages {
        for s in run.stages.iter().filter(|s| s.stage == stage) {
            let r = &s.output.report;
            t.rows.push(vec![
                s.ablation.map_or("none".to_string(), |a| a.to_string()),
                stage.to_string(),
                f4(r.leading_trailing().1),
                opt4(r.final_eval.map(|p| p.cycle())),
                opt4(r.final_eval.map(|p| p.kl)),
                opt4(r.final_eval.map(|p| p.retrieval_top1)),
                opt4(evals.get(s.name.as_str()).map(|e| e.aggregate)),
            ]);
        }
    }
    Some(t)
}

#[derive(Debug, Serialize)]
pub struct RunSection {
    pub run: String,
    pub config_hash: String,
    pub tables: Vec<Table>,
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub runs: Vec<RunSection>,
    pub plots: Vec<String>,
}

impl Report {
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("# Exo2Ego report\n");
        for r in &self.runs {
            let _ = write!(s, "\n## Run `{}`\n\nconfig: `{}`\n\n", r.run, r.config_hash);
            for t in &r.tables {
                s.push_str(&t.to_markdown());
                s.push('\n');
            }
        }
        if !self.plots.is_empty() {
            s.push_str("## Plots\n\n");
            for p in &self.plots {
                let _ = writeln!(s, "- [{p}]({p})");
            }
        }
        s
    }
}

/// Builds the report; with `plots` set, also writes SVG figures into
/// `out/plots`.
pub fn build(runs: &[PathBuf], out: &Path, plots: bool) -> Result<Report> {
    let mut sections = Vec::new();
    let mut figures = Vec::new();
    for dir in runs {
        let run = load_run(dir)?;
        if run.stages.is_empty() && run.evals.is_empty() {
            continue;
        }
        let mut tables = Vec::new();
        if !run.stages.is_empty() {
            tables.push(stage_table(&run));
        }
        if !run.evals.is_empty() {
            tables.push(eval_table(&run));
        }
        tables.extend(ablation_table(&run));
        if plots {
            figures.extend(write_plots(&run, &out.join("plots"))?);
        }
        sections.push(RunSection {
            run: run.label,
            config_hash: run.config_hash,
            tables,
        });
    }
    if sections.is_empty() {
        let list: Vec<String> = runs.iter().map(|p| p.display().to_string()).collect();
        bail!("no training logs or metrics found in {}", list.join(", "));
    }
    Ok(Report {
        runs: sections,
        plots: figures,
    })
}

fn write_plots(run: &RunArtifacts, dir: &Path) -> Result<Vec<String>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let tag = format!("<desc>config {}</desc>\n</svg>\n", run.config_hash);
    let mut save = |name: String, svg: String| -> Result<()> {
        fs::write(dir.join(&name), svg.replacen("</svg>\n", &tag, 1))?;
        written.push(format!("plots/{name}"));
        Ok(())
    };
    for s in &run.stages {
        let total: Vec<f64> = s.output.report.records.iter().map(|r| r.total).collect();
        save(
            format!("{}_{}_loss.svg", run.label, s.name),
            plot::line_chart(&format!("{} loss", s.name), &[("total", &total)]),
        )?;
        if s.stage == StageId::S2 {
            let fwd: Vec<f64> = s.output.report.records.iter().map(|r| r.ccl_forward).collect();
            let bwd: Vec<f64> = s.output.report.records.iter().map(|r| r.ccl_backward).collect();
            save(
                format!("{}_{}_cycle.svg", run.label, s.name),
                plot::line_chart(&format!("{} cycle error", s.name), &[("forward", &fwd), ("backward", &bwd)]),
            )?;
        }
    }
    if !run.evals.is_empty() {
        let axes: Vec<String> = {
            let mut v: Vec<EvalTask> = run.evals.iter().flat_map(|(_, r)| r.tasks.keys().copied()).collect();
            v.sort();
            v.dedup();
            v.iter().map(|t| t.as_str().to_string()).collect()
        };
        let series: Vec<(String, Vec<f64>)> = run
            .evals
            .iter()
            .map(|(n, r)| {
                let vals = axes
                    .iter()
                    .map(|a| {
                        r.tasks
                            .iter()
                            .find(|(t, _)| t.as_str() == a)
                            .and_then(|(_, m)| m.primary().or(m.open_score.map(|s| s / 5.0)))
                            .unwrap_or(0.0)
                    })
                    .collect();
                (n.clone(), vals)
            })
            .collect();
        save(format!("{}_radar.svg", run.label), plot::radar_chart("Evaluation", &axes, &series))?;
    }
    Ok(written)
}
