use std::fs;
use std::path::{Path, PathBuf};

use exo2ego::corpus::{expand_narrations, NarrationEntry, NarrationTrack};
use exo2ego::trainer::{StageId, StageOverrides};
use exo2ego_cli::config::{RunConfig, RunLock};
use exo2ego_cli::main_with;

struct Out {
    code: i32,
    stdout: String,
    stderr: String,
}

fn cli(root: &Path, args: &[&str]) -> Out {
    let mut argv = vec!["exo2ego".to_string(), "--out-root".to_string(), root.display().to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    let (mut o, mut e) = (Vec::new(), Vec::new());
    let code = main_with(argv, &mut o, &mut e);
    Out {
        code,
        stdout: String::from_utf8(o).unwrap(),
        stderr: String::from_utf8(e).unwrap(),
    }
}

fn ok(root: &Path, args: &[&str]) -> String {
    let o = cli(root, args);
    assert_eq!(o.code, 0, "{args:?} failed: {}", o.stderr);
    o.stdout
}

fn track(id: &str, ts: &[f64]) -> NarrationTrack {
    NarrationTrack {
        video_id: id.into(),
        duration_s: ts.last().unwrap() + 2.0,
        entries: ts
            .iter()
            .enumerate()
            .map(|(i, &t)| NarrationEntry {
                t,
                text: format!("C does thing {i}"),
            })
            .collect(),
        annotator_id: "a1".into(),
    }
}

#[test]
fn build_clips_counts_and_is_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("tracks");
    fs::create_dir_all(&input).unwrap();
    let a = track("v1", &[10.0, 12.0, 16.0]);
    let b = track("v2", &[1.0, 1.0, 2.5, 4.0, 9.0]);
    fs::write(input.join("a.json"), serde_json::to_string_pretty(&a).unwrap()).unwrap();
    fs::write(input.join("b.json"), serde_json::to_string_pretty(&vec![b.clone()]).unwrap()).unwrap();

    let out1 = tmp.path().join("c1");
    let out2 = tmp.path().join("c2");
    ok(tmp.path(), &["build-clips", input.to_str().unwrap(), "--out", out1.to_str().unwrap(), "--alpha", "1.92"]);
    ok(tmp.path(), &["build-clips", input.to_str().unwrap(), "--out", out2.to_str().unwrap(), "--alpha", "1.92"]);
    let m1 = fs::read(out1.join("manifest.json")).unwrap();
    assert_eq!(m1, fs::read(out2.join("manifest.json")).unwrap());
    assert!(out1.join("stats.md").exists());

    let manifest: serde_json::Value = serde_json::from_slice(&m1).unwrap();
    let clips: usize = manifest["tracks"].as_array().unwrap().iter().map(|t| t["clips"].as_array().unwrap().len()).sum();
    let want = expand_narrations(&a, 1.92).unwrap().clips.len() + expand_narrations(&b, 1.92).unwrap().clips.len();
    assert_eq!(clips, want);
    assert_eq!(clips, 7);

    let stats = ok(tmp.path(), &["stats", out1.join("manifest.json").to_str().unwrap()]);
    assert!(stats.contains('7'), "{stats}");
}

#[test]
fn build_clips_reports_bad_input() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let o = cli(tmp.path(), &["build-clips", empty.to_str().unwrap()]);
    assert_eq!(o.code, 1);
    assert!(o.stderr.contains("no tracks found"), "{}", o.stderr);

    let bad = tmp.path().join("bad");
    fs::create_dir_all(&bad).unwrap();
    fs::write(bad.join("t.json"), "{\n  \"video_id\": \"v\",\n  \"duration_s\": oops\n}\n").unwrap();
    let o = cli(tmp.path(), &["build-clips", bad.to_str().unwrap()]);
    assert_eq!(o.code, 1);
    assert!(o.stderr.contains("t.json:3:"), "{}", o.stderr);
}

#[test]
fn argument_errors_and_help() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(cli(tmp.path(), &["train", "--stage", "s9"]).code, 1);
    assert_eq!(cli(tmp.path(), &["frobnicate"]).code, 1);
    let help = cli(tmp.path(), &["--help"]);
    assert_eq!(help.code, 0);
    assert!(help.stdout.contains("build-clips"));
}

#[test]
fn synth_is_deterministic_and_guarded() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let first = ok(root, &["synth", "--episodes", "4"]);
    for f in ["manifest.json", "pairs.json", "synth.json"] {
        assert!(root.join("data").join(f).exists(), "{f}");
    }
    let o = cli(root, &["synth", "--episodes", "4"]);
    assert_eq!(o.code, 1);
    assert!(o.stderr.contains("--force"));
    let again = ok(root, &["synth", "--episodes", "4", "--force"]);
    assert_eq!(first, again);

    let lin = ok(root, &["synth", "--episodes", "4", "--mode", "linear", "--out", root.join("lin").to_str().unwrap()]);
    assert!(lin.contains("ground-truth map"));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(root.join("lin/synth.json")).unwrap()).unwrap();
    assert_eq!(summary["map_digest"].as_str().unwrap().len(), 64);
}

/// Small config so that each stage takes a moment.
fn quick_config(dir: &Path) -> PathBuf {
    let mut cfg = RunConfig::default();
    cfg.pretrain.steps = 20;
    for s in StageId::ALL {
        cfg.stages.insert(
            s,
            StageOverrides {
                epochs: Some(1),
                ..StageOverrides::default()
            },
        );
    }
    let p = dir.join("quick.json");
    fs::write(&p, serde_json::to_string(&cfg).unwrap()).unwrap();
    p
}

#[test]
fn staged_training_eval_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    ok(root, &["synth", "--episodes", "10", "--split", "0.4,0.1,0.5"]);
    let cfg = quick_config(root);
    let c = cfg.to_str().unwrap();

    let o = cli(root, &["train", "--stage", "s2", "--config", c]);
    assert_eq!(o.code, 1);
    assert!(o.stderr.contains("requires completed stage s1"), "{}", o.stderr);

    ok(root, &["train", "--stage", "init", "--config", c]);
    let s1 = ok(root, &["train", "--stage", "s1"]);
    assert!(s1.contains("lineage [init, s1]"), "{s1}");
    ok(root, &["train", "--stage", "s2"]);
    ok(root, &["train", "--stage", "s3"]);
    let o = cli(root, &["train", "--stage", "s3"]);
    assert_eq!(o.code, 1, "retraining needs --force");

    ok(root, &["train", "--stage", "s2", "--ablation", "fwd-only-ccl"]);
    let log = fs::read_to_string(root.join("run/stages/s2-fwd-only-ccl/log.jsonl")).unwrap();
    let mut lines = log.lines();
    let head: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
    assert_eq!(head["ablation"], "fwd-only-ccl");
    let hash = head["config_hash"].as_str().unwrap().to_string();
    for l in lines {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert_eq!(v["w_ccl_backward"], 0.0);
    }
    ok(root, &["train", "--stage", "s2", "--ablation", "no-kl"]);

    // a different config on an existing run is refused
    let mut other = RunConfig::default();
    other.seed = 9;
    let other_path = root.join("other.json");
    fs::write(&other_path, serde_json::to_string(&other).unwrap()).unwrap();
    let o = cli(root, &["train", "--stage", "s1", "--force", "--config", other_path.to_str().unwrap()]);
    assert_eq!(o.code, 1);

    let ev = ok(root, &["eval", "--stage", "s3"]);
    assert!(ev.contains("mcq"), "{ev}");
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(root.join("run/eval/s3/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["config_hash"], hash.as_str());
    assert_eq!(metrics["lineage"], serde_json::json!(["init", "s1", "s2", "s3"]));

    let rep1 = ok(root, &["report", "--plots"]);
    let md1 = fs::read(root.join("run/report/report.md")).unwrap();
    assert!(rep1.contains("| metric | init | s1 | s2 | s3 |"), "{rep1}");
    assert!(rep1.contains("| fwd-only-ccl | s2 |") && rep1.contains("| no-kl | s2 |"));
    assert!(rep1.contains("| none | s2 |"));
    assert!(root.join("run/report/plots/run_s2_cycle.svg").exists());
    ok(root, &["report", "--plots"]);
    assert_eq!(md1, fs::read(root.join("run/report/report.md")).unwrap());

    // damage the s3 checkpoint
    let ckpt = root.join("run/stages/s3/checkpoint/params");
    let victim = fs::read_dir(&ckpt).unwrap().next().unwrap().unwrap().path();
    let mut bytes = fs::read(&victim).unwrap();
    let n = bytes.len();
    bytes[n - 1] ^= 0xff;
    fs::write(&victim, bytes).unwrap();
    let o = cli(root, &["eval", "--stage", "s3"]);
    assert_ne!(o.code, 0);
    assert!(o.stderr.contains("hash mismatch"), "{}", o.stderr);
}

#[test]
fn skipping_is_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    ok(root, &["synth", "--episodes", "4"]);
    let cfg = quick_config(root);
    let out = ok(root, &["train", "--stage", "s1", "--allow-skip", "--config", cfg.to_str().unwrap()]);
    assert!(out.contains("warning: s1 without init"), "{out}");
    let manifest: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(root.join("run/stages/s1/checkpoint/manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["skipped"], serde_json::json!(["s1 without init"]));
}

#[test]
fn locked_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let _held = RunLock::acquire(&root.join("data")).unwrap();
    let o = cli(root, &["synth", "--episodes", "4", "--force"]);
    assert_eq!(o.code, 1);
    assert!(o.stderr.contains("locked"), "{}", o.stderr);
}

#[test]
fn report_without_logs_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let o = cli(tmp.path(), &["report", tmp.path().to_str().unwrap()]);
    assert_eq!(o.code, 1);
    assert!(o.stderr.contains("no training logs"));
}

#[test]
fn binary_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_exo2ego");
    let st = std::process::Command::new(bin)
        .args(["report", tmp.path().to_str().unwrap()])
        .env("EXO2EGO_OUT", tmp.path())
        .output()
        .unwrap();
    assert_eq!(st.status.code(), Some(1));
    let st = std::process::Command::new(bin).arg("--version").output().unwrap();
    assert_eq!(st.status.code(), Some(0));
}
