//! End-to-end runs of the `pcll` binary on a tiny generated stream.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pcll::experiment::{dist_from_dump, read_scores, read_serialized, run_dir, AggregateRow, EvalRow, ReportRow};
use tempfile::TempDir;

/// Keeps runs to a second or two.
const SMALL: &str = r#"
[replay]
epochs = 1
batch_size = 8

[model]
n_layers = 1
d_model = 16
d_ff = 32
z_dim = 4
latent_hidden = 8
"#;

fn pcll(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcll"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = pcll(args);
    assert!(
        out.status.success(),
        "pcll {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    /// Two synthetic tasks, 40 samples each, plus a small-model config.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        ok(&["gen-data", "--out", s(&data), "--tasks", "2", "--per-task", "40"]);
        fs::write(dir.path().join("small.toml"), SMALL).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn manifest(&self) -> PathBuf {
        self.path("data/manifest.toml")
    }

    fn run(&self, out: &str, extra: &[&str]) -> PathBuf {
        let out = self.path(out);
        let (cfg, manifest) = (self.path("small.toml"), self.manifest());
        let mut args = vec!["run", "--config", s(&cfg), "--manifest", s(&manifest), "--out", s(&out)];
        args.extend_from_slice(extra);
        ok(&args);
        out
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_writes_the_documented_layout() {
    let fx = Fixture::new();
    let out = fx.run("out", &["--strategy", "finetune", "--seeds", "1"]);
    let run = run_dir(&out, 0, 1);
    for f in ["R.csv", "report.csv", "loss_log.csv", "pseudo.csv", "replay_stats.csv"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    for i in 1..=2 {
        assert!(run.join(format!("checkpoints/task_{i}.json")).is_file());
    }
    assert!(out.join("aggregate.csv").is_file() && out.join("config.toml").is_file());
    let r = read_scores(&run).unwrap();
    assert_eq!(r.rows().len(), 2);
    assert!(r.rows().iter().all(|row| row.len() == 2));
}

#[test]
fn aggregate_matches_per_run_reports() {
    let fx = Fixture::new();
    let out = fx.run("out", &["--seeds", "1,2"]);
    let mut scores = Vec::new();
    for seed in [1, 2] {
        let report: Vec<ReportRow> = read_serialized(&run_dir(&out, 0, seed).join("report.csv")).unwrap();
        let score = report.iter().find(|r| r.metric == "score").unwrap().value;
        let last = read_scores(&run_dir(&out, 0, seed)).unwrap().rows().last().unwrap().clone();
        assert!((score - last.iter().sum::<f64>() / last.len() as f64).abs() < 1e-12);
        scores.push(score);
    }
    let agg: Vec<AggregateRow> = read_serialized(&out.join("aggregate.csv")).unwrap();
    let overall = agg.iter().find(|r| r.order == "all").unwrap();
    assert!((overall.score - (scores[0] + scores[1]) / 2.0).abs() < 1e-12);

    // Different seeds train differently.
    let log = |seed| fs::read(run_dir(&out, 0, seed).join("loss_log.csv")).unwrap();
    assert_ne!(log(1), log(2));
}

#[test]
fn generate_dumps_and_reports_dist() {
    let fx = Fixture::new();
    let out = fx.run("out", &["--seeds", "3"]);
    let ck = run_dir(&out, 0, 3).join("checkpoints/task_2.json");
    let (ck, task) = (s(&ck).to_string(), {
        let r = read_scores(&run_dir(&out, 0, 3)).unwrap();
        r.tasks()[0].clone()
    });

    let empty = fx.path("empty.csv");
    ok(&["generate", "--checkpoint", &ck, "--task", &task, "--count", "0", "--out", s(&empty)]);
    assert_eq!(fs::read_to_string(&empty).unwrap().lines().count(), 1);

    let dump = fx.path("pseudo.csv");
    let stdout = ok(&["generate", "--checkpoint", &ck, "--task", &task, "--count", "25", "--out", s(&dump)]);
    assert!(stdout.contains("/25 accepted"));
    let dist: Vec<pcll::experiment::DistRow> = read_serialized(&fx.path("pseudo.csv.dist.csv")).unwrap();
    let recomputed = dist_from_dump(&dump).unwrap();
    assert_eq!(dist.iter().map(|d| d.dist).collect::<Vec<_>>(), recomputed);

    let bad = pcll(&["generate", "--checkpoint", &ck, "--task", "nope", "--out", s(&dump)]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("unknown task"));
}

#[test]
fn eval_reproduces_the_final_row() {
    let fx = Fixture::new();
    let out = fx.run("out", &["--seeds", "4"]);
    let run = run_dir(&out, 0, 4);
    let csv = fx.path("eval.csv");
    let (ck, manifest) = (run.join("checkpoints/task_2.json"), fx.manifest());
    ok(&["eval", "--checkpoint", s(&ck), "--manifest", s(&manifest), "--out", s(&csv)]);
    let rows: Vec<EvalRow> = read_serialized(&csv).unwrap();
    let r = read_scores(&run).unwrap();
    let last = r.rows().last().unwrap();
    for (row, (name, want)) in rows.iter().zip(r.tasks().iter().zip(last)) {
        assert_eq!(&row.task, name);
        assert!((row.score - want).abs() < 1e-9, "{name}: {} vs {want}", row.score);
    }
}

#[test]
fn bad_inputs_are_reported() {
    let fx = Fixture::new();
    let missing = pcll(&["run", "--manifest", s(&fx.path("nowhere.toml")), "--out", s(&fx.path("x"))]);
    assert!(!missing.status.success());

    // A task whose file has no test records.
    let data = fx.path("data");
    let first = fs::read_dir(&data)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "jsonl"))
        .unwrap();
    let kept: Vec<String> = fs::read_to_string(&first)
        .unwrap()
        .lines()
        .filter(|l| !l.contains("\"split\":\"test\""))
        .map(str::to_string)
        .collect();
    fs::write(&first, kept.join("\n")).unwrap();
    let empty = pcll(&["run", "--manifest", s(&fx.manifest()), "--out", s(&fx.path("y"))]);
    assert!(!empty.status.success());
    assert!(String::from_utf8_lossy(&empty.stderr).contains("test"));
}

#[test]
fn existing_output_needs_force() {
    let fx = Fixture::new();
    let out = fx.run("out", &["--strategy", "finetune", "--seeds", "1"]);
    let (cfg, manifest) = (fx.path("small.toml"), fx.manifest());
    let base = ["run", "--config", s(&cfg), "--manifest", s(&manifest), "--out", s(&out)];
    let again = pcll(&[&base[..], &["--strategy", "finetune", "--seeds", "1"]].concat());
    assert!(!again.status.success());
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    ok(&[&base[..], &["--strategy", "finetune", "--seeds", "1", "--force"]].concat());
}
