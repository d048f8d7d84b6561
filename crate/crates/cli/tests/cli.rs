use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn partseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_partseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = partseg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    partseg(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Self { dir: TempDir::new().unwrap() };
        ok(&["gen-data", "--categories", "4", "--samples", "6", "--size", "24", "--out", s(&ws.data())]);
        std::fs::write(
            ws.path("small.json"),
            r#"{
  "eval_episodes": 6,
  "model": {
    "n_specific": 2,
    "n_shared": 2,
    "encoder": {"channels": 8, "base_width": 4, "token_dim": 6, "n_text": 2, "text_hidden": 12, "context_limit": 8}
  },
  "optim": {"max_steps": 6}
}"#,
        )
        .unwrap();
        ws
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn data(&self) -> PathBuf {
        self.path("data")
    }

    fn train(&self, out: &str, extra: &[&str]) {
        let config = self.path("small.json");
        let data = self.data();
        let out = self.path(out);
        let mut args = vec!["train", "--config", s(&config), "--dataset", s(&data), "--out", s(&out)];
        args.extend_from_slice(extra);
        ok(&args);
    }
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn help_lists_every_command() {
    let help = ok(&["--help"]);
    for c in ["gen-data", "train", "eval", "ablate", "sweep-m", "xdomain", "plot"] {
        assert!(help.contains(c), "{c} missing from help");
    }
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&["train", "--no-such-flag"]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("d");
    assert_eq!(code(&["gen-data", "--categories", "2", "--out", s(&out)]), 2);
}

#[test]
fn gen_data_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for p in [&a, &b] {
        ok(&["gen-data", "--categories", "3", "--samples", "3", "--size", "16", "--seed", "5", "--out", s(p)]);
    }
    for f in ["manifest.json", "splits.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
    }
}

#[test]
fn data_errors_exit_with_three() {
    let ws = Workspace::new();
    let empty = ws.path("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let out = ws.path("run");
    assert_eq!(code(&["train", "--dataset", s(&empty), "--steps", "1", "--out", s(&out)]), 3);
    let missing = ws.path("nope.bin");
    assert_eq!(code(&["eval", "--ckpt", s(&missing), "--out", s(&out)]), 3);
}

#[test]
fn config_errors_exit_with_two_and_leave_a_failure_record() {
    let ws = Workspace::new();
    let out = ws.path("bad");
    let config = ws.path("small.json");
    let data = ws.data();
    let args = ["train", "--config", s(&config), "--dataset", s(&data), "--momentum", "1.5", "--out", s(&out)];
    assert_eq!(code(&args), 2);
    let failure = json(&out.join("failure.json"));
    assert_eq!(failure["exit_code"], 2);
    assert!(failure["error"].as_str().unwrap().contains("momentum"));
    let bogus = ws.path("bogus.json");
    std::fs::write(&bogus, r#"{"not_a_field": 1}"#).unwrap();
    assert_eq!(code(&["train", "--config", s(&bogus), "--out", s(&out)]), 2);
}

#[test]
fn train_eval_resume_and_plot() {
    let ws = Workspace::new();
    ws.train("run", &["--eval-every", "3"]);
    let run = ws.path("run");
    for f in ["checkpoint.bin", "metrics.jsonl", "config.resolved.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 6);
    assert_eq!(metrics.matches("eval_miou").count(), 2);

    let eval_out = ws.path("eval");
    ok(&["eval", "--ckpt", s(&run), "--episodes", "5", "--out", s(&eval_out)]);
    let report = json(&eval_out.join("eval_report.json"));
    assert_eq!(report["episode_ids"].as_array().unwrap().len(), 5);
    assert!(eval_out.join("config.resolved.json").is_file());
    let again = ws.path("eval2");
    ok(&["eval", "--ckpt", s(&run), "--episodes", "5", "--out", s(&again)]);
    assert_eq!(
        std::fs::read(eval_out.join("eval_report.json")).unwrap(),
        std::fs::read(again.join("eval_report.json")).unwrap()
    );

    // Stopping at 3 and resuming to 6 lands on the same checkpoint.
    ws.train("half", &["--eval-every", "3", "--stop-after", "3"]);
    let half = ws.path("half");
    let partial = std::fs::read_to_string(half.join("metrics.jsonl")).unwrap();
    assert_eq!(partial.lines().count(), 3);
    ok(&["train", "--resume", s(&half), "--out", s(&half)]);
    assert_eq!(std::fs::read_to_string(half.join("metrics.jsonl")).unwrap(), metrics);
    assert_eq!(
        std::fs::read(half.join("checkpoint.bin")).unwrap(),
        std::fs::read(run.join("checkpoint.bin")).unwrap()
    );

    let plots = ws.path("plots");
    let first_episode = report["episode_ids"][0].as_str().unwrap().to_string();
    ok(&[
        "plot",
        "--metrics", s(&run.join("metrics.jsonl")),
        "--eval", s(&eval_out.join("eval_report.json")),
        "--ckpt", s(&run),
        "--episode", &first_episode,
        "--out", s(&plots),
    ]);
    for f in ["loss_curve.svg", "per_class_iou.svg", "qualitative.png"] {
        assert!(plots.join(f).is_file(), "{f}");
    }
    assert_eq!(code(&["plot", "--out", s(&plots)]), 2);
    assert_eq!(code(&["plot", "--ckpt", s(&run), "--episode", "Nope:a->b", "--out", s(&plots)]), 2);
}

#[test]
fn sweep_ablate_and_xdomain_write_reports() {
    let ws = Workspace::new();
    let config = ws.path("small.json");
    let data = ws.data();
    let sweep = ws.path("sweep");
    ok(&["sweep-m", "--config", s(&config), "--dataset", s(&data), "--steps", "2", "--values", "0,0.9", "--out", s(&sweep)]);
    let report = json(&sweep.join("sweep_report.json"));
    assert_eq!(report["rows"].as_array().unwrap().len(), 2);
    assert!(sweep.join("m=0.9").join("checkpoint.bin").is_file());
    assert_eq!(
        code(&["sweep-m", "--config", s(&config), "--dataset", s(&data), "--values", "0,1.5", "--out", s(&sweep)]),
        2
    );

    let ablate = ws.path("ablate");
    ok(&["ablate", "--config", s(&config), "--dataset", s(&data), "--steps", "2", "--variants", "protonet,ppl", "--out", s(&ablate)]);
    let report = json(&ablate.join("ablation_report.json"));
    assert_eq!(report["rows"].as_array().unwrap().len(), 2);
    assert_eq!(
        code(&["ablate", "--config", s(&config), "--dataset", s(&data), "--variants", "nonsense", "--out", s(&ablate)]),
        2
    );

    let other = ws.path("other");
    ok(&["gen-data", "--categories", "6", "--samples", "3", "--size", "24", "--seed", "9", "--out", s(&other)]);
    let xd = ws.path("xd");
    ok(&["xdomain", "--ckpt", s(&sweep.join("m=0.9")), "--target", s(&other), "--episodes", "4", "--out", s(&xd)]);
    let report = json(&xd.join("xdomain_report.json"));
    assert_eq!(report["categories"].as_array().unwrap().len(), 6);
    assert_eq!(
        code(&["xdomain", "--ckpt", s(&sweep.join("m=0.9")), "--target", s(&other), "--categories", "Zeppelin", "--out", s(&xd)]),
        3
    );
}
