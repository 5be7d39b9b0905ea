use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const CONFIG: &str = r#"
seed = 3

[synth]
samples_per_domain = [300, 300, 100]

[backbone]
num_layers = 2
hidden_dim = 8
num_heads = 2
ffn_dim = 16
max_seq_len = 64

[dsn_default]
tap_frequency = 1
ladder_dim = 4
ladder_heads = 2
tower_dims = [6]

[general]
tower_dims = [6]

[train]
epochs = 2
"#;

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
        Sandbox { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        self.run_with("run.toml", args)
    }

    fn run_with(&self, config: &str, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_unictr"))
            .current_dir(self.dir.path())
            .arg("--config")
            .arg(config)
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        self.ok_with("run.toml", args)
    }

    fn ok_with(&self, config: &str, args: &[&str]) -> String {
        let out = self.run_with(config, args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    /// Synthetic data plus a trained run directory.
    fn trained(&self) -> &Self {
        self.ok(&["synth", "--out", "d.jsonl"]);
        self.ok(&["train", "--data", "d.jsonl", "--out", "run"]);
        self
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn synth_is_seeded_and_reports_counts() {
    let s = Sandbox::new();
    let out = s.ok(&["synth", "--out", "a.jsonl"]);
    assert!(out.contains("counts: Fashion=300, Digital Music=300, Musical Instruments=100"), "{out}");
    s.ok(&["synth", "--out", "b.jsonl"]);
    assert_eq!(fs::read(s.path("a.jsonl")).unwrap(), fs::read(s.path("b.jsonl")).unwrap());
    s.ok(&["--seed", "8", "synth", "--out", "c.jsonl"]);
    assert_ne!(fs::read(s.path("a.jsonl")).unwrap(), fs::read(s.path("c.jsonl")).unwrap());

    fs::write(s.path("zero.toml"), "[synth]\nsamples_per_domain = [10, 0]\n").unwrap();
    let out = s.run_with("zero.toml", &["synth", "--out", "z.jsonl"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn train_reports_every_domain_and_eval_matches_validation() {
    let s = Sandbox::new();
    s.trained();
    let records = jsonl(&s.path("run/report.jsonl"));
    let metrics: Value = serde_json::from_str(&fs::read_to_string(s.path("run/metrics.json")).unwrap()).unwrap();
    let best = metrics["best_epoch"].as_u64().unwrap();
    for d in ["Fashion", "Digital Music", "Musical Instruments"] {
        let series: Vec<&Value> = records
            .iter()
            .filter(|r| r["domain"] == d && r["split"] == "valid" && r["metric"] == "auc")
            .collect();
        assert_eq!(series.len(), 2, "{d}");
    }

    s.ok(&["eval", "--checkpoint", "run/checkpoint", "--data", "d.jsonl", "--split", "valid", "--report", "e.json"]);
    let e: Value = serde_json::from_str(&fs::read_to_string(s.path("e.json")).unwrap()).unwrap();
    for d in e["metrics"]["domains"].as_array().unwrap() {
        let want = records
            .iter()
            .find(|r| r["domain"] == d["domain"] && r["split"] == "valid" && r["metric"] == "auc" && r["epoch"] == best)
            .unwrap()["value"]
            .as_f64()
            .unwrap();
        assert!((d["auc"].as_f64().unwrap() - want).abs() <= 1e-7);
    }
}

#[test]
fn strict_mask_losses_match_dispatch() {
    let s = Sandbox::new();
    s.ok(&["synth", "--out", "d.jsonl"]);
    s.ok(&["train", "--data", "d.jsonl", "--out", "a", "--epochs", "1"]);
    s.ok(&["--strict-mask", "train", "--data", "d.jsonl", "--out", "b", "--epochs", "1"]);
    let (a, b) = (jsonl(&s.path("a/audit.jsonl")), jsonl(&s.path("b/audit.jsonl")));
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert!((x["loss"].as_f64().unwrap() - y["loss"].as_f64().unwrap()).abs() <= 1e-6);
    }
}

#[test]
fn baseline_trains_without_checkpoint() {
    let s = Sandbox::new();
    s.ok(&["synth", "--out", "d.jsonl"]);
    let out = s.ok(&["train", "--data", "d.jsonl", "--out", "sb", "--baseline", "shared-bottom"]);
    assert!(out.contains("shared-bottom"));
    assert!(s.path("sb/metrics.json").exists());
    assert!(!s.path("sb/checkpoint").exists());
}

#[test]
fn zero_shot_and_undefined_metrics() {
    let s = Sandbox::new();
    s.trained();
    let out = s.ok(&["zero-shot", "Fashion", "--checkpoint", "run/checkpoint", "--data", "d.jsonl"]);
    assert!(out.contains("general head") && out.contains("Fashion"), "{out}");

    // A domain whose labels are all zero has no defined AUC.
    let lines: Vec<String> = fs::read_to_string(s.path("d.jsonl"))
        .unwrap()
        .lines()
        .filter(|l| l.contains("\"Fashion\""))
        .map(|l| l.replace("\"Fashion\"", "\"Toys\"").replace("\"label\":1", "\"label\":0"))
        .collect();
    fs::write(s.path("toys.jsonl"), lines.join("\n")).unwrap();
    let out = s.run(&["eval", "--checkpoint", "run/checkpoint", "--data", "toys.jsonl", "--domain", "Toys"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("undefined"));
}

#[test]
fn add_domain_leaves_existing_groups_untouched() {
    let s = Sandbox::new();
    fs::write(
        s.path("four.toml"),
        CONFIG.replace("[300, 300, 100]", "[300, 300, 100, 200]"),
    )
    .unwrap();
    s.ok_with("four.toml", &["synth", "--out", "all.jsonl"]);
    let text = fs::read_to_string(s.path("all.jsonl")).unwrap();
    let (new, old): (Vec<&str>, Vec<&str>) = text.lines().partition(|l| l.contains("\"Gift Cards\""));
    fs::write(s.path("old.jsonl"), old.join("\n")).unwrap();
    fs::write(s.path("new.jsonl"), new.join("\n")).unwrap();

    s.ok(&["train", "--data", "old.jsonl", "--out", "run"]);
    let out = s.ok(&[
        "add-domain", "--checkpoint", "run/checkpoint", "--data", "new.jsonl", "--old-data", "old.jsonl", "--out", "ext",
    ]);
    assert!(out.contains("largest existing-domain test AUC change: 0e0"), "{out}");
    let audit: Value = serde_json::from_str(&fs::read_to_string(s.path("ext/audit.json")).unwrap()).unwrap();
    for g in audit["changed_bytes"].as_array().unwrap() {
        assert_eq!(g["changed_bytes"], 0);
    }
    let out = s.ok(&["eval", "--checkpoint", "ext/checkpoint", "--data", "all.jsonl"]);
    assert!(out.contains("Gift Cards"));

    let again = s.run(&["add-domain", "--checkpoint", "ext/checkpoint", "--data", "new.jsonl", "--out", "x"]);
    assert_eq!(code(&again), 1);
}

#[test]
fn grad_check_passes_and_catches_a_corrupted_mask() {
    let s = Sandbox::new();
    let out = s.ok(&["grad-check", "--scale", "tiny", "--report", "gc.json"]);
    assert!(out.contains("grad-check passed"));
    let r: Value = serde_json::from_str(&fs::read_to_string(s.path("gc.json")).unwrap()).unwrap();
    let per_group = r["finite_differences"]["max_rel_err"].as_object().unwrap();
    assert!(per_group.contains_key("backbone") && per_group.contains_key("general"));

    let bad = s.run(&["grad-check", "--corrupt-mask"]);
    assert_eq!(code(&bad), 2);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("dsn."));
}

#[test]
fn dump_reps_and_unknown_groups() {
    let s = Sandbox::new();
    s.trained();
    s.ok(&["dump-reps", "--checkpoint", "run/checkpoint", "--data", "d.jsonl", "--select", "h1", "--out", "r.tsv"]);
    let text = fs::read_to_string(s.path("r.tsv")).unwrap();
    assert!(text.starts_with("domain\tsample_id\tv0"));
    assert_eq!(text.lines().count(), 1 + 30 + 30 + 10);
    let bad = s.run(&["dump-reps", "--checkpoint", "run/checkpoint", "--data", "d.jsonl", "--select", "h9", "--out", "r.tsv"]);
    assert_eq!(code(&bad), 1);

    let p = s.path("run/checkpoint/manifest.json");
    let mut m: Value = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
    let mut extra = m["groups"][0].clone();
    extra["name"] = "dsn.Bogus".into();
    m["groups"].as_array_mut().unwrap().push(extra);
    fs::write(&p, m.to_string()).unwrap();
    let out = s.run(&["eval", "--checkpoint", "run/checkpoint", "--data", "d.jsonl"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown checkpoint group"));
}
