use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "field.p=7",
    "data.n_id=4",
    "data.alpha=0.8",
    "data.n_ctx=4",
    "model.depth=1",
    "model.heads=2",
    "model.d_embed=8",
    "train.steps=20",
    "train.batch_size=8",
    "train.probe_interval=10",
    "train.probe_sequences=8",
    "eval.sequences=64",
    "interp.shots=2",
    "interp.band_sequences=4",
    "interp.shuffles=10",
];

fn modicl(args: &[&str], sets: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_modicl"));
    cmd.args(args);
    for s in sets {
        cmd.arg("--set").arg(s);
    }
    cmd.output().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&modicl(&["gen-data", "--out", d.to_str().unwrap()], &[]));
    }
    let tasks = json(&a.join("tasks.json"));
    assert_eq!(tasks["total_tasks"], 841);
    for f in ["tasks.json", "inputs.json", "log_table.csv", "samples_id_train.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let all = dir.path().join("all");
    ok(&modicl(&["gen-data", "--out", all.to_str().unwrap()], &["data.alpha=1.0"]));
    assert_eq!(json(&all.join("inputs.json"))["n_test"], 0);
}

#[test]
fn config_errors_exit_one_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let bad = modicl(&["gen-data", "--out", out], &["field.p=28"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("field.p"));
    let typo = modicl(&["train", "--out", out], &["train.lrr=1"]);
    assert_eq!(typo.status.code(), Some(1));
    assert_eq!(modicl(&["no-such-verb"], &[]).status.code(), Some(1));
    assert_eq!(modicl(&["--help"], &[]).status.code(), Some(0));
    let missing = modicl(&["eval", "--run", dir.path().join("nothing").to_str().unwrap()], &[]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn exhaustive_oracle_audit_is_clean() {
    let dir = tempfile::tempdir().unwrap();
    ok(&modicl(&["oracle", "--exhaustive", "--out", dir.path().to_str().unwrap()], &["field.p=7"]));
    let audit = json(&dir.path().join("audit.json"));
    assert_eq!(audit["audit"]["contexts"], 49 * 4 * 50);
    assert_eq!(audit["coverage_violations"].as_array().unwrap().len(), 0);
}

#[test]
fn train_eval_interp_report() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    ok(&modicl(&["train", "--out", run_s], TINY));
    for f in ["run_config.json", "metrics.csv", "probes.json", "best.ckpt", "final.ckpt", "loss.svg"] {
        assert!(run.join(f).exists(), "{f}");
    }

    ok(&modicl(&["eval", "--run", run_s], &[]));
    let first = std::fs::read(run.join("eval/eval.json")).unwrap();
    let summary = json(&run.join("eval/eval.json"));
    // barely trained, so close to chance
    let acc = summary["mean_over_shots"]["id_train"].as_f64().unwrap();
    assert!((acc - 1.0 / 7.0).abs() < 0.15, "{acc}");
    ok(&modicl(&["eval", "--run", run_s], &[]));
    assert_eq!(first, std::fs::read(run.join("eval/eval.json")).unwrap());

    let clash = modicl(&["eval", "--run", run_s], &["model.d_embed=16"]);
    assert_eq!(clash.status.code(), Some(1));

    ok(&modicl(&["interp", "--run", run_s], &[]));
    assert!(run.join("interp/interp.json").exists());
    assert!(run.join("interp/embedding_pca.csv").exists());

    ok(&modicl(&["report", "--run", run_s], &[]));
    assert!(std::fs::read_to_string(run.join("report.md")).unwrap().contains("ood"));
}

#[test]
fn sweep_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let mut sets = TINY.to_vec();
    sets.extend(["sweep.n_ids=[4,8]", "sweep.alphas=[0.5,0.8]", "sweep.seeds=[0]"]);
    ok(&modicl(&["sweep", "--out", dir.path().to_str().unwrap()], &sets));
    let csv = std::fs::read_to_string(dir.path().join("phase_diagram.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
    ok(&modicl(&["report", "--run", dir.path().to_str().unwrap()], &[]));
}
