use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &[&str] = &[
    "gen.num_entities=30",
    "gen.num_relations=2",
    "gen.train_triples=90",
    "gen.dev_triples=10",
    "gen.test_triples=10",
    "gen.n_images=2",
    "gen.n_regions=3",
    "gen.visual_dim=6",
    "gen.latent_dim=4",
    "gen.clusters=3",
    "gen.signal_regions=1",
    "model.d_model=8",
    "model.heads=2",
    "model.layers=2",
    "model.mlp_hidden=12",
    "model.max_seq=16",
    "model.num_entities=30",
    "model.n_images=2",
    "model.n_regions=3",
    "model.visual_dim=6",
    "model.vocab_size=16",
    "train.epochs=1",
    "train.negatives=5",
    "train.batch_size=8",
    "prune.k_p=1",
    "prune.samples=20",
    "bench.seq_len=24",
    "bench.reps=10",
    "bench.warmup=1",
];

fn elmm(out: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_elmm"));
    cmd.arg("--out").arg(out).arg("--seed").arg("5");
    for s in TINY {
        cmd.arg("--set").arg(s);
    }
    cmd.args(args);
    cmd.output().expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = elmm(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn pipeline(dir: &Path) {
    for cmd in ["gen-data", "train", "prune", "eval"] {
        ok(dir, &[cmd]);
    }
}

#[test]
fn pipeline_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    for f in [
        "data/train.tsv",
        "data/visual.emb",
        "data/manifest.json",
        "model.elm",
        "model_pruned.elm",
        "reports/eval.json",
        "reports/ranks.csv",
        "reports/plan.json",
    ] {
        assert_eq!(read(&a.path().join(f)), read(&b.path().join(f)), "{f} differs");
    }
    let eval: Value = serde_json::from_slice(&read(&a.path().join("reports/eval.json"))).unwrap();
    assert_eq!(eval["filtered"], true);
    assert_eq!(eval["num_queries"], 20);
    assert!(eval["config_hash"].as_str().unwrap().len() == 64);
}

#[test]
fn rerunning_a_step_leaves_inputs_untouched() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen-data"]);
    ok(dir.path(), &["train"]);
    let data = read(&dir.path().join("data/visual.emb"));
    let ckpt = read(&dir.path().join("model.elm"));
    ok(dir.path(), &["profile"]);
    let first = read(&dir.path().join("reports/profile.json"));
    ok(dir.path(), &["profile"]);
    assert_eq!(first, read(&dir.path().join("reports/profile.json")));
    ok(dir.path(), &["prune"]);
    assert_eq!(data, read(&dir.path().join("data/visual.emb")));
    assert_eq!(ckpt, read(&dir.path().join("model.elm")));
}

#[test]
fn profile_has_one_row_per_layer() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen-data"]);
    ok(dir.path(), &["train"]);
    ok(dir.path(), &["profile"]);
    let csv = fs::read_to_string(dir.path().join("reports/profile.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("layer,similarity"));
    let rows: Vec<f64> = lines
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn ablate_emits_every_variant() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen-data"]);
    ok(dir.path(), &["ablate"]);
    let csv = fs::read_to_string(dir.path().join("reports/ablation.csv")).unwrap();
    let names: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(
        names,
        ["ELMM", "w/o Image", "w/o Text", "w/o MVTC", "w/o Pruning", "w/o Linear", "w/o Init", "Head Layer"]
    );
    let json: Value = serde_json::from_slice(&read(&dir.path().join("reports/ablation.json"))).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 8);
}

#[test]
fn bench_and_sweep_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path());
    ok(dir.path(), &["bench"]);
    let r: Value = serde_json::from_slice(&read(&dir.path().join("reports/latency.json"))).unwrap();
    assert_eq!(r["attention_flop_ratio"], 0.5);
    assert_eq!(r["repetitions"], 10);
    ok(dir.path(), &["sweep"]);
    let csv = fs::read_to_string(dir.path().join("reports/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3);
}

#[test]
fn validation_failures_exit_1_with_key_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = elmm(dir.path(), &["gen-data", "--set", "train.learning_rate=1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.learning_rate"));

    let o = elmm(dir.path(), &["gen-data", "--set", "prune.k_p=9"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("prune.k_p"));

    let o = elmm(dir.path(), &["gen-data", "--set", "model.max_seq=9"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("model.max_seq"));

    let o = elmm(dir.path(), &["no-such-command"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn runtime_failures_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = elmm(dir.path(), &["train"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    ok(dir.path(), &["gen-data"]);
    let o = elmm(dir.path(), &["eval"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_file_and_overrides_compose() {
    let dir = tempfile::tempdir().unwrap();
    let printed = ok(dir.path(), &["config"]);
    let path = dir.path().join("exp.json");
    fs::write(&path, &printed).unwrap();
    let again = ok(dir.path(), &["config", "--config", path.to_str().unwrap()]);
    assert_eq!(printed, again);
    let cfg: Value = serde_json::from_str(&printed).unwrap();
    assert_eq!(cfg["seed"], 5);
    assert_eq!(cfg["gen"]["seed"], 5);
    assert_eq!(cfg["model"]["layers"], 2);
}
