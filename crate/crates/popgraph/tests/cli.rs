//! End-to-end runs of the binary on a tiny problem.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use popgraph::config::ExperimentConfig;
use popgraph::config::GraphChoice;
use popgraph::export::{Checkpoint, GraphFile};
use popgraph::runner::{parallel_map, run_method, Method, TrainAggregate};
use popgraph_core::trainer::{MetricsRecord, TrainingData};

const TINY: &str = r#"
seeds = [0]

[dataset]
seed = 5

[dataset.synthetic]
n = 60

[train]
epochs = 5
patience = 0
conv_units = 16
dense_units = 8
inference_samples = 2

[ablation]
graphs = ["euclidean", "random"]
baselines = ["static_phenotypes", "linear"]
"#;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_popgraph"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = bin(args);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(out.status.success(), "{args:?} failed: {stderr}");
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_writes_seeded_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    let stdout = ok(&["generate", "--config", s(&cfg), "--out", s(&a)]);
    assert!(stdout.contains("60 rows"), "{stdout}");
    ok(&["generate", "--config", s(&cfg), "--out", s(&b)]);
    ok(&["generate", "--config", s(&cfg), "--out", s(&c), "--dataset-seed", "6"]);
    let read = |d: &Path| fs::read(d.join("dataset.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
    let text = String::from_utf8(read(&a)).unwrap();
    // comment line, header, 60 rows
    assert_eq!(text.lines().count(), 62);
    assert!(text.lines().nth(1).unwrap().starts_with("id,"));
    assert!(a.join("metadata.json").exists());
}

#[test]
fn train_then_export() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let stdout = ok(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--seeds",
        "3,4",
        "--workers",
        "2",
    ]);
    assert!(
        stdout.contains("seed 3: mae") && stdout.contains("seed 4: mae"),
        "{stdout}"
    );

    let agg: TrainAggregate = serde_json::from_str(&fs::read_to_string(out.join("aggregate.json")).unwrap()).unwrap();
    assert_eq!(agg.seeds, [3, 4]);
    assert_eq!(agg.runs.len(), 2);
    assert!(agg.failures.is_empty());
    let run = out.join("seed-3");
    for f in [
        "config.toml",
        "metrics.json",
        "timing.json",
        "history.csv",
        "checkpoint.json",
        "attention.csv",
        "attention.json",
        "graph_inference.json",
        "graph_inference.dot",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(
        history.lines().nth(1).unwrap(),
        "epoch,L_total,L_gcn,L_graph,val_metric"
    );
    assert_eq!(history.lines().count(), 2 + 5);
    let metrics: MetricsRecord = serde_json::from_str(&fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics.config_hash.as_deref(), Some(agg.config_hash.as_str()));
    assert_eq!(Checkpoint::read(&run.join("checkpoint.json")).unwrap().seed, 3);

    let ex = dir.path().join("ex");
    let stdout = ok(&["export", "--run", s(&run), "--what", "attention", "--out", s(&ex)]);
    assert!(stdout.contains("phenotypes ranked"), "{stdout}");
    let att = fs::read_to_string(ex.join("attention.csv")).unwrap();
    // 40 phenotypes by default, plus comment and header
    assert_eq!(att.lines().count(), 42);

    for what in ["graph-static", "graph-learned"] {
        let stdout = ok(&["export", "--run", s(&run), "--what", what, "--out", s(&ex)]);
        assert!(stdout.contains("homophily"), "{stdout}");
    }
    let learned: GraphFile = serde_json::from_str(&fs::read_to_string(ex.join("graph_learned.json")).unwrap()).unwrap();
    assert_eq!(learned.nodes.len(), 60);
    assert_eq!(learned.edges.len(), 60 * 5);
    let again = dir.path().join("ex2");
    ok(&[
        "export",
        "--run",
        s(&run),
        "--what",
        "graph-learned",
        "--out",
        s(&again),
    ]);
    assert_eq!(
        fs::read(ex.join("graph_learned.json")).unwrap(),
        fs::read(again.join("graph_learned.json")).unwrap()
    );
    let stat = fs::read_to_string(ex.join("graph_static.dot")).unwrap();
    assert!(stat.starts_with("// config_hash="));
}

#[test]
fn metrics_are_byte_identical_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["train", "--config", s(&cfg), "--out", s(&a), "--workers", "1"]);
    ok(&["train", "--config", s(&cfg), "--out", s(&b), "--workers", "3"]);
    for f in ["seed-0/metrics.json", "seed-0/checkpoint.json", "aggregate.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn export_without_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&["export", "--run", s(dir.path()), "--what", "attention"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
}

#[test]
fn export_rejects_a_tampered_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--out", s(&out)]);
    let run = out.join("seed-0");
    let toml = fs::read_to_string(run.join("config.toml")).unwrap();
    fs::write(run.join("config.toml"), toml.replace("epochs = 5", "epochs = 6")).unwrap();
    let res = bin(&["export", "--run", s(&run), "--what", "attention"]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("does not match"));
}

#[test]
fn bad_config_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    fs::write(&p, "[train]\nepochz = 3\n").unwrap();
    let res = bin(&["train", "--config", s(&p), "--out", s(dir.path())]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("epochz"));
}

#[test]
fn ablate_writes_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("ab");
    let stdout = ok(&["ablate", "--config", s(&cfg), "--out", s(&out), "--seeds", "0,1"]);
    assert!(stdout.lines().nth(1).unwrap().starts_with("subset,method"), "{stdout}");
    for label in ["adaptive_euclidean", "random", "static_phenotypes", "linear"] {
        for seed in [0, 1] {
            let f = out.join("runs/all").join(label).join(format!("seed-{seed}.json"));
            assert!(f.exists(), "missing {}", f.display());
        }
    }
    let table = fs::read_to_string(out.join("ablation_table.csv")).unwrap();
    // header plus 4 methods
    assert_eq!(table.lines().filter(|l| !l.starts_with('#')).count(), 5);
    let runs = fs::read_to_string(out.join("ablation_runs.csv")).unwrap();
    assert_eq!(runs.lines().filter(|l| !l.starts_with('#')).count(), 1 + 8);
    assert!(out.join("ablation.json").exists());
}

#[test]
fn parallel_matches_serial_in_process() {
    let cfg = ExperimentConfig::from_toml(TINY).unwrap();
    let (ds, _) = cfg.load_dataset().unwrap();
    let data = TrainingData::from_dataset(&ds).unwrap();
    let jobs = [0u64, 1, 2, 3];
    let go = |workers| {
        parallel_map(&jobs, Some(workers), |&seed| {
            run_method(&data, Method::Adaptive(GraphChoice::Euclidean), &cfg, seed)
                .unwrap()
                .record
        })
        .unwrap()
    };
    let serial = go(1);
    assert_eq!(serial, go(4));
    assert_eq!(serial.iter().map(|r| r.seed).collect::<Vec<_>>(), jobs);
}
