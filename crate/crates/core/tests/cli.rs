use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use statrs::distribution::{ChiSquared, ContinuousCDF};
use vesseldiff::graph::{find_graph_dirs, load_graph_set, DatasetMeta};
use vesseldiff::manifest::RunManifest;
use vesseldiff::metrics::GraphStatsReport;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vesseldiff")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for dir in find_graph_dirs(root).unwrap() {
        for f in ["nodes.csv", "edges.csv"] {
            let p = dir.join(f);
            out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
        }
    }
    out.push((PathBuf::from("meta.json"), std::fs::read(root.join("meta.json")).unwrap()));
    out
}

/// Synthesises a small capillary set and trains both stages with a tiny T.
fn tiny_models(root: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let data = root.join("data");
    assert_eq!(code(&run(&["synth", "--family", "capillary", "--count", "12", "--out", s(&data), "--seed", "1"])), 0);
    let mut dirs = Vec::new();
    for stage in ["nodes", "edges"] {
        let out = root.join(stage);
        let o = run(&[
            "train", "--stage", stage, "--data", s(&data), "--out", s(&out), "--epochs", "2",
            "--set", "steps=10", "--set", "node_width=16", "--set", "edge_node_width=16",
            "--set", "edge_edge_width=8", "--set", "edge_blocks=1",
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        dirs.push(out);
    }
    (data, dirs.remove(0), dirs.remove(0))
}

#[test]
fn synth_writes_dataset_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&["synth", "--family", "capillary", "--count", "10", "--out", s(out), "--seed", "7"]);
        assert_eq!(code(&o), 0);
    }
    assert_eq!(find_graph_dirs(&a).unwrap().len(), 10);
    assert_eq!(DatasetMeta::load(&a.join("meta.json")).unwrap().num_classes, 4);
    assert_eq!(read_tree(&a), read_tree(&b));
    assert_eq!(RunManifest::load(&a).unwrap().command, "synth");
}

#[test]
fn zero_count_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["synth", "--family", "capillary", "--count", "0", "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("count ≥ 1"));
}

#[test]
fn unknown_arguments_and_family_exit_2() {
    assert_eq!(code(&run(&["synth", "--bogus"])), 2);
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["synth", "--family", "lung", "--count", "1", "--out", s(dir.path())])), 2);
}

#[test]
fn training_needs_a_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let o = run(&["train", "--stage", "nodes", "--data", s(&missing), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn paper_preset_is_recorded_in_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&run(&["synth", "--family", "capillary", "--count", "4", "--out", s(&data)])), 0);
    let out = dir.path().join("run");
    let o = run(&[
        "train", "--stage", "nodes", "--data", s(&data), "--out", s(&out), "--preset", "paper", "--epochs", "1",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = RunManifest::load(&out).unwrap();
    let resolved = &m.config["resolved"];
    assert_eq!(resolved["steps"], 1000);
    assert_eq!(resolved["lr"], 0.0003);
    assert_eq!(resolved["batch_size"], 64);
    assert_eq!(m.config["preset_diff"]["epochs"], "1");
}

#[test]
fn sample_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (data, nodes, edges) = tiny_models(dir.path());
    let (g1, g2) = (dir.path().join("g1"), dir.path().join("g2"));
    for out in [&g1, &g2] {
        let o = run(&["sample", "--nodes", s(&nodes), "--edges", s(&edges), "--count", "5", "--out", s(out), "--seed", "3"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = load_graph_set(&g1).unwrap();
    assert_eq!(a.len(), 5);
    assert!(a.iter().all(|g| g.is_valid()));
    assert_eq!(read_tree_graphs(&g1), read_tree_graphs(&g2));

    let report = dir.path().join("eval").join("report.csv");
    let o = run(&["eval", "--ref", s(&data), "--gen", s(&data), "--out", s(&report)]);
    assert_eq!(code(&o), 0);
    let text = std::fs::read_to_string(&report).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), GraphStatsReport::csv_header());
    assert!(lines.next().unwrap().split(',').take(8).all(|v| v.parse::<f64>().unwrap() <= 1e-9));
    assert!(report.parent().unwrap().join("hist_deg.csv").is_file());

    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    assert_eq!(code(&run(&["eval", "--ref", s(&data), "--gen", s(&empty), "--out", s(&report)])), 2);
}

fn read_tree_graphs(root: &Path) -> Vec<Vec<u8>> {
    find_graph_dirs(root)
        .unwrap()
        .into_iter()
        .flat_map(|d| ["nodes.csv", "edges.csv"].map(|f| std::fs::read(d.join(f)).unwrap()))
        .collect()
}

#[test]
fn sampled_node_counts_follow_training_distribution() {
    let dir = tempfile::tempdir().unwrap();
    let (data, nodes, edges) = tiny_models(dir.path());
    let out = dir.path().join("gen");
    let o = run(&["sample", "--nodes", s(&nodes), "--edges", s(&edges), "--count", "500", "--out", s(&out)]);
    assert_eq!(code(&o), 0);
    let meta = DatasetMeta::load(&data.join("meta.json")).unwrap();
    let gen = load_graph_set(&out).unwrap();
    let mut chi2 = 0.0;
    for (&n, &p) in &meta.node_counts.probs {
        let observed = gen.iter().filter(|g| g.num_nodes() == n).count() as f64;
        let expected = 500.0 * p;
        chi2 += (observed - expected).powi(2) / expected;
    }
    assert!(gen.iter().all(|g| meta.node_counts.probs.contains_key(&g.num_nodes())));
    let dof = (meta.node_counts.probs.len() - 1).max(1) as f64;
    let p = 1.0 - ChiSquared::new(dof).unwrap().cdf(chi2);
    assert!(p > 0.01, "p = {p}");
}

#[test]
fn mismatched_schedules_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (data, nodes, _) = tiny_models(dir.path());
    let other = dir.path().join("edges20");
    let o = run(&[
        "train", "--stage", "edges", "--data", s(&data), "--out", s(&other), "--epochs", "1",
        "--set", "steps=20", "--set", "edge_node_width=8", "--set", "edge_edge_width=4", "--set", "edge_blocks=1",
    ]);
    assert_eq!(code(&o), 0);
    let o = run(&["sample", "--nodes", s(&nodes), "--edges", s(&other), "--count", "1", "--out", s(&dir.path().join("x"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn verify_passes_and_detects_broken_posterior() {
    let clock = std::time::Instant::now();
    let o = run(&["verify"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(clock.elapsed().as_secs_f64() < 120.0);
    let o = run(&["verify", "--break-posterior"]);
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("edge_posterior_vs_bayes"));
}
