use vesseldiff::config::{Preset, Stage, TrainConfig};
use vesseldiff::graph::{DatasetMeta, SpatialGraph};
use vesseldiff::synth::{generate_set, SynthConfig};
use vesseldiff::tensor::{ParamStore, Tensor};
use vesseldiff::train::{adamw_step, train_stage, AdamState, AdamW, Checkpoint, RunDir, LOG_FILE};

fn single(v: f64) -> ParamStore {
    let mut s = ParamStore::new();
    s.add("w", Tensor::new(&[1], vec![v]).unwrap());
    s
}

fn adam(lr: f64, wd: f64) -> AdamW {
    AdamW { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: wd }
}

fn dataset(count: usize) -> (Vec<SpatialGraph>, DatasetMeta) {
    let graphs = generate_set(&SynthConfig::capillary(31), count).unwrap();
    let meta = DatasetMeta::fit(&graphs, Some("capillary".into())).unwrap();
    (graphs, meta)
}

fn tiny(stage: Stage, epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig::preset(Preset::Desk, stage);
    cfg.steps = 20;
    cfg.epochs = epochs;
    cfg.batch_size = 4;
    cfg.node_width = 16;
    cfg.node_time_dim = 16;
    cfg.edge_node_width = 16;
    cfg.edge_edge_width = 8;
    cfg.edge_blocks = 2;
    cfg.edge_time_dim = 16;
    cfg.seed = 5;
    cfg
}

#[test]
fn constant_gradient_steps_approach_lr() {
    let lr = 1e-3;
    let mut p = single(0.0);
    let mut st = AdamState::new(&p);
    let mut prev = 0.0;
    let mut step = 0.0;
    for _ in 0..500 {
        adamw_step(&mut p, &[Tensor::full(&[1], 0.37)], &mut st, &adam(lr, 0.0)).unwrap();
        let now = p.tensors()[0].data()[0];
        step = (now - prev).abs();
        prev = now;
    }
    assert!((step / lr - 1.0).abs() < 0.01, "{step}");
}

#[test]
fn decay_alone_is_geometric() {
    let (lr, wd) = (0.1, 0.5);
    let mut p = single(2.0);
    let mut st = AdamState::new(&p);
    for k in 1..=20 {
        adamw_step(&mut p, &[Tensor::zeros(&[1])], &mut st, &adam(lr, wd)).unwrap();
        let want = 2.0 * (1.0 - lr * wd).powi(k);
        assert!((p.tensors()[0].data()[0] - want).abs() < 1e-12);
    }
}

#[test]
fn short_run_writes_log_and_loadable_checkpoint() {
    let (graphs, meta) = dataset(8);
    let dir = tempfile::tempdir().unwrap();
    for stage in [Stage::Nodes, Stage::Edges] {
        let out = dir.path().join(stage.to_string());
        let outcome = train_stage(&graphs, &meta, &tiny(stage, 2), &RunDir(Some(out.clone())), None).unwrap();
        assert_eq!(outcome.log.len(), 2);
        let rows = std::fs::read_to_string(out.join(LOG_FILE)).unwrap();
        assert_eq!(rows.lines().filter(|l| !l.starts_with("epoch")).count(), 2);
        assert_eq!(Checkpoint::load(&out).unwrap(), outcome.checkpoint);
    }
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let (graphs, meta) = dataset(8);
    for stage in [Stage::Nodes, Stage::Edges] {
        let full = train_stage(&graphs, &meta, &tiny(stage, 2), &RunDir(None), None).unwrap();
        let first = train_stage(&graphs, &meta, &tiny(stage, 1), &RunDir(None), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        first.checkpoint.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        let resumed = train_stage(&graphs, &meta, &tiny(stage, 2), &RunDir(None), Some(&loaded)).unwrap();
        assert_eq!(resumed.log.len(), 1);
        assert_eq!(resumed.log[0].mean_loss.to_bits(), full.log[1].mean_loss.to_bits());
        assert_eq!(resumed.checkpoint.params, full.checkpoint.params);
    }
}

#[test]
fn empty_dataset_is_rejected() {
    let (_, meta) = dataset(2);
    assert!(train_stage(&[], &meta, &tiny(Stage::Nodes, 1), &RunDir(None), None).is_err());
}

#[test]
fn node_loss_drops_over_fifty_epochs() {
    let (graphs, meta) = dataset(64);
    let mut cfg = TrainConfig::preset(Preset::Desk, Stage::Nodes);
    cfg.epochs = 50;
    let log = train_stage(&graphs, &meta, &cfg, &RunDir(None), None).unwrap().log;
    let (first, last) = (log[0].mean_loss, log[49].mean_loss);
    assert!(last <= 0.7 * first, "{first} -> {last}");
}
