//! AdamW, checkpoints, and the epoch loop shared by both stages.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::{Stage, TrainConfig};
use crate::edgediff::{draw_edge_noise, edge_loss_with_draws, EdgeLossConfig, EdgeNoiseModel};
use crate::error::{Error, Result};
use crate::graph::{DatasetMeta, DatasetNormalization, NodeCountDistribution, SpatialGraph};
use crate::nets::{EdgeDenoiser, EdgeNetConfig, NodeDenoiser, NodeNetConfig};
use crate::nodediff::{draw_node_noise, node_loss_with_draws, NodeBatch};
use crate::rng::named;
use crate::schedule::{NoiseSchedule, ScheduleSpec};
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        }
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// Decoupled decay `θ ← θ − lr·wd·θ`, then the bias-corrected Adam step.
pub fn adamw_step(params: &mut ParamStore, grads: &[Tensor], state: &mut AdamState, opt: &AdamW) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::shape("adamw_step", &[params.len()], &[grads.len(), state.m.len()]));
    }
    for (k, g) in grads.iter().enumerate() {
        let id = crate::tensor::ParamId(k);
        if g.shape() != params.get(id).shape() {
            return Err(Error::shape("adamw_step", params.get(id).shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for {}", params.name(id))));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    for (k, g) in grads.iter().enumerate() {
        let p = params.tensors_mut()[k].data_mut();
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for i in 0..p.len() {
            p[i] -= opt.lr * opt.weight_decay * p[i];
            let gi = g.data()[i];
            m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * gi;
            v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * gi * gi;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            p[i] -= opt.lr * mh / (vh.sqrt() + opt.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NetConfig {
    Nodes(NodeNetConfig),
    Edges(EdgeNetConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamSnapshot {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub step: u64,
}

/// Everything needed to resume training or to sample: weights, optimiser state,
/// schedule, and the dataset statistics the model was trained against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub stage: Stage,
    pub epoch: usize,
    pub config: TrainConfig,
    pub net: NetConfig,
    pub schedule: ScheduleSpec,
    pub num_classes: usize,
    pub normalization: DatasetNormalization,
    pub node_counts: NodeCountDistribution,
    pub edge_marginal: Vec<f64>,
    pub params: BTreeMap<String, Tensor>,
    pub adam: AdamSnapshot,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOG_FILE: &str = "train.log.csv";
pub const NAN_DUMP_FILE: &str = "nan_dump.json";

/// Writes `path` via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string(self)?.as_bytes())
    }

    /// Accepts either the checkpoint file or the run directory holding it.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(CHECKPOINT_FILE) } else { path.to_path_buf() };
        if !file.is_file() {
            return Err(Error::Config(format!("no checkpoint at {}", file.display())));
        }
        Ok(serde_json::from_str(&fs::read_to_string(&file)?)?)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::from_spec(&self.schedule)
    }

    fn restore_into(&self, params: &mut ParamStore) -> Result<AdamState> {
        params.load_map(&self.params)?;
        let mut st = AdamState::new(params);
        let mut tmp = params.clone();
        tmp.load_map(&self.adam.m)?;
        st.m = tmp.tensors().to_vec();
        tmp.load_map(&self.adam.v)?;
        st.v = tmp.tensors().to_vec();
        st.step = self.adam.step;
        Ok(st)
    }

    pub fn node_model(&self) -> Result<(NodeDenoiser, ParamStore)> {
        let NetConfig::Nodes(cfg) = &self.net else {
            return Err(Error::Config("checkpoint does not hold a node model".into()));
        };
        let (net, mut store) = NodeDenoiser::new(cfg.clone(), &mut named(0, "init", &[]));
        store.load_map(&self.params)?;
        Ok((net, store))
    }

    pub fn edge_model(&self) -> Result<(EdgeDenoiser, ParamStore)> {
        let NetConfig::Edges(cfg) = &self.net else {
            return Err(Error::Config("checkpoint does not hold an edge model".into()));
        };
        let (net, mut store) = EdgeDenoiser::new(cfg.clone(), &mut named(0, "init", &[]));
        store.load_map(&self.params)?;
        Ok((net, store))
    }
}

fn named_map(params: &ParamStore, tensors: &[Tensor]) -> BTreeMap<String, Tensor> {
    params.iter().zip(tensors).map(|((n, _), t)| (n.to_string(), t.clone())).collect()
}

/// Per-epoch record.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wallclock: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

enum Model {
    Nodes(NodeDenoiser),
    Edges(EdgeDenoiser, EdgeNoiseModel, EdgeLossConfig),
}

/// Where a run writes its artefacts; `None` keeps everything in memory.
#[derive(Clone, Debug, Default)]
pub struct RunDir(pub Option<PathBuf>);

impl RunDir {
    fn append_log(&self, stage: Stage, row: &EpochLog) -> Result<()> {
        let Some(dir) = &self.0 else { return Ok(()) };
        let path = dir.join(LOG_FILE);
        let fresh = !path.exists();
        let mut f = OpenOptions::new().create(true).append(true).open(&path)?;
        if fresh {
            writeln!(f, "epoch,stage,mean_loss,wallclock")?;
        }
        writeln!(f, "{},{},{},{:.3}", row.epoch, stage, row.mean_loss, row.wallclock)?;
        Ok(())
    }

    fn save(&self, ckpt: &Checkpoint) -> Result<()> {
        match &self.0 {
            Some(dir) => ckpt.save(&dir.join(CHECKPOINT_FILE)),
            None => Ok(()),
        }
    }

    fn dump_nan(&self, epoch: usize, step: usize, batch: &[usize], loss: f64, what: &str) -> Result<()> {
        if let Some(dir) = &self.0 {
            let dump = serde_json::json!({
                "epoch": epoch,
                "step": step,
                "graph_indices": batch,
                "loss": loss.to_string(),
                "error": what,
            });
            fs::write(dir.join(NAN_DUMP_FILE), serde_json::to_string_pretty(&dump)?)?;
        }
        Ok(())
    }
}

/// Trains one stage for epochs `resume.epoch + 1 ..= cfg.epochs` (or from scratch).
///
/// All randomness is derived from `(seed, stage, epoch, step)`, so resuming from a
/// checkpoint reproduces the uninterrupted run bit for bit.
pub fn train_stage(
    graphs: &[SpatialGraph],
    meta: &DatasetMeta,
    cfg: &TrainConfig,
    run: &RunDir,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if graphs.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    if let Some(dir) = &run.0 {
        fs::create_dir_all(dir)?;
    }
    let stage = cfg.stage;
    let stage_name = stage.to_string();
    let schedule = NoiseSchedule::cosine(cfg.steps)?;
    let data: Vec<SpatialGraph> = graphs.iter().map(|g| meta.normalization.normalize(g)).collect();

    let mut init_rng = named(cfg.seed, &stage_name, &[u64::MAX]);
    let (model, net_cfg, mut params) = match stage {
        Stage::Nodes => {
            let (net, store) = NodeDenoiser::new(cfg.node_net(), &mut init_rng);
            (Model::Nodes(net), NetConfig::Nodes(cfg.node_net()), store)
        }
        Stage::Edges => {
            let ec = cfg.edge_net(meta.num_classes);
            let (net, store) = EdgeDenoiser::new(ec.clone(), &mut init_rng);
            let noise = EdgeNoiseModel::new(meta.edge_marginal.clone(), schedule.clone())?;
            let loss_cfg = EdgeLossConfig {
                degree_weight: cfg.degree_weight,
                temperature: cfg.temperature,
                ..EdgeLossConfig::default()
            };
            (Model::Edges(net, noise, loss_cfg), NetConfig::Edges(ec), store)
        }
    };
    let mut adam = AdamState::new(&params);
    let mut start = 1;
    if let Some(ck) = resume {
        if ck.stage != stage || ck.net != net_cfg || ck.schedule != *schedule.spec() {
            return Err(Error::Config("checkpoint does not match this configuration".into()));
        }
        adam = ck.restore_into(&mut params)?;
        start = ck.epoch + 1;
    }
    let opt = AdamW::from_config(cfg);

    let snapshot = |params: &ParamStore, adam: &AdamState, epoch: usize| Checkpoint {
        stage,
        epoch,
        config: cfg.clone(),
        net: net_cfg.clone(),
        schedule: schedule.spec().clone(),
        num_classes: meta.num_classes,
        normalization: meta.normalization.clone(),
        node_counts: meta.node_counts.clone(),
        edge_marginal: meta.edge_marginal.clone(),
        params: params.to_map(),
        adam: AdamSnapshot {
            m: named_map(params, &adam.m),
            v: named_map(params, &adam.v),
            step: adam.step,
        },
    };

    let clock = Instant::now();
    let mut log = Vec::new();
    for epoch in start..=cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut named(cfg.seed, &stage_name, &[epoch as u64]));
        let mut total = 0.0;
        let mut batches = 0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut rng = named(cfg.seed, &stage_name, &[epoch as u64, step as u64]);
            let batch: Vec<SpatialGraph> = chunk.iter().map(|&i| data[i].clone()).collect();
            let result = match &model {
                Model::Nodes(net) => {
                    let nb = NodeBatch::from_graphs(&batch)?;
                    let draws = draw_node_noise(&nb, &schedule, &mut rng);
                    node_loss_with_draws(net, &params, &nb, &draws, &schedule)
                }
                Model::Edges(net, noise, loss_cfg) => {
                    let draws = draw_edge_noise(noise, &batch, &mut rng)?;
                    edge_loss_with_draws(net, &params, &batch, &draws, loss_cfg).map(Into::into)
                }
            };
            let out = match result {
                Ok(o) if o.loss.is_finite() => o,
                Ok(o) => {
                    run.dump_nan(epoch, step, chunk, o.loss, "non-finite loss")?;
                    return Err(Error::Numeric(format!("non-finite loss at epoch {epoch}, step {step}")));
                }
                Err(e @ Error::Numeric(_)) => {
                    run.dump_nan(epoch, step, chunk, f64::NAN, &e.to_string())?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            if let Err(e) = adamw_step(&mut params, &out.grads, &mut adam, &opt) {
                run.dump_nan(epoch, step, chunk, out.loss, &e.to_string())?;
                return Err(e);
            }
            total += out.loss;
            batches += 1;
        }
        let row = EpochLog {
            epoch,
            mean_loss: total / batches as f64,
            wallclock: clock.elapsed().as_secs_f64(),
        };
        run.append_log(stage, &row)?;
        log.push(row);
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 && epoch != cfg.epochs {
            run.save(&snapshot(&params, &adam, epoch))?;
        }
    }
    let last = cfg.epochs.max(start - 1);
    let checkpoint = snapshot(&params, &adam, last);
    run.save(&checkpoint)?;
    Ok(TrainOutcome { checkpoint, log })
}
