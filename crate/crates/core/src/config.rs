//! Training configuration: presets, a flat `key = value` file format, and overrides.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{EdgeNetConfig, NodeNetConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Nodes,
    Edges,
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nodes" => Ok(Self::Nodes),
            "edges" => Ok(Self::Edges),
            other => Err(Error::Config(format!("unknown stage `{other}` (nodes|edges)"))),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Nodes => "nodes",
            Self::Edges => "edges",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            other => Err(Error::Config(format!("unknown preset `{other}` (desk|paper)"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Desk => "desk",
            Self::Paper => "paper",
        })
    }
}

/// Every tunable of a training run. Field names double as config-file keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub preset: Preset,
    pub seed: u64,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub checkpoint_every: usize,
    pub degree_weight: f64,
    pub temperature: f64,
    pub node_width: usize,
    pub node_blocks: usize,
    pub node_heads: usize,
    pub node_time_dim: usize,
    pub edge_node_width: usize,
    pub edge_edge_width: usize,
    pub edge_blocks: usize,
    pub edge_heads: usize,
    pub edge_time_dim: usize,
}

impl TrainConfig {
    pub fn preset(preset: Preset, stage: Stage) -> Self {
        let node = match preset {
            Preset::Desk => NodeNetConfig::desk(),
            Preset::Paper => NodeNetConfig::paper(),
        };
        let edge = match preset {
            Preset::Desk => EdgeNetConfig::desk(0),
            Preset::Paper => EdgeNetConfig::paper(0),
        };
        let (steps, lr, batch_size, epochs) = match (preset, stage) {
            (Preset::Paper, _) => (1000, 3e-4, 64, 1000),
            (Preset::Desk, Stage::Nodes) => (200, 1e-3, 16, 1500),
            (Preset::Desk, Stage::Edges) => (200, 1e-3, 4, 200),
        };
        Self {
            stage,
            preset,
            seed: 0,
            steps,
            lr,
            batch_size,
            epochs,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            checkpoint_every: 10,
            degree_weight: 1.0,
            temperature: 1.0,
            node_width: node.width,
            node_blocks: node.blocks,
            node_heads: node.heads,
            node_time_dim: node.time_dim,
            edge_node_width: edge.node_width,
            edge_edge_width: edge.edge_width,
            edge_blocks: edge.blocks,
            edge_heads: edge.heads,
            edge_time_dim: edge.time_dim,
        }
    }

    pub fn node_net(&self) -> NodeNetConfig {
        NodeNetConfig {
            width: self.node_width,
            blocks: self.node_blocks,
            heads: self.node_heads,
            time_dim: self.node_time_dim,
        }
    }

    pub fn edge_net(&self, num_classes: usize) -> EdgeNetConfig {
        EdgeNetConfig {
            num_classes,
            node_width: self.edge_node_width,
            edge_width: self.edge_edge_width,
            blocks: self.edge_blocks,
            heads: self.edge_heads,
            time_dim: self.edge_time_dim,
        }
    }

    /// `(key, value)` pairs sorted by key.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let v = serde_json::to_value(self).expect("config serialises");
        let obj = v.as_object().expect("struct");
        obj.iter()
            .map(|(k, v)| {
                let s = match v {
                    serde_json::Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                (k.clone(), s)
            })
            .collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |e: &dyn fmt::Display| Error::Config(format!("bad value `{value}` for `{key}`: {e}"));
        macro_rules! parse {
            ($field:ident) => {
                self.$field = value.parse().map_err(|e| bad(&e))?
            };
        }
        match key {
            "stage" => parse!(stage),
            "preset" => parse!(preset),
            "seed" => parse!(seed),
            "steps" | "T" => parse!(steps),
            "lr" => parse!(lr),
            "batch_size" | "batch" => parse!(batch_size),
            "epochs" => parse!(epochs),
            "weight_decay" => parse!(weight_decay),
            "beta1" => parse!(beta1),
            "beta2" => parse!(beta2),
            "adam_eps" => parse!(adam_eps),
            "checkpoint_every" => parse!(checkpoint_every),
            "degree_weight" => parse!(degree_weight),
            "temperature" => parse!(temperature),
            "node_width" => parse!(node_width),
            "node_blocks" => parse!(node_blocks),
            "node_heads" => parse!(node_heads),
            "node_time_dim" => parse!(node_time_dim),
            "edge_node_width" => parse!(edge_node_width),
            "edge_edge_width" => parse!(edge_edge_width),
            "edge_blocks" => parse!(edge_blocks),
            "edge_heads" => parse!(edge_heads),
            "edge_time_dim" => parse!(edge_time_dim),
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a flat `key = value` file; `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        for (k, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: k + 1,
                msg: "expected `key = value`".into(),
            })?;
            self.set(key.trim(), value.trim()).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: k + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr > 0.0) {
            return fail("lr must be > 0");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be ≥ 1");
        }
        if self.epochs == 0 {
            return fail("epochs must be ≥ 1");
        }
        if self.steps == 0 {
            return fail("steps must be ≥ 1");
        }
        if !(self.temperature > 0.0) {
            return fail("temperature must be > 0");
        }
        if self.node_width % self.node_heads != 0 || self.edge_node_width % self.edge_heads != 0 {
            return fail("widths must be divisible by the head count");
        }
        if self.node_time_dim % 2 != 0 || self.edge_time_dim % 2 != 0 {
            return fail("time embedding dims must be even");
        }
        Ok(())
    }

    /// Keys whose values differ from the preset this config started from.
    pub fn diff_from_preset(&self) -> Vec<(String, String)> {
        let base = Self::preset(self.preset, self.stage).pairs();
        self.pairs().into_iter().filter(|kv| !base.contains(kv)).collect()
    }
}
