//! Full two-stage generation: node count, then coordinates, then edges.

use crate::edgediff::{sample_edges, EdgeNoiseModel};
use crate::error::{Error, Result};
use crate::graph::{DatasetNormalization, NodeCountDistribution, SpatialGraph};
use crate::nets::{EdgeDenoiser, NodeDenoiser};
use crate::nodediff::sample_nodes;
use crate::par;
use crate::rng::named;
use crate::schedule::NoiseSchedule;
use crate::tensor::ParamStore;
use crate::train::Checkpoint;

pub struct Generator {
    node_net: NodeDenoiser,
    node_params: ParamStore,
    edge_net: EdgeDenoiser,
    edge_params: ParamStore,
    node_schedule: NoiseSchedule,
    edge_noise: EdgeNoiseModel,
    normalization: DatasetNormalization,
    node_counts: NodeCountDistribution,
    num_classes: usize,
}

impl Generator {
    /// Pairs a node-stage and an edge-stage checkpoint. Both must use the same number
    /// of diffusion steps.
    pub fn from_checkpoints(nodes: &Checkpoint, edges: &Checkpoint) -> Result<Self> {
        if nodes.schedule.steps != edges.schedule.steps {
            return Err(Error::Config(format!(
                "incompatible schedules: node model T={}, edge model T={}",
                nodes.schedule.steps, edges.schedule.steps
            )));
        }
        let (node_net, node_params) = nodes.node_model()?;
        let (edge_net, edge_params) = edges.edge_model()?;
        let edge_noise = EdgeNoiseModel::new(edges.edge_marginal.clone(), edges.schedule()?)?;
        Ok(Self {
            node_net,
            node_params,
            edge_net,
            edge_params,
            node_schedule: nodes.schedule()?,
            edge_noise,
            normalization: nodes.normalization.clone(),
            node_counts: nodes.node_counts.clone(),
            num_classes: edges.num_classes,
        })
    }

    pub fn node_counts(&self) -> &NodeCountDistribution {
        &self.node_counts
    }

    /// Graph `index` of run `seed`, with denormalised coordinates.
    pub fn sample_graph(&self, seed: u64, index: u64) -> Result<SpatialGraph> {
        let mut rng = named(seed, "sample", &[index]);
        let n = self.node_counts.sample(&mut rng);
        let coords = sample_nodes(&self.node_net, &self.node_params, n, &self.node_schedule, &mut rng)?;
        let edges = sample_edges(&self.edge_net, &self.edge_params, &coords, &self.edge_noise, &mut rng)?;
        let g = SpatialGraph::new(coords, edges, self.num_classes)?;
        Ok(self.normalization.denormalize(&g))
    }

    /// `count` graphs sampled in parallel, returned in index order.
    pub fn sample_set(&self, seed: u64, count: usize) -> Result<Vec<SpatialGraph>> {
        par::try_map_range(count, |i| self.sample_graph(seed, i as u64))
    }
}
