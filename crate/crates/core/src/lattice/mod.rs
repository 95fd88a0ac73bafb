//! Multi-scale routing lattice: configuration, edge enumeration, costs,
//! parameters and the forward pass.

mod config;
mod edges;
mod network;
mod params;

pub use config::LatticeConfig;
pub use edges::{
    edge_position, enumerate_edges, expected_cost, pruned_cost, Direction, Edge, EdgeCostTable,
    GateActivationMap,
};
pub use network::{Inference, Lattice, LatticeOutput};
pub use params::{LatticeParams, NodeParams, ParamStore, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub(crate) use params::write_atomic;

/// Gates below this value count as pruned in the inference cost report.
pub const PRUNE_THRESHOLD: f64 = 0.1;
