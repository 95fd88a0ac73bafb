//! K-means over gate activations, the center registry read by the
//! clustering loss, and diversity diagnostics.

mod diagnostics;
mod kmeans;
mod registry;

pub use diagnostics::{
    alignment, gate_variance, inter_cluster_distance, intra_cluster_distance, DiversityReport,
    MAX_ALIGNMENT_K,
};
pub use kmeans::{kmeans_fit, KMeansFit, MAX_LLOYD_ITERS};
pub use registry::{euclidean, squared_euclidean, CenterRegistry, ClusterAssignment};
