//! Embedding clustering, binary masks and resynthesis.

mod kmeans;
mod masks;
mod separate;

pub use kmeans::{
    kmeans_cosine, kmeans_single, restart_seed, ClusterAssignment, MAX_LLOYD_ITERATIONS,
};
pub use masks::{
    apply_mask, masks_from_assignment, masks_nearest_centroid, BinaryMaskSet, ExcludedBins,
};
pub use separate::{reconstruct, separate, separate_embeddings, Separation, SeparationConfig};
