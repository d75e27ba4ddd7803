//! Object-based land cover classification at desk scale.
//!
//! The pipeline: a patch is oversegmented into objects with a guaranteed
//! minimum segment size, the segments become nodes of a region adjacency
//! graph, and a classifier trained on sparse point labels produces a class
//! map whose connected regions respect the minimum mapping unit. Everything
//! runs on synthetic landscapes, so no satellite data is required.
//!
//! Modules follow the processing order:
//! - [`data`]: domain types, normalization, the LCSB dataset container,
//!   hierarchical subset selection.
//! - [`synth`]: synthetic labeled landscapes (Voronoi parcels + noise).
//! - [`seg`]: object definition — pixel-trivial or graph-based merging with
//!   a minimum segment size.
//! - [`graph`]: segment node features and the region adjacency graph.
//! - [`autodiff`]: a minimal reverse-mode tape with exactly the operations
//!   the models need, plus Adam and the checkpoint archive.
//! - [`models`]: graph operators (GCN/GraphSAGE/GAT/GT), Graclus pooling,
//!   and the BaseMLP/BaseGNN/GraphUNet/BaseCNN classifiers.
//! - [`train`]: sparse-label loss, the epoch loop, prediction.
//! - [`metrics`]: accuracy with pixel tolerance and fragmentation metrics.

pub mod autodiff;
pub mod data;
pub mod graph;
pub mod metrics;
pub mod models;
pub mod seg;
pub mod synth;
pub mod train;

mod error;

pub use error::{Error, Result};

/// Stable seed derivation so independent pipeline stages never share RNG
/// streams. Splitmix64 over the combined words.
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(tag.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(index.wrapping_mul(0x94d0_49bb_1331_11eb))
        .wrapping_add(0x2545_f491_4f6c_dd1d);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
