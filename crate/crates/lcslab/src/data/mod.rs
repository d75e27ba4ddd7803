//! Domain types, normalization, the on-disk dataset container, and
//! hierarchical subset selection.

mod dataset;
mod normalize;
mod subset;
mod types;

pub use dataset::{
    apply_manifest, parse_manifest, read_class_rasters, read_dataset, read_feature_map,
    write_class_rasters, write_dataset, write_feature_map, ManifestEntry, LCSB_MAGIC, LCSB_VERSION,
};
pub use normalize::{default_divisors, normalize_s2};
pub use subset::{hierarchical_subset, Fraction};
pub use types::{ClassMap, Dataset, FeatureMap, ImagePatch, Sample, SparseLabelSet, Split};

/// Width of the patch border that never carries labels and is excluded from
/// evaluation, in pixels.
pub const BORDER: usize = 5;
