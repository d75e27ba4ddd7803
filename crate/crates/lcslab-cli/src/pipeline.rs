//! Shared plumbing between subcommands: artifact naming, the segmentation
//! sidecar, graph building, model assembly, prediction over a split, and
//! metrics serialization.

use std::path::{Path, PathBuf};

use lcslab::data::{read_feature_map, Dataset, FeatureMap, Split};
use lcslab::derive_seed;
use lcslab::graph::{build_rag, node_features, ObjectGraph};
use lcslab::metrics::MetricsReport;
use lcslab::models::{Architecture, ModelConfig};
use lcslab::seg::{
    read_segment_map, segment, write_segment_map, SegMode, SegmentMap, SegmentationConfig,
};
use lcslab::train::{predict_graph, predict_pixels, TaskInputs};
use lcslab::{autodiff::ParamStore, Error, Result};

// Seed-derivation tags owned by the command layer (the library reserves
// 1-6 for synthesis and training).
pub const TAG_SUBSET: u64 = 7;
pub const TAG_PREDICT: u64 = 8;

pub fn seg_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("seg_{index:05}.lcsg"))
}

pub fn fmap_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("fmap_{index:05}.lcfm"))
}

/// Output aggregation level: classify segment nodes directly (input) or
/// average pixel logits within segments after a dense model (output).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    Input,
    Output,
}

impl Aggregation {
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "input" => Ok(Self::Input),
            "output" => Ok(Self::Output),
            other => Err(Error::config(format!(
                "unknown aggregation level '{other}' (expected input or output)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Input => "input",
            Self::Output => "output",
        }
    }
}

/// The architecture decides the aggregation level; an explicit flag must
/// agree with it.
pub fn check_aggregation(
    arch: Architecture,
    requested: Option<Aggregation>,
) -> Result<Aggregation> {
    let natural = if arch.takes_graph() {
        Aggregation::Input
    } else {
        Aggregation::Output
    };
    match requested {
        None => Ok(natural),
        Some(a) if a == natural => Ok(a),
        Some(a) => Err(Error::config(format!(
            "{arch} requires {}-level aggregation, not {}",
            natural.as_str(),
            a.as_str()
        ))),
    }
}

/// Parse the segmentation flags into a config; trivial mode ignores the
/// size/scale knobs.
pub fn parse_seg_mode(mode: &str, amin: usize, k: f64) -> Result<SegmentationConfig> {
    match mode {
        "trivial" => Ok(SegmentationConfig::trivial()),
        "fh" => Ok(SegmentationConfig {
            mode: SegMode::Fh,
            a_min: amin,
            k,
        }),
        other => Err(Error::config(format!(
            "unknown segmentation mode '{other}' (expected trivial or fh)"
        ))),
    }
}

/// Segment every sample of a dataset on its raw image.
pub fn segment_dataset(dataset: &Dataset, cfg: &SegmentationConfig) -> Result<Vec<SegmentMap>> {
    dataset
        .samples()
        .iter()
        .map(|s| segment(&s.image.to_feature_map(), cfg))
        .collect()
}

/// Per-sample segment maps plus the minimum object size that produced
/// them (which decides whether variability/geometry features make sense).
pub struct SegArtifacts {
    pub amin: usize,
    pub maps: Vec<SegmentMap>,
}

const SEG_SIDECAR: &str = "segmentation.txt";

/// Persist segment maps and the sidecar describing how they were made.
pub fn write_segments(dir: &Path, cfg: &SegmentationConfig, maps: &[SegmentMap]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, map) in maps.iter().enumerate() {
        write_segment_map(map, &seg_path(dir, i))?;
    }
    let mode = match cfg.mode {
        SegMode::Trivial => "trivial",
        SegMode::Fh => "fh",
    };
    let sidecar = format!(
        "mode={mode}\namin={}\nk={}\ncount={}\n",
        cfg.a_min,
        cfg.k,
        maps.len()
    );
    std::fs::write(dir.join(SEG_SIDECAR), sidecar)?;
    Ok(())
}

/// Load a segmentation directory written by [`write_segments`], checking it
/// covers the expected sample count.
pub fn load_segments(dir: &Path, expected: usize) -> Result<SegArtifacts> {
    let sidecar = dir.join(SEG_SIDECAR);
    let text = std::fs::read_to_string(&sidecar).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", sidecar.display()),
        ))
    })?;
    let mut mode = None;
    let mut amin = None;
    let mut k = None;
    let mut count = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::format(format!(
                "segmentation sidecar: bad line '{line}'"
            )));
        };
        match key {
            "mode" => mode = Some(value.to_string()),
            "amin" => {
                amin = Some(
                    value
                        .parse::<usize>()
                        .map_err(|e| Error::format(format!("segmentation sidecar amin: {e}")))?,
                )
            }
            "k" => {
                k = Some(
                    value
                        .parse::<f64>()
                        .map_err(|e| Error::format(format!("segmentation sidecar k: {e}")))?,
                )
            }
            "count" => {
                count = Some(
                    value
                        .parse::<usize>()
                        .map_err(|e| Error::format(format!("segmentation sidecar count: {e}")))?,
                )
            }
            other => {
                return Err(Error::format(format!(
                    "segmentation sidecar: unknown key '{other}'"
                )))
            }
        }
    }
    let (Some(_), Some(amin), Some(_), Some(count)) = (mode, amin, k, count) else {
        return Err(Error::format("segmentation sidecar is missing fields"));
    };
    if count != expected {
        return Err(Error::validation(format!(
            "segmentation covers {count} samples, dataset has {expected}"
        )));
    }
    let maps = (0..count)
        .map(|i| read_segment_map(&seg_path(dir, i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SegArtifacts { amin, maps })
}

/// The feature map driving node statistics for one sample: the externally
/// produced map when a feature directory is set, the raw image otherwise.
fn sample_features(
    dataset: &Dataset,
    features_dir: Option<&Path>,
    index: usize,
) -> Result<FeatureMap> {
    match features_dir {
        Some(dir) => read_feature_map(&fmap_path(dir, index)),
        None => Ok(dataset.samples()[index].image.to_feature_map()),
    }
}

/// Build object graphs for the given sample indices. Variability/geometry
/// node features are enabled exactly when objects are larger than single
/// pixels and the features come from the raw image.
pub fn build_graphs(
    dataset: &Dataset,
    segs: &SegArtifacts,
    features_dir: Option<&Path>,
    indices: &[usize],
) -> Result<Vec<ObjectGraph>> {
    let include_var_geom = segs.amin > 1 && features_dir.is_none();
    indices
        .iter()
        .map(|&i| {
            let fm = sample_features(dataset, features_dir, i)?;
            let seg = &segs.maps[i];
            if (fm.height(), fm.width()) != (seg.height(), seg.width()) {
                return Err(Error::validation(format!(
                    "sample {i}: feature map {}x{} does not match segmentation {}x{}",
                    fm.height(),
                    fm.width(),
                    seg.height(),
                    seg.width()
                )));
            }
            build_rag(seg, node_features(&fm, seg, include_var_geom)?)
        })
        .collect()
}

/// Model inputs for the given sample indices at the chosen aggregation level.
pub fn build_inputs(
    dataset: &Dataset,
    segs: &SegArtifacts,
    features_dir: Option<&Path>,
    indices: &[usize],
    agg: Aggregation,
) -> Result<TaskInputs> {
    match agg {
        Aggregation::Input => Ok(TaskInputs::Graphs(build_graphs(
            dataset,
            segs,
            features_dir,
            indices,
        )?)),
        Aggregation::Output => {
            if features_dir.is_some() {
                return Err(Error::config(
                    "external feature maps only apply to input-level aggregation",
                ));
            }
            let images = indices
                .iter()
                .map(|&i| dataset.samples()[i].image.clone())
                .collect();
            let maps = indices.iter().map(|&i| segs.maps[i].clone()).collect();
            Ok(TaskInputs::Pixels { images, segs: maps })
        }
    }
}

/// Input feature width the model sees for this aggregation level.
pub fn input_dim(
    dataset: &Dataset,
    segs: &SegArtifacts,
    features_dir: Option<&Path>,
    agg: Aggregation,
) -> Result<usize> {
    let (c, _, _) = dataset
        .shape()
        .ok_or_else(|| Error::validation("dataset has no samples"))?;
    match agg {
        Aggregation::Output => Ok(c),
        Aggregation::Input => {
            let f = match features_dir {
                Some(dir) => read_feature_map(&fmap_path(dir, 0))?.features(),
                None => c,
            };
            Ok(if segs.amin > 1 && features_dir.is_none() {
                4 * f + 3
            } else {
                f
            })
        }
    }
}

/// Predict class maps for the given sample indices with a trained model.
/// `seed` drives the pooling draws of architectures that coarsen the graph.
pub fn predict_indices(
    cfg: &ModelConfig,
    store: &ParamStore,
    dataset: &Dataset,
    segs: &SegArtifacts,
    features_dir: Option<&Path>,
    indices: &[usize],
    seed: u64,
) -> Result<Vec<lcslab::data::ClassMap>> {
    let mut out = Vec::with_capacity(indices.len());
    if cfg.arch.takes_graph() {
        let graphs = build_graphs(dataset, segs, features_dir, indices)?;
        for (j, graph) in graphs.iter().enumerate() {
            let pool_seed = derive_seed(seed, TAG_PREDICT, indices[j] as u64);
            out.push(predict_graph(cfg, store, graph, pool_seed)?.argmax_map());
        }
    } else {
        for &i in indices {
            let sample = &dataset.samples()[i];
            out.push(predict_pixels(cfg, store, &sample.image, &segs.maps[i])?.argmax_map());
        }
    }
    Ok(out)
}

/// Indices of a dataset split, or all samples.
pub fn split_indices(dataset: &Dataset, split: &str) -> Result<Vec<usize>> {
    if split == "all" {
        return Ok((0..dataset.len()).collect());
    }
    Ok(dataset.split_indices(Split::parse(split)?))
}

pub const METRICS_HEADER: &str =
    "oa_t0,oa_t1,f1_t0,f1_t1,patch_density,edge_density,edge_proportion,entropy";

pub fn metrics_row(r: &MetricsReport) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        r.oa_t0,
        r.oa_t1,
        r.f1_t0,
        r.f1_t1,
        r.patch_density,
        r.edge_density,
        r.edge_proportion,
        r.entropy
    )
}
