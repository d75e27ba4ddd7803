//! Object graph construction: per-segment node features and the region
//! adjacency graph (with self-loops) consumed by the graph models.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::data::{ClassMap, FeatureMap};
use crate::seg::SegmentMap;
use crate::{Error, Result};

/// Default policy for the variability/geometry feature block: it only
/// carries information when segments span multiple pixels, and it is skipped
/// when the input is a learned feature map rather than the raw image.
pub fn include_var_geom_default(a_min: usize, raw_image_input: bool) -> bool {
    a_min > 1 && raw_image_input
}

/// Per-segment feature vectors.
///
/// Row layout is `[mean | min | max | std | n | delta | phi]` when the
/// variability/geometry block is enabled (dimension `4F + 3`), and just the
/// channel means (dimension `F`) otherwise. `n` is the pixel count divided
/// by the patch area, `delta` the mean distance of member pixels to the
/// segment centroid, `phi` the population standard deviation of those
/// distances (both in pixel units).
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFeatures {
    num_segments: usize,
    dim: usize,
    base_features: usize,
    var_geom: bool,
    values: Vec<f64>,
}

impl NodeFeatures {
    pub fn num_segments(&self) -> usize {
        self.num_segments
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn base_features(&self) -> usize {
        self.base_features
    }

    pub fn has_var_geom(&self) -> bool {
        self.var_geom
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, segment: usize) -> &[f64] {
        &self.values[segment * self.dim..(segment + 1) * self.dim]
    }
}

/// Compute per-segment statistics over the feature map.
pub fn node_features(
    features: &FeatureMap,
    seg: &SegmentMap,
    include_var_geom: bool,
) -> Result<NodeFeatures> {
    if features.height() != seg.height() || features.width() != seg.width() {
        return Err(Error::validation(format!(
            "feature map {}x{} does not match segment map {}x{}",
            features.height(),
            features.width(),
            seg.height(),
            seg.width()
        )));
    }
    let f = features.features();
    let s = seg.num_segments();
    let (h, w) = (seg.height(), seg.width());
    let area = (h * w) as f64;

    let mut count = vec![0f64; s];
    let mut sum = vec![0f64; s * f];
    let mut sum_sq = vec![0f64; s * f];
    let mut min = vec![f64::INFINITY; s * f];
    let mut max = vec![f64::NEG_INFINITY; s * f];
    let mut sum_r = vec![0f64; s];
    let mut sum_c = vec![0f64; s];

    for r in 0..h {
        for c in 0..w {
            let id = seg.id(r, c) as usize;
            count[id] += 1.0;
            sum_r[id] += r as f64;
            sum_c[id] += c as f64;
            for (k, v) in features.pixel(r, c).enumerate() {
                let v = v as f64;
                let idx = id * f + k;
                sum[idx] += v;
                sum_sq[idx] += v * v;
                min[idx] = min[idx].min(v);
                max[idx] = max[idx].max(v);
            }
        }
    }

    // Radial statistics need the centroid first, hence the second pass.
    let mut sum_d = vec![0f64; s];
    let mut sum_d_sq = vec![0f64; s];
    if include_var_geom {
        for r in 0..h {
            for c in 0..w {
                let id = seg.id(r, c) as usize;
                let dr = r as f64 - sum_r[id] / count[id];
                let dc = c as f64 - sum_c[id] / count[id];
                let d = (dr * dr + dc * dc).sqrt();
                sum_d[id] += d;
                sum_d_sq[id] += d * d;
            }
        }
    }

    let dim = if include_var_geom { 4 * f + 3 } else { f };
    let mut values = Vec::with_capacity(s * dim);
    for id in 0..s {
        let n = count[id];
        for k in 0..f {
            values.push(sum[id * f + k] / n);
        }
        if include_var_geom {
            values.extend_from_slice(&min[id * f..(id + 1) * f]);
            values.extend_from_slice(&max[id * f..(id + 1) * f]);
            for k in 0..f {
                let mean = sum[id * f + k] / n;
                let var = (sum_sq[id * f + k] / n - mean * mean).max(0.0);
                values.push(var.sqrt());
            }
            values.push(n / area);
            let mean_d = sum_d[id] / n;
            let var_d = (sum_d_sq[id] / n - mean_d * mean_d).max(0.0);
            values.push(mean_d);
            values.push(var_d.sqrt());
        }
    }
    Ok(NodeFeatures {
        num_segments: s,
        dim,
        base_features: f,
        var_geom: include_var_geom,
        values,
    })
}

/// Symmetric adjacency with self-loops, stored as a CSR over incoming
/// neighbors (which equal outgoing neighbors by symmetry). Every node's
/// neighbor list contains the node itself, sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    offsets: Vec<usize>,
    sources: Vec<u32>,
}

impl Adjacency {
    /// Build from undirected pairs; self-loops are added for every node and
    /// duplicates (either orientation) collapse.
    pub fn from_pairs(num_nodes: usize, pairs: impl IntoIterator<Item = (u32, u32)>) -> Self {
        let mut set: BTreeSet<(u32, u32)> = BTreeSet::new();
        for node in 0..num_nodes as u32 {
            set.insert((node, node));
        }
        for (a, b) in pairs {
            debug_assert!((a as usize) < num_nodes && (b as usize) < num_nodes);
            set.insert((a, b));
            set.insert((b, a));
        }
        // The set iterates in (dst, src) order thanks to the tuple ordering,
        // with dst = first element; build CSR rows directly.
        let mut offsets = Vec::with_capacity(num_nodes + 1);
        let mut sources = Vec::with_capacity(set.len());
        offsets.push(0);
        let mut current = 0u32;
        for (dst, src) in set {
            while current < dst {
                offsets.push(sources.len());
                current += 1;
            }
            sources.push(src);
        }
        while offsets.len() < num_nodes + 1 {
            offsets.push(sources.len());
        }
        Self { offsets, sources }
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Directed edge count, self-loops included.
    pub fn num_directed_edges(&self) -> usize {
        self.sources.len()
    }

    /// CSR row offsets: the sources of node `i` live at
    /// `sources()[offsets()[i]..offsets()[i + 1]]`.
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// Concatenated per-node source lists, each sorted ascending.
    pub fn sources(&self) -> &[u32] {
        &self.sources
    }

    /// Sorted neighbor list of `node`, including `node` itself.
    pub fn neighbors(&self, node: usize) -> &[u32] {
        &self.sources[self.offsets[node]..self.offsets[node + 1]]
    }

    /// Closed degree: neighbor count including the self-loop.
    pub fn degree(&self, node: usize) -> usize {
        self.offsets[node + 1] - self.offsets[node]
    }

    /// All directed (dst, src) pairs in (dst, src) order.
    pub fn directed_pairs(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        (0..self.num_nodes()).flat_map(move |dst| {
            self.neighbors(dst)
                .iter()
                .map(move |&src| (dst as u32, src))
        })
    }

    /// Undirected pairs (a < b), self-loops excluded.
    pub fn undirected_pairs(&self) -> Vec<(u32, u32)> {
        self.directed_pairs()
            .filter(|&(d, s)| s < d)
            .map(|(d, s)| (s, d))
            .collect()
    }
}

/// Region adjacency graph over segment features, with self-loops.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectGraph {
    nodes: NodeFeatures,
    adjacency: Adjacency,
    seg: SegmentMap,
}

impl ObjectGraph {
    pub fn num_nodes(&self) -> usize {
        self.nodes.num_segments()
    }

    pub fn dim(&self) -> usize {
        self.nodes.dim()
    }

    pub fn nodes(&self) -> &NodeFeatures {
        &self.nodes
    }

    pub fn adjacency(&self) -> &Adjacency {
        &self.adjacency
    }

    pub fn seg(&self) -> &SegmentMap {
        &self.seg
    }
}

/// Connect segments that share a 4-adjacent pixel boundary; every node also
/// gets a self-loop.
pub fn build_rag(seg: &SegmentMap, nodes: NodeFeatures) -> Result<ObjectGraph> {
    if nodes.num_segments() != seg.num_segments() {
        return Err(Error::validation(format!(
            "{} node rows for {} segments",
            nodes.num_segments(),
            seg.num_segments()
        )));
    }
    let (h, w) = (seg.height(), seg.width());
    let mut pairs = BTreeSet::new();
    for r in 0..h {
        for c in 0..w {
            let id = seg.id(r, c);
            if c + 1 < w {
                let right = seg.id(r, c + 1);
                if right != id {
                    pairs.insert((id.min(right), id.max(right)));
                }
            }
            if r + 1 < h {
                let down = seg.id(r + 1, c);
                if down != id {
                    pairs.insert((id.min(down), id.max(down)));
                }
            }
        }
    }
    let adjacency = Adjacency::from_pairs(seg.num_segments(), pairs);
    Ok(ObjectGraph {
        nodes,
        adjacency,
        seg: seg.clone(),
    })
}

/// Dense per-pixel class scores, stored as one row of `classes` values per
/// pixel in row-major pixel order.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap {
    height: usize,
    width: usize,
    classes: usize,
    values: Vec<f64>,
}

impl LogitMap {
    pub fn new(height: usize, width: usize, classes: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width * classes {
            return Err(Error::validation(format!(
                "expected {} logit values, got {}",
                height * width * classes,
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            classes,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let base = (row * self.width + col) * self.classes;
        &self.values[base..base + self.classes]
    }

    /// Per-pixel argmax; ties go to the lowest class index.
    pub fn argmax_map(&self) -> ClassMap {
        let mut classes = Vec::with_capacity(self.height * self.width);
        for px in self.values.chunks_exact(self.classes) {
            let mut best = 0usize;
            for (k, &v) in px.iter().enumerate() {
                if v > px[best] {
                    best = k;
                }
            }
            classes.push(best as u16);
        }
        ClassMap::new(self.height, self.width, classes).expect("dense by construction")
    }
}

/// Broadcast per-node prediction rows back to pixel resolution.
pub fn nodes_to_pixels(predictions: &[f64], classes: usize, seg: &SegmentMap) -> Result<LogitMap> {
    let s = seg.num_segments();
    if predictions.len() != s * classes {
        return Err(Error::validation(format!(
            "prediction matrix has {} values, expected {} segments x {} classes",
            predictions.len(),
            s,
            classes
        )));
    }
    let mut values = Vec::with_capacity(seg.height() * seg.width() * classes);
    for &id in seg.ids() {
        let row = &predictions[id as usize * classes..(id as usize + 1) * classes];
        values.extend_from_slice(row);
    }
    LogitMap::new(seg.height(), seg.width(), classes, values)
}

/// Plain-text dump: node count, dimension, node rows, then the undirected
/// edge list (self-loops implicit).
pub fn dump_graph(graph: &ObjectGraph, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "nodes {} dim {}", graph.num_nodes(), graph.dim())?;
    for s in 0..graph.num_nodes() {
        let row: Vec<String> = graph
            .nodes()
            .row(s)
            .iter()
            .map(|v| format!("{}", *v as f32))
            .collect();
        writeln!(out, "{}", row.join(" "))?;
    }
    let undirected = graph.adjacency().undirected_pairs();
    writeln!(out, "edges {}", undirected.len())?;
    for (a, b) in undirected {
        writeln!(out, "{a} {b}")?;
    }
    out.flush()?;
    Ok(())
}
