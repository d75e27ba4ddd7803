//! Whole-model forward passes over batched inputs, plus the segment-mean
//! aggregation applied to pixel logits at prediction time.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::data::ImagePatch;
use crate::graph::{Adjacency, LogitMap, ObjectGraph};
use crate::seg::SegmentMap;
use crate::{Error, Result};

use super::graclus::{graclus_pool, graclus_pooled_features, graclus_unpool, PoolRecord};
use super::net::Net;
use super::{Architecture, ModelConfig};

/// Disjoint union of object graphs: features stacked row-wise, adjacency
/// relabeled with per-sample node offsets. No edges cross samples.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    features: Vec<f64>,
    dim: usize,
    adjacency: Adjacency,
    node_offsets: Vec<usize>,
}

impl GraphBatch {
    pub fn from_graphs(graphs: &[&ObjectGraph]) -> Result<Self> {
        if graphs.is_empty() {
            return Err(Error::validation("cannot batch zero graphs"));
        }
        let dim = graphs[0].dim();
        let mut features = Vec::new();
        let mut node_offsets = vec![0usize];
        let mut pairs: Vec<(u32, u32)> = Vec::new();
        for g in graphs {
            if g.dim() != dim {
                return Err(Error::validation(format!(
                    "graph feature width {} differs from {dim}",
                    g.dim()
                )));
            }
            let base = *node_offsets.last().unwrap() as u32;
            features.extend_from_slice(g.nodes().values());
            pairs.extend(
                g.adjacency()
                    .undirected_pairs()
                    .into_iter()
                    .map(|(a, b)| (base + a, base + b)),
            );
            node_offsets.push(base as usize + g.num_nodes());
        }
        let total = *node_offsets.last().unwrap();
        Ok(Self {
            features,
            dim,
            adjacency: Adjacency::from_pairs(total, pairs),
            node_offsets,
        })
    }

    /// Wrap a raw feature matrix and adjacency as a single-sample batch.
    pub fn from_parts(features: Vec<f64>, dim: usize, adjacency: Adjacency) -> Result<Self> {
        let n = adjacency.num_nodes();
        if dim == 0 || features.len() != n * dim {
            return Err(Error::validation(format!(
                "feature matrix length {} does not match {n} nodes x {dim}",
                features.len()
            )));
        }
        Ok(Self {
            features,
            dim,
            adjacency,
            node_offsets: vec![0, n],
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.adjacency.num_nodes()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn adjacency(&self) -> &Adjacency {
        &self.adjacency
    }

    pub fn sample_count(&self) -> usize {
        self.node_offsets.len() - 1
    }

    pub fn node_offsets(&self) -> &[usize] {
        &self.node_offsets
    }

    /// Batched node id of `segment` within sample `sample`.
    pub fn node_id(&self, sample: usize, segment: u32) -> u32 {
        (self.node_offsets[sample] + segment as usize) as u32
    }
}

/// Batch of equally shaped image patches, one row of C*H*W values per image.
#[derive(Debug, Clone)]
pub struct PixelBatch {
    values: Vec<f64>,
    channels: usize,
    height: usize,
    width: usize,
    count: usize,
}

impl PixelBatch {
    pub fn from_patches(patches: &[&ImagePatch]) -> Result<Self> {
        if patches.is_empty() {
            return Err(Error::validation("cannot batch zero images"));
        }
        let (c, h, w) = (
            patches[0].channels(),
            patches[0].height(),
            patches[0].width(),
        );
        let mut values = Vec::with_capacity(patches.len() * c * h * w);
        for p in patches {
            if (p.channels(), p.height(), p.width()) != (c, h, w) {
                return Err(Error::validation("image shapes differ within a batch"));
            }
            values.extend(p.values().iter().map(|&v| v as f64));
        }
        Ok(Self {
            values,
            channels: c,
            height: h,
            width: w,
            count: patches.len(),
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn count(&self) -> usize {
        self.count
    }
}

/// A completed forward pass: the tape (open for further loss ops), the
/// logits node, and the bookkeeping needed to train.
pub struct ModelRun {
    pub tape: Tape,
    pub logits: Var,
    bindings: BTreeMap<String, Var>,
    bn_nodes: Vec<(String, Var)>,
    attention: Vec<Var>,
}

impl ModelRun {
    pub fn bindings(&self) -> &BTreeMap<String, Var> {
        &self.bindings
    }

    /// Attention coefficient nodes (one per attention layer, edge-major).
    pub fn attention(&self) -> &[Var] {
        &self.attention
    }

    /// Run the backward pass from `loss` and collect gradients of learnable
    /// parameters, keyed by parameter name. Parameters that do not influence
    /// the loss are omitted.
    pub fn grads_by_name(
        &self,
        loss: Var,
        store: &ParamStore,
    ) -> Result<BTreeMap<String, Vec<f64>>> {
        let grads = self.tape.backward(loss)?;
        let mut out = BTreeMap::new();
        for (name, &var) in &self.bindings {
            if store.is_learnable(name) != Some(true) {
                continue;
            }
            if let Some(g) = grads.get(var) {
                out.insert(name.clone(), g.to_vec());
            }
        }
        Ok(out)
    }

    /// Per-layer batch statistics recorded by training-mode normalization:
    /// `(prefix, batch_mean, batch_var)`.
    pub fn bn_batch_stats(&self) -> Vec<(&str, &[f64], &[f64])> {
        self.bn_nodes
            .iter()
            .map(|(prefix, var)| {
                let (mean, var) = self.tape.batch_stats(*var).expect("bn node");
                (prefix.as_str(), mean, var)
            })
            .collect()
    }
}

/// Forward pass of a graph architecture over a batch. Returns per-node
/// logits (`total_nodes x classes`). `rng` drives the pooling draws of the
/// U-Net and is untouched by the flat architectures.
pub fn forward_graph_batch(
    cfg: &ModelConfig,
    store: &ParamStore,
    batch: &GraphBatch,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<ModelRun> {
    cfg.validate()?;
    if !cfg.arch.takes_graph() {
        return Err(Error::validation(
            "this architecture consumes pixels, not graphs",
        ));
    }
    if batch.dim() != cfg.in_dim {
        return Err(Error::validation(format!(
            "batch feature width {} does not match configured input width {}",
            batch.dim(),
            cfg.in_dim
        )));
    }
    let mut net = Net::new(store, training);
    let mut x = net
        .tape
        .leaf(batch.num_nodes(), batch.dim(), batch.features.clone())?;
    match cfg.arch {
        Architecture::BaseMlp => {
            for layer in 0..3 {
                let prefix = format!("layer{layer}.");
                x = net.linear(&prefix, x)?;
                x = net.batch_norm(&prefix, x)?;
                x = net.tape.relu(x);
            }
        }
        Architecture::BaseGnn => {
            for layer in 0..3 {
                let prefix = format!("layer{layer}.");
                x = net.graph_conv(cfg.op, &prefix, x, batch.adjacency(), cfg.heads)?;
                x = net.batch_norm(&prefix, x)?;
                x = net.tape.relu(x);
            }
        }
        Architecture::GraphUnet => {
            let mut adj = batch.adjacency().clone();
            let mut skips: Vec<(Var, Adjacency, PoolRecord)> = Vec::new();
            for level in 0..3 {
                let prefix = format!("enc{level}.");
                x = net.graph_conv(cfg.op, &prefix, x, &adj, cfg.heads)?;
                x = net.batch_norm(&prefix, x)?;
                x = net.tape.relu(x);
                let values = net.tape.value(x).to_vec();
                let (coarse_adj, record) = graclus_pool(&adj, &values, cfg.hidden, rng)?;
                let pooled = graclus_pooled_features(&mut net.tape, x, &record)?;
                skips.push((x, adj, record));
                x = pooled;
                adj = coarse_adj;
            }
            x = net.graph_conv(cfg.op, "bottleneck.", x, &adj, cfg.heads)?;
            x = net.batch_norm("bottleneck.", x)?;
            x = net.tape.relu(x);
            for level in (0..3).rev() {
                let (skip, fine_adj, record) = skips.pop().expect("one skip per level");
                x = graclus_unpool(&mut net.tape, x, &record)?;
                x = net.tape.concat_cols(x, skip)?;
                let prefix = format!("dec{level}.");
                x = net.graph_conv(cfg.op, &prefix, x, &fine_adj, cfg.heads)?;
                x = net.batch_norm(&prefix, x)?;
                x = net.tape.relu(x);
            }
        }
        Architecture::BaseCnn => unreachable!(),
    }
    let logits = net.linear("head.", x)?;
    let (tape, bindings, bn_nodes, attention) = net.finish();
    Ok(ModelRun {
        tape,
        logits,
        bindings,
        bn_nodes,
        attention,
    })
}

/// Forward pass of the CNN over an image batch. Returns pixel-major logits:
/// row `b*H*W + r*W + c` holds the class scores of pixel `(r, c)` of image
/// `b` at the input resolution (any configured resize is undone before the
/// prediction layer).
pub fn forward_cnn_batch(
    cfg: &ModelConfig,
    store: &ParamStore,
    batch: &PixelBatch,
    training: bool,
) -> Result<ModelRun> {
    cfg.validate()?;
    if cfg.arch != Architecture::BaseCnn {
        return Err(Error::validation(
            "this architecture consumes graphs, not pixels",
        ));
    }
    if batch.channels() != cfg.in_dim {
        return Err(Error::validation(format!(
            "batch has {} channels, configured input width is {}",
            batch.channels(),
            cfg.in_dim
        )));
    }
    let (h0, w0) = (batch.height(), batch.width());
    let mut net = Net::new(store, training);
    let mut x = net.tape.leaf(
        batch.count(),
        batch.channels() * h0 * w0,
        batch.values.clone(),
    )?;
    let (mut h, mut w) = (h0, w0);
    if let Some((rh, rw)) = cfg.resize {
        x = net.tape.bilinear_resize(x, cfg.in_dim, h, w, rh, rw)?;
        (h, w) = (rh, rw);
    }
    let mut c_in = cfg.in_dim;
    for layer in 0..3 {
        let prefix = format!("layer{layer}.");
        let kernel = net.param(&format!("{prefix}kernel"))?;
        x = net.tape.conv2d(x, kernel, c_in, h, w, 3)?;
        x = net.tape.nchw_to_rows(x, cfg.hidden, h, w)?;
        x = net.batch_norm(&prefix, x)?;
        x = net.tape.relu(x);
        x = net.tape.rows_to_nchw(x, cfg.hidden, h, w)?;
        c_in = cfg.hidden;
    }
    if (h, w) != (h0, w0) {
        x = net.tape.bilinear_resize(x, cfg.hidden, h, w, h0, w0)?;
    }
    let head_kernel = net.param("head.kernel")?;
    let head_bias = net.param("head.bias")?;
    x = net.tape.conv2d(x, head_kernel, cfg.hidden, h0, w0, 1)?;
    x = net.tape.nchw_to_rows(x, cfg.classes as usize, h0, w0)?;
    let logits = net.tape.add_bias(x, head_bias)?;
    let (tape, bindings, bn_nodes, attention) = net.finish();
    Ok(ModelRun {
        tape,
        logits,
        bindings,
        bn_nodes,
        attention,
    })
}

/// Replace every pixel's logit row with the mean row of its segment.
pub fn aggregate_logits_by_segment(logits: &LogitMap, seg: &SegmentMap) -> Result<LogitMap> {
    if logits.height() != seg.height() || logits.width() != seg.width() {
        return Err(Error::validation(format!(
            "logit map {}x{} does not match segment map {}x{}",
            logits.height(),
            logits.width(),
            seg.height(),
            seg.width()
        )));
    }
    let k = logits.classes();
    let s = seg.num_segments();
    let mut sums = vec![0.0f64; s * k];
    let mut counts = vec![0.0f64; s];
    for (pixel, &id) in seg.ids().iter().enumerate() {
        counts[id as usize] += 1.0;
        let row = &logits.values()[pixel * k..(pixel + 1) * k];
        for (acc, &v) in sums[id as usize * k..].iter_mut().zip(row) {
            *acc += v;
        }
    }
    for id in 0..s {
        for v in &mut sums[id * k..(id + 1) * k] {
            *v /= counts[id];
        }
    }
    let mut values = Vec::with_capacity(logits.values().len());
    for &id in seg.ids() {
        values.extend_from_slice(&sums[id as usize * k..(id as usize + 1) * k]);
    }
    LogitMap::new(logits.height(), logits.width(), k, values)
}
