//! Classifier architectures over object graphs and pixel grids: graph
//! convolution operators, Graclus pooling, and the four model families
//! (node-wise MLP, 3-layer GNN, graph U-Net, 3-layer CNN).

mod forward;
mod graclus;
mod net;

pub use forward::{
    aggregate_logits_by_segment, forward_cnn_batch, forward_graph_batch, GraphBatch, ModelRun,
    PixelBatch,
};
pub use graclus::{graclus_pool, PoolRecord};
pub use net::{Net, NetParts};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::ParamStore;
use crate::{Error, Result};

/// Message-passing operator used by the graph architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphConvKind {
    Gcn,
    Sage,
    Gat,
    Gt,
}

impl GraphConvKind {
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "gcn" => Ok(Self::Gcn),
            "sage" => Ok(Self::Sage),
            "gat" => Ok(Self::Gat),
            "gt" => Ok(Self::Gt),
            other => Err(Error::config(format!("unknown graph operator '{other}'"))),
        }
    }
}

impl std::fmt::Display for GraphConvKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Gcn => "gcn",
            Self::Sage => "sage",
            Self::Gat => "gat",
            Self::Gt => "gt",
        };
        write!(f, "{s}")
    }
}

/// Model family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    /// Node-wise 3-layer MLP on segment features (no message passing).
    BaseMlp,
    /// 3 graph-conv layers with batch norm and ReLU, then a linear head.
    BaseGnn,
    /// U-shaped GNN: 3 conv+pool levels, bottleneck, 3 unpool+skip levels.
    GraphUnet,
    /// 3-layer CNN on raw pixels producing per-pixel logits.
    BaseCnn,
}

impl Architecture {
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "basemlp" => Ok(Self::BaseMlp),
            "basegnn" => Ok(Self::BaseGnn),
            "gunet" => Ok(Self::GraphUnet),
            "basecnn" => Ok(Self::BaseCnn),
            other => Err(Error::config(format!("unknown architecture '{other}'"))),
        }
    }

    /// Graph architectures consume an object graph; the CNN consumes pixels.
    pub fn takes_graph(self) -> bool {
        !matches!(self, Self::BaseCnn)
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::BaseMlp => "basemlp",
            Self::BaseGnn => "basegnn",
            Self::GraphUnet => "gunet",
            Self::BaseCnn => "basecnn",
        };
        write!(f, "{s}")
    }
}

pub const DEFAULT_HEADS: usize = 4;

/// Everything needed to build parameters and run a forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub op: GraphConvKind,
    /// Width of the hidden layers (for attention operators this is split
    /// across heads).
    pub hidden: usize,
    pub classes: u16,
    pub heads: usize,
    /// Input feature dimension: node feature width for graph models,
    /// channel count for the CNN.
    pub in_dim: usize,
    /// Optional CNN resize: upscale inputs to (H, W) before the conv stack
    /// and scale features back down before the prediction layer.
    pub resize: Option<(usize, usize)>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("need at least 2 classes"));
        }
        if self.hidden < self.classes as usize {
            return Err(Error::config(format!(
                "hidden width {} must be at least the class count {}",
                self.hidden, self.classes
            )));
        }
        if self.heads < 1 {
            return Err(Error::config("attention heads must be at least 1"));
        }
        if self.in_dim < 1 {
            return Err(Error::config("input dimension must be at least 1"));
        }
        if matches!(self.op, GraphConvKind::Gat | GraphConvKind::Gt)
            && self.arch != Architecture::BaseCnn
            && !self.hidden.is_multiple_of(self.heads)
        {
            return Err(Error::config(format!(
                "hidden width {} is not divisible by {} attention heads",
                self.hidden, self.heads
            )));
        }
        if self.resize.is_some() && self.arch != Architecture::BaseCnn {
            return Err(Error::config("resize only applies to the CNN"));
        }
        Ok(())
    }
}

/// Serialize a model config as `key=value` lines next to a checkpoint.
pub fn write_model_config(cfg: &ModelConfig, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "arch={}", cfg.arch)?;
    writeln!(out, "op={}", cfg.op)?;
    writeln!(out, "hidden={}", cfg.hidden)?;
    writeln!(out, "classes={}", cfg.classes)?;
    writeln!(out, "heads={}", cfg.heads)?;
    writeln!(out, "in_dim={}", cfg.in_dim)?;
    if let Some((h, w)) = cfg.resize {
        writeln!(out, "resize={h}x{w}")?;
    }
    out.flush()?;
    Ok(())
}

/// Parse a config written by [`write_model_config`].
pub fn read_model_config(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut arch = None;
    let mut op = None;
    let mut hidden = None;
    let mut classes = None;
    let mut heads = None;
    let mut in_dim = None;
    let mut resize = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::format(format!("expected key=value, got '{line}'")))?;
        let bad = |e: &dyn std::fmt::Display| Error::format(format!("{key}: {e}"));
        match key {
            "arch" => arch = Some(Architecture::parse(value)?),
            "op" => op = Some(GraphConvKind::parse(value)?),
            "hidden" => hidden = Some(value.parse::<usize>().map_err(|e| bad(&e))?),
            "classes" => classes = Some(value.parse::<u16>().map_err(|e| bad(&e))?),
            "heads" => heads = Some(value.parse::<usize>().map_err(|e| bad(&e))?),
            "in_dim" => in_dim = Some(value.parse::<usize>().map_err(|e| bad(&e))?),
            "resize" => {
                let (h, w) = value
                    .split_once('x')
                    .ok_or_else(|| Error::format("resize must be HxW"))?;
                resize = Some((
                    h.parse::<usize>().map_err(|e| bad(&e))?,
                    w.parse::<usize>().map_err(|e| bad(&e))?,
                ));
            }
            other => return Err(Error::format(format!("unknown model config key '{other}'"))),
        }
    }
    let missing = |what: &str| Error::format(format!("model config is missing '{what}'"));
    let cfg = ModelConfig {
        arch: arch.ok_or_else(|| missing("arch"))?,
        op: op.ok_or_else(|| missing("op"))?,
        hidden: hidden.ok_or_else(|| missing("hidden"))?,
        classes: classes.ok_or_else(|| missing("classes"))?,
        heads: heads.unwrap_or(DEFAULT_HEADS),
        in_dim: in_dim.ok_or_else(|| missing("in_dim"))?,
        resize,
    };
    cfg.validate()?;
    Ok(cfg)
}

struct Init {
    store: ParamStore,
    rng: ChaCha8Rng,
}

impl Init {
    /// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
    fn glorot(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<()> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let values: Vec<f64> = (0..rows * cols)
            .map(|_| self.rng.gen_range(-bound..bound))
            .collect();
        self.store.insert(name, rows, cols, values, true)
    }

    fn weight(&mut self, name: &str, d_in: usize, d_out: usize) -> Result<()> {
        self.glorot(name, d_in, d_out, d_in, d_out)
    }

    fn zeros(&mut self, name: &str, cols: usize) -> Result<()> {
        self.store.insert(name, 1, cols, vec![0.0; cols], true)
    }

    fn batch_norm(&mut self, prefix: &str, width: usize) -> Result<()> {
        self.store.insert(
            &format!("{prefix}bn.gamma"),
            1,
            width,
            vec![1.0; width],
            true,
        )?;
        self.store.insert(
            &format!("{prefix}bn.beta"),
            1,
            width,
            vec![0.0; width],
            true,
        )?;
        self.store.insert(
            &format!("{prefix}bn.running_mean"),
            1,
            width,
            vec![0.0; width],
            false,
        )?;
        self.store.insert(
            &format!("{prefix}bn.running_var"),
            1,
            width,
            vec![1.0; width],
            false,
        )
    }

    fn graph_conv(
        &mut self,
        kind: GraphConvKind,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        heads: usize,
    ) -> Result<()> {
        match kind {
            GraphConvKind::Gcn => {
                self.weight(&format!("{prefix}weight"), d_in, d_out)?;
                self.zeros(&format!("{prefix}bias"), d_out)
            }
            GraphConvKind::Sage => {
                self.weight(&format!("{prefix}self_weight"), d_in, d_out)?;
                self.weight(&format!("{prefix}neigh_weight"), d_in, d_out)?;
                self.zeros(&format!("{prefix}bias"), d_out)
            }
            GraphConvKind::Gat => {
                let d = d_out / heads;
                self.weight(&format!("{prefix}weight"), d_in, d_out)?;
                self.glorot(&format!("{prefix}att_self"), heads, d, d, d)?;
                self.glorot(&format!("{prefix}att_neigh"), heads, d, d, d)
            }
            GraphConvKind::Gt => {
                self.weight(&format!("{prefix}root_weight"), d_in, d_out)?;
                self.weight(&format!("{prefix}qry_weight"), d_in, d_out)?;
                self.weight(&format!("{prefix}key_weight"), d_in, d_out)?;
                self.weight(&format!("{prefix}val_weight"), d_in, d_out)
            }
        }
    }
}

/// Build a freshly initialized parameter store for the configuration.
/// Weight matrices are Glorot-uniform, biases zero; normalization layers
/// start at identity with zeroed running means and unit running variances.
/// Parameter creation order is fixed, so a seed fully determines the values.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut init = Init {
        store: ParamStore::new(),
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let h = cfg.hidden;
    let k = cfg.classes as usize;
    match cfg.arch {
        Architecture::BaseMlp => {
            let mut d_in = cfg.in_dim;
            for layer in 0..3 {
                let prefix = format!("layer{layer}.");
                init.weight(&format!("{prefix}weight"), d_in, h)?;
                init.zeros(&format!("{prefix}bias"), h)?;
                init.batch_norm(&prefix, h)?;
                d_in = h;
            }
            init.weight("head.weight", h, k)?;
            init.zeros("head.bias", k)?;
        }
        Architecture::BaseGnn => {
            let mut d_in = cfg.in_dim;
            for layer in 0..3 {
                let prefix = format!("layer{layer}.");
                init.graph_conv(cfg.op, &prefix, d_in, h, cfg.heads)?;
                init.batch_norm(&prefix, h)?;
                d_in = h;
            }
            init.weight("head.weight", h, k)?;
            init.zeros("head.bias", k)?;
        }
        Architecture::GraphUnet => {
            let mut d_in = cfg.in_dim;
            for level in 0..3 {
                let prefix = format!("enc{level}.");
                init.graph_conv(cfg.op, &prefix, d_in, h, cfg.heads)?;
                init.batch_norm(&prefix, h)?;
                d_in = h;
            }
            init.graph_conv(cfg.op, "bottleneck.", h, h, cfg.heads)?;
            init.batch_norm("bottleneck.", h)?;
            for level in (0..3).rev() {
                let prefix = format!("dec{level}.");
                init.graph_conv(cfg.op, &prefix, 2 * h, h, cfg.heads)?;
                init.batch_norm(&prefix, h)?;
            }
            init.weight("head.weight", h, k)?;
            init.zeros("head.bias", k)?;
        }
        Architecture::BaseCnn => {
            let mut c_in = cfg.in_dim;
            for layer in 0..3 {
                let prefix = format!("layer{layer}.");
                init.glorot(&format!("{prefix}kernel"), h, c_in * 9, c_in * 9, h * 9)?;
                init.batch_norm(&prefix, h)?;
                c_in = h;
            }
            init.glorot("head.kernel", k, h, h, k)?;
            init.zeros("head.bias", k)?;
        }
    }
    Ok(init.store)
}
