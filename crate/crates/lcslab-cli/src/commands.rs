//! Implementations of the single-shot subcommands. Every command reads its
//! settings through [`Settings`] (flags override the config file), writes
//! file artifacts, and prints a one-line summary to stdout.

use std::path::{Path, PathBuf};

use lcslab::data::{
    hierarchical_subset, read_class_rasters, read_dataset, write_class_rasters, write_dataset,
    Dataset, Fraction, Split,
};
use lcslab::derive_seed;
use lcslab::models::{
    read_model_config, write_model_config, Architecture, GraphConvKind, ModelConfig, DEFAULT_HEADS,
};
use lcslab::seg::DEFAULT_K;
use lcslab::synth::{default_means, gen_dataset, SynthConfig};
use lcslab::train::{repeat_seeds, train, TrainConfig, TrainTask};
use lcslab::{autodiff::ParamStore, metrics, Error, Result};

use crate::args;
use crate::pipeline::{
    build_inputs, check_aggregation, input_dim, load_segments, metrics_row, parse_seg_mode,
    predict_indices, segment_dataset, split_indices, write_segments, Aggregation, SegArtifacts,
    METRICS_HEADER, TAG_SUBSET,
};
use crate::settings::Settings;

pub const DATASET_FILE: &str = "dataset.lcsb";
pub const TRUTH_FILE: &str = "truth.lcsr";
pub const MODEL_CONFIG_FILE: &str = "model.cfg";
pub const PRED_FILE: &str = "pred.lcsr";
pub const PRED_INDEX_FILE: &str = "pred_indices.txt";
pub const METRICS_FILE: &str = "metrics.csv";

pub fn checkpoint_file(repeat: usize) -> String {
    format!("model_r{repeat}.lcpk")
}

pub fn log_file(repeat: usize) -> String {
    format!("log_r{repeat}.csv")
}

fn out_dir(settings: &Settings, flag: Option<String>) -> Result<PathBuf> {
    let dir = PathBuf::from(settings.required("out", flag)?);
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

pub fn run_synth(a: args::SynthArgs) -> Result<()> {
    let s = Settings::load(a.config.as_deref(), "synth")?;
    let out = out_dir(&s, a.out)?;
    let classes: u16 = s.value("classes", a.classes, 5)?;
    let channels: usize = s.value("channels", a.channels, 3)?;
    let cfg = SynthConfig {
        num_classes: classes,
        channels,
        height: s.value("height", a.height, 64)?,
        width: s.value("width", a.width, 64)?,
        blob_count: s.value("blobs", a.blobs, 8)?,
        means: default_means(classes, channels),
        noise_sigma: s.value("sigma", a.sigma, 0.05)?,
        labels_per_patch: s.value("labels", a.labels, 1)?,
        seed: s.value("seed", a.seed, 7)?,
    };
    let count_train: usize = s.value("train", a.train, 100)?;
    let count_val: usize = s.value("val", a.val, 20)?;
    let count_test: usize = s.value("test", a.test, 20)?;
    s.finish()?;

    let (dataset, truths) = gen_dataset(&cfg, count_train, count_val, count_test)?;
    write_dataset(&dataset, &out.join(DATASET_FILE))?;
    write_class_rasters(&truths, classes, &out.join(TRUTH_FILE))?;
    println!(
        "wrote {} samples ({count_train} train / {count_val} val / {count_test} test) to {}",
        dataset.len(),
        out.display()
    );
    Ok(())
}

pub fn run_segment(a: args::SegmentArgs) -> Result<()> {
    let s = Settings::load(a.config.as_deref(), "segment")?;
    let dataset_path = PathBuf::from(s.required("dataset", a.dataset)?);
    let out = out_dir(&s, a.out)?;
    let mode = s.text("mode", a.mode, "fh");
    let amin: usize = s.value("amin", a.amin, 10)?;
    let k: f64 = s.value("k", a.k, DEFAULT_K)?;
    s.finish()?;

    let cfg = parse_seg_mode(&mode, amin, k)?;
    let dataset = read_dataset(&dataset_path)?;
    let maps = segment_dataset(&dataset, &cfg)?;
    write_segments(&out, &cfg, &maps)?;
    let total_segments: usize = maps.iter().map(|m| m.num_segments()).sum();
    println!(
        "segmented {} samples into {total_segments} objects ({mode}, amin={}) at {}",
        maps.len(),
        cfg.a_min,
        out.display()
    );
    Ok(())
}

pub fn run_graph(a: args::GraphArgs) -> Result<()> {
    let s = Settings::load(a.config.as_deref(), "graph")?;
    let dataset_path = PathBuf::from(s.required("dataset", a.dataset)?);
    let segs_dir = PathBuf::from(s.required("segs", a.segs)?);
    let out = out_dir(&s, a.out)?;
    let features_dir = s.text_opt("features", a.features).map(PathBuf::from);
    s.finish()?;

    let dataset = read_dataset(&dataset_path)?;
    let segs = load_segments(&segs_dir, dataset.len())?;
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let graphs = crate::pipeline::build_graphs(&dataset, &segs, features_dir.as_deref(), &indices)?;
    for (i, graph) in graphs.iter().enumerate() {
        write_graph_dump(graph, &out, i)?;
    }
    let dim = graphs.first().map(|g| g.dim()).unwrap_or(0);
    println!(
        "wrote {} graphs (node dim {dim}) to {}",
        graphs.len(),
        out.display()
    );
    Ok(())
}

/// Plain-text edge list (self-loops first, then sorted undirected pairs)
/// plus a little-endian node matrix: node count u32, dim u32, float32 rows.
fn write_graph_dump(graph: &lcslab::graph::ObjectGraph, dir: &Path, index: usize) -> Result<()> {
    let mut edges = String::new();
    for s in 0..graph.num_nodes() {
        edges.push_str(&format!("{s} {s}\n"));
    }
    for (a, b) in graph.adjacency().undirected_pairs() {
        edges.push_str(&format!("{a} {b}\n"));
    }
    std::fs::write(dir.join(format!("graph_{index:05}.edges.txt")), edges)?;

    let nodes = graph.nodes();
    let mut bin = Vec::with_capacity(8 + nodes.values().len() * 4);
    bin.extend_from_slice(&(graph.num_nodes() as u32).to_le_bytes());
    bin.extend_from_slice(&(graph.dim() as u32).to_le_bytes());
    for &v in nodes.values() {
        bin.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(dir.join(format!("graph_{index:05}.nodes.bin")), bin)?;
    Ok(())
}

/// Everything `train` and `sweep` share: resolved model plus optimizer
/// settings and the label-scarcity fraction.
pub struct TrainSpec {
    pub arch: Architecture,
    pub op: GraphConvKind,
    pub agg: Aggregation,
    pub hidden: usize,
    pub heads: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub repeats: usize,
    pub fraction: Fraction,
}

impl TrainSpec {
    pub fn resolve(s: &Settings, a: &args::ModelFlags) -> Result<Self> {
        let arch = Architecture::parse(&s.text("arch", a.arch.clone(), "basegnn"))?;
        let op = GraphConvKind::parse(&s.text("op", a.op.clone(), "gcn"))?;
        let agg = match s.text_opt("agg", a.agg.clone()) {
            Some(text) => Some(Aggregation::parse(&text)?),
            None => None,
        };
        let agg = check_aggregation(arch, agg)?;
        Ok(Self {
            arch,
            op,
            agg,
            hidden: s.value("hidden", a.hidden, 32)?,
            heads: s.value("heads", a.heads, DEFAULT_HEADS)?,
            epochs: s.value("epochs", a.epochs, 20)?,
            lr: s.value("lr", a.lr, 1e-4)?,
            batch: s.value("batch", a.batch, 8)?,
            seed: s.value("seed", a.seed, 7)?,
            repeats: s.value("repeats", a.repeats, 3)?,
            fraction: Fraction::parse(&s.text("fraction", a.fraction.clone(), "1"))?,
        })
    }

    pub fn model_config(&self, in_dim: usize, classes: u16) -> ModelConfig {
        ModelConfig {
            arch: self.arch,
            op: self.op,
            hidden: self.hidden,
            classes,
            heads: self.heads,
            in_dim,
            resize: None,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::new(seed);
        cfg.epochs = self.epochs;
        cfg.lr = self.lr;
        cfg.batch = self.batch;
        cfg.repeats = self.repeats;
        cfg
    }
}

/// Assemble the training task: the label-scarcity fraction keeps a seeded
/// hierarchical subset of the training split; validation stays complete.
pub fn build_task(
    dataset: &Dataset,
    segs: &SegArtifacts,
    features_dir: Option<&Path>,
    spec: &TrainSpec,
) -> Result<TrainTask> {
    let train_pool = dataset.split_indices(Split::Train);
    let keep = hierarchical_subset(
        train_pool.len(),
        spec.fraction,
        derive_seed(spec.seed, TAG_SUBSET, 0),
    );
    let mut selected: Vec<usize> = keep.iter().map(|&j| train_pool[j]).collect();
    selected.sort_unstable();
    let val = dataset.split_indices(Split::Val);

    let mut indices = selected.clone();
    indices.extend(&val);
    let splits: Vec<Split> = std::iter::repeat_n(Split::Train, selected.len())
        .chain(std::iter::repeat_n(Split::Val, val.len()))
        .collect();
    let labels = indices
        .iter()
        .map(|&i| dataset.samples()[i].labels.clone())
        .collect();
    let inputs = build_inputs(dataset, segs, features_dir, &indices, spec.agg)?;
    let in_dim = input_dim(dataset, segs, features_dir, spec.agg)?;
    Ok(TrainTask {
        model: spec.model_config(in_dim, dataset.num_classes()),
        inputs,
        labels,
        splits,
    })
}

pub fn run_train(a: args::TrainArgs) -> Result<()> {
    let s = Settings::load(a.config.as_deref(), "train")?;
    let dataset_path = PathBuf::from(s.required("dataset", a.dataset)?);
    let segs_dir = PathBuf::from(s.required("segs", a.segs)?);
    let out = out_dir(&s, a.out)?;
    let features_dir = s.text_opt("features", a.features).map(PathBuf::from);
    let spec = TrainSpec::resolve(&s, &a.model)?;
    s.finish()?;

    let dataset = read_dataset(&dataset_path)?;
    let segs = load_segments(&segs_dir, dataset.len())?;
    let task = build_task(&dataset, &segs, features_dir.as_deref(), &spec)?;
    write_model_config(&task.model, &out.join(MODEL_CONFIG_FILE))?;

    for (r, seed) in repeat_seeds(&spec.train_config(spec.seed))
        .into_iter()
        .enumerate()
    {
        let outcome = train(&task, &spec.train_config(seed))?;
        outcome.best.save(&out.join(checkpoint_file(r)))?;
        std::fs::write(out.join(log_file(r)), outcome.log.to_csv())?;
        println!(
            "repeat {r}: best epoch {} with validation accuracy {:.4}",
            outcome.log.best_epoch,
            outcome.log.best_val_oa()
        );
    }
    println!("saved {} checkpoint(s) to {}", spec.repeats, out.display());
    Ok(())
}

pub fn run_predict(a: args::PredictArgs) -> Result<()> {
    let s = Settings::load(a.config.as_deref(), "predict")?;
    let dataset_path = PathBuf::from(s.required("dataset", a.dataset)?);
    let segs_dir = PathBuf::from(s.required("segs", a.segs)?);
    let model_dir = PathBuf::from(s.required("model", a.model)?);
    let out = out_dir(&s, a.out)?;
    let features_dir = s.text_opt("features", a.features).map(PathBuf::from);
    let repeat: usize = s.value("repeat", a.repeat, 0)?;
    let split = s.text("split", a.split, "test");
    let seed: u64 = s.value("seed", a.seed, 0)?;
    s.finish()?;

    let dataset = read_dataset(&dataset_path)?;
    let segs = load_segments(&segs_dir, dataset.len())?;
    let cfg = read_model_config(&model_dir.join(MODEL_CONFIG_FILE))?;
    let store = ParamStore::load(&model_dir.join(checkpoint_file(repeat)))?;
    let indices = split_indices(&dataset, &split)?;
    if indices.is_empty() {
        return Err(Error::validation(format!("split '{split}' has no samples")));
    }

    let maps = predict_indices(
        &cfg,
        &store,
        &dataset,
        &segs,
        features_dir.as_deref(),
        &indices,
        seed,
    )?;
    write_class_rasters(&maps, cfg.classes, &out.join(PRED_FILE))?;
    let index_lines: String = indices.iter().map(|i| format!("{i}\n")).collect();
    std::fs::write(out.join(PRED_INDEX_FILE), index_lines)?;
    println!(
        "predicted {} samples ({split} split) to {}",
        maps.len(),
        out.display()
    );
    Ok(())
}

pub fn run_eval(a: args::EvalArgs) -> Result<()> {
    let s = Settings::load(a.config.as_deref(), "eval")?;
    let pred_path = PathBuf::from(s.required("pred", a.pred)?);
    let dataset_path = PathBuf::from(s.required("dataset", a.dataset)?);
    let out = out_dir(&s, a.out)?;
    let indices_path = s
        .text_opt("indices", a.indices)
        .map(PathBuf::from)
        .unwrap_or_else(|| pred_path.with_file_name(PRED_INDEX_FILE));
    let tolerance: usize = s.value("tolerance", a.tolerance, 0)?;
    s.finish()?;

    metrics::MetricsConfig::new(tolerance)?;
    let (preds, _) = read_class_rasters(&pred_path)?;
    let dataset = read_dataset(&dataset_path)?;
    let text = std::fs::read_to_string(&indices_path)?;
    let indices: Vec<usize> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse::<usize>()
                .map_err(|e| Error::format(format!("prediction index file: {e}")))
        })
        .collect::<Result<_>>()?;
    if indices.len() != preds.len() {
        return Err(Error::validation(format!(
            "{} predictions but {} index lines",
            preds.len(),
            indices.len()
        )));
    }
    for &i in &indices {
        if i >= dataset.len() {
            return Err(Error::validation(format!(
                "prediction index {i} outside dataset of {}",
                dataset.len()
            )));
        }
    }
    let labels: Vec<_> = indices
        .iter()
        .map(|&i| dataset.samples()[i].labels.clone())
        .collect();
    let report = metrics::evaluate_report(&preds, &labels)?;
    std::fs::write(
        out.join(METRICS_FILE),
        format!("{METRICS_HEADER}\n{}\n", metrics_row(&report)),
    )?;
    let oa = if tolerance == 0 {
        report.oa_t0
    } else {
        report.oa_t1
    };
    println!("OA(t={tolerance}) = {oa:.4} over {} samples", preds.len());
    println!("wrote {}", out.join(METRICS_FILE).display());
    Ok(())
}
