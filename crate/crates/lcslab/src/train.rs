//! Sparse-label optimization: cross-entropy evaluated only at labeled
//! pixels, the epoch loop with plateau-halved learning rate, best-epoch
//! checkpoint selection, and the prediction paths for both aggregation
//! levels.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::data::{ImagePatch, SparseLabelSet, Split};
use crate::derive_seed;
use crate::graph::{nodes_to_pixels, LogitMap, ObjectGraph};
use crate::metrics::accuracy_counts;
use crate::models::{
    aggregate_logits_by_segment, forward_cnn_batch, forward_graph_batch, init_params, GraphBatch,
    ModelConfig, PixelBatch,
};
use crate::seg::SegmentMap;
use crate::{Error, Result};

/// Weight of the batch statistics in the running-average update of the
/// normalization buffers.
pub const BN_MOMENTUM: f64 = 0.1;

// Seed-derivation tags (tags 1 and 2 belong to the synthesis module).
const TAG_SHUFFLE: u64 = 3;
const TAG_POOL: u64 = 4;
const TAG_EVAL: u64 = 5;
const TAG_REPEAT: u64 = 6;

/// Optimization hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Initial learning rate.
    pub lr: f64,
    /// Multiplier applied on a validation plateau.
    pub factor: f64,
    /// Consecutive non-improving epochs before the rate drops.
    pub patience: usize,
    /// Patches per optimization step.
    pub batch: usize,
    pub seed: u64,
    /// Seeded repetitions for mean/std reporting.
    pub repeats: usize,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            epochs: 20,
            lr: 1e-4,
            factor: 0.5,
            patience: 2,
            batch: 8,
            seed,
            repeats: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::config("need at least one epoch"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("learning rate must be positive and finite"));
        }
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(Error::config("plateau factor must be in (0, 1)"));
        }
        if self.patience < 1 {
            return Err(Error::config("patience must be at least one epoch"));
        }
        if self.batch < 1 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if self.repeats < 1 {
            return Err(Error::config("need at least one repeat"));
        }
        Ok(())
    }
}

/// The per-repeat seeds derived from a config's base seed.
pub fn repeat_seeds(cfg: &TrainConfig) -> Vec<u64> {
    (0..cfg.repeats)
        .map(|i| derive_seed(cfg.seed, TAG_REPEAT, i as u64))
        .collect()
}

/// Plateau learning-rate schedule. The first observed epoch sets the
/// baseline (it selects a checkpoint but does not count as an improvement);
/// each later epoch counts as improving only when it strictly beats the
/// best score so far. After `patience` consecutive non-improving epochs the
/// rate is multiplied by `factor` and the stall window restarts.
#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    lr: f64,
    factor: f64,
    patience: usize,
    best: Option<f64>,
    stall: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self {
            lr,
            factor,
            patience,
            best: None,
            stall: 0,
        }
    }

    /// Rate to use for the next epoch's steps.
    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Record an epoch's validation score; returns whether this epoch's
    /// checkpoint should be kept (strictly best so far, or the first).
    pub fn observe(&mut self, score: f64) -> bool {
        let improved = self.best.is_some_and(|b| score > b);
        let keep = self.best.is_none_or(|b| score > b);
        if keep {
            self.best = Some(score);
        }
        if improved {
            self.stall = 0;
        } else {
            self.stall += 1;
            if self.stall >= self.patience {
                self.lr *= self.factor;
                self.stall = 0;
            }
        }
        keep
    }
}

/// One epoch's log line. `lr` is the rate used for the epoch's steps.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_oa: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Index of the epoch whose checkpoint was selected.
    pub best_epoch: usize,
}

impl TrainLog {
    pub fn best_val_oa(&self) -> f64 {
        self.epochs[self.best_epoch].val_oa
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_oa,lr\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.epoch, r.train_loss, r.val_oa, r.lr
            ));
        }
        out
    }
}

/// Model inputs, one entry per sample: object graphs for the node
/// classifiers, or raw images plus segmentations for the pixel classifier
/// (the segmentation drives prediction-time aggregation).
pub enum TaskInputs {
    Graphs(Vec<ObjectGraph>),
    Pixels {
        images: Vec<ImagePatch>,
        segs: Vec<SegmentMap>,
    },
}

impl TaskInputs {
    pub fn len(&self) -> usize {
        match self {
            TaskInputs::Graphs(g) => g.len(),
            TaskInputs::Pixels { images, .. } => images.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A complete training problem: aligned inputs, labels, and split tags.
pub struct TrainTask {
    pub model: ModelConfig,
    pub inputs: TaskInputs,
    pub labels: Vec<SparseLabelSet>,
    pub splits: Vec<Split>,
}

impl TrainTask {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let n = self.inputs.len();
        if n == 0 {
            return Err(Error::validation("task has no samples"));
        }
        if self.labels.len() != n || self.splits.len() != n {
            return Err(Error::validation(format!(
                "misaligned task: {} inputs, {} label sets, {} splits",
                n,
                self.labels.len(),
                self.splits.len()
            )));
        }
        match &self.inputs {
            TaskInputs::Graphs(_) if !self.model.arch.takes_graph() => {
                return Err(Error::validation("pixel architecture given graph inputs"));
            }
            TaskInputs::Pixels { images, segs } => {
                if self.model.arch.takes_graph() {
                    return Err(Error::validation("graph architecture given pixel inputs"));
                }
                if segs.len() != images.len() {
                    return Err(Error::validation("each image needs a segmentation"));
                }
                for (img, seg) in images.iter().zip(segs) {
                    if (img.height(), img.width()) != (seg.height(), seg.width()) {
                        return Err(Error::validation("image/segmentation size mismatch"));
                    }
                }
            }
            _ => {}
        }
        for labels in &self.labels {
            if labels.num_classes() != self.model.classes {
                return Err(Error::validation(format!(
                    "label set declares {} classes, model has {}",
                    labels.num_classes(),
                    self.model.classes
                )));
            }
        }
        for (split, what) in [(Split::Train, "training"), (Split::Val, "validation")] {
            let idx = self.indices(split);
            if idx.is_empty() {
                return Err(Error::validation(format!("{what} split is empty")));
            }
            if idx.iter().all(|&i| self.labels[i].is_empty()) {
                return Err(Error::validation(format!("{what} split has no labels")));
            }
        }
        Ok(())
    }

    fn indices(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|&(_, &s)| s == split)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Mean negative log-likelihood over the labeled pixels of a graph batch.
/// Each labeled pixel reads the logit row of its segment's node.
pub fn partial_cross_entropy_nodes(
    tape: &mut Tape,
    logits: Var,
    batch: &GraphBatch,
    graphs: &[&ObjectGraph],
    labels: &[&SparseLabelSet],
) -> Result<Var> {
    if graphs.len() != batch.sample_count() || labels.len() != batch.sample_count() {
        return Err(Error::validation("batch, graphs, and labels must align"));
    }
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (b, (graph, label_set)) in graphs.iter().zip(labels).enumerate() {
        for &(r, c, class) in label_set.entries() {
            rows.push(batch.node_id(b, graph.seg().id(r as usize, c as usize)));
            targets.push(class as u32);
        }
    }
    if rows.is_empty() {
        return Err(Error::training("batch contains no labeled pixels"));
    }
    let gathered = tape.gather_rows(logits, &rows)?;
    let log_probs = tape.log_softmax(gathered);
    tape.nll_mean(log_probs, &targets)
}

/// Mean negative log-likelihood over the labeled pixels of pixel-major
/// logits (`batch*height*width` rows).
pub fn partial_cross_entropy_pixels(
    tape: &mut Tape,
    logits: Var,
    height: usize,
    width: usize,
    labels: &[&SparseLabelSet],
) -> Result<Var> {
    let (rows, _) = tape.shape(logits);
    if rows != labels.len() * height * width {
        return Err(Error::validation(format!(
            "{rows} logit rows do not match {} samples of {height}x{width}",
            labels.len()
        )));
    }
    let mut ids = Vec::new();
    let mut targets = Vec::new();
    for (b, label_set) in labels.iter().enumerate() {
        for &(r, c, class) in label_set.entries() {
            ids.push((b * height * width + r as usize * width + c as usize) as u32);
            targets.push(class as u32);
        }
    }
    if ids.is_empty() {
        return Err(Error::training("batch contains no labeled pixels"));
    }
    let gathered = tape.gather_rows(logits, &ids)?;
    let log_probs = tape.log_softmax(gathered);
    tape.nll_mean(log_probs, &targets)
}

/// Result of a training run: the validation-selected checkpoint, the final
/// parameters, and the per-epoch log.
#[derive(Debug)]
pub struct TrainOutcome {
    pub best: ParamStore,
    pub last: ParamStore,
    pub log: TrainLog,
}

/// Aggregated per-pixel class scores for one sample through a graph model:
/// forward in evaluation mode, then broadcast node rows to pixels.
pub fn predict_graph(
    cfg: &ModelConfig,
    store: &ParamStore,
    graph: &ObjectGraph,
    pool_seed: u64,
) -> Result<LogitMap> {
    let batch = GraphBatch::from_graphs(&[graph])?;
    let mut rng = ChaCha8Rng::seed_from_u64(pool_seed);
    let run = forward_graph_batch(cfg, store, &batch, false, &mut rng)?;
    nodes_to_pixels(
        run.tape.value(run.logits),
        cfg.classes as usize,
        graph.seg(),
    )
}

/// Aggregated per-pixel class scores for one sample through the pixel
/// model: forward in evaluation mode, then average logits per segment.
pub fn predict_pixels(
    cfg: &ModelConfig,
    store: &ParamStore,
    image: &ImagePatch,
    seg: &SegmentMap,
) -> Result<LogitMap> {
    if (image.height(), image.width()) != (seg.height(), seg.width()) {
        return Err(Error::validation("image/segmentation size mismatch"));
    }
    let batch = PixelBatch::from_patches(&[image])?;
    let run = forward_cnn_batch(cfg, store, &batch, false)?;
    let raw = LogitMap::new(
        image.height(),
        image.width(),
        cfg.classes as usize,
        run.tape.value(run.logits).to_vec(),
    )?;
    aggregate_logits_by_segment(&raw, seg)
}

fn predict_index(
    task: &TrainTask,
    store: &ParamStore,
    index: usize,
    pool_seed: u64,
) -> Result<LogitMap> {
    match &task.inputs {
        TaskInputs::Graphs(graphs) => predict_graph(&task.model, store, &graphs[index], pool_seed),
        TaskInputs::Pixels { images, segs } => {
            predict_pixels(&task.model, store, &images[index], &segs[index])
        }
    }
}

/// Exact-pixel validation accuracy pooled over every label of the split.
fn validation_accuracy(
    task: &TrainTask,
    store: &ParamStore,
    val_idx: &[usize],
    eval_seed: u64,
) -> Result<f64> {
    let mut correct = 0u64;
    let mut total = 0u64;
    for (j, &i) in val_idx.iter().enumerate() {
        if task.labels[i].is_empty() {
            continue;
        }
        let logits = predict_index(task, store, i, derive_seed(eval_seed, TAG_POOL, j as u64))?;
        let (c, n) = accuracy_counts(&logits.argmax_map(), &task.labels[i], 0)?;
        correct += c;
        total += n;
    }
    if total == 0 {
        return Err(Error::validation("validation split has no labels"));
    }
    Ok(correct as f64 / total as f64)
}

fn train_step(
    task: &TrainTask,
    store: &mut ParamStore,
    ids: &[usize],
    lr: f64,
    pool_rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let (run, loss) = match &task.inputs {
        TaskInputs::Graphs(graphs) => {
            let selected: Vec<&ObjectGraph> = ids.iter().map(|&i| &graphs[i]).collect();
            let labels: Vec<&SparseLabelSet> = ids.iter().map(|&i| &task.labels[i]).collect();
            let batch = GraphBatch::from_graphs(&selected)?;
            let mut run = forward_graph_batch(&task.model, store, &batch, true, pool_rng)?;
            let loss =
                partial_cross_entropy_nodes(&mut run.tape, run.logits, &batch, &selected, &labels)?;
            (run, loss)
        }
        TaskInputs::Pixels { images, .. } => {
            let selected: Vec<&ImagePatch> = ids.iter().map(|&i| &images[i]).collect();
            let labels: Vec<&SparseLabelSet> = ids.iter().map(|&i| &task.labels[i]).collect();
            let batch = PixelBatch::from_patches(&selected)?;
            let mut run = forward_cnn_batch(&task.model, store, &batch, true)?;
            let loss = partial_cross_entropy_pixels(
                &mut run.tape,
                run.logits,
                batch.height(),
                batch.width(),
                &labels,
            )?;
            (run, loss)
        }
    };
    let loss_value = run.tape.loss_value(loss)?;
    let grads = run.grads_by_name(loss, store)?;
    store.adam_step(&grads, lr)?;
    let stats: Vec<(String, Vec<f64>, Vec<f64>)> = run
        .bn_batch_stats()
        .into_iter()
        .map(|(p, m, v)| (p.to_string(), m.to_vec(), v.to_vec()))
        .collect();
    for (prefix, mean, var) in stats {
        blend_running(store, &format!("{prefix}bn.running_mean"), &mean)?;
        blend_running(store, &format!("{prefix}bn.running_var"), &var)?;
    }
    Ok(loss_value)
}

fn blend_running(store: &mut ParamStore, name: &str, batch: &[f64]) -> Result<()> {
    let blended: Vec<f64> = store
        .values(name)
        .ok_or_else(|| Error::validation(format!("unknown parameter '{name}'")))?
        .iter()
        .zip(batch)
        .map(|(old, new)| (1.0 - BN_MOMENTUM) * old + BN_MOMENTUM * new)
        .collect();
    store.set_values(name, &blended)
}

/// Run the full optimization loop. Fully deterministic for a fixed seed:
/// initialization, epoch shuffles, pooling draws, and evaluation order are
/// all derived from `cfg.seed`.
pub fn train(task: &TrainTask, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    task.validate()?;
    let train_idx = task.indices(Split::Train);
    let val_idx = task.indices(Split::Val);
    let mut store = init_params(&task.model, cfg.seed)?;
    let mut schedule = PlateauSchedule::new(cfg.lr, cfg.factor, cfg.patience);
    let mut best_store = store.clone();
    let mut best_epoch = 0usize;
    let mut records = Vec::new();
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr();
        let mut order = train_idx.clone();
        let shuffle_seed = derive_seed(cfg.seed, TAG_SHUFFLE, epoch as u64);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
        let mut pool_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_POOL, epoch as u64));
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(cfg.batch).enumerate() {
            let loss = train_step(task, &mut store, chunk, lr, &mut pool_rng)
                .map_err(|e| Error::training(format!("epoch {epoch} step {step}: {e}")))?;
            loss_sum += loss;
            steps += 1;
        }
        let val_oa = validation_accuracy(
            task,
            &store,
            &val_idx,
            derive_seed(cfg.seed, TAG_EVAL, epoch as u64),
        )?;
        if schedule.observe(val_oa) {
            best_store = store.clone();
            best_epoch = epoch;
        }
        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / steps as f64,
            val_oa,
            lr,
        });
    }
    Ok(TrainOutcome {
        best: best_store,
        last: store,
        log: TrainLog {
            epochs: records,
            best_epoch,
        },
    })
}
