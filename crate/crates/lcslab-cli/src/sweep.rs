//! The experiment grid: one training cell per (minimum mapping unit,
//! repeat seed), run in a bounded worker pool, reduced single-threaded into
//! a per-cell CSV, a mean/std summary, and two line plots.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use lcslab::data::{read_dataset, write_class_rasters, Dataset, Split};
use lcslab::metrics::{evaluate_report, MetricsReport};
use lcslab::models::write_model_config;
use lcslab::seg::DEFAULT_K;
use lcslab::train::{repeat_seeds, train};
use lcslab::{Error, Result};

use crate::args;
use crate::commands::{build_task, TrainSpec, METRICS_FILE, MODEL_CONFIG_FILE};
use crate::pipeline::{
    load_segments, metrics_row, parse_seg_mode, predict_indices, segment_dataset, write_segments,
    METRICS_HEADER,
};
use crate::plot::{line_plot, Series};
use crate::settings::Settings;

pub const SWEEP_CELLS_FILE: &str = "sweep.csv";
pub const SWEEP_SUMMARY_FILE: &str = "sweep_summary.csv";
pub const ACCURACY_PLOT_FILE: &str = "accuracy_vs_mmu.svg";
pub const DENSITY_PLOT_FILE: &str = "patch_density_vs_mmu.svg";

struct Cell {
    mmu: usize,
    repeat: usize,
    seed: u64,
}

struct CellResult {
    report: MetricsReport,
}

fn parse_mmus(text: &str) -> Result<Vec<usize>> {
    let mut mmus = Vec::new();
    for part in text.split(',') {
        let value: usize = part
            .trim()
            .parse()
            .map_err(|e| Error::config(format!("bad mmu '{}': {e}", part.trim())))?;
        if value == 0 {
            return Err(Error::config("mmu must be at least 1"));
        }
        mmus.push(value);
    }
    mmus.sort_unstable();
    mmus.dedup();
    if mmus.is_empty() {
        return Err(Error::config("need at least one mmu"));
    }
    Ok(mmus)
}

fn cell_dir(out: &Path, cell: &Cell) -> PathBuf {
    out.join(format!("mmu{}_r{}", cell.mmu, cell.repeat))
}

/// Run one grid cell in isolation: segment at the cell's minimum mapping
/// unit, train from the cell's seed, predict the test split, and score it.
/// All artifacts land in the cell's own directory.
fn run_cell(
    dataset: &Dataset,
    spec: &TrainSpec,
    k: f64,
    out: &Path,
    cell: &Cell,
) -> Result<CellResult> {
    let dir = cell_dir(out, cell);
    std::fs::create_dir_all(&dir)?;

    let mode = if cell.mmu == 1 { "trivial" } else { "fh" };
    let seg_cfg = parse_seg_mode(mode, cell.mmu, k)?;
    let maps = segment_dataset(dataset, &seg_cfg)?;
    let seg_dir = dir.join("segs");
    write_segments(&seg_dir, &seg_cfg, &maps)?;
    let segs = load_segments(&seg_dir, dataset.len())?;

    let task = build_task(dataset, &segs, None, spec)?;
    write_model_config(&task.model, &dir.join(MODEL_CONFIG_FILE))?;
    let outcome = train(&task, &spec.train_config(cell.seed))?;
    outcome.best.save(&dir.join("model.lcpk"))?;
    std::fs::write(dir.join("log.csv"), outcome.log.to_csv())?;

    let test_indices = dataset.split_indices(Split::Test);
    if test_indices.is_empty() {
        return Err(Error::validation("sweep needs a non-empty test split"));
    }
    let preds = predict_indices(
        &task.model,
        &outcome.best,
        dataset,
        &segs,
        None,
        &test_indices,
        cell.seed,
    )?;
    write_class_rasters(&preds, dataset.num_classes(), &dir.join("pred.lcsr"))?;
    let labels: Vec<_> = test_indices
        .iter()
        .map(|&i| dataset.samples()[i].labels.clone())
        .collect();
    let report = evaluate_report(&preds, &labels)?;
    std::fs::write(
        dir.join(METRICS_FILE),
        format!("{METRICS_HEADER}\n{}\n", metrics_row(&report)),
    )?;
    Ok(CellResult { report })
}

fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn run_sweep(a: args::SweepArgs) -> Result<()> {
    let s = Settings::load(a.config.as_deref(), "sweep")?;
    let dataset_path = PathBuf::from(s.required("dataset", a.dataset)?);
    let out = PathBuf::from(s.required("out", a.out)?);
    let mmus = parse_mmus(&s.text("mmus", a.mmus, "1,5,10,20,40"))?;
    let k: f64 = s.value("k", a.k, DEFAULT_K)?;
    let workers: usize = s.value("workers", a.workers, 2)?;
    let spec = TrainSpec::resolve(&s, &a.model)?;
    s.finish()?;
    if workers == 0 {
        return Err(Error::config("need at least one worker"));
    }
    std::fs::create_dir_all(&out)?;

    let dataset = Arc::new(read_dataset(&dataset_path)?);
    let seeds = repeat_seeds(&spec.train_config(spec.seed));
    let cells: Vec<Cell> = mmus
        .iter()
        .flat_map(|&mmu| {
            seeds.iter().enumerate().map(move |(r, &seed)| Cell {
                mmu,
                repeat: r,
                seed,
            })
        })
        .collect();

    // Bounded worker pool: each worker claims the next unclaimed cell and
    // trains it in an isolated context; results keep their cell's slot so
    // the reduction below is order-independent.
    let spec = Arc::new(spec);
    let cells = Arc::new(cells);
    let next = Arc::new(AtomicUsize::new(0));
    let results: Arc<Vec<std::sync::Mutex<Option<Result<CellResult>>>>> = Arc::new(
        (0..cells.len())
            .map(|_| std::sync::Mutex::new(None))
            .collect(),
    );
    let pool_size = workers.min(cells.len());
    let mut handles = Vec::with_capacity(pool_size);
    for _ in 0..pool_size {
        let dataset = Arc::clone(&dataset);
        let spec = Arc::clone(&spec);
        let cells = Arc::clone(&cells);
        let next = Arc::clone(&next);
        let results = Arc::clone(&results);
        let out = out.clone();
        handles.push(std::thread::spawn(move || loop {
            let idx = next.fetch_add(1, Ordering::SeqCst);
            if idx >= cells.len() {
                break;
            }
            let outcome = run_cell(&dataset, &spec, k, &out, &cells[idx]);
            *results[idx].lock().unwrap() = Some(outcome);
        }));
    }
    for handle in handles {
        handle
            .join()
            .map_err(|_| Error::training("a sweep worker panicked"))?;
    }

    // Ordered single-threaded reduction.
    let mut rows = Vec::with_capacity(cells.len());
    for (cell, slot) in cells.iter().zip(results.iter()) {
        let outcome = slot
            .lock()
            .unwrap()
            .take()
            .ok_or_else(|| Error::training("a sweep cell was never run"))?;
        let result = outcome.map_err(|e| {
            Error::training(format!("cell mmu={} repeat={}: {e}", cell.mmu, cell.repeat))
        })?;
        rows.push((cell.mmu, cell.repeat, cell.seed, result.report));
    }

    let mut cell_csv = format!("model,operator,mmu,fraction,seed,{METRICS_HEADER}\n");
    for (mmu, _, seed, report) in &rows {
        cell_csv.push_str(&format!(
            "{},{},{mmu},{},{seed},{}\n",
            spec.arch,
            spec.op,
            spec.fraction,
            metrics_row(report)
        ));
    }
    std::fs::write(out.join(SWEEP_CELLS_FILE), cell_csv)?;

    // One summary row per mmu: mean and population standard deviation over
    // the repeats of every reported metric.
    type MetricColumn = (&'static str, fn(&MetricsReport) -> f64);
    let fields: [MetricColumn; 8] = [
        ("oa_t0", |r| r.oa_t0),
        ("oa_t1", |r| r.oa_t1),
        ("f1_t0", |r| r.f1_t0),
        ("f1_t1", |r| r.f1_t1),
        ("patch_density", |r| r.patch_density),
        ("edge_density", |r| r.edge_density),
        ("edge_proportion", |r| r.edge_proportion),
        ("entropy", |r| r.entropy),
    ];
    let mut header = String::from("model,operator,mmu,fraction,repeats");
    for (name, _) in &fields {
        header.push_str(&format!(",{name}_mean,{name}_std"));
    }
    let mut summary_csv = header;
    summary_csv.push('\n');
    let mut oa_t0_means = Vec::new();
    let mut oa_t1_means = Vec::new();
    let mut density_means = Vec::new();
    for &mmu in &mmus {
        let group: Vec<&MetricsReport> = rows
            .iter()
            .filter(|(m, ..)| *m == mmu)
            .map(|(.., r)| r)
            .collect();
        summary_csv.push_str(&format!(
            "{},{},{mmu},{},{}",
            spec.arch,
            spec.op,
            spec.fraction,
            group.len()
        ));
        for (_, get) in &fields {
            let values: Vec<f64> = group.iter().map(|r| get(r)).collect();
            let (mean, std) = mean_and_std(&values);
            summary_csv.push_str(&format!(",{mean},{std}"));
        }
        summary_csv.push('\n');
        let oa0: Vec<f64> = group.iter().map(|r| r.oa_t0).collect();
        let oa1: Vec<f64> = group.iter().map(|r| r.oa_t1).collect();
        let pd: Vec<f64> = group.iter().map(|r| r.patch_density).collect();
        oa_t0_means.push(mean_and_std(&oa0).0);
        oa_t1_means.push(mean_and_std(&oa1).0);
        density_means.push(mean_and_std(&pd).0);
    }
    std::fs::write(out.join(SWEEP_SUMMARY_FILE), summary_csv)?;

    let x_labels: Vec<String> = mmus.iter().map(|m| m.to_string()).collect();
    line_plot(
        &format!(
            "Overall accuracy vs minimum mapping unit ({}/{})",
            spec.arch, spec.op
        ),
        "minimum mapping unit (pixels)",
        "overall accuracy",
        &x_labels,
        &[
            Series {
                name: "exact (t=0)",
                values: &oa_t0_means,
            },
            Series {
                name: "tolerant (t=1)",
                values: &oa_t1_means,
            },
        ],
        &out.join(ACCURACY_PLOT_FILE),
    )?;
    line_plot(
        &format!(
            "Patch density vs minimum mapping unit ({}/{})",
            spec.arch, spec.op
        ),
        "minimum mapping unit (pixels)",
        "patches per evaluated area",
        &x_labels,
        &[Series {
            name: "patch density",
            values: &density_means,
        }],
        &out.join(DENSITY_PLOT_FILE),
    )?;

    println!(
        "swept {} cells ({} mmus x {} repeats) into {}",
        rows.len(),
        mmus.len(),
        seeds.len(),
        out.display()
    );
    Ok(())
}
