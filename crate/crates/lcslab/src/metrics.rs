//! Accuracy at sparse labels (with an optional one-pixel tolerance) and
//! landscape fragmentation measures, all computed on the map interior after
//! a fixed border exclusion.

use std::collections::BTreeMap;

use crate::data::{ClassMap, SparseLabelSet, BORDER};
use crate::{Error, Result};

/// Scoring parameters. The border is fixed; only the tolerance varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MetricsConfig {
    /// Pixel tolerance for accuracy/F1: 0 (exact) or 1 (8-neighborhood).
    pub tolerance: usize,
}

impl MetricsConfig {
    pub fn new(tolerance: usize) -> Result<Self> {
        if tolerance > 1 {
            return Err(Error::validation(format!(
                "tolerance must be 0 or 1, got {tolerance}"
            )));
        }
        Ok(Self { tolerance })
    }
}

/// All per-run scores. Accuracy and F1 are pooled over every label of the
/// evaluation set; the fragmentation columns are per-patch averages.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub oa_t0: f64,
    pub oa_t1: f64,
    pub f1_t0: f64,
    pub f1_t1: f64,
    /// Mean count of 4-connected constant-class interior regions per patch.
    pub patch_density: f64,
    /// Mean count of interior pixels that touch another class per patch.
    pub edge_density: f64,
    /// `edge_density` normalized by the interior pixel count.
    pub edge_proportion: f64,
    /// Mean Shannon entropy (nats) of the interior class frequencies.
    pub entropy: f64,
}

/// Interior pixel ranges after border exclusion, or `None` when the map is
/// too small to have an interior.
fn interior(h: usize, w: usize) -> Option<(std::ops::Range<usize>, std::ops::Range<usize>)> {
    (h > 2 * BORDER && w > 2 * BORDER).then(|| (BORDER..h - BORDER, BORDER..w - BORDER))
}

fn in_interior(pred: &ClassMap, r: usize, c: usize) -> bool {
    match interior(pred.height(), pred.width()) {
        Some((rows, cols)) => rows.contains(&r) && cols.contains(&c),
        None => false,
    }
}

/// Does `class` appear in the prediction within Chebyshev distance
/// `tolerance` of `(r, c)`, looking only at interior pixels?
fn matches_within(pred: &ClassMap, r: usize, c: usize, class: u16, tolerance: usize) -> bool {
    let t = tolerance as isize;
    for dr in -t..=t {
        for dc in -t..=t {
            let (nr, nc) = (r as isize + dr, c as isize + dc);
            if nr < 0 || nc < 0 {
                continue;
            }
            let (nr, nc) = (nr as usize, nc as usize);
            if nr >= pred.height() || nc >= pred.width() || !in_interior(pred, nr, nc) {
                continue;
            }
            if pred.class(nr, nc) == class {
                return true;
            }
        }
    }
    false
}

fn check_labels(pred: &ClassMap, labels: &SparseLabelSet, tolerance: usize) -> Result<()> {
    if tolerance > 1 {
        return Err(Error::validation(format!(
            "tolerance must be 0 or 1, got {tolerance}"
        )));
    }
    if labels.is_empty() {
        return Err(Error::validation("label set is empty"));
    }
    for &(r, c, _) in labels.entries() {
        if !in_interior(pred, r as usize, c as usize) {
            return Err(Error::validation(format!(
                "label at ({r}, {c}) lies outside the evaluated interior"
            )));
        }
    }
    Ok(())
}

/// (correct, total) label counts at the given tolerance. Empty label sets
/// yield (0, 0) so that callers can pool counts across samples.
pub fn accuracy_counts(
    pred: &ClassMap,
    labels: &SparseLabelSet,
    tolerance: usize,
) -> Result<(u64, u64)> {
    if !labels.is_empty() {
        check_labels(pred, labels, tolerance)?;
    }
    Ok(raw_accuracy_counts(pred, labels, tolerance))
}

fn raw_accuracy_counts(pred: &ClassMap, labels: &SparseLabelSet, tolerance: usize) -> (u64, u64) {
    let mut correct = 0u64;
    for &(r, c, class) in labels.entries() {
        if matches_within(pred, r as usize, c as usize, class, tolerance) {
            correct += 1;
        }
    }
    (correct, labels.len() as u64)
}

/// Fraction of labels whose class appears within the tolerance window.
/// At `tolerance` 0 this is plain per-pixel accuracy.
pub fn overall_accuracy(pred: &ClassMap, labels: &SparseLabelSet, tolerance: usize) -> Result<f64> {
    check_labels(pred, labels, tolerance)?;
    let (correct, total) = raw_accuracy_counts(pred, labels, tolerance);
    Ok(correct as f64 / total as f64)
}

/// Confusion counts keyed by (true class, effective predicted class). The
/// effective prediction is the true class when it appears in the tolerance
/// window, otherwise the prediction at the pixel itself.
fn confusion_counts(
    pred: &ClassMap,
    labels: &SparseLabelSet,
    tolerance: usize,
) -> BTreeMap<(u16, u16), u64> {
    let mut counts = BTreeMap::new();
    for &(r, c, class) in labels.entries() {
        let effective = if matches_within(pred, r as usize, c as usize, class, tolerance) {
            class
        } else {
            pred.class(r as usize, c as usize)
        };
        *counts.entry((class, effective)).or_insert(0u64) += 1;
    }
    counts
}

/// Macro F1 over the classes present in the true labels. Classes with zero
/// precision+recall contribute an F1 of 0.
fn f1_from_confusion(counts: &BTreeMap<(u16, u16), u64>) -> f64 {
    let mut present: Vec<u16> = counts.keys().map(|&(t, _)| t).collect();
    present.sort_unstable();
    present.dedup();
    let mut sum = 0.0;
    for &k in &present {
        let tp = *counts.get(&(k, k)).unwrap_or(&0) as f64;
        let fn_: u64 = counts
            .iter()
            .filter(|(&(t, e), _)| t == k && e != k)
            .map(|(_, &n)| n)
            .sum();
        let fp: u64 = counts
            .iter()
            .filter(|(&(t, e), _)| t != k && e == k)
            .map(|(_, &n)| n)
            .sum();
        let denom = 2.0 * tp + fn_ as f64 + fp as f64;
        if denom > 0.0 {
            sum += 2.0 * tp / denom;
        }
    }
    sum / present.len() as f64
}

/// Tolerance-aware macro F1 over the classes present in the labels.
pub fn f1_macro(pred: &ClassMap, labels: &SparseLabelSet, tolerance: usize) -> Result<f64> {
    check_labels(pred, labels, tolerance)?;
    Ok(f1_from_confusion(&confusion_counts(
        pred, labels, tolerance,
    )))
}

/// Count of maximal 4-connected constant-class regions in the interior.
/// Maps too small to have an interior count zero regions.
pub fn patch_density(pred: &ClassMap) -> usize {
    let Some((rows, cols)) = interior(pred.height(), pred.width()) else {
        return 0;
    };
    let (h, w) = (rows.len(), cols.len());
    let at = |r: usize, c: usize| pred.class(rows.start + r, cols.start + c);
    let mut seen = vec![false; h * w];
    let mut regions = 0usize;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if seen[start] {
            continue;
        }
        regions += 1;
        let class = at(start / w, start % w);
        seen[start] = true;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (r, c) = (p / w, p % w);
            let mut visit = |nr: usize, nc: usize| {
                let q = nr * w + nc;
                if !seen[q] && at(nr, nc) == class {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if r > 0 {
                visit(r - 1, c);
            }
            if r + 1 < h {
                visit(r + 1, c);
            }
            if c > 0 {
                visit(r, c - 1);
            }
            if c + 1 < w {
                visit(r, c + 1);
            }
        }
    }
    regions
}

/// Count of interior pixels with at least one 4-neighbor (also interior) of
/// a different class.
pub fn edge_density(pred: &ClassMap) -> usize {
    let Some((rows, cols)) = interior(pred.height(), pred.width()) else {
        return 0;
    };
    let mut count = 0usize;
    for r in rows.clone() {
        for c in cols.clone() {
            let class = pred.class(r, c);
            let differs = (r > rows.start && pred.class(r - 1, c) != class)
                || (r + 1 < rows.end && pred.class(r + 1, c) != class)
                || (c > cols.start && pred.class(r, c - 1) != class)
                || (c + 1 < cols.end && pred.class(r, c + 1) != class);
            if differs {
                count += 1;
            }
        }
    }
    count
}

/// Interior pixel count after border exclusion (0 for tiny maps).
pub fn interior_area(pred: &ClassMap) -> usize {
    interior(pred.height(), pred.width()).map_or(0, |(r, c)| r.len() * c.len())
}

/// Shannon entropy (nats) of the interior class frequency distribution,
/// with 0 ln 0 taken as 0.
pub fn entropy_metric(pred: &ClassMap) -> f64 {
    let Some((rows, cols)) = interior(pred.height(), pred.width()) else {
        return 0.0;
    };
    let mut counts: BTreeMap<u16, u64> = BTreeMap::new();
    for r in rows.clone() {
        for c in cols.clone() {
            *counts.entry(pred.class(r, c)).or_insert(0) += 1;
        }
    }
    let total = (rows.len() * cols.len()) as f64;
    -counts
        .values()
        .map(|&n| {
            let p = n as f64 / total;
            p * p.ln()
        })
        .sum::<f64>()
}

/// Score a set of predictions against aligned label sets: accuracy and F1
/// pooled over every label, fragmentation measures averaged per patch.
pub fn evaluate_report(preds: &[ClassMap], labels: &[SparseLabelSet]) -> Result<MetricsReport> {
    if preds.len() != labels.len() {
        return Err(Error::validation(format!(
            "{} predictions vs {} label sets",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::validation("nothing to evaluate"));
    }
    let mut correct = [0u64; 2];
    let mut total = 0u64;
    let mut confusion: [BTreeMap<(u16, u16), u64>; 2] = [BTreeMap::new(), BTreeMap::new()];
    let mut patch_sum = 0.0;
    let mut edge_sum = 0.0;
    let mut prop_sum = 0.0;
    let mut entropy_sum = 0.0;
    for (pred, label_set) in preds.iter().zip(labels) {
        if !label_set.is_empty() {
            check_labels(pred, label_set, 0)?;
        }
        for t in 0..2 {
            let (c, n) = raw_accuracy_counts(pred, label_set, t);
            correct[t] += c;
            if t == 0 {
                total += n;
            }
            for (key, n) in confusion_counts(pred, label_set, t) {
                *confusion[t].entry(key).or_insert(0) += n;
            }
        }
        patch_sum += patch_density(pred) as f64;
        let edges = edge_density(pred);
        edge_sum += edges as f64;
        let area = interior_area(pred);
        prop_sum += if area == 0 {
            0.0
        } else {
            edges as f64 / area as f64
        };
        entropy_sum += entropy_metric(pred);
    }
    if total == 0 {
        return Err(Error::validation("no labels in the evaluation set"));
    }
    let n = preds.len() as f64;
    Ok(MetricsReport {
        oa_t0: correct[0] as f64 / total as f64,
        oa_t1: correct[1] as f64 / total as f64,
        f1_t0: f1_from_confusion(&confusion[0]),
        f1_t1: f1_from_confusion(&confusion[1]),
        patch_density: patch_sum / n,
        edge_density: edge_sum / n,
        edge_proportion: prop_sum / n,
        entropy: entropy_sum / n,
    })
}
