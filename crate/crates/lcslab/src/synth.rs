//! Synthetic landscape generation.
//!
//! Landscapes are Voronoi partitions of randomly placed sites, one class per
//! site, with Gaussian channel noise on top. Voronoi cells give connected,
//! irregularly shaped regions while keeping an exact nearest-site oracle
//! available for tests.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{ClassMap, Dataset, ImagePatch, Sample, SparseLabelSet, Split, BORDER};
use crate::{derive_seed, Error, Result};

const TAG_LANDSCAPE: u64 = 1;
const TAG_LABELS: u64 = 2;

/// Configuration for one generated landscape patch.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub num_classes: u16,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Number of Voronoi sites ("blobs") per patch.
    pub blob_count: usize,
    /// Per-class spectral means, `num_classes` rows of `channels` values in [0, 1].
    pub means: Vec<Vec<f32>>,
    /// Standard deviation of the additive Gaussian channel noise.
    pub noise_sigma: f64,
    pub labels_per_patch: usize,
    pub seed: u64,
}

impl SynthConfig {
    /// Check structural constraints and class separability.
    ///
    /// Classes must be distinguishable from their spectra alone, so the
    /// pairwise channel-space distance between class means must exceed 2σ.
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("need at least 2 classes"));
        }
        if self.blob_count < 1 {
            return Err(Error::config("blob count must be at least 1"));
        }
        if self.labels_per_patch < 1 {
            return Err(Error::config("labels per patch must be at least 1"));
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(Error::config("noise sigma must be finite and non-negative"));
        }
        if self.means.len() != self.num_classes as usize {
            return Err(Error::config(format!(
                "expected {} mean rows, got {}",
                self.num_classes,
                self.means.len()
            )));
        }
        for (k, row) in self.means.iter().enumerate() {
            if row.len() != self.channels {
                return Err(Error::config(format!(
                    "mean row {k} has {} channels, expected {}",
                    row.len(),
                    self.channels
                )));
            }
            if row.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
                return Err(Error::config(format!("mean row {k} outside [0, 1]")));
            }
        }
        for a in 0..self.means.len() {
            for b in (a + 1)..self.means.len() {
                let dist = euclidean(&self.means[a], &self.means[b]);
                if dist <= 2.0 * self.noise_sigma {
                    return Err(Error::config(format!(
                        "classes {a} and {b} are not separable: mean distance {dist:.4} \
                         must exceed 2*sigma = {:.4}",
                        2.0 * self.noise_sigma
                    )));
                }
            }
        }
        Ok(())
    }
}

fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Evenly spaced class means: class `k` gets `(k+1)/(K+1)` in every channel,
/// giving adjacent classes a channel-space gap of `sqrt(C)/(K+1)`.
pub fn default_means(num_classes: u16, channels: usize) -> Vec<Vec<f32>> {
    (0..num_classes)
        .map(|k| vec![(k as f32 + 1.0) / (num_classes as f32 + 1.0); channels])
        .collect()
}

/// Assign each pixel the class of its nearest site (squared Euclidean
/// distance on (row, col); ties go to the lowest site index).
pub fn voronoi_classmap(
    sites: &[(f64, f64)],
    site_classes: &[u16],
    height: usize,
    width: usize,
) -> ClassMap {
    assert_eq!(sites.len(), site_classes.len());
    let mut classes = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (i, &(sr, sc)) in sites.iter().enumerate() {
                let dr = r as f64 - sr;
                let dc = c as f64 - sc;
                let d = dr * dr + dc * dc;
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            classes.push(site_classes[best]);
        }
    }
    ClassMap::new(height, width, classes).expect("voronoi map is dense by construction")
}

/// Standard normal draw via the Box-Muller transform.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // 1 - u maps [0,1) to (0,1], keeping the logarithm finite.
    let u1 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Generate one landscape patch and its dense ground truth.
///
/// Sites are placed uniformly in the patch, each with a uniformly random
/// class; the pixel value is the class spectral mean plus Gaussian noise,
/// clipped to [0, 1]. Deterministic for a fixed config (including seed).
pub fn gen_landscape(cfg: &SynthConfig) -> Result<(ImagePatch, ClassMap)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let sites: Vec<(f64, f64)> = (0..cfg.blob_count)
        .map(|_| {
            (
                rng.gen_range(0.0..cfg.height as f64),
                rng.gen_range(0.0..cfg.width as f64),
            )
        })
        .collect();
    let site_classes: Vec<u16> = (0..cfg.blob_count)
        .map(|_| rng.gen_range(0..cfg.num_classes))
        .collect();
    let truth = voronoi_classmap(&sites, &site_classes, cfg.height, cfg.width);

    let mut values = Vec::with_capacity(cfg.channels * cfg.height * cfg.width);
    for ch in 0..cfg.channels {
        for r in 0..cfg.height {
            for c in 0..cfg.width {
                let mean = cfg.means[truth.class(r, c) as usize][ch] as f64;
                let noisy = mean + cfg.noise_sigma * gaussian(&mut rng);
                values.push(noisy.clamp(0.0, 1.0) as f32);
            }
        }
    }
    let image = ImagePatch::new(cfg.channels, cfg.height, cfg.width, values)?;
    Ok((image, truth))
}

/// Sample `n` unique interior pixel positions and label them with the truth
/// class at that position. Interior means rows and cols in `[5, H-5)`.
pub fn place_labels(
    truth: &ClassMap,
    num_classes: u16,
    n: usize,
    seed: u64,
) -> Result<SparseLabelSet> {
    let (h, w) = (truth.height(), truth.width());
    let interior_h = h.saturating_sub(2 * BORDER);
    let interior_w = w.saturating_sub(2 * BORDER);
    let available = interior_h * interior_w;
    if n > available {
        return Err(Error::config(format!(
            "cannot place {n} labels: only {available} interior pixels in a {h}x{w} patch"
        )));
    }
    let mut positions: Vec<(u16, u16)> = (BORDER..h - BORDER)
        .flat_map(|r| (BORDER..w - BORDER).map(move |c| (r as u16, c as u16)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    positions.shuffle(&mut rng);
    positions.truncate(n);

    let entries: Vec<(u16, u16, u16)> = positions
        .into_iter()
        .map(|(r, c)| (r, c, truth.class(r as usize, c as usize)))
        .collect();
    SparseLabelSet::new(entries, num_classes, h, w)
}

/// Generate a full dataset of `train + val + test` patches plus their dense
/// ground-truth maps (index-aligned with the samples).
///
/// Per-patch randomness is derived from the config seed and the patch index,
/// so any prefix of the dataset is stable under changes to later counts.
pub fn gen_dataset(
    cfg: &SynthConfig,
    count_train: usize,
    count_val: usize,
    count_test: usize,
) -> Result<(Dataset, Vec<ClassMap>)> {
    cfg.validate()?;
    let total = count_train + count_val + count_test;
    let mut samples = Vec::with_capacity(total);
    let mut truths = Vec::with_capacity(total);
    for i in 0..total {
        let mut patch_cfg = cfg.clone();
        patch_cfg.seed = derive_seed(cfg.seed, TAG_LANDSCAPE, i as u64);
        let (image, truth) = gen_landscape(&patch_cfg)?;
        let labels = place_labels(
            &truth,
            cfg.num_classes,
            cfg.labels_per_patch,
            derive_seed(cfg.seed, TAG_LABELS, i as u64),
        )?;
        let split = if i < count_train {
            Split::Train
        } else if i < count_train + count_val {
            Split::Val
        } else {
            Split::Test
        };
        samples.push(Sample {
            image,
            labels,
            split,
            group: i as u32,
        });
        truths.push(truth);
    }
    Ok((Dataset::new(cfg.num_classes, samples)?, truths))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_cfg() -> SynthConfig {
        SynthConfig {
            num_classes: 3,
            channels: 2,
            height: 32,
            width: 32,
            blob_count: 6,
            means: default_means(3, 2),
            noise_sigma: 0.05,
            labels_per_patch: 4,
            seed: 11,
        }
    }

    #[test]
    fn default_means_are_evenly_spaced() {
        let means = default_means(5, 3);
        assert_eq!(means.len(), 5);
        for (k, row) in means.iter().enumerate() {
            assert_eq!(row.len(), 3);
            for &v in row {
                assert!((v - (k as f32 + 1.0) / 6.0).abs() < 1e-7);
            }
        }
        // Adjacent-class channel-space gap is sqrt(C)/(K+1).
        let gap = (0..3)
            .map(|c| {
                let d = (means[1][c] - means[0][c]) as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt();
        assert!((gap - 3f64.sqrt() / 6.0).abs() < 1e-7);
    }

    #[test]
    fn sigma_zero_single_blob_is_constant() {
        let mut cfg = base_cfg();
        cfg.blob_count = 1;
        cfg.noise_sigma = 0.0;
        let (image, truth) = gen_landscape(&cfg).unwrap();
        let class = truth.class(0, 0);
        assert!(truth.classes().iter().all(|&c| c == class));
        for ch in 0..cfg.channels {
            for r in 0..cfg.height {
                for c in 0..cfg.width {
                    assert_eq!(image.value(ch, r, c), cfg.means[class as usize][ch]);
                }
            }
        }
    }

    #[test]
    fn same_seed_reproduces_patch_and_truth() {
        let cfg = base_cfg();
        let (img_a, truth_a) = gen_landscape(&cfg).unwrap();
        let (img_b, truth_b) = gen_landscape(&cfg).unwrap();
        assert_eq!(img_a, img_b);
        assert_eq!(truth_a, truth_b);
        let mut other = cfg.clone();
        other.seed += 1;
        let (img_c, _) = gen_landscape(&other).unwrap();
        assert_ne!(img_a, img_c);
    }

    #[test]
    fn opposite_corner_sites_split_along_the_bisector() {
        // Sites at (0,0) and (31,31): pixel (r,c) is closer to the first
        // site iff r + c < 31, with the tie r + c = 31 going to site 0.
        let truth = voronoi_classmap(&[(0.0, 0.0), (31.0, 31.0)], &[0, 1], 32, 32);
        for r in 0..32 {
            for c in 0..32 {
                let expected = if r + c <= 31 { 0 } else { 1 };
                assert_eq!(truth.class(r, c), expected, "pixel ({r},{c})");
            }
        }
    }

    #[test]
    fn labels_match_truth_and_stay_interior() {
        let cfg = base_cfg();
        let (_, truth) = gen_landscape(&cfg).unwrap();
        let labels = place_labels(&truth, cfg.num_classes, 10, 3).unwrap();
        assert_eq!(labels.len(), 10);
        for &(r, c, class) in labels.entries() {
            assert!((5..27).contains(&(r as usize)));
            assert!((5..27).contains(&(c as usize)));
            assert_eq!(class, truth.class(r as usize, c as usize));
        }
        assert_eq!(
            labels,
            place_labels(&truth, cfg.num_classes, 10, 3).unwrap()
        );
        assert_ne!(
            labels,
            place_labels(&truth, cfg.num_classes, 10, 4).unwrap()
        );
    }

    #[test]
    fn exhaustive_labeling_covers_every_interior_pixel_once() {
        let cfg = base_cfg();
        let (_, truth) = gen_landscape(&cfg).unwrap();
        let n = (32 - 10) * (32 - 10);
        let labels = place_labels(&truth, cfg.num_classes, n, 0).unwrap();
        assert_eq!(labels.len(), n);
        let mut seen: Vec<(u16, u16)> = labels.entries().iter().map(|&(r, c, _)| (r, c)).collect();
        seen.sort_unstable();
        let expected: Vec<(u16, u16)> =
            (5..27).flat_map(|r| (5..27).map(move |c| (r, c))).collect();
        assert_eq!(seen, expected);
        assert!(place_labels(&truth, cfg.num_classes, n + 1, 0).is_err());
    }

    #[test]
    fn inseparable_means_are_rejected() {
        let mut cfg = base_cfg();
        // Distance between these two rows is 0.02, below 2*sigma = 0.1.
        cfg.means[1] = cfg.means[0].clone();
        cfg.means[1][0] += 0.02;
        assert!(matches!(gen_landscape(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn gen_dataset_assigns_splits_in_order() {
        let cfg = base_cfg();
        let (ds, truths) = gen_dataset(&cfg, 3, 2, 1).unwrap();
        assert_eq!(ds.len(), 6);
        assert_eq!(truths.len(), 6);
        let splits: Vec<Split> = ds.samples().iter().map(|s| s.split).collect();
        assert_eq!(
            splits,
            vec![
                Split::Train,
                Split::Train,
                Split::Train,
                Split::Val,
                Split::Val,
                Split::Test
            ]
        );
        // Truths align with samples: labels must agree with the sidecar map.
        for (sample, truth) in ds.samples().iter().zip(&truths) {
            for &(r, c, class) in sample.labels.entries() {
                assert_eq!(class, truth.class(r as usize, c as usize));
            }
        }
        // Prefix stability: generating fewer patches yields the same prefix.
        let (short, _) = gen_dataset(&cfg, 2, 0, 0).unwrap();
        assert_eq!(short.samples()[..2], ds.samples()[..2]);
    }
}
