use super::BORDER;
use crate::{Error, Result};

/// Train/validation/test split tag of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn to_byte(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Split::Train),
            1 => Ok(Split::Val),
            2 => Ok(Split::Test),
            other => Err(Error::format(format!("invalid split byte {other}"))),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" | "0" => Ok(Split::Train),
            "val" | "1" => Ok(Split::Val),
            "test" | "2" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split '{other}'"))),
        }
    }
}

/// A multi-channel image patch, channel-major `(C, H, W)`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePatch {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f32>,
}

impl ImagePatch {
    /// Minimum accepted patch side length.
    pub const MIN_SIDE: usize = 16;

    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if height < Self::MIN_SIDE || width < Self::MIN_SIDE {
            return Err(Error::validation(format!(
                "patch must be at least {m}x{m}, got {height}x{width}",
                m = Self::MIN_SIDE
            )));
        }
        if channels == 0 {
            return Err(Error::validation("patch needs at least one channel"));
        }
        if values.len() != channels * height * width {
            return Err(Error::validation(format!(
                "value buffer has {} entries, expected {}",
                values.len(),
                channels * height * width
            )));
        }
        for &v in &values {
            if !v.is_finite() {
                return Err(Error::validation("patch contains a non-finite value"));
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(format!(
                    "patch value {v} outside [0, 1]; normalize first"
                )));
            }
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn value(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.values[(channel * self.height + row) * self.width + col]
    }

    /// View this patch as its own feature map (`F = X`, `F = C`).
    pub fn to_feature_map(&self) -> FeatureMap {
        FeatureMap {
            height: self.height,
            width: self.width,
            features: self.channels,
            values: self.values.clone(),
        }
    }
}

/// A pixel-wise feature raster `(F, H, W)`, either the raw image or the
/// output of an external feature extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    features: usize,
    values: Vec<f32>,
}

impl FeatureMap {
    pub fn new(features: usize, height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if features == 0 || height == 0 || width == 0 {
            return Err(Error::validation("feature map dimensions must be positive"));
        }
        if values.len() != features * height * width {
            return Err(Error::validation(format!(
                "feature buffer has {} entries, expected {}",
                values.len(),
                features * height * width
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("feature map contains a non-finite value"));
        }
        Ok(Self {
            height,
            width,
            features,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn value(&self, feature: usize, row: usize, col: usize) -> f32 {
        self.values[(feature * self.height + row) * self.width + col]
    }

    /// All feature values of one pixel, in feature order.
    pub fn pixel(&self, row: usize, col: usize) -> impl Iterator<Item = f32> + '_ {
        (0..self.features).map(move |f| self.value(f, row, col))
    }
}

/// Sparse point labels `(row, col, class)` supervising a patch.
///
/// Positions are unique and respect the 5px border rule: every labeled pixel
/// lies in `[BORDER, H - BORDER) x [BORDER, W - BORDER)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseLabelSet {
    entries: Vec<(u16, u16, u16)>,
    num_classes: u16,
}

impl SparseLabelSet {
    pub fn new(
        entries: Vec<(u16, u16, u16)>,
        num_classes: u16,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::validation("need at least two classes"));
        }
        let mut seen = std::collections::HashSet::new();
        for &(row, col, class) in &entries {
            let (r, c) = (row as usize, col as usize);
            if r < BORDER || r >= height - BORDER || c < BORDER || c >= width - BORDER {
                return Err(Error::validation(format!(
                    "label at ({row}, {col}) violates the {BORDER}px border rule for {height}x{width}"
                )));
            }
            if class >= num_classes {
                return Err(Error::validation(format!(
                    "label class {class} outside [0, {num_classes})"
                )));
            }
            if !seen.insert((row, col)) {
                return Err(Error::validation(format!(
                    "duplicate label position ({row}, {col})"
                )));
            }
        }
        Ok(Self {
            entries,
            num_classes,
        })
    }

    pub fn entries(&self) -> &[(u16, u16, u16)] {
        &self.entries
    }

    pub fn num_classes(&self) -> u16 {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Dense per-pixel class ids, row-major `H x W`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    height: usize,
    width: usize,
    classes: Vec<u16>,
}

impl ClassMap {
    pub fn new(height: usize, width: usize, classes: Vec<u16>) -> Result<Self> {
        if classes.len() != height * width {
            return Err(Error::validation(format!(
                "class buffer has {} entries, expected {}",
                classes.len(),
                height * width
            )));
        }
        Ok(Self {
            height,
            width,
            classes,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> &[u16] {
        &self.classes
    }

    pub fn class(&self, row: usize, col: usize) -> u16 {
        self.classes[row * self.width + col]
    }
}

/// One dataset sample: a patch, its sparse labels, and split bookkeeping.
///
/// The group id is the geographic-grouping analog: samples sharing a group
/// are expected to share a split.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: ImagePatch,
    pub labels: SparseLabelSet,
    pub split: Split,
    pub group: u32,
}

/// An in-memory dataset with uniform `K, C, H, W` across samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    num_classes: u16,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(num_classes: u16, samples: Vec<Sample>) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::validation("dataset needs at least two classes"));
        }
        if let Some(first) = samples.first() {
            let (c, h, w) = (
                first.image.channels(),
                first.image.height(),
                first.image.width(),
            );
            for (i, s) in samples.iter().enumerate() {
                if s.image.channels() != c || s.image.height() != h || s.image.width() != w {
                    return Err(Error::validation(format!(
                        "sample {i} has shape ({}, {}, {}), expected ({c}, {h}, {w})",
                        s.image.channels(),
                        s.image.height(),
                        s.image.width()
                    )));
                }
                if s.labels.num_classes() != num_classes {
                    return Err(Error::validation(format!(
                        "sample {i} labeled for {} classes, dataset has {num_classes}",
                        s.labels.num_classes()
                    )));
                }
            }
        }
        Ok(Self {
            num_classes,
            samples,
        })
    }

    pub fn num_classes(&self) -> u16 {
        self.num_classes
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Indices of samples in the given split, in file order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Shape of every sample as `(C, H, W)`; `None` for an empty dataset.
    pub fn shape(&self) -> Option<(usize, usize, usize)> {
        self.samples
            .first()
            .map(|s| (s.image.channels(), s.image.height(), s.image.width()))
    }

    pub fn into_samples(self) -> Vec<Sample> {
        self.samples
    }
}
