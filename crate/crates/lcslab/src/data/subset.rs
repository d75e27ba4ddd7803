use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Training-set fraction for label-scarcity experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fraction {
    Full,
    Half,
    Quarter,
    Eighth,
    Sixteenth,
}

impl Fraction {
    pub fn parse(text: &str) -> Result<Self> {
        match text.trim() {
            "1" | "1/1" => Ok(Self::Full),
            "1/2" => Ok(Self::Half),
            "1/4" => Ok(Self::Quarter),
            "1/8" => Ok(Self::Eighth),
            "1/16" => Ok(Self::Sixteenth),
            other => Err(Error::config(format!(
                "unknown fraction '{other}' (expected 1, 1/2, 1/4, 1/8 or 1/16)"
            ))),
        }
    }

    pub fn denominator(self) -> usize {
        match self {
            Self::Full => 1,
            Self::Half => 2,
            Self::Quarter => 4,
            Self::Eighth => 8,
            Self::Sixteenth => 16,
        }
    }

    /// Subset size for a pool of `n` items: `ceil(n / denominator)`.
    pub fn count(self, n: usize) -> usize {
        n.div_ceil(self.denominator())
    }
}

impl std::fmt::Display for Fraction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Full => write!(f, "1"),
            other => write!(f, "1/{}", other.denominator()),
        }
    }
}

/// Select a deterministic subset of `fraction * n` indices out of `0..n`.
///
/// The full pool is shuffled once with the seeded generator and the subset is
/// the prefix of that permutation, so smaller fractions nest inside larger
/// ones for the same seed: subset(1/16) ⊂ subset(1/8) ⊂ ... ⊂ subset(1).
pub fn hierarchical_subset(n: usize, fraction: Fraction, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order.truncate(fraction.count(n));
    order
}
