//! Intensity-stratified subsets (tiny / moderate / heavy) and their fixed-ratio
//! mixture.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, StasError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IntensityClass {
    /// `[0, 1)` mm
    Tiny,
    /// `[1, 10)` mm
    Moderate,
    /// `[10, ∞)` mm
    Heavy,
}

impl IntensityClass {
    pub fn of(rain: f64) -> Self {
        if rain < 1.0 {
            IntensityClass::Tiny
        } else if rain < 10.0 {
            IntensityClass::Moderate
        } else {
            IntensityClass::Heavy
        }
    }

    pub fn split_name(self) -> &'static str {
        match self {
            IntensityClass::Tiny => "ECbT",
            IntensityClass::Moderate => "ECbM",
            IntensityClass::Heavy => "ECbH",
        }
    }
}

/// Sample indices per intensity class.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IntensitySplits {
    pub tiny: Vec<usize>,
    pub moderate: Vec<usize>,
    pub heavy: Vec<usize>,
}

impl IntensitySplits {
    pub fn get(&self, class: IntensityClass) -> &[usize] {
        match class {
            IntensityClass::Tiny => &self.tiny,
            IntensityClass::Moderate => &self.moderate,
            IntensityClass::Heavy => &self.heavy,
        }
    }

    pub fn total(&self) -> usize {
        self.tiny.len() + self.moderate.len() + self.heavy.len()
    }
}

/// Partition by observed rain into the half-open intervals `[0,1)`, `[1,10)`,
/// `[10,∞)`. Indices refer to positions in `rain`.
pub fn partition_by_intensity(rain: &[f64]) -> IntensitySplits {
    let mut out = IntensitySplits::default();
    for (i, &r) in rain.iter().enumerate() {
        match IntensityClass::of(r) {
            IntensityClass::Tiny => out.tiny.push(i),
            IntensityClass::Moderate => out.moderate.push(i),
            IntensityClass::Heavy => out.heavy.push(i),
        }
    }
    out
}

/// Per-class counts for `total` samples at `ratio`, using largest remainders
/// so every count is within one of its exact share.
pub fn ratio_counts(total: usize, ratio: [usize; 3]) -> [usize; 3] {
    let denom: usize = ratio.iter().sum();
    let mut counts = [0usize; 3];
    let mut rems = [(0usize, 0usize); 3];
    for i in 0..3 {
        counts[i] = total * ratio[i] / denom;
        rems[i] = (total * ratio[i] % denom, i);
    }
    let mut left = total - counts.iter().sum::<usize>();
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in &rems {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Largest total the classes can supply at `ratio`.
pub fn max_mixture_total(splits: &IntensitySplits, ratio: [usize; 3]) -> usize {
    let denom: usize = ratio.iter().sum();
    let sizes = [splits.tiny.len(), splits.moderate.len(), splits.heavy.len()];
    let units = (0..3)
        .filter(|&i| ratio[i] > 0)
        .map(|i| sizes[i] / ratio[i])
        .min()
        .unwrap_or(0);
    units * denom
}

/// Sample a mixture without replacement at `ratio` (tiny:moderate:heavy).
/// The result is sorted so downstream iteration order is stable.
pub fn mix_ratio(splits: &IntensitySplits, ratio: [usize; 3], total: usize, seed: u64) -> Result<Vec<usize>> {
    let counts = ratio_counts(total, ratio);
    let classes = [IntensityClass::Tiny, IntensityClass::Moderate, IntensityClass::Heavy];
    for (class, &n) in classes.iter().zip(&counts) {
        let available = splits.get(*class).len();
        if n > available {
            return Err(StasError::ClassExhausted {
                class: class.split_name().to_string(),
                available,
                requested: n,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(total);
    for (class, &n) in classes.iter().zip(&counts) {
        let mut pool = splits.get(*class).to_vec();
        pool.shuffle(&mut rng);
        out.extend_from_slice(&pool[..n]);
    }
    out.sort_unstable();
    Ok(out)
}
