//! Output heads: ordinal regression, the bin-distribution rank regressor, and
//! latent noise injection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::layers::Linear;
use super::params::ParamStore;
use crate::autograd::{Graph, Var};
use crate::error::{Result, StasError};
use crate::tensor::Tensor;

/// Binary targets for `classes` threshold classifiers: entry `v` is 1 iff
/// `y > v·xi`.
pub fn ordinal_encode(y: f64, xi: f64, classes: usize) -> Vec<f64> {
    (0..classes)
        .map(|v| if y > v as f64 * xi { 1.0 } else { 0.0 })
        .collect()
}

/// `xi` times the number of classifiers whose probability reaches `theta`.
pub fn ordinal_decode(probs: &[f64], xi: f64, theta: f64) -> f64 {
    xi * probs.iter().filter(|&&p| p >= theta).count() as f64
}

/// Ordinal precipitation head: pooled features → hidden layer → one logit per
/// threshold classifier.
#[derive(Clone, Debug)]
pub struct OrdinalHead {
    pub hidden: Linear,
    pub logits: Linear,
    pub classes: usize,
    pub xi: f64,
    pub theta: f64,
}

impl OrdinalHead {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        inputs: usize,
        width: usize,
        classes: usize,
        xi: f64,
        theta: f64,
    ) -> Self {
        Self {
            hidden: Linear::new(store, rng, &format!("{name}.fc1"), inputs, width),
            logits: Linear::new(store, rng, &format!("{name}.fc2"), width, classes),
            classes,
            xi,
            theta,
        }
    }

    /// Largest value the head can emit.
    pub fn capacity(&self) -> f64 {
        self.classes as f64 * self.xi
    }

    pub fn forward_logits(&self, g: &mut Graph, store: &ParamStore, features: Var) -> Var {
        let h = self.hidden.forward(g, store, features);
        let h = g.relu(h);
        self.logits.forward(g, store, h)
    }

    pub fn decode(&self, probs: &[f64]) -> f64 {
        ordinal_decode(probs, self.xi, self.theta)
    }
}

/// Expectation over bin centres plus a refinement, clamped at zero.
pub fn rank_regress_decode(distribution: &[f64], refinement: f64, interval: f64) -> Result<f64> {
    if let Some(p) = distribution.iter().find(|p| **p < 0.0) {
        return Err(StasError::InvalidValue(format!("negative bin probability {p}")));
    }
    let total: f64 = distribution.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(StasError::InvalidValue(format!(
            "bin distribution sums to {total}"
        )));
    }
    let expectation: f64 = distribution
        .iter()
        .enumerate()
        .map(|(i, p)| bin_center(i, interval) * p)
        .sum();
    Ok((expectation + refinement).max(0.0))
}

pub fn bin_center(i: usize, interval: f64) -> f64 {
    (i as f64 + 0.5) * interval
}

/// Rank regressor with a softmax over fixed-width bins and a scalar
/// refinement branch.
#[derive(Clone, Debug)]
pub struct RankRegressor {
    pub dist: Linear,
    pub refine: Linear,
    pub interval: f64,
    pub bins: usize,
}

impl RankRegressor {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, inputs: usize, bins: usize, interval: f64) -> Self {
        Self {
            dist: Linear::new(store, rng, &format!("{name}.dist"), inputs, bins),
            refine: Linear::zeroed(store, rng, &format!("{name}.refine"), inputs, 1),
            interval,
            bins,
        }
    }

    /// Returns `(distribution, decoded value)`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, features: Var) -> (Var, Var) {
        let logits = self.dist.forward(g, store, features);
        let p = g.softmax(logits);
        let centers = Tensor::from_fn(&[self.bins], |i| bin_center(i, self.interval));
        let centers = g.constant(centers);
        let weighted = g.mul(p, centers);
        let expectation = g.sum(weighted);
        let r = self.refine.forward(g, store, features);
        let value = g.add(expectation, r);
        (p, g.relu(value))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// `z + ε` with `ε ~ N(0, σ²)` i.i.d. in training mode; identity in eval mode
/// or when `σ = 0`.
pub fn inject_noise(z: &Tensor, sigma: f64, seed: u64, mode: Mode) -> Tensor {
    if mode == Mode::Eval || sigma == 0.0 {
        return z.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and non-negative");
    let data = z.data().iter().map(|&v| v + normal.sample(&mut rng)).collect();
    Tensor::new(z.shape(), data)
}

/// Stable seed for a tuple such as `(run seed, epoch, sample, lag)`.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        // splitmix64 finaliser
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

/// Graph version of [`inject_noise`]; the noise enters as a constant.
pub fn inject_noise_var(g: &mut Graph, z: Var, sigma: f64, seed: u64, mode: Mode) -> Var {
    if mode == Mode::Eval || sigma == 0.0 {
        return z;
    }
    let zeros = Tensor::zeros(g.shape(z));
    let eps = inject_noise(&zeros, sigma, seed, mode);
    let eps = g.constant(eps);
    g.add(z, eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn ordinal_encode_examples() {
        assert_eq!(ordinal_encode(1.5, 0.5, 5), vec![1.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(ordinal_encode(0.0, 0.5, 5), vec![0.0; 5]);
        assert_eq!(ordinal_encode(100.0, 0.5, 5), vec![1.0; 5]);
    }

    #[test]
    fn ordinal_decode_examples() {
        assert_eq!(ordinal_decode(&[0.9, 0.8, 0.6, 0.3, 0.1], 0.5, 0.5), 1.5);
        assert_eq!(ordinal_decode(&[0.0; 5], 0.5, 0.5), 0.0);
        assert_eq!(ordinal_decode(&[1.0, 1.0, 1.0, 1.0, 0.0, 0.0], 0.5, 0.5), 2.0);
    }

    #[test]
    fn ordinal_decode_matches_brute_force_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let p: Vec<f64> = (0..60).map(|_| rng.random::<f64>()).collect();
            let mut count = 0;
            for v in &p {
                if *v >= 0.5 {
                    count += 1;
                }
            }
            assert_eq!(ordinal_decode(&p, 0.5, 0.5) / 0.5, count as f64);
        }
    }

    proptest! {
        // Perfect probabilities recover y rounded up to the next multiple of xi
        // (targets use the strict `y > v·xi` rule).
        #[test]
        fn decode_of_encode_rounds_up_to_grid(y in 0.0f64..29.0) {
            let xi = 0.5;
            let t = ordinal_encode(y, xi, 60);
            let back = ordinal_decode(&t, xi, 0.5);
            prop_assert_eq!(back, xi * (y / xi).ceil());
        }
    }

    #[test]
    fn rank_decode_examples() {
        let mut one_hot = vec![0.0; 10];
        one_hot[2] = 1.0; // [3.0, 4.5)
        assert!((rank_regress_decode(&one_hot, 0.0, 1.5).unwrap() - 3.75).abs() < 1e-12);
        assert!((rank_regress_decode(&[0.5, 0.5], 0.0, 1.5).unwrap() - 1.5).abs() < 1e-12);
        assert!(rank_regress_decode(&[1.2, -0.2], 0.0, 1.5).is_err());
        assert_eq!(rank_regress_decode(&[1.0, 0.0], -5.0, 1.5).unwrap(), 0.0);
    }

    #[test]
    fn rank_decode_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let raw: Vec<f64> = (0..20).map(|_| rng.random::<f64>()).collect();
            let s: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let mut direct = 0.0;
            for (i, pi) in p.iter().enumerate() {
                direct += (1.5 * i as f64 + 0.75) * pi;
            }
            assert!((rank_regress_decode(&p, 0.0, 1.5).unwrap() - direct).abs() < 1e-6);
        }
    }

    #[test]
    fn rank_regressor_graph_agrees_with_decode() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let head = RankRegressor::new(&mut store, &mut rng, "r", 4, 20, 1.5);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[4], vec![0.3, -0.2, 1.0, 0.5]));
        let (p, v) = head.forward(&mut g, &store, x);
        let probs = g.value(p).data().to_vec();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let decoded = rank_regress_decode(&probs, 0.0, 1.5).unwrap();
        assert!((g.scalar(v) - decoded).abs() < 1e-9);
    }

    #[test]
    fn noise_contracts() {
        let z = Tensor::from_fn(&[100], |i| i as f64);
        assert_eq!(inject_noise(&z, 0.0, 1, Mode::Train), z);
        assert_eq!(inject_noise(&z, 5.0, 1, Mode::Eval), z);
        assert_ne!(inject_noise(&z, 1e-3, 1, Mode::Train), z);
        assert_eq!(
            inject_noise(&z, 1e-3, 9, Mode::Train),
            inject_noise(&z, 1e-3, 9, Mode::Train)
        );
    }

    #[test]
    fn noise_has_requested_spread() {
        let z = Tensor::zeros(&[100_000]);
        let n = inject_noise(&z, 1e-3, 42, Mode::Train);
        let mean = n.sum() / 1e5;
        let var = n.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (1e5 - 1.0);
        let std = var.sqrt();
        assert!((0.9e-3..=1.1e-3).contains(&std), "std {std}");
    }
}
