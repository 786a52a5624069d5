//! Central finite-difference oracle shared by the integration tests.

#![allow(dead_code)]

pub mod grad_suite;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stas::autograd::{Graph, Var};
use stas::nn::ParamStore;
use stas::tensor::Tensor;

pub const FD_STEP: f64 = 1e-4;
pub const GRAD_TOL: f64 = 1e-3;

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`, or 0 when both vanish.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Worst per-input relative error between the tape gradient of `build` and
/// central differences with respect to every entry of every input.
pub fn check_inputs(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let root = build(&mut g, &vars);
    let grads = g.backward(root);
    let eval = |ts: &[Tensor]| {
        let mut g = Graph::inference();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let r = build(&mut g, &vars);
        g.scalar(r)
    };
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            numeric.push((eval(&plus) - eval(&minus)) / (2.0 * FD_STEP));
        }
        assert!(numeric.iter().any(|v| v.abs() > 1e-9), "input {k} has a vanishing numeric gradient");
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Worst per-tensor relative error over parameters whose name starts with
/// `prefix`. At most `per_tensor` randomly chosen entries of each tensor are
/// differenced; the analytic side is restricted to the same entries. Also
/// returns how many tensors had a non-vanishing numeric gradient.
pub fn check_params(
    store: &ParamStore,
    prefix: &str,
    per_tensor: usize,
    build: impl Fn(&mut Graph, &ParamStore) -> Var,
) -> (f64, usize) {
    let mut g = Graph::new();
    let root = build(&mut g, store);
    let grads = g.backward(root);
    let analytic: std::collections::HashMap<_, _> = grads.param_grads().map(|(id, t)| (id, t.clone())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for id in store.ids() {
        if !store.name(id).starts_with(prefix) {
            continue;
        }
        let n = store.get(id).numel();
        let picks: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..n)).collect()
        };
        let mut a = Vec::new();
        let mut num = Vec::new();
        for &i in &picks {
            a.push(analytic.get(&id).map_or(0.0, |t| t.data()[i]));
            let mut s = store.clone();
            s.get_mut(id).data_mut()[i] += FD_STEP;
            let fp = {
                let mut g = Graph::inference();
                let r = build(&mut g, &s);
                g.scalar(r)
            };
            s.get_mut(id).data_mut()[i] -= 2.0 * FD_STEP;
            let fm = {
                let mut g = Graph::inference();
                let r = build(&mut g, &s);
                g.scalar(r)
            };
            num.push((fp - fm) / (2.0 * FD_STEP));
        }
        let e = rel_err(&a, &num);
        if e > GRAD_TOL {
            eprintln!("{}: rel err {e:.2e}", store.name(id));
        }
        worst = worst.max(e);
        if num.iter().any(|v| v.abs() > 1e-9) {
            checked += 1;
        }
    }
    (worst, checked)
}

/// Replace every parameter under `prefix` with uniform noise in `±scale`,
/// moving activations and sampling points off their kinks.
pub fn jitter_params(store: &mut ParamStore, prefix: &str, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).starts_with(prefix) {
            for v in store.get_mut(id).data_mut() {
                *v = rng.random_range(-scale..scale);
            }
        }
    }
}

/// Weighted sum `Σ r ⊙ v` with fixed random weights, so that every output
/// entry contributes a distinct gradient.
pub fn probe(g: &mut Graph, v: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(v).to_vec();
    let r = g.constant(random_tensor(&mut rng, &shape, 1.0));
    let m = g.mul(v, r);
    g.sum(m)
}

/// A few hundred samples on 7×7 input crops, with a model sized to match.
pub fn tiny_splits(seed: u64) -> (stas::data::SplitSet, stas::backbone::ModelConfig) {
    let gen = stas::data::GeneratorConfig {
        grid_h: 14,
        grid_w: 14,
        timestamps: 26,
        stations: 4,
        scales: vec![7, 5, 3],
        max_lag: 3,
        ..stas::data::GeneratorConfig::default()
    };
    let world = stas::data::generate_synthetic(&gen, seed).unwrap();
    let splits = stas::data::build_splits(&world, &gen, seed).unwrap();
    let model = stas::backbone::ModelConfig {
        channels: gen.channels,
        input_scale: 7,
        scales: vec![7, 5, 3],
        max_lag: 3,
        latent: 6,
        enc_width: 4,
        msm_width: 4,
        mtm_width: 4,
        mtm_hidden: 8,
        hidden: 4,
        or_width: 8,
        rc_width: 4,
        ..stas::backbone::ModelConfig::default()
    };
    (splits, model)
}
