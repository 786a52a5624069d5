//! Closed-form behaviour of the building blocks and the selection modules
//! under hand-set weights.

mod common;

use common::random_tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stas::autograd::Graph;
use stas::backbone::{self, EncoderDecoder, ModelConfig};
use stas::data::TimeSeriesSample;
use stas::error::Result;
use stas::nn::{ConvLstmCell, ConvLstmStack, ConvLstmState, DeformConv2d, Mode, ParamStore};
use stas::sfm::{msm_forward, sfm_select_plan, CropSource, SpatialModules};
use stas::tensor::Tensor;
use stas::tfm::{mtm_forward, mtm_predictions, select_lag, temporal_loss_value, TemporalLossTable, TemporalModules};

fn set(store: &mut ParamStore, name: &str, f: impl Fn(&[usize], usize) -> f64) {
    let id = store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    let shape = store.get(id).shape().to_vec();
    for (i, v) in store.get_mut(id).data_mut().iter_mut().enumerate() {
        *v = f(&shape, i);
    }
}

/// Conv weight that is 1 at the kernel centre of `[0, 0, ...]` and 0
/// elsewhere.
fn centre_tap_00(shape: &[usize], idx: usize) -> f64 {
    let centre = shape[2..].iter().fold(0, |c, &k| c * k + k / 2);
    f64::from(idx == centre)
}

fn first_unit(_: &[usize], idx: usize) -> f64 {
    if idx == 0 {
        1.0
    } else {
        0.0
    }
}

fn zero(_: &[usize], _: usize) -> f64 {
    0.0
}

fn model_cfg() -> ModelConfig {
    ModelConfig {
        channels: 2,
        input_scale: 15,
        scales: vec![15, 7, 3],
        max_lag: 4,
        latent: 4,
        enc_width: 3,
        msm_width: 3,
        mtm_width: 3,
        mtm_hidden: 4,
        hidden: 3,
        rank_regressor: false,
        ..ModelConfig::default()
    }
}

#[test]
fn zero_offsets_reduce_to_standard_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5 {
        let mut store = ParamStore::new();
        let d = DeformConv2d::new(&mut store, &mut rng, "d", 3, 4, 3, 0.8, true).unwrap();
        let x = random_tensor(&mut rng, &[3, 6, 6], 1.0);
        let mut g = Graph::inference();
        let xv = g.constant(x);
        let deformed = d.forward(&mut g, &store, xv);
        let w = g.param(&store, d.w);
        let b = g.param(&store, d.b);
        let plain = g.conv2d(xv, w, b, 1);
        assert!(g.value(deformed).max_abs_diff(g.value(plain)) <= 1e-6);
    }
}

#[test]
fn identity_one_by_one_deformable_kernel_passes_input_through() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let d = DeformConv2d::new(&mut store, &mut rng, "d", 1, 1, 1, 0.8, true).unwrap();
    set(&mut store, "d.w", |_, _| 1.0);
    let x = random_tensor(&mut rng, &[1, 5, 5], 2.0);
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let y = d.forward(&mut g, &store, xv);
    assert_eq!(g.value(y), &x);
}

#[test]
fn convlstm_with_zero_weights_outputs_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let cell = ConvLstmCell::new(&mut store, &mut rng, "c", 2, 3);
    set(&mut store, "c.gates.w", zero);
    set(&mut store, "c.gates.b", zero);
    let mut g = Graph::inference();
    let x = g.constant(random_tensor(&mut rng, &[2, 4, 4], 1.0));
    let h = g.constant(random_tensor(&mut rng, &[3, 4, 4], 1.0));
    let c = g.constant(Tensor::zeros(&[3, 4, 4]));
    let s = cell.step(&mut g, &store, x, ConvLstmState { h, c }).unwrap();
    assert!(g.value(s.h).data().iter().all(|&v| v == 0.0));
}

#[test]
fn saturated_gates_keep_the_cell_state() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let n = 3;
    let cell = ConvLstmCell::new(&mut store, &mut rng, "c", 2, n);
    // gate order (i, f, o, g)
    set(&mut store, "c.gates.b", |_, i| match i / n {
        0 => -50.0,
        1 => 50.0,
        _ => 0.0,
    });
    set(&mut store, "c.gates.w", |_, _| 0.0);
    let mut g = Graph::inference();
    let x = g.constant(random_tensor(&mut rng, &[2, 4, 4], 1.0));
    let h = g.constant(random_tensor(&mut rng, &[n, 4, 4], 1.0));
    let c0 = random_tensor(&mut rng, &[n, 4, 4], 3.0);
    let c = g.constant(c0.clone());
    let s = cell.step(&mut g, &store, x, ConvLstmState { h, c }).unwrap();
    assert!(g.value(s.c).max_abs_diff(&c0) <= 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn convlstm_hidden_is_bounded(seed in 0u64..1000, scale in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let stack = ConvLstmStack::new(&mut store, &mut rng, "l", 2, 3, 2);
        let mut g = Graph::inference();
        let frames: Vec<_> = (0..3).map(|_| g.constant(random_tensor(&mut rng, &[2, 4, 4], scale))).collect();
        let h = stack.run(&mut g, &store, &frames).unwrap();
        prop_assert!(g.value(h).data().iter().all(|v| v.abs() < 1.0));
    }
}

#[test]
fn spatial_module_zero_head_and_purity() {
    let cfg = model_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let sfm = SpatialModules::new(&mut store, &mut rng, &cfg, [true; 5]).unwrap();
    let crop = random_tensor(&mut rng, &[2, 7, 7], 1.0);
    let mut g = Graph::inference();
    let x = g.constant(crop.clone());
    let a = msm_forward(&mut g, &store, &sfm, x, 2).unwrap();
    let b = msm_forward(&mut g, &store, &sfm, x, 2).unwrap();
    assert_eq!(g.scalar(a), g.scalar(b));
    set(&mut store, "sfm.msm2.fc.w", zero);
    let mut g = Graph::inference();
    let x = g.constant(crop);
    let z = msm_forward(&mut g, &store, &sfm, x, 2).unwrap();
    assert_eq!(g.scalar(z), 0.0);
}

/// Constant crops whose value depends only on the side length.
struct ScaleCoded {
    channels: usize,
    value: fn(usize) -> f64,
}

impl CropSource for ScaleCoded {
    fn crop(&self, _lag: usize, scale: usize) -> Result<Tensor> {
        Ok(Tensor::full(&[self.channels, scale, scale], (self.value)(scale)))
    }

    fn frame_key(&self, lag: usize) -> (usize, i64) {
        (0, lag as i64)
    }
}

/// Every spatial module reduces to `relu(x[0])` averaged over the crop.
fn rig_spatial(store: &mut ParamStore) {
    for m in 0..5 {
        let p = format!("sfm.msm{m}");
        for layer in ["conv1", "conv2", "dcn1", "dcn2"] {
            set(store, &format!("{p}.{layer}.w"), centre_tap_00);
            set(store, &format!("{p}.{layer}.b"), zero);
        }
        set(store, &format!("{p}.fc.w"), first_unit);
        set(store, &format!("{p}.fc.b"), zero);
    }
}

#[test]
fn rigged_spatial_modules_select_the_matching_scale() {
    let cfg = model_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let sfm = SpatialModules::new(&mut store, &mut rng, &cfg, [true; 5]).unwrap();
    rig_spatial(&mut store);
    let src = ScaleCoded {
        channels: 2,
        value: |s| 2.0 + (s as f64 - 7.0).abs(),
    };
    let targets = [2.0; 5];
    assert_eq!(sfm_select_plan(&store, &sfm, &src, 3, &targets).unwrap(), vec![7, 7, 7]);
    assert!(sfm_select_plan(&store, &sfm, &src, 0, &targets).unwrap().is_empty());
    let two = sfm_select_plan(&store, &sfm, &src, 2, &targets).unwrap();
    assert_eq!(two.len(), 2);
    assert!(two.iter().all(|s| cfg.scales.contains(s)));
}

#[test]
fn temporal_module_zero_head_and_sample_independence() {
    let cfg = model_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let tfm = TemporalModules::new(&mut store, &mut rng, &cfg, [true; 5]);
    let a = random_tensor(&mut rng, &[3, 2, 4, 4], 1.0);
    let b = random_tensor(&mut rng, &[3, 2, 4, 4], 1.0);
    let run = |order: [&Tensor; 2]| {
        let mut g = Graph::inference();
        order
            .iter()
            .map(|t| {
                let v = g.constant((*t).clone());
                let y = mtm_forward(&mut g, &store, &tfm, v, 0).unwrap();
                g.scalar(y)
            })
            .collect::<Vec<_>>()
    };
    let ab = run([&a, &b]);
    let ba = run([&b, &a]);
    assert_eq!(ab, vec![ba[1], ba[0]]);
    for m in 0..5 {
        set(&mut store, &format!("tfm.mtm{m}.fc2.w"), zero);
    }
    let mut g = Graph::inference();
    let v = g.constant(a);
    for m in 0..5 {
        let y = mtm_forward(&mut g, &store, &tfm, v, m).unwrap();
        assert_eq!(g.scalar(y), 0.0);
    }
}

#[test]
fn rigged_temporal_modules_select_three_steps() {
    let cfg = model_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let tfm = TemporalModules::new(&mut store, &mut rng, &cfg, [true; 5]);
    // each module outputs the mean of channel 0 over the window
    for m in 0..5 {
        let p = format!("tfm.mtm{m}");
        set(&mut store, &format!("{p}.conv3d.w"), centre_tap_00);
        set(&mut store, &format!("{p}.conv3d.b"), zero);
        set(&mut store, &format!("{p}.branch0.w"), first_unit);
        for k in 0..3 {
            set(&mut store, &format!("{p}.branch{k}.b"), zero);
        }
        set(&mut store, &format!("{p}.branch1.w"), zero);
        set(&mut store, &format!("{p}.branch2.w"), zero);
        set(&mut store, &format!("{p}.fc1.w"), first_unit);
        set(&mut store, &format!("{p}.fc1.b"), zero);
        set(&mut store, &format!("{p}.fc2.w"), first_unit);
        set(&mut store, &format!("{p}.fc2.b"), zero);
    }
    // newest first; window means are 1, 1, 2, 4
    let values = [1.0, 1.0, 4.0, 10.0];
    let mut g = Graph::inference();
    let frames: Vec<_> = values.iter().map(|&v| g.constant(Tensor::full(&[3, 4, 4], v))).collect();
    let targets = [2.0; 5];
    let mut entries = Vec::new();
    for l in 1..=4 {
        let preds = mtm_predictions(&mut g, &store, &tfm, &frames, l).unwrap();
        let p = preds.iter().map(|v| g.scalar(v.unwrap())).collect::<Vec<_>>();
        let p: [f64; 5] = p.try_into().unwrap();
        entries.push((l, temporal_loss_value(&p, &targets, &[true; 5])));
    }
    assert_eq!(select_lag(&TemporalLossTable { entries }).unwrap(), 3);
}

#[test]
fn centre_tap_codec_reconstructs_constant_latents() {
    let cfg = ModelConfig { sigma: 0.0, ..model_cfg() };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let ed = EncoderDecoder::new(&mut store, &mut rng, &cfg);
    set(&mut store, "enc.conv2.w", |s, i| {
        // identity on every channel: [o, i, 1, 1]
        let (o, c) = (i / (s[1] * 9), (i / 9) % s[1]);
        f64::from(o == c && i % 9 == 4)
    });
    set(&mut store, "dec.conv.w", |s, i| {
        let (o, c) = (i / (s[1] * 9), (i / 9) % s[1]);
        f64::from(o == c && i % 9 == 4)
    });
    set(&mut store, "enc.conv2.b", zero);
    set(&mut store, "dec.conv.b", zero);
    let sample = TimeSeriesSample {
        station_id: "S".into(),
        timestamp: 0,
        scales: vec![15, 7],
        lags: vec![Tensor::full(&[2, 15, 15], 0.7), Tensor::full(&[2, 7, 7], -0.2)],
    };
    for mode in [Mode::Eval, Mode::Train] {
        let mut g = Graph::inference();
        let enc = backbone::encode(&mut g, &store, &ed, &sample, &[15, 7], mode, 3).unwrap();
        let loss = backbone::reconstruction_loss(&mut g, &store, &ed, &enc).unwrap();
        assert!(g.scalar(loss).abs() < 1e-24, "loss {}", g.scalar(loss));
    }
}

#[test]
fn single_step_temporal_encoding_is_one_cell_pass_from_zero() {
    let cfg = model_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParamStore::new();
    let ed = EncoderDecoder::new(&mut store, &mut rng, &cfg);
    let lstm = ConvLstmStack::new(&mut store, &mut rng, "lstm", cfg.enc_width, cfg.hidden, cfg.lstm_depth);
    let sample = TimeSeriesSample {
        station_id: "S".into(),
        timestamp: 0,
        scales: vec![15, 7],
        lags: vec![random_tensor(&mut rng, &[2, 15, 15], 1.0), random_tensor(&mut rng, &[2, 7, 7], 1.0)],
    };
    let mut g = Graph::inference();
    let enc = backbone::encode(&mut g, &store, &ed, &sample, &[15, 7], Mode::Eval, 0).unwrap();
    let h = backbone::temporal_encode(&mut g, &store, &lstm, &enc, 1).unwrap();
    let side = cfg.padded();
    let mut input = enc.noisy[0];
    for cell in &lstm.cells {
        let zero = ConvLstmState::zeros(&mut g, cfg.hidden, side, side);
        input = cell.step(&mut g, &store, input, zero).unwrap().h;
    }
    assert_eq!(g.value(h), g.value(input));
    assert_eq!(g.shape(h), &[cfg.hidden, side, side]);
}
