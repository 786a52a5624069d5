//! Finite-difference checks of every differentiable block, each returning the
//! worst relative error.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stas::autograd::Graph;
use stas::backbone::{self, EncoderDecoder, ModelConfig, PrecipHead};
use stas::data::TimeSeriesSample;
use stas::nn::{ordinal_encode, ConvLstmCell, ConvLstmState, ConvLstmStack, Mode, ParamStore};
use stas::sfm::{spatial_total_loss, SpatialModules};
use stas::tfm::{temporal_total_loss, TemporalModules};

use super::{check_inputs, check_params, jitter_params, probe, random_tensor};

fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        channels: 2,
        input_scale: 7,
        scales: vec![7, 3],
        max_lag: 2,
        latent: 6,
        enc_width: 3,
        msm_width: 3,
        mtm_width: 3,
        mtm_hidden: 4,
        hidden: 3,
        lstm_depth: 2,
        classes: 8,
        or_width: 5,
        or_pool: 2,
        rc_width: 2,
        rank_bins: 5,
        ..ModelConfig::default()
    }
}

pub fn deformable_conv() -> f64 {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_tensor(&mut rng, &[1, 4, 4], 1.0);
    // offsets in ±0.9 keep sampling points off the integer lattice
    let off = random_tensor(&mut rng, &[18, 4, 4], 0.9);
    let w = random_tensor(&mut rng, &[2, 1, 3, 3], 0.5);
    let b = random_tensor(&mut rng, &[2], 0.5);
    let err = check_inputs(&[x, off, w, b], |g, v| {
        let y = g.deform_conv2d(v[0], v[1], v[2], v[3], 1, 0.8);
        probe(g, y, 7)
    });
    worst = worst.max(err);
    worst
}

pub fn convlstm_step() -> f64 {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let cell = ConvLstmCell::new(&mut store, &mut rng, "cell", 2, 3);
    jitter_params(&mut store, "cell", 0.4, 3);
    let x = random_tensor(&mut rng, &[2, 4, 4], 1.0);
    let h = random_tensor(&mut rng, &[3, 4, 4], 0.8);
    let c = random_tensor(&mut rng, &[3, 4, 4], 0.8);
    let err = check_inputs(&[x.clone(), h.clone(), c.clone()], |g, v| {
        let s = cell.step(g, &store, v[0], ConvLstmState { h: v[1], c: v[2] }).unwrap();
        let a = probe(g, s.h, 11);
        let b = probe(g, s.c, 12);
        g.add(a, b)
    });
    worst = worst.max(err);
    let (err, n) = check_params(&store, "cell", 40, |g, st| {
        let xv = g.constant(x.clone());
        let hv = g.constant(h.clone());
        let cv = g.constant(c.clone());
        let s = cell.step(g, st, xv, ConvLstmState { h: hv, c: cv }).unwrap();
        let a = probe(g, s.h, 11);
        let b = probe(g, s.c, 12);
        g.add(a, b)
    });
    assert!(n > 0);
    worst = worst.max(err);
    worst
}

pub fn spatial_module() -> f64 {
    let mut worst = 0.0f64;
    let cfg = tiny_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let sfm = SpatialModules::new(&mut store, &mut rng, &cfg, [true; 5]).unwrap();
    // nonzero offset predictors so deformable sampling is exercised
    jitter_params(&mut store, "sfm.", 0.5, 5);
    let crop = random_tensor(&mut rng, &[2, 3, 3], 1.0);
    let targets = [0.7, -0.3, 0.1, 0.4, -0.2];
    let (err, n) = check_params(&store, "sfm.msm", 12, |g, st| {
        let x = g.constant(crop.clone());
        spatial_total_loss(g, st, &sfm, x, &targets).unwrap()
    });
    assert!(n > 0);
    worst = worst.max(err);
    let err = check_inputs(&[crop.clone()], |g, v| spatial_total_loss(g, &store, &sfm, v[0], &targets).unwrap());
    worst = worst.max(err);
    worst
}

pub fn temporal_module() -> f64 {
    let mut worst = 0.0f64;
    let cfg = tiny_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let tfm = TemporalModules::new(&mut store, &mut rng, &ModelConfig { enc_width: 2, ..cfg }, [true; 5]);
    jitter_params(&mut store, "tfm.", 0.5, 7);
    let frames: Vec<_> = (0..2).map(|_| random_tensor(&mut rng, &[2, 4, 4], 1.0)).collect();
    let targets = [1.3, -0.3, 0.1, 0.4, -0.2];
    let (err, n) = check_params(&store, "tfm.", 12, |g, st| {
        let f: Vec<_> = frames.iter().map(|t| g.constant(t.clone())).collect();
        temporal_total_loss(g, st, &tfm, &f, &targets, 2).unwrap()
    });
    assert!(n > 0);
    worst = worst.max(err);
    let err = check_inputs(&frames, |g, v| temporal_total_loss(g, &store, &tfm, v, &targets, 2).unwrap());
    worst = worst.max(err);
    worst
}

fn tiny_sample(rng: &mut ChaCha8Rng, cfg: &ModelConfig, plan: &[usize]) -> TimeSeriesSample {
    TimeSeriesSample {
        station_id: "S000".into(),
        timestamp: 0,
        scales: plan.to_vec(),
        lags: plan.iter().map(|&s| random_tensor(rng, &[cfg.channels, s, s], 1.0)).collect(),
    }
}

pub fn encoder_decoder() -> f64 {
    let mut worst = 0.0f64;
    let cfg = ModelConfig { sigma: 0.05, ..tiny_cfg() };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let ed = EncoderDecoder::new(&mut store, &mut rng, &cfg);
    jitter_params(&mut store, "enc.", 0.5, 9);
    jitter_params(&mut store, "dec.", 0.5, 10);
    let plan = [7, 3];
    let sample = tiny_sample(&mut rng, &cfg, &plan);
    let (err, n) = check_params(&store, "", 16, |g, st| {
        let enc = backbone::encode(g, st, &ed, &sample, &plan, Mode::Train, 21).unwrap();
        backbone::reconstruction_loss(g, st, &ed, &enc).unwrap()
    });
    assert!(n >= 4);
    worst = worst.max(err);
    worst
}

pub fn joint_objective() -> f64 {
    let mut worst = 0.0f64;
    // C = 2, two lags, 8×8 padded latents
    let cfg = ModelConfig { sigma: 0.05, ..tiny_cfg() };
    assert_eq!(cfg.padded(), 8);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::new();
    let ed = EncoderDecoder::new(&mut store, &mut rng, &cfg);
    let lstm = ConvLstmStack::new(&mut store, &mut rng, "lstm", cfg.enc_width, cfg.hidden, cfg.lstm_depth);
    let head = PrecipHead::new(&mut store, &mut rng, &cfg);
    jitter_params(&mut store, "", 0.5, 13);
    let plan = [7, 3];
    let sample = tiny_sample(&mut rng, &cfg, &plan);
    let targets = ordinal_encode(1.7, cfg.xi, cfg.classes);
    let lambda = 0.1;
    let objective = |g: &mut Graph, st: &ParamStore| {
        let enc = backbone::encode(g, st, &ed, &sample, &plan, Mode::Train, 5).unwrap();
        let rec = backbone::reconstruction_loss(g, st, &ed, &enc).unwrap();
        let h = backbone::temporal_encode(g, st, &lstm, &enc, 2).unwrap();
        let out = backbone::regress_precip(g, st, &head, h);
        let bce = g.bce_with_logits(out.logits, &targets);
        let r = g.scale(rec, lambda);
        g.add(bce, r)
    };
    let (err, n) = check_params(&store, "", 10, objective);
    assert!(n >= 10);
    worst = worst.max(err);
    worst
}
