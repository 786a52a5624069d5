//! Denoising encoder-decoder, ConvLSTM temporal encoder, ordinal precipitation
//! head, rain classifier and multiplicative fusion.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, Graph, Var};
use crate::data::TimeSeriesSample;
use crate::error::{Result, StasError};
use crate::nn::{derive_seed, inject_noise_var, Conv2d, ConvLstmStack, Linear, Mode, OrdinalHead, ParamStore};

/// Architecture hyperparameters shared by every module of the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub channels: usize,
    /// Uniform input scale `u` (side of lag-0 crops).
    pub input_scale: usize,
    /// Candidate crop sides, largest first.
    pub scales: Vec<usize>,
    pub max_lag: usize,
    /// Pooled latent side before the one-pixel reflect pad.
    pub latent: usize,
    pub enc_width: usize,
    pub msm_width: usize,
    pub mtm_width: usize,
    pub mtm_hidden: usize,
    pub hidden: usize,
    pub lstm_depth: usize,
    pub classes: usize,
    pub xi: f64,
    pub theta: f64,
    pub or_width: usize,
    /// Side of the pooled grid feeding the ordinal head.
    pub or_pool: usize,
    pub rc_width: usize,
    pub rank_bins: usize,
    pub rank_interval: f64,
    pub sigma: f64,
    pub deformable: bool,
    pub rank_regressor: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 8,
            input_scale: 29,
            scales: vec![29, 15, 7, 3],
            max_lag: 4,
            latent: 16,
            enc_width: 16,
            msm_width: 8,
            mtm_width: 8,
            mtm_hidden: 16,
            hidden: 16,
            lstm_depth: 2,
            classes: 60,
            xi: 0.5,
            theta: 0.5,
            or_width: 32,
            or_pool: 3,
            rc_width: 8,
            rank_bins: 20,
            rank_interval: 1.5,
            sigma: 1e-3,
            deformable: true,
            rank_regressor: true,
        }
    }
}

impl ModelConfig {
    /// Side of the noisy, padded latent maps.
    pub fn padded(&self) -> usize {
        self.latent + 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(StasError::Config(m));
        if self.scales.is_empty() || self.scales.iter().any(|s| s % 2 == 0) {
            return bad(format!("scales must be non-empty and odd, got {:?}", self.scales));
        }
        if !self.scales.contains(&self.input_scale) || self.scales.iter().any(|&s| s > self.input_scale) {
            return bad(format!(
                "input scale {} must be the largest entry of {:?}",
                self.input_scale, self.scales
            ));
        }
        if self.max_lag == 0 || self.latent < 2 || self.classes == 0 || self.or_pool == 0 {
            return bad("max_lag, latent (>= 2), classes and or_pool must be positive".into());
        }
        if self.channels == 0 || self.enc_width == 0 || self.hidden == 0 || self.lstm_depth == 0 {
            return bad("channel widths and depth must be positive".into());
        }
        if !(self.xi > 0.0) || !(0.0..=1.0).contains(&self.theta) || !(self.sigma >= 0.0) {
            return bad(format!(
                "need xi > 0, theta in [0, 1], sigma >= 0; got {}, {}, {}",
                self.xi, self.theta, self.sigma
            ));
        }
        Ok(())
    }
}

/// Encoder `W_E` (conv 1×1 → conv 3×3 → adaptive pool) and decoder `W_D`
/// (bilinear upsample → conv 3×3).
#[derive(Clone, Debug)]
pub struct EncoderDecoder {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub dec: Conv2d,
    pub latent: usize,
    pub sigma: f64,
}

impl EncoderDecoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig) -> Self {
        let e = cfg.enc_width;
        Self {
            conv1: Conv2d::new(store, rng, "enc.conv1", cfg.channels, e, 1, 0),
            conv2: Conv2d::new(store, rng, "enc.conv2", e, e, 3, 1),
            dec: Conv2d::new(store, rng, "dec.conv", e, e, 3, 1),
            latent: cfg.latent,
            sigma: cfg.sigma,
        }
    }

    /// Clean pooled latent `Z` of one crop.
    pub fn encode_clean(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.conv1.forward(g, store, x);
        let h = g.relu(h);
        let h = self.conv2.forward(g, store, h);
        let h = g.relu(h);
        g.adaptive_avg_pool(h, self.latent, self.latent)
    }

    /// `E(x, ε)`: reflect-padded latent plus noise in training mode.
    pub fn noisy(&self, g: &mut Graph, z: Var, seed: u64, mode: Mode) -> Var {
        let p = g.reflect_pad(z, 1);
        inject_noise_var(g, p, self.sigma, seed, mode)
    }

    /// `D(Z)`, shaped like the noisy latent.
    pub fn decode(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Var {
        let side = self.latent + 2;
        let up = g.upsample_bilinear(z, side, side);
        self.dec.forward(g, store, up)
    }
}

/// Encoder outputs per lag, newest first.
#[derive(Clone, Debug)]
pub struct EncodedSequence {
    pub clean: Vec<Var>,
    pub noisy: Vec<Var>,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.noisy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.noisy.is_empty()
    }
}

/// Map every lag of `sample` to the uniform latent. `plan` must match the
/// crop sides lag by lag. Noise for lag `k` is seeded by `(seed, k)`.
pub fn encode(
    g: &mut Graph,
    store: &ParamStore,
    ed: &EncoderDecoder,
    sample: &TimeSeriesSample,
    plan: &[usize],
    mode: Mode,
    seed: u64,
) -> Result<EncodedSequence> {
    if plan.len() != sample.lags.len() {
        return Err(StasError::Shape(format!(
            "scale plan has {} lags, sample has {}",
            plan.len(),
            sample.lags.len()
        )));
    }
    let mut out = EncodedSequence {
        clean: Vec::with_capacity(plan.len()),
        noisy: Vec::with_capacity(plan.len()),
    };
    for (k, (x, &s)) in sample.lags.iter().zip(plan).enumerate() {
        let sh = x.shape();
        if sh.len() != 3 || sh[1] != s || sh[2] != s {
            return Err(StasError::Shape(format!(
                "lag {k} crop {:?} does not match planned scale {s}",
                sh
            )));
        }
        let xv = g.constant(x.clone());
        let z = ed.encode_clean(g, store, xv);
        let zn = ed.noisy(g, z, derive_seed(&[seed, k as u64]), mode);
        out.clean.push(z);
        out.noisy.push(zn);
    }
    Ok(out)
}

/// Mean over lags of the mean squared difference between the noisy latent
/// and `D(Z)`.
pub fn reconstruction_loss(g: &mut Graph, store: &ParamStore, ed: &EncoderDecoder, enc: &EncodedSequence) -> Result<Var> {
    if enc.is_empty() {
        return Err(StasError::Empty("encoded sequence".into()));
    }
    let mut total: Option<Var> = None;
    for (&z, &zn) in enc.clean.iter().zip(&enc.noisy) {
        let rec = ed.decode(g, store, z);
        let d = g.sub(zn, rec);
        let sq = g.square(d);
        let m = g.mean(sq);
        total = Some(match total {
            Some(t) => g.add(t, m),
            None => m,
        });
    }
    let t = total.expect("non-empty");
    Ok(g.scale(t, 1.0 / enc.len() as f64))
}

/// Final top-layer hidden map after running the ConvLSTM over the `l` most
/// recent latents, oldest first.
pub fn temporal_encode(g: &mut Graph, store: &ParamStore, lstm: &ConvLstmStack, enc: &EncodedSequence, l: usize) -> Result<Var> {
    if l == 0 || l > enc.len() {
        return Err(StasError::InsufficientHistory {
            t: 0,
            lags: l,
            earliest: enc.len(),
        });
    }
    let frames: Vec<Var> = enc.noisy[..l].iter().rev().copied().collect();
    lstm.run(g, store, &frames)
}

/// Ordinal head over an `or_pool × or_pool` pooled hidden map.
#[derive(Clone, Debug)]
pub struct PrecipHead {
    pub head: OrdinalHead,
    pub pool: usize,
}

impl PrecipHead {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig) -> Self {
        let inputs = cfg.hidden * cfg.or_pool * cfg.or_pool;
        Self {
            head: OrdinalHead::new(store, rng, "or", inputs, cfg.or_width, cfg.classes, cfg.xi, cfg.theta),
            pool: cfg.or_pool,
        }
    }
}

/// Ordinal logits, per-classifier probabilities and the decoded `ŷ_tp`.
pub struct PrecipOutput {
    pub logits: Var,
    pub probs: Vec<f64>,
    pub y_tp: f64,
}

pub fn regress_precip(g: &mut Graph, store: &ParamStore, head: &PrecipHead, hidden: Var) -> PrecipOutput {
    let pooled = g.adaptive_avg_pool(hidden, head.pool, head.pool);
    let logits = head.head.forward_logits(g, store, pooled);
    let probs: Vec<f64> = g.value(logits).data().iter().map(|&z| sigmoid(z)).collect();
    let y_tp = head.head.decode(&probs);
    PrecipOutput { logits, probs, y_tp }
}

/// Rain/rainless classifier on the full-scale current crop.
#[derive(Clone, Debug)]
pub struct RainClassifier {
    pub conv: Conv2d,
    pub fc: Linear,
    pub input_scale: usize,
}

impl RainClassifier {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig) -> Self {
        Self {
            conv: Conv2d::new(store, rng, "rc.conv", cfg.channels, cfg.rc_width, 3, 1),
            fc: Linear::new(store, rng, "rc.fc", cfg.rc_width, 1),
            input_scale: cfg.input_scale,
        }
    }

    /// Rain logit for a `C × u × u` crop.
    pub fn logit(&self, g: &mut Graph, store: &ParamStore, crop: Var) -> Result<Var> {
        let s = g.shape(crop).to_vec();
        if s.len() != 3 || s[1] != self.input_scale || s[2] != self.input_scale {
            return Err(StasError::Shape(format!(
                "rain classifier needs a {u}x{u} crop, got {:?}",
                s,
                u = self.input_scale
            )));
        }
        let h = self.conv.forward(g, store, crop);
        let h = g.relu(h);
        let p = g.global_avg_pool(h);
        Ok(self.fc.forward(g, store, p))
    }
}

/// Binarize a rain probability (`p ≥ 0.5` is rain).
pub fn rain_decision(p: f64) -> u8 {
    u8::from(p >= 0.5)
}

/// `(probability, ŷ_rc)` for the current crop.
pub fn classify_rain(g: &mut Graph, store: &ParamStore, rc: &RainClassifier, crop: Var) -> Result<(f64, u8)> {
    let z = rc.logit(g, store, crop)?;
    let p = sigmoid(g.scalar(z));
    Ok((p, rain_decision(p)))
}

/// `ŷ_t = ŷ_tp · ŷ_rc`.
pub fn fuse(y_tp: f64, y_rc: u8) -> f64 {
    if y_rc == 0 {
        0.0
    } else {
        y_tp
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub station_id: String,
    pub timestamp: i64,
    pub y_tp: f64,
    pub y_rc: u8,
    pub y_t: f64,
}
