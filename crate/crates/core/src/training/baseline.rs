//! Linear-regression and perceptron baselines on channel-mean features of
//! the current-time crop.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::schedule::batches;
use super::TrainConfig;
use crate::autograd::Graph;
use crate::backbone::PredictionRecord;
use crate::data::Dataset;
use crate::error::{Result, StasError};
use crate::nn::{derive_seed, Adam, GradBuffer, Linear, ParamStore};
use crate::tensor::Tensor;

const RIDGE: f64 = 1e-6;
/// Relative pivot size below which the normal equations count as singular.
const SINGULAR_PIVOT: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaselineKind {
    #[serde(rename = "LR")]
    Lr,
    #[serde(rename = "MLP")]
    Mlp,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Lr => "LR",
            BaselineKind::Mlp => "MLP",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = StasError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "LR" => Ok(BaselineKind::Lr),
            "MLP" => Ok(BaselineKind::Mlp),
            _ => Err(StasError::Config(format!("unknown baseline {s:?}; expected LR or MLP"))),
        }
    }
}

/// Mean of every channel of the normalized input-scale crop at lag 0.
pub fn channel_mean_features(ds: &Dataset, i: usize) -> Result<Vec<f64>> {
    let crop = ds.crop(i, 0, ds.meta.input_scale)?;
    let c = crop.shape()[0];
    Ok((0..c)
        .map(|k| {
            let ch = crop.channel(k);
            ch.iter().sum::<f64>() / ch.len() as f64
        })
        .collect())
}

fn feature_matrix(ds: &Dataset) -> Result<Vec<Vec<f64>>> {
    (0..ds.len()).map(|i| channel_mean_features(ds, i)).collect()
}

#[derive(Clone, Debug)]
pub enum Baseline {
    Linear {
        weights: Vec<f64>,
        bias: f64,
    },
    Mlp {
        store: ParamStore,
        layers: [Linear; 3],
    },
}

impl Baseline {
    pub fn kind(&self) -> BaselineKind {
        match self {
            Baseline::Linear { .. } => BaselineKind::Lr,
            Baseline::Mlp { .. } => BaselineKind::Mlp,
        }
    }

    /// Rain estimate for one feature vector, clamped at zero.
    pub fn predict_features(&self, x: &[f64]) -> f64 {
        let y = match self {
            Baseline::Linear { weights, bias } => bias + weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>(),
            Baseline::Mlp { store, layers } => {
                let mut g = Graph::inference();
                let v = g.constant(Tensor::new(&[x.len()], x.to_vec()));
                let out = mlp_forward(&mut g, store, layers, v);
                g.scalar(out)
            }
        };
        y.max(0.0)
    }

    /// Records for every sample; the rain gate is always open.
    pub fn predict(&self, ds: &Dataset) -> Result<Vec<PredictionRecord>> {
        let mut out = Vec::with_capacity(ds.len());
        for i in 0..ds.len() {
            let y = self.predict_features(&channel_mean_features(ds, i)?);
            out.push(PredictionRecord {
                station_id: ds.records[i].station_id.clone(),
                timestamp: ds.records[i].timestamp,
                y_tp: y,
                y_rc: 1,
                y_t: y,
            });
        }
        Ok(out)
    }
}

fn mlp_forward(g: &mut Graph, store: &ParamStore, layers: &[Linear; 3], x: crate::autograd::Var) -> crate::autograd::Var {
    let h = layers[0].forward(g, store, x);
    let h = g.relu(h);
    let h = layers[1].forward(g, store, h);
    let h = g.relu(h);
    layers[2].forward(g, store, h)
}

#[derive(Clone, Debug)]
pub struct BaselineRun {
    pub baseline: Baseline,
    /// Training MSE per epoch; a single entry for the closed-form fit.
    pub loss_curve: Vec<f64>,
}

pub fn run_baseline(kind: BaselineKind, train: &Dataset, cfg: &TrainConfig) -> Result<BaselineRun> {
    if train.is_empty() {
        return Err(StasError::Empty("baseline training set".into()));
    }
    let x = feature_matrix(train)?;
    let y = train.rain();
    match kind {
        BaselineKind::Lr => fit_linear(&x, &y),
        BaselineKind::Mlp => fit_mlp(&x, &y, cfg),
    }
}

fn fit_linear(x: &[Vec<f64>], y: &[f64]) -> Result<BaselineRun> {
    let d = x[0].len() + 1;
    let mut a = vec![vec![0.0; d]; d];
    let mut b = vec![0.0; d];
    for (row, &t) in x.iter().zip(y) {
        let mut z = Vec::with_capacity(d);
        z.push(1.0);
        z.extend_from_slice(row);
        for r in 0..d {
            b[r] += z[r] * t;
            for c in 0..d {
                a[r][c] += z[r] * z[c];
            }
        }
    }
    let beta = match solve(a.clone(), b.clone()) {
        Some(beta) => beta,
        None => {
            log::warn!("singular normal equations; refitting with ridge {RIDGE}");
            for (r, row) in a.iter_mut().enumerate() {
                row[r] += RIDGE;
            }
            solve(a, b).ok_or_else(|| StasError::InvalidValue("ridge normal equations are singular".into()))?
        }
    };
    let baseline = Baseline::Linear {
        weights: beta[1..].to_vec(),
        bias: beta[0],
    };
    let mse = x
        .iter()
        .zip(y)
        .map(|(row, t)| (baseline.predict_features(row) - t).powi(2))
        .sum::<f64>()
        / y.len() as f64;
    Ok(BaselineRun {
        baseline,
        loss_curve: vec![mse],
    })
}

/// Gaussian elimination with partial pivoting; `None` when a pivot is
/// negligible relative to the matrix scale.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() <= SINGULAR_PIVOT * scale {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut out = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * out[c]).sum();
        out[r] = (b[r] - s) / a[r][r];
    }
    out.iter().all(|v| v.is_finite()).then_some(out)
}

fn fit_mlp(x: &[Vec<f64>], y: &[f64], cfg: &TrainConfig) -> Result<BaselineRun> {
    let d = x[0].len();
    let h = cfg.mlp_hidden;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 0x4D4C50]));
    let mut store = ParamStore::new();
    let layers = [
        Linear::new(&mut store, &mut rng, "mlp.fc1", d, h),
        Linear::new(&mut store, &mut rng, "mlp.fc2", h, h),
        Linear::new(&mut store, &mut rng, "mlp.fc3", h, 1),
    ];
    let mut opt = Adam::new(&store, cfg.mlp_lr);
    let mut curve = Vec::with_capacity(cfg.mlp_epochs);
    for epoch in 0..cfg.mlp_epochs {
        let mut total = 0.0;
        for batch in batches(x.len(), cfg.batch_size, derive_seed(&[cfg.seed, 4]), epoch) {
            let mut grads = GradBuffer::new(&store);
            for &i in &batch {
                let mut g = Graph::new();
                let v = g.constant(Tensor::new(&[d], x[i].clone()));
                let p = mlp_forward(&mut g, &store, &layers, v);
                let t = g.constant(Tensor::new(&[1], vec![y[i]]));
                let diff = g.sub(p, t);
                let sq = g.square(diff);
                let loss = g.sum(sq);
                total += g.scalar(loss);
                grads.accumulate(&g.backward(loss));
            }
            grads.scale(1.0 / batch.len() as f64);
            if !grads.is_finite() {
                return Err(StasError::NonFinite {
                    stage: "mlp".into(),
                    epoch,
                });
            }
            opt.step(&mut store, &grads);
        }
        curve.push(total / x.len() as f64);
    }
    Ok(BaselineRun {
        baseline: Baseline::Mlp { store, layers },
        loss_curve: curve,
    })
}
