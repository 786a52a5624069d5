//! Temporal lag selection: per-element temporal regressors over encoded
//! sequences, the weighted temporal MAE per candidate length, and argmin
//! selection.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::backbone::ModelConfig;
use crate::data::ELEMENT_WEIGHTS;
use crate::error::{Result, StasError};
use crate::nn::{Conv3d, Linear, ParamStore, RankRegressor};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub enum TemporalHead {
    Scalar(Linear),
    Rank(RankRegressor),
}

/// Temporal regressor for one element: 3-D conv 3×3×3 → pooled features
/// into three parallel FC(6) branches → concat → two FC layers.
#[derive(Clone, Debug)]
pub struct MeTemporalModule {
    pub conv: Conv3d,
    pub branches: [Linear; 3],
    pub fc: Linear,
    pub head: TemporalHead,
}

pub const BRANCH_WIDTH: usize = 6;

impl MeTemporalModule {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
        width: usize,
        hidden: usize,
        rank: Option<(usize, f64)>,
    ) -> Self {
        let conv = Conv3d::new(store, rng, &format!("{name}.conv3d"), channels, width, 3, 3, 1, 1);
        let branches = [0, 1, 2].map(|b| Linear::new(store, rng, &format!("{name}.branch{b}"), width, BRANCH_WIDTH));
        let fc = Linear::new(store, rng, &format!("{name}.fc1"), 3 * BRANCH_WIDTH, hidden);
        let head = match rank {
            Some((bins, interval)) => TemporalHead::Rank(RankRegressor::new(store, rng, &format!("{name}.rank"), hidden, bins, interval)),
            None => TemporalHead::Scalar(Linear::new(store, rng, &format!("{name}.fc2"), hidden, 1)),
        };
        Self { conv, branches, fc, head }
    }

    /// `seq`: `C × ℓ × H × W`, time oldest first.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, seq: Var) -> Var {
        let h = self.conv.forward(g, store, seq);
        let h = g.relu(h);
        let pooled = g.global_avg_pool(h);
        let parts: Vec<Var> = self
            .branches
            .iter()
            .map(|b| {
                let z = b.forward(g, store, pooled);
                g.relu(z)
            })
            .collect();
        let cat = g.concat(&parts);
        let h = self.fc.forward(g, store, cat);
        let h = g.relu(h);
        match &self.head {
            TemporalHead::Scalar(l) => l.forward(g, store, h),
            TemporalHead::Rank(r) => r.forward(g, store, h).1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TemporalModules {
    pub modules: Vec<MeTemporalModule>,
    pub active: [bool; 5],
    /// Admissible sequence lengths, ascending.
    pub candidates: Vec<usize>,
}

impl TemporalModules {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig, active: [bool; 5]) -> Self {
        let modules = (0..5)
            .map(|i| {
                let rank = (i == 0 && cfg.rank_regressor).then_some((cfg.rank_bins, cfg.rank_interval));
                MeTemporalModule::new(store, rng, &format!("tfm.mtm{i}"), cfg.enc_width, cfg.mtm_width, cfg.mtm_hidden, rank)
            })
            .collect();
        Self {
            modules,
            active,
            candidates: (1..=cfg.max_lag).collect(),
        }
    }
}

/// Prediction of element `me` from a `C × ℓ × H × W` encoded sequence.
pub fn mtm_forward(g: &mut Graph, store: &ParamStore, tfm: &TemporalModules, seq: Var, me: usize) -> Result<Var> {
    let m = tfm.modules.get(me).ok_or(StasError::UnknownElement(me))?;
    let s = g.shape(seq).to_vec();
    if s.len() != 4 || !tfm.candidates.contains(&s[1]) {
        return Err(StasError::Config(format!(
            "sequence {:?} has a length outside the candidate set {:?}",
            s, tfm.candidates
        )));
    }
    Ok(m.forward(g, store, seq))
}

/// Stack the `l` newest latents (given newest first) oldest first.
pub fn truncate_sequence(g: &mut Graph, frames: &[Var], l: usize) -> Result<Var> {
    if l == 0 || l > frames.len() {
        return Err(StasError::Config(format!(
            "lag length {l} not available from {} encoded steps",
            frames.len()
        )));
    }
    let window: Vec<Var> = frames[..l].iter().rev().copied().collect();
    Ok(g.stack_time(&window))
}

/// Per-element MTM predictions on the `l`-step truncation.
pub fn mtm_predictions(g: &mut Graph, store: &ParamStore, tfm: &TemporalModules, frames: &[Var], l: usize) -> Result<Vec<Option<Var>>> {
    let seq = truncate_sequence(g, frames, l)?;
    (0..5)
        .map(|me| {
            if tfm.active[me] {
                mtm_forward(g, store, tfm, seq, me).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect()
}

/// `Σ_i w_i |MTM_i(seq_ℓ) − y_i|` over active elements.
pub fn temporal_total_loss(
    g: &mut Graph,
    store: &ParamStore,
    tfm: &TemporalModules,
    frames: &[Var],
    targets: &[f64; 5],
    l: usize,
) -> Result<Var> {
    let preds = mtm_predictions(g, store, tfm, frames, l)?;
    weighted_mae(g, &preds, targets)
}

/// Weighted absolute error of already-built predictions.
pub fn weighted_mae(g: &mut Graph, preds: &[Option<Var>], targets: &[f64; 5]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (me, p) in preds.iter().enumerate() {
        let Some(p) = *p else { continue };
        let y = g.constant(Tensor::new(&[1], vec![targets[me]]));
        let d = g.sub(p, y);
        let a = g.abs(d);
        let term = g.scale(a, ELEMENT_WEIGHTS[me]);
        let term = g.sum(term);
        total = Some(match total {
            Some(t) => g.add(t, term),
            None => term,
        });
    }
    total.ok_or_else(|| StasError::Config("every temporal element module is disabled".into()))
}

pub fn temporal_loss_value(preds: &[f64; 5], targets: &[f64; 5], active: &[bool; 5]) -> f64 {
    (0..5)
        .filter(|&i| active[i])
        .map(|i| ELEMENT_WEIGHTS[i] * (preds[i] - targets[i]).abs())
        .sum()
}

/// Temporal losses per candidate length.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TemporalLossTable {
    /// `(ℓ, L_T)`
    pub entries: Vec<(usize, f64)>,
}

/// `argmin_ℓ L_T`, ties toward the shorter sequence.
pub fn select_lag(table: &TemporalLossTable) -> Result<usize> {
    table
        .entries
        .iter()
        .copied()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(l, _)| l)
        .ok_or_else(|| StasError::Empty("temporal loss table".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table(pairs: &[(usize, f64)]) -> TemporalLossTable {
        TemporalLossTable { entries: pairs.to_vec() }
    }

    #[test]
    fn argmin_examples() {
        assert_eq!(select_lag(&table(&[(1, 0.9), (2, 0.4), (3, 0.6), (4, 0.7)])).unwrap(), 2);
        assert_eq!(select_lag(&table(&[(1, 0.5), (4, 0.5)])).unwrap(), 1);
        assert!(select_lag(&table(&[])).is_err());
    }

    #[test]
    fn mae_weight_arithmetic() {
        let y = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(temporal_loss_value(&y, &y, &[true; 5]), 0.0);
        assert_eq!(temporal_loss_value(&[1.5, 2.0, 3.0, 4.0, 5.0], &y, &[true; 5]), 1.0);
    }

    proptest! {
        #[test]
        fn lag_argmin_is_scale_invariant(losses in proptest::collection::vec(0.0f64..10.0, 4), c in 0.01f64..100.0) {
            let a: Vec<(usize, f64)> = (1..=4).zip(losses.iter().copied()).collect();
            let b: Vec<(usize, f64)> = a.iter().map(|&(l, v)| (l, v * c)).collect();
            let la = select_lag(&table(&a)).unwrap();
            prop_assert_eq!(la, select_lag(&table(&b)).unwrap());
            let best = a[la - 1].1;
            prop_assert!(a.iter().all(|e| best <= e.1));
        }

        #[test]
        fn weighted_mae_matches_formula(r in proptest::collection::vec(-5.0f64..5.0, 5)) {
            let p = [r[0], r[1], r[2], r[3], r[4]];
            let direct = 2.0 * r[0].abs() + r[1].abs() + r[2].abs() + r[3].abs() + r[4].abs();
            prop_assert!((temporal_loss_value(&p, &[0.0; 5], &[true; 5]) - direct).abs() < 1e-12);
        }
    }
}
