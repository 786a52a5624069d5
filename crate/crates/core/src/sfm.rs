//! Spatial scale selection: per-element spatial regressors, the weighted
//! spatial loss over candidate crop sides, and argmin selection per lag.

use std::collections::HashMap;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::backbone::ModelConfig;
use crate::data::{Dataset, ELEMENT_WEIGHTS};
use crate::error::{Result, StasError};
use crate::nn::{Conv2d, DeformConv2d, Linear, ParamStore};
use crate::tensor::Tensor;

/// Spatial regressor for one element: conv 1×1 → conv 3×3 → two deformable
/// 3×3 layers (γ 0.8, 0.6) → global pool → scalar.
#[derive(Clone, Debug)]
pub struct MeSpatialModule {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub deform1: DeformConv2d,
    pub deform2: DeformConv2d,
    pub head: Linear,
}

impl MeSpatialModule {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, channels: usize, width: usize, deformable: bool) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), channels, width, 1, 0),
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), width, width, 3, 1),
            deform1: DeformConv2d::new(store, rng, &format!("{name}.dcn1"), width, width, 3, 0.8, deformable)?,
            deform2: DeformConv2d::new(store, rng, &format!("{name}.dcn2"), width, width, 3, 0.6, deformable)?,
            head: Linear::new(store, rng, &format!("{name}.fc"), width, 1),
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, crop: Var) -> Var {
        let h = self.conv1.forward(g, store, crop);
        let h = g.relu(h);
        let h = self.conv2.forward(g, store, h);
        let h = g.relu(h);
        let h = self.deform1.forward(g, store, h);
        let h = g.relu(h);
        let h = self.deform2.forward(g, store, h);
        let h = g.relu(h);
        let p = g.global_avg_pool(h);
        self.head.forward(g, store, p)
    }
}

/// The five spatial regressors plus per-element switches.
#[derive(Clone, Debug)]
pub struct SpatialModules {
    pub modules: Vec<MeSpatialModule>,
    pub active: [bool; 5],
    pub scales: Vec<usize>,
}

impl SpatialModules {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig, active: [bool; 5]) -> Result<Self> {
        let modules = (0..5)
            .map(|i| MeSpatialModule::new(store, rng, &format!("sfm.msm{i}"), cfg.channels, cfg.msm_width, cfg.deformable))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            modules,
            active,
            scales: cfg.scales.clone(),
        })
    }
}

/// Prediction of element `me` from one crop.
pub fn msm_forward(g: &mut Graph, store: &ParamStore, sfm: &SpatialModules, crop: Var, me: usize) -> Result<Var> {
    let m = sfm.modules.get(me).ok_or(StasError::UnknownElement(me))?;
    let side = g.shape(crop)[1];
    if !sfm.scales.contains(&side) {
        return Err(StasError::Shape(format!(
            "crop side {side} is not in the scale ladder {:?}",
            sfm.scales
        )));
    }
    Ok(m.forward(g, store, crop))
}

/// `Σ_i w_i (MSM_i(crop) − y_i)²` over the active elements.
pub fn spatial_total_loss(g: &mut Graph, store: &ParamStore, sfm: &SpatialModules, crop: Var, targets: &[f64; 5]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for me in 0..5 {
        if !sfm.active[me] {
            continue;
        }
        let p = msm_forward(g, store, sfm, crop, me)?;
        let y = g.constant(Tensor::new(&[1], vec![targets[me]]));
        let d = g.sub(p, y);
        let sq = g.square(d);
        let term = g.scale(sq, ELEMENT_WEIGHTS[me]);
        let term = g.sum(term);
        total = Some(match total {
            Some(t) => g.add(t, term),
            None => term,
        });
    }
    total.ok_or_else(|| StasError::Config("every spatial element module is disabled".into()))
}

/// Weighted squared-error loss from precomputed predictions.
pub fn spatial_loss_value(preds: &[f64; 5], targets: &[f64; 5], active: &[bool; 5]) -> f64 {
    (0..5)
        .filter(|&i| active[i])
        .map(|i| ELEMENT_WEIGHTS[i] * (preds[i] - targets[i]).powi(2))
        .sum()
}

/// Spatial losses per candidate scale.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SpatialLossTable {
    /// `(scale, L_s, per-element weighted terms)`
    pub entries: Vec<(usize, f64, [f64; 5])>,
}

impl SpatialLossTable {
    pub fn from_losses(pairs: &[(usize, f64)]) -> Self {
        Self {
            entries: pairs.iter().map(|&(s, l)| (s, l, [0.0; 5])).collect(),
        }
    }

    pub fn loss(&self, scale: usize) -> Option<f64> {
        self.entries.iter().find(|e| e.0 == scale).map(|e| e.1)
    }
}

/// `argmin_s L_s`, ties toward the smaller scale.
pub fn select_scale(table: &SpatialLossTable) -> Result<usize> {
    table
        .entries
        .iter()
        .map(|e| (e.0, e.1))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(s, _)| s)
        .ok_or_else(|| StasError::Empty("spatial loss table".into()))
}

/// Normalized crops of one sample at any lag and scale.
pub trait CropSource {
    fn crop(&self, lag: usize, scale: usize) -> Result<Tensor>;
    /// Identity of the frame behind `lag`, used to share work across samples.
    fn frame_key(&self, lag: usize) -> (usize, i64);
}

/// A dataset sample viewed as a crop source.
pub struct DatasetSample<'a> {
    pub ds: &'a Dataset,
    pub index: usize,
}

impl CropSource for DatasetSample<'_> {
    fn crop(&self, lag: usize, scale: usize) -> Result<Tensor> {
        self.ds.crop(self.index, lag, scale)
    }

    fn frame_key(&self, lag: usize) -> (usize, i64) {
        let step = crate::data::generator::STEP_HOURS;
        (
            self.ds.meta.sample_station[self.index],
            self.ds.meta.sample_timestamp[self.index] - step * lag as i64,
        )
    }
}

/// Element predictions for every ladder scale of one crop source and lag.
pub fn predict_all_scales(store: &ParamStore, sfm: &SpatialModules, src: &dyn CropSource, lag: usize) -> Result<Vec<[f64; 5]>> {
    let mut out = Vec::with_capacity(sfm.scales.len());
    for &s in &sfm.scales {
        let mut g = Graph::inference();
        let x = g.constant(src.crop(lag, s)?);
        let mut preds = [0.0; 5];
        for (me, p) in preds.iter_mut().enumerate() {
            if sfm.active[me] {
                let v = msm_forward(&mut g, store, sfm, x, me)?;
                *p = g.scalar(v);
            }
        }
        out.push(preds);
    }
    Ok(out)
}

/// Loss table for lag `lag` of one sample.
pub fn spatial_loss_table(
    store: &ParamStore,
    sfm: &SpatialModules,
    src: &dyn CropSource,
    lag: usize,
    targets: &[f64; 5],
) -> Result<SpatialLossTable> {
    let preds = predict_all_scales(store, sfm, src, lag)?;
    Ok(table_from_predictions(sfm, &preds, targets))
}

fn table_from_predictions(sfm: &SpatialModules, preds: &[[f64; 5]], targets: &[f64; 5]) -> SpatialLossTable {
    SpatialLossTable {
        entries: sfm
            .scales
            .iter()
            .zip(preds)
            .map(|(&s, p)| {
                let mut per = [0.0; 5];
                for i in 0..5 {
                    if sfm.active[i] {
                        per[i] = ELEMENT_WEIGHTS[i] * (p[i] - targets[i]).powi(2);
                    }
                }
                (s, per.iter().sum(), per)
            })
            .collect(),
    }
}

/// Selected scales `(s*_1, …, s*_τ)` for lags `1..=tau`; lag 0 always uses
/// the uniform scale and is not part of the plan.
pub fn sfm_select_plan(
    store: &ParamStore,
    sfm: &SpatialModules,
    src: &dyn CropSource,
    tau: usize,
    targets: &[f64; 5],
) -> Result<Vec<usize>> {
    (1..=tau)
        .map(|k| select_scale(&spatial_loss_table(store, sfm, src, k, targets)?))
        .collect()
}

/// How per-lag scales are chosen across a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PlanMode {
    PerSample,
    /// Majority vote per lag within each batch; ties toward the smaller scale.
    BatchMajority,
}

/// Per-lag majority of several plans.
pub fn majority_plan(plans: &[Vec<usize>]) -> Vec<usize> {
    let Some(first) = plans.first() else {
        return Vec::new();
    };
    (0..first.len())
        .map(|k| {
            let mut counts: Vec<(usize, usize)> = Vec::new();
            for p in plans {
                match counts.iter_mut().find(|c| c.0 == p[k]) {
                    Some(c) => c.1 += 1,
                    None => counts.push((p[k], 1)),
                }
            }
            counts
                .into_iter()
                .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
                .map(|c| c.0)
                .expect("non-empty")
        })
        .collect()
}

/// Full scale plans `[u, s*_1, …, s*_{L-1}]` for every sample of `ds`.
/// Predictions are cached per (station, frame) since neighbouring samples
/// share frames. With the selector disabled every lag uses `u`.
pub fn dataset_plans(
    store: &ParamStore,
    sfm: &SpatialModules,
    ds: &Dataset,
    enabled: bool,
    mode: PlanMode,
    batch: usize,
) -> Result<Vec<Vec<usize>>> {
    let u = ds.meta.input_scale;
    let lags = ds.meta.max_lag;
    if !enabled {
        return Ok(vec![vec![u; lags]; ds.len()]);
    }
    let mut cache: HashMap<(usize, i64), Vec<[f64; 5]>> = HashMap::new();
    let mut plans = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let src = DatasetSample { ds, index: i };
        let targets = ds.targets(i);
        let mut plan = vec![u];
        for k in 1..lags {
            let key = src.frame_key(k);
            if !cache.contains_key(&key) {
                cache.insert(key, predict_all_scales(store, sfm, &src, k)?);
            }
            let table = table_from_predictions(sfm, &cache[&key], &targets);
            plan.push(select_scale(&table)?);
        }
        plans.push(plan);
    }
    if mode == PlanMode::BatchMajority {
        for chunk in plans.chunks_mut(batch.max(1)) {
            let m = majority_plan(chunk);
            for p in chunk.iter_mut() {
                p.clone_from(&m);
            }
        }
    }
    Ok(plans)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn argmin_examples() {
        let t = SpatialLossTable::from_losses(&[(29, 0.52), (15, 0.31), (7, 0.44), (3, 0.61)]);
        assert_eq!(select_scale(&t).unwrap(), 15);
        assert_eq!(select_scale(&SpatialLossTable::from_losses(&[(7, 0.2)])).unwrap(), 7);
        let tie = SpatialLossTable::from_losses(&[(15, 0.3), (7, 0.3)]);
        assert_eq!(select_scale(&tie).unwrap(), 7);
        assert!(select_scale(&SpatialLossTable::default()).is_err());
    }

    #[test]
    fn loss_weight_arithmetic() {
        let active = [true; 5];
        let y = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(spatial_loss_value(&y, &y, &active), 0.0);
        assert_eq!(spatial_loss_value(&[2.0, 2.0, 3.0, 4.0, 5.0], &y, &active), 2.0);
    }

    #[test]
    fn majority_ties_go_small() {
        let plans = vec![vec![15, 3], vec![7, 3], vec![7, 29], vec![15, 29]];
        assert_eq!(majority_plan(&plans), vec![7, 3]);
    }

    proptest! {
        #[test]
        fn argmin_is_scale_invariant(losses in proptest::collection::vec(0.0f64..10.0, 4), c in 0.01f64..100.0) {
            let scales = [29, 15, 7, 3];
            let a: Vec<(usize, f64)> = scales.iter().copied().zip(losses.iter().copied()).collect();
            let b: Vec<(usize, f64)> = a.iter().map(|&(s, l)| (s, l * c)).collect();
            let sa = select_scale(&SpatialLossTable::from_losses(&a)).unwrap();
            let sb = select_scale(&SpatialLossTable::from_losses(&b)).unwrap();
            prop_assert_eq!(sa, sb);
            let best = a.iter().find(|e| e.0 == sa).unwrap().1;
            prop_assert!(a.iter().all(|e| best <= e.1));
        }

        #[test]
        fn weighted_loss_matches_formula(r in proptest::collection::vec(-5.0f64..5.0, 5)) {
            let y = [0.0; 5];
            let p = [r[0], r[1], r[2], r[3], r[4]];
            let direct = 2.0 * r[0] * r[0] + r[1] * r[1] + r[2] * r[2] + r[3] * r[3] + r[4] * r[4];
            prop_assert!((spatial_loss_value(&p, &y, &[true; 5]) - direct).abs() < 1e-12);
        }
    }
}
