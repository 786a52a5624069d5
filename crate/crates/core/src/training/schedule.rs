//! Training stages and inference.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{optimizer_state, Checkpoint, SelectionPolicy, StasModel};
use super::{MetricRecord, TrainConfig};
use crate::autograd::{Graph, Var};
use crate::backbone::{self, fuse, rain_decision, PredictionRecord};
use crate::data::Dataset;
use crate::error::{Result, StasError};
use crate::metrics::{evaluate, ReportRow};
use crate::nn::{derive_seed, ordinal_encode, Adam, GradBuffer, Mode, ParamStore};
use crate::data::ELEMENT_WEIGHTS;
use crate::sfm::{dataset_plans, predict_all_scales, spatial_total_loss, DatasetSample};
use crate::tfm::{mtm_predictions, select_lag, temporal_loss_value, weighted_mae, TemporalLossTable};

pub const SFM_STAGE: &str = "pretrain_sfm";
pub const TFM_STAGE: &str = "pretrain_tfm";
pub const JOINT_STAGE: &str = "joint";

const PREFIXES: [&str; 7] = ["sfm.", "tfm.", "enc.", "dec.", "lstm.", "or.", "rc."];

/// Rain at or above this many mm counts as a rainy sample for the classifier.
const RAIN_LABEL_MM: f64 = 0.1;

/// Graph in which only parameters under `trainable` receive gradients.
fn graph_training(trainable: &[&str]) -> Graph {
    let mut g = Graph::new();
    for p in PREFIXES {
        if !trainable.contains(&p) {
            g.freeze(p);
        }
    }
    g
}

/// Shuffled mini-batches for one epoch; deterministic in `(seed, epoch)`.
pub fn batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, epoch as u64, 0xBA7C]));
    idx.shuffle(&mut rng);
    idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

fn apply_step(opt: &mut Adam, store: &mut ParamStore, mut grads: GradBuffer, n: usize, stage: &str, epoch: usize) -> Result<()> {
    grads.scale(1.0 / n as f64);
    if !grads.is_finite() {
        return Err(StasError::NonFinite {
            stage: stage.to_string(),
            epoch,
        });
    }
    opt.step(store, &grads);
    Ok(())
}

fn check_loss(v: f64, stage: &str, epoch: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(StasError::NonFinite {
            stage: stage.to_string(),
            epoch,
        })
    }
}

fn mean(v: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        v / n as f64
    }
}

/// Lag used by the spatial pretraining for sample `i` at `epoch`; rotates
/// through all stored lags.
fn sfm_lag(i: usize, epoch: usize, lags: usize) -> usize {
    (i + epoch) % lags
}

/// Train the spatial regressors on crops at every ladder scale. Returns the
/// per-epoch mean training loss (averaged over scales).
pub fn pretrain_sfm(
    model: &mut StasModel,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    history: &mut Vec<MetricRecord>,
) -> Result<Vec<f64>> {
    model.check_dataset(train)?;
    let mut opt = Adam::new(&model.store, cfg.lr);
    let scales = model.cfg.scales.clone();
    let lags = train.meta.max_lag;
    let mut curve = Vec::with_capacity(cfg.sfm_epochs);
    for epoch in 0..cfg.sfm_epochs {
        let mut total = 0.0;
        for batch in batches(train.len(), cfg.batch_size, derive_seed(&[cfg.seed, 1]), epoch) {
            let mut grads = GradBuffer::new(&model.store);
            for &i in &batch {
                let targets = train.targets(i);
                let lag = sfm_lag(i, epoch, lags);
                let mut g = graph_training(&["sfm."]);
                let mut sum: Option<Var> = None;
                for &s in &scales {
                    let x = g.constant(train.crop(i, lag, s)?);
                    let l = spatial_total_loss(&mut g, &model.store, &model.sfm, x, &targets)?;
                    sum = Some(match sum {
                        Some(t) => g.add(t, l),
                        None => l,
                    });
                }
                let loss = g.scale(sum.expect("non-empty ladder"), 1.0 / scales.len() as f64);
                total += check_loss(g.scalar(loss), SFM_STAGE, epoch)?;
                grads.accumulate(&g.backward(loss));
            }
            apply_step(&mut opt, &mut model.store, grads, batch.len(), SFM_STAGE, epoch)?;
        }
        let train_loss = mean(total, train.len());
        let (val_loss, per) = sfm_validation(model, val, epoch)?;
        log::info!("{SFM_STAGE} epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        let mut rec = MetricRecord::new(SFM_STAGE, epoch, train_loss);
        rec.val_loss = Some(val_loss);
        rec.val_elements = Some(per);
        history.push(rec);
        curve.push(train_loss);
    }
    Ok(curve)
}

/// Mean over samples and ladder scales of the spatial loss, with its
/// per-element breakdown.
fn sfm_validation(model: &StasModel, val: &Dataset, epoch: usize) -> Result<(f64, [f64; 5])> {
    let mut per = [0.0; 5];
    let mut n = 0usize;
    for i in 0..val.len() {
        let targets = val.targets(i);
        let lag = sfm_lag(i, epoch, val.meta.max_lag);
        let src = DatasetSample { ds: val, index: i };
        for preds in predict_all_scales(&model.store, &model.sfm, &src, lag)? {
            for e in 0..5 {
                if model.sfm.active[e] {
                    per[e] += ELEMENT_WEIGHTS[e] * (preds[e] - targets[e]).powi(2);
                }
            }
            n += 1;
        }
    }
    let per = per.map(|v| mean(v, n));
    Ok((per.iter().sum(), per))
}

/// Train the temporal regressors together with the encoder-decoder: the mean
/// over candidate lengths of the weighted temporal MAE, plus `lambda_rec`
/// times the reconstruction loss.
pub fn pretrain_tfm(
    model: &mut StasModel,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    history: &mut Vec<MetricRecord>,
) -> Result<Vec<f64>> {
    model.check_dataset(train)?;
    let plans = dataset_plans(&model.store, &model.sfm, train, model.ablation.sfm, cfg.plan_mode, cfg.batch_size)?;
    let val_plans = dataset_plans(&model.store, &model.sfm, val, model.ablation.sfm, cfg.plan_mode, cfg.eval_batch_size)?;
    let mut opt = Adam::new(&model.store, cfg.lr);
    let mut curve = Vec::with_capacity(cfg.tfm_epochs);
    for epoch in 0..cfg.tfm_epochs {
        let mut total = 0.0;
        let mut recon = 0.0;
        for batch in batches(train.len(), cfg.batch_size, derive_seed(&[cfg.seed, 2]), epoch) {
            let mut grads = GradBuffer::new(&model.store);
            for &i in &batch {
                let mut g = graph_training(&["tfm.", "enc.", "dec."]);
                let seed = derive_seed(&[cfg.seed, 2, epoch as u64, i as u64]);
                let (loss, rec) = tfm_objective(&mut g, model, train, i, &plans[i], Mode::Train, seed, cfg.lambda_rec)?;
                total += check_loss(g.scalar(loss), TFM_STAGE, epoch)?;
                recon += g.scalar(rec);
                grads.accumulate(&g.backward(loss));
            }
            apply_step(&mut opt, &mut model.store, grads, batch.len(), TFM_STAGE, epoch)?;
        }
        let mut val_total = 0.0;
        for i in 0..val.len() {
            let mut g = Graph::inference();
            let (loss, _) = tfm_objective(&mut g, model, val, i, &val_plans[i], Mode::Eval, 0, cfg.lambda_rec)?;
            val_total += g.scalar(loss);
        }
        let train_loss = mean(total, train.len());
        log::info!("{TFM_STAGE} epoch {epoch}: train {train_loss:.5}");
        let mut r = MetricRecord::new(TFM_STAGE, epoch, train_loss);
        r.recon_loss = Some(mean(recon, train.len()));
        r.val_loss = Some(mean(val_total, val.len()));
        history.push(r);
        curve.push(train_loss);
    }
    Ok(curve)
}

#[allow(clippy::too_many_arguments)]
fn tfm_objective(
    g: &mut Graph,
    model: &StasModel,
    ds: &Dataset,
    i: usize,
    plan: &[usize],
    mode: Mode,
    seed: u64,
    lambda_rec: f64,
) -> Result<(Var, Var)> {
    let sample = ds.sample(i, plan)?;
    let enc = backbone::encode(g, &model.store, &model.ed, &sample, plan, mode, seed)?;
    let rec = backbone::reconstruction_loss(g, &model.store, &model.ed, &enc)?;
    let mut loss = g.scale(rec, lambda_rec);
    if model.ablation.tfm {
        let targets = ds.targets(i);
        let cands = model.tfm.candidates.clone();
        for &l in &cands {
            let preds = mtm_predictions(g, &model.store, &model.tfm, &enc.noisy, l)?;
            let lt = weighted_mae(g, &preds, &targets)?;
            let lt = g.scale(lt, 1.0 / cands.len() as f64);
            loss = g.add(loss, lt);
        }
    }
    Ok((loss, rec))
}

/// What the lag selector saw for one joint-training batch. `model` holds the
/// parameters before the batch's update.
pub struct BatchSelection<'a> {
    pub model: &'a StasModel,
    pub epoch: usize,
    pub samples: &'a [usize],
    pub plans: Vec<Vec<usize>>,
    /// Encoder noise seed per sample.
    pub noise_seeds: Vec<u64>,
    pub table: Option<TemporalLossTable>,
    pub lag: usize,
}

pub fn train_joint(
    model: &mut StasModel,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    history: &mut Vec<MetricRecord>,
) -> Result<Checkpoint> {
    train_joint_observed(model, train, val, cfg, history, None)
}

struct SampleGraph {
    g: Graph,
    enc: backbone::EncodedSequence,
    rec: Var,
    preds: Vec<Vec<Option<Var>>>,
}

/// Joint training of encoder-decoder, ConvLSTM, ordinal head and temporal
/// regressors, with the rain classifier updated on every other batch.
/// Validation runs every `eval_every` epochs and after the last one; the
/// returned checkpoint holds the parameters with the best validation TS_1.
pub fn train_joint_observed(
    model: &mut StasModel,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    history: &mut Vec<MetricRecord>,
    mut observer: Option<&mut dyn FnMut(&BatchSelection)>,
) -> Result<Checkpoint> {
    cfg.validate()?;
    model.check_dataset(train)?;
    let lags = model.cfg.max_lag;
    let xi = model.cfg.xi;
    let classes = model.cfg.classes;
    let mut plans = dataset_plans(&model.store, &model.sfm, train, model.ablation.sfm, cfg.plan_mode, cfg.batch_size)?;
    let mut opt = Adam::new(&model.store, cfg.lr);
    let mut opt_rc = Adam::new(&model.store, cfg.lr);
    let mut best: Option<(Option<f64>, ParamStore, usize, SelectionPolicy)> = None;
    let fixed = cfg.resolved_fixed_lag();

    for epoch in 1..=cfg.epochs {
        if cfg.sfm_finetune && model.ablation.sfm {
            let mut sub = TrainConfig { sfm_epochs: 1, ..cfg.clone() };
            sub.seed = derive_seed(&[cfg.seed, epoch as u64]);
            pretrain_sfm(model, train, val, &sub, history)?;
            plans = dataset_plans(&model.store, &model.sfm, train, true, cfg.plan_mode, cfg.batch_size)?;
        }
        let mut total = 0.0;
        let mut recon = 0.0;
        let mut lag_counts = vec![0usize; lags];
        let mut chosen = Vec::new();
        for (b, batch) in batches(train.len(), cfg.batch_size, derive_seed(&[cfg.seed, 3]), epoch).iter().enumerate() {
            let seeds: Vec<u64> = batch
                .iter()
                .map(|&i| derive_seed(&[cfg.seed, 3, epoch as u64, i as u64]))
                .collect();
            let mut graphs = Vec::with_capacity(batch.len());
            for (&i, &seed) in batch.iter().zip(&seeds) {
                let mut g = graph_training(&["tfm.", "enc.", "dec.", "lstm.", "or."]);
                let sample = train.sample(i, &plans[i])?;
                let enc = backbone::encode(&mut g, &model.store, &model.ed, &sample, &plans[i], Mode::Train, seed)?;
                let rec = backbone::reconstruction_loss(&mut g, &model.store, &model.ed, &enc)?;
                let mut preds = Vec::new();
                if model.ablation.tfm {
                    let detached: Vec<Var> = enc.noisy.iter().map(|&v| g.detach(v)).collect();
                    for &l in &model.tfm.candidates {
                        preds.push(mtm_predictions(&mut g, &model.store, &model.tfm, &detached, l)?);
                    }
                }
                graphs.push(SampleGraph { g, enc, rec, preds });
            }
            let (lag, table) = if model.ablation.tfm {
                let mut entries = Vec::new();
                for (k, &l) in model.tfm.candidates.iter().enumerate() {
                    let mut sum = 0.0;
                    for (sg, &i) in graphs.iter().zip(batch.iter()) {
                        let mut p = [0.0; 5];
                        for (e, v) in sg.preds[k].iter().enumerate() {
                            if let Some(v) = v {
                                p[e] = sg.g.scalar(*v);
                            }
                        }
                        sum += temporal_loss_value(&p, &train.targets(i), &model.tfm.active);
                    }
                    entries.push((l, sum / batch.len() as f64));
                }
                let table = TemporalLossTable { entries };
                (select_lag(&table)?, Some(table))
            } else {
                (fixed, None)
            };
            if let Some(obs) = observer.as_mut() {
                obs(&BatchSelection {
                    model,
                    epoch,
                    samples: batch,
                    plans: batch.iter().map(|&i| plans[i].clone()).collect(),
                    noise_seeds: seeds.clone(),
                    table: table.clone(),
                    lag,
                });
            }
            lag_counts[lag - 1] += 1;
            chosen.push(lag);

            let mut grads = GradBuffer::new(&model.store);
            for (mut sg, &i) in graphs.into_iter().zip(batch.iter()) {
                let g = &mut sg.g;
                let h = backbone::temporal_encode(g, &model.store, &model.lstm, &sg.enc, lag)?;
                let out = backbone::regress_precip(g, &model.store, &model.head, h);
                let targets = ordinal_encode(train.labels(i)[0], xi, classes);
                let bce = g.bce_with_logits(out.logits, &targets);
                let r = g.scale(sg.rec, cfg.lambda_rec);
                let mut loss = g.add(bce, r);
                if model.ablation.tfm {
                    let k = model.tfm.candidates.iter().position(|&c| c == lag).expect("candidate");
                    let mt = weighted_mae(g, &sg.preds[k], &train.targets(i))?;
                    loss = g.add(loss, mt);
                }
                total += check_loss(g.scalar(loss), JOINT_STAGE, epoch)?;
                recon += g.scalar(sg.rec);
                grads.accumulate(&g.backward(loss));
            }
            apply_step(&mut opt, &mut model.store, grads, batch.len(), JOINT_STAGE, epoch)?;

            if b % 2 == 1 {
                let mut grads = GradBuffer::new(&model.store);
                for &i in batch {
                    let mut g = graph_training(&["rc."]);
                    let x = g.constant(train.crop(i, 0, model.cfg.input_scale)?);
                    let z = model.rc.logit(&mut g, &model.store, x)?;
                    let y = f64::from(u8::from(train.labels(i)[0] >= RAIN_LABEL_MM));
                    let loss = g.bce_with_logits(z, &[y]);
                    check_loss(g.scalar(loss), JOINT_STAGE, epoch)?;
                    grads.accumulate(&g.backward(loss));
                }
                apply_step(&mut opt_rc, &mut model.store, grads, batch.len(), JOINT_STAGE, epoch)?;
            }
        }
        let train_loss = mean(total, train.len());
        log::info!("{JOINT_STAGE} epoch {epoch}: train {train_loss:.5} lags {lag_counts:?}");
        let mut rec = MetricRecord::new(JOINT_STAGE, epoch, train_loss);
        rec.recon_loss = Some(mean(recon, train.len()));
        rec.lag_counts = Some(lag_counts);

        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let policy = policy_from(model, train, &plans, &chosen, fixed);
            let mut snapshot = model.clone();
            snapshot.store = model.store.quantized();
            let preds = predict_with(&snapshot, &policy, val)?;
            let row = score(&preds, val, "val", "STAS")?;
            let ts1 = row.ts[1].0;
            log::info!("{JOINT_STAGE} epoch {epoch}: val TS_1 {}", row.ts[1]);
            rec.val_metrics = Some(row);
            let better = match &best {
                None => true,
                Some((b, ..)) => ts1.unwrap_or(f64::NEG_INFINITY) > b.unwrap_or(f64::NEG_INFINITY),
            };
            if better {
                best = Some((ts1, snapshot.store, epoch, policy));
            }
        }
        history.push(rec);
    }

    let optimizer = Some(optimizer_state(&opt, &model.store));
    let (store, epoch, policy) = match best {
        Some((_, s, e, p)) => (s, e, p),
        None => {
            let policy = policy_from(model, train, &plans, &[], fixed);
            (model.store.quantized(), 0, policy)
        }
    };
    let mut best_model = model.clone();
    best_model.store = store;
    Ok(Checkpoint {
        model: best_model,
        config: cfg.clone(),
        policy,
        epoch,
        history: history.clone(),
        optimizer,
    })
}

fn policy_from(model: &StasModel, train: &Dataset, plans: &[Vec<usize>], chosen: &[usize], fixed: usize) -> SelectionPolicy {
    let stations = train.meta.stations.len();
    let mut p = SelectionPolicy::from_training(
        stations,
        &train.meta.sample_station,
        plans,
        chosen,
        model.cfg.input_scale,
        model.cfg.max_lag,
    );
    if !model.ablation.tfm || chosen.is_empty() {
        p.lag = fixed;
    }
    p
}

fn score(preds: &[PredictionRecord], ds: &Dataset, split: &str, method: &str) -> Result<ReportRow> {
    let y: Vec<f64> = preds.iter().map(|p| p.y_t).collect();
    evaluate(split, method, &y, &ds.rain())
}

/// Eval-mode predictions with the scales and lag length fixed by `policy`.
pub fn predict_with(model: &StasModel, policy: &SelectionPolicy, ds: &Dataset) -> Result<Vec<PredictionRecord>> {
    model.check_dataset(ds)?;
    let l = policy.lag;
    let mut out = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let station = ds.meta.sample_station[i];
        let plan = policy.station_plans.get(station).ok_or_else(|| {
            StasError::Config(format!("selection policy has no plan for station index {station}"))
        })?;
        let plan = &plan[..l];
        let sample = ds.sample(i, plan)?;
        let mut g = Graph::inference();
        let enc = backbone::encode(&mut g, &model.store, &model.ed, &sample, plan, Mode::Eval, 0)?;
        let h = backbone::temporal_encode(&mut g, &model.store, &model.lstm, &enc, l)?;
        let out_p = backbone::regress_precip(&mut g, &model.store, &model.head, h);
        let x = g.constant(sample.lags[0].clone());
        let z = model.rc.logit(&mut g, &model.store, x)?;
        let y_rc = rain_decision(crate::autograd::sigmoid(g.scalar(z)));
        out.push(PredictionRecord {
            station_id: ds.records[i].station_id.clone(),
            timestamp: ds.records[i].timestamp,
            y_tp: out_p.y_tp,
            y_rc,
            y_t: fuse(out_p.y_tp, y_rc),
        });
    }
    Ok(out)
}

/// Predictions from a checkpoint.
pub fn predict(ckpt: &Checkpoint, ds: &Dataset) -> Result<Vec<PredictionRecord>> {
    predict_with(&ckpt.model, &ckpt.policy, ds)
}
