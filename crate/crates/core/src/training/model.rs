//! The assembled model, its inference-time selection policy, and checkpoints.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Ablation, MetricRecord, TrainConfig};
use crate::backbone::{EncoderDecoder, ModelConfig, PrecipHead, RainClassifier};
use crate::data::Dataset;
use crate::error::{Result, StasError};
use crate::nn::{Adam, ConvLstmStack, ParamStore};
use crate::sfm::SpatialModules;
use crate::tfm::TemporalModules;

/// All modules share one parameter store, namespaced by prefix
/// (`sfm.`, `tfm.`, `enc.`, `dec.`, `lstm.`, `or.`, `rc.`).
#[derive(Clone, Debug)]
pub struct StasModel {
    pub cfg: ModelConfig,
    pub ablation: Ablation,
    pub store: ParamStore,
    pub sfm: SpatialModules,
    pub tfm: TemporalModules,
    pub ed: EncoderDecoder,
    pub lstm: ConvLstmStack,
    pub head: PrecipHead,
    pub rc: RainClassifier,
}

impl StasModel {
    pub fn new(cfg: &ModelConfig, ablation: &Ablation, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let sfm = SpatialModules::new(&mut store, &mut rng, cfg, ablation.spatial_elements)?;
        let tfm = TemporalModules::new(&mut store, &mut rng, cfg, ablation.temporal_elements);
        let ed = EncoderDecoder::new(&mut store, &mut rng, cfg);
        let lstm = ConvLstmStack::new(&mut store, &mut rng, "lstm", cfg.enc_width, cfg.hidden, cfg.lstm_depth);
        let head = PrecipHead::new(&mut store, &mut rng, cfg);
        let rc = RainClassifier::new(&mut store, &mut rng, cfg);
        Ok(Self {
            cfg: cfg.clone(),
            ablation: ablation.clone(),
            store,
            sfm,
            tfm,
            ed,
            lstm,
            head,
            rc,
        })
    }

    /// Dataset geometry must match the architecture.
    pub fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        let m = &ds.meta;
        if m.channels != self.cfg.channels || m.input_scale != self.cfg.input_scale || m.max_lag != self.cfg.max_lag {
            return Err(StasError::Config(format!(
                "dataset has C={}, u={}, lags={} but the model expects C={}, u={}, lags={}",
                m.channels, m.input_scale, m.max_lag, self.cfg.channels, self.cfg.input_scale, self.cfg.max_lag
            )));
        }
        Ok(())
    }
}

/// Hex SHA-256 of the architecture-relevant configuration.
pub fn config_hash(cfg: &ModelConfig, ablation: &Ablation) -> String {
    let json = serde_json::to_string(&(cfg, ablation)).expect("config serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

/// Label-free selections used at inference: a scale per station and lag,
/// and one lag length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionPolicy {
    /// `station_plans[s]` is the full plan `[u, s*_1, …]` for station `s`.
    pub station_plans: Vec<Vec<usize>>,
    pub lag: usize,
}

impl SelectionPolicy {
    pub fn uniform(stations: usize, u: usize, lags: usize) -> Self {
        Self {
            station_plans: vec![vec![u; lags]; stations],
            lag: lags,
        }
    }

    /// Most frequent scale per station and lag over training plans (ties to
    /// the smaller scale) and the most frequent batch lag (ties to the
    /// shorter length).
    pub fn from_training(stations: usize, sample_station: &[usize], plans: &[Vec<usize>], lags_chosen: &[usize], u: usize, max_lag: usize) -> Self {
        let mut station_plans = vec![vec![u; max_lag]; stations];
        for (s, plan) in station_plans.iter_mut().enumerate() {
            let mine: Vec<Vec<usize>> = plans
                .iter()
                .zip(sample_station)
                .filter(|(_, &st)| st == s)
                .map(|(p, _)| p.clone())
                .collect();
            if !mine.is_empty() {
                *plan = crate::sfm::majority_plan(&mine);
            }
        }
        let mut lag = max_lag;
        let mut best = 0;
        for l in 1..=max_lag {
            let n = lags_chosen.iter().filter(|&&x| x == l).count();
            if n > best {
                best = n;
                lag = l;
            }
        }
        Self { station_plans, lag }
    }
}

/// Everything needed to reproduce evaluation of a trained model.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: StasModel,
    pub config: TrainConfig,
    pub policy: SelectionPolicy,
    pub epoch: usize,
    pub history: Vec<MetricRecord>,
    pub optimizer: Option<ParamStore>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config_hash: String,
    config: TrainConfig,
    policy: SelectionPolicy,
    epoch: usize,
    history: Vec<MetricRecord>,
}

const PARAMS_BLOB: &str = "params.f32";
const PARAMS_MANIFEST: &str = "params.json";
const OPTIM_BLOB: &str = "optimizer.f32";
const OPTIM_MANIFEST: &str = "optimizer.json";
const META: &str = "checkpoint.json";

impl Checkpoint {
    pub fn config_hash(&self) -> String {
        config_hash(&self.model.cfg, &self.model.ablation)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.model.store.save(&dir.join(PARAMS_BLOB), &dir.join(PARAMS_MANIFEST))?;
        if let Some(opt) = &self.optimizer {
            opt.save(&dir.join(OPTIM_BLOB), &dir.join(OPTIM_MANIFEST))?;
        }
        let meta = CheckpointMeta {
            config_hash: self.config_hash(),
            config: self.config.clone(),
            policy: self.policy.clone(),
            epoch: self.epoch,
            history: self.history.clone(),
        };
        fs::write(dir.join(META), serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }

    /// Load and verify that the stored hash matches the stored configuration.
    pub fn load(dir: &Path) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_slice(&fs::read(dir.join(META))?)?;
        let mut model = StasModel::new(&meta.config.model, &meta.config.ablation, meta.config.seed)?;
        let found = config_hash(&model.cfg, &model.ablation);
        if found != meta.config_hash {
            return Err(StasError::ConfigHashMismatch {
                expected: found,
                found: meta.config_hash,
            });
        }
        model.store.load(&dir.join(PARAMS_BLOB), &dir.join(PARAMS_MANIFEST))?;
        Ok(Self {
            model,
            config: meta.config,
            policy: meta.policy,
            epoch: meta.epoch,
            history: meta.history,
            optimizer: None,
        })
    }

    /// Fails unless the checkpoint was trained with an architecture hashing
    /// to `expected`.
    pub fn verify(&self, expected: &str) -> Result<()> {
        let found = self.config_hash();
        if found != expected {
            return Err(StasError::ConfigHashMismatch {
                expected: expected.to_string(),
                found,
            });
        }
        Ok(())
    }
}

/// Adam moments bundled for the checkpoint.
pub fn optimizer_state(opt: &Adam, store: &ParamStore) -> ParamStore {
    opt.state_store(store)
}
