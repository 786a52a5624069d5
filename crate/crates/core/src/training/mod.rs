//! Staged training (spatial pretraining, temporal pretraining, joint
//! training), inference, baselines and checkpoints.

mod baseline;
mod model;
mod schedule;

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

pub use baseline::{channel_mean_features, run_baseline, Baseline, BaselineKind, BaselineRun};
pub use model::{config_hash, Checkpoint, SelectionPolicy, StasModel};
pub use schedule::{
    batches, predict, predict_with, pretrain_sfm, pretrain_tfm, train_joint, train_joint_observed,
    BatchSelection, JOINT_STAGE, SFM_STAGE, TFM_STAGE,
};

use crate::backbone::{ModelConfig, PredictionRecord};
use crate::error::{Result, StasError};
use crate::metrics::ReportRow;
use crate::sfm::PlanMode;

/// Component switches for ablation runs. All on is the full model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Scale selection; off feeds every lag at the uniform scale.
    pub sfm: bool,
    /// Lag selection; off uses `fixed_lag` (default the longest window).
    pub tfm: bool,
    pub spatial_elements: [bool; 5],
    pub temporal_elements: [bool; 5],
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            sfm: true,
            tfm: true,
            spatial_elements: [true; 5],
            temporal_elements: [true; 5],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub ablation: Ablation,
    pub lr: f64,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub epochs: usize,
    pub eval_every: usize,
    pub sfm_epochs: usize,
    pub tfm_epochs: usize,
    pub lambda_rec: f64,
    /// Lag length when lag selection is off; `None` means the longest.
    pub fixed_lag: Option<usize>,
    pub plan_mode: PlanMode,
    /// Keep training the spatial regressors during joint training and
    /// refresh the scale plans every epoch.
    pub sfm_finetune: bool,
    pub seed: u64,
    pub mlp_epochs: usize,
    pub mlp_lr: f64,
    pub mlp_hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            ablation: Ablation::default(),
            lr: 1e-4,
            batch_size: 32,
            eval_batch_size: 16,
            epochs: 80,
            eval_every: 6,
            sfm_epochs: 5,
            tfm_epochs: 5,
            lambda_rec: 0.1,
            fixed_lag: None,
            plan_mode: PlanMode::PerSample,
            sfm_finetune: false,
            seed: 0,
            mlp_epochs: 60,
            mlp_lr: 1e-3,
            mlp_hidden: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr > 0.0) || !(self.mlp_lr > 0.0) {
            return Err(StasError::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 || self.eval_every == 0 || self.mlp_hidden == 0 {
            return Err(StasError::Config("batch sizes, eval cadence and widths must be positive".into()));
        }
        if !(self.lambda_rec >= 0.0) {
            return Err(StasError::Config(format!("lambda_rec must be >= 0, got {}", self.lambda_rec)));
        }
        if let Some(l) = self.fixed_lag {
            if l == 0 || l > self.model.max_lag {
                return Err(StasError::Config(format!(
                    "fixed_lag {l} outside 1..={}",
                    self.model.max_lag
                )));
            }
        }
        if !self.ablation.spatial_elements.iter().any(|&b| b) && self.ablation.sfm {
            return Err(StasError::Config("scale selection needs at least one spatial element".into()));
        }
        if !self.ablation.temporal_elements.iter().any(|&b| b) && self.ablation.tfm {
            return Err(StasError::Config("lag selection needs at least one temporal element".into()));
        }
        Ok(())
    }

    /// Lag length used when selection is off.
    pub fn resolved_fixed_lag(&self) -> usize {
        if self.fixed_lag.is_none() && !self.ablation.tfm {
            log::info!("lag selection off and no fixed lag set; using {}", self.model.max_lag);
        }
        self.fixed_lag.unwrap_or(self.model.max_lag)
    }
}

/// One line of the metric history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub stage: String,
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub recon_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_loss: Option<f64>,
    /// Per-element validation losses (rain, temp, pressure, wind, dew).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_elements: Option<[f64; 5]>,
    /// How often each lag length was selected this epoch.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lag_counts: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_metrics: Option<ReportRow>,
}

impl MetricRecord {
    pub fn new(stage: &str, epoch: usize, train_loss: f64) -> Self {
        Self {
            stage: stage.to_string(),
            epoch,
            train_loss,
            recon_loss: None,
            val_loss: None,
            val_elements: None,
            lag_counts: None,
            val_metrics: None,
        }
    }
}

/// Prediction CSV with header `station_id,timestamp,y_tp,y_rc,y_t`.
pub fn write_predictions(w: impl Write, records: &[PredictionRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_predictions(r: impl Read) -> Result<Vec<PredictionRecord>> {
    let mut rdr = csv::Reader::from_reader(r);
    let records = rdr.deserialize().collect::<std::result::Result<Vec<PredictionRecord>, _>>()?;
    Ok(records)
}

pub fn write_history(mut w: impl Write, history: &[MetricRecord]) -> Result<()> {
    for r in history {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    Ok(())
}
