//! Forecast verification: contingency counts, threat score, MAE and the
//! rainy-sample MAE, plus the per-split report rows.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Result, StasError};

/// Verification thresholds in mm.
pub const THRESHOLDS: [f64; 3] = [0.1, 1.0, 10.0];

/// Hit / miss / false-alarm / correct-negative counts at threshold `rho`.
/// An event is a value strictly above `rho`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub rho: f64,
    pub hits: usize,
    pub misses: usize,
    pub false_alarms: usize,
    pub correct_negatives: usize,
}

impl ContingencyTable {
    pub fn total(&self) -> usize {
        self.hits + self.misses + self.false_alarms + self.correct_negatives
    }
}

fn check_lengths(pred: &[f64], obs: &[f64]) -> Result<()> {
    if pred.len() != obs.len() {
        return Err(StasError::Shape(format!(
            "{} predictions vs {} observations",
            pred.len(),
            obs.len()
        )));
    }
    Ok(())
}

pub fn contingency(pred: &[f64], obs: &[f64], rho: f64) -> Result<ContingencyTable> {
    check_lengths(pred, obs)?;
    let mut t = ContingencyTable {
        rho,
        hits: 0,
        misses: 0,
        false_alarms: 0,
        correct_negatives: 0,
    };
    for (&p, &o) in pred.iter().zip(obs) {
        match (p > rho, o > rho) {
            (true, true) => t.hits += 1,
            (false, true) => t.misses += 1,
            (true, false) => t.false_alarms += 1,
            (false, false) => t.correct_negatives += 1,
        }
    }
    Ok(t)
}

/// `H / (H + M + FA)`, or `None` when no event was forecast or observed.
pub fn threat_score(t: &ContingencyTable) -> Option<f64> {
    let denom = t.hits + t.misses + t.false_alarms;
    (denom > 0).then(|| t.hits as f64 / denom as f64)
}

pub fn mae(pred: &[f64], obs: &[f64]) -> Result<f64> {
    check_lengths(pred, obs)?;
    if pred.is_empty() {
        return Err(StasError::Empty("MAE over zero samples".into()));
    }
    Ok(pred.iter().zip(obs).map(|(p, o)| (p - o).abs()).sum::<f64>() / pred.len() as f64)
}

/// MAE over samples whose observation is at least 1 mm; `None` if there are
/// none.
pub fn mape_rainy(pred: &[f64], obs: &[f64]) -> Result<Option<f64>> {
    check_lengths(pred, obs)?;
    let (sum, n) = pred
        .iter()
        .zip(obs)
        .filter(|(_, &o)| o >= 1.0)
        .fold((0.0, 0usize), |(s, n), (p, o)| (s + (p - o).abs(), n + 1));
    Ok((n > 0).then(|| sum / n as f64))
}

/// A metric that may be undefined on a split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score(pub Option<f64>);

impl fmt::Display for Score {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(v) => write!(f, "{v:.4}"),
            None => f.write_str("N/A"),
        }
    }
}

/// One row of the verification report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub split: String,
    pub method: String,
    pub mae: Score,
    pub mape: Score,
    pub ts: [Score; 3],
}

impl ReportRow {
    pub fn ts_at(&self, rho: f64) -> Score {
        THRESHOLDS
            .iter()
            .position(|&t| t == rho)
            .map(|i| self.ts[i])
            .unwrap_or(Score(None))
    }
}

pub fn evaluate(split: &str, method: &str, pred: &[f64], obs: &[f64]) -> Result<ReportRow> {
    check_lengths(pred, obs)?;
    let mut ts = [Score(None); 3];
    for (slot, &rho) in ts.iter_mut().zip(&THRESHOLDS) {
        *slot = Score(threat_score(&contingency(pred, obs, rho)?));
    }
    Ok(ReportRow {
        split: split.to_string(),
        method: method.to_string(),
        mae: Score(if pred.is_empty() { None } else { Some(mae(pred, obs)?) }),
        mape: Score(mape_rainy(pred, obs)?),
        ts,
    })
}

pub const REPORT_HEADER: &str = "split,method,MAE,MAPE,TS_0.1,TS_1,TS_10";

pub fn write_report(mut w: impl Write, rows: &[ReportRow]) -> Result<()> {
    writeln!(w, "{REPORT_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.split, r.method, r.mae, r.mape, r.ts[0], r.ts[1], r.ts[2]
        )?;
    }
    Ok(())
}
