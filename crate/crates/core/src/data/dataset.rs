//! Split container: per-sample lagged crops at the uniform scale plus labels,
//! persisted as a raw little-endian `f32` blob with a JSON sidecar and a CSV
//! of station records.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::crop::{center_crop, make_lagged_sequence, TimeSeriesSample};
use super::generator::{GeneratorConfig, SyntheticWorld};
use super::partition::{max_mixture_total, mix_ratio, partition_by_intensity, IntensityClass};
use super::{channel_names, Element, StationGeometry, StationRecord};
use crate::error::{Result, StasError};
use crate::tensor::Tensor;

pub const FIELDS_FILE: &str = "fields.f32";
pub const META_FILE: &str = "meta.json";
pub const RECORDS_FILE: &str = "records.csv";

/// Mixture ratio tiny:moderate:heavy for the mixed evaluation split.
pub const MIX_RATIO: [usize; 3] = [9, 3, 1];

/// Per-channel z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Mean and population std per channel. A zero-variance channel gets
    /// std 1 so it normalizes to zeros.
    pub fn fit(channels: usize, values: impl Fn(usize) -> Vec<f64>) -> Self {
        let mut mean = Vec::with_capacity(channels);
        let mut std = Vec::with_capacity(channels);
        for c in 0..channels {
            let v = values(c);
            let n = v.len().max(1) as f64;
            let m = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
            let mut s = var.sqrt();
            if !(s > 1e-12) {
                log::warn!("channel {c} has zero variance; clamping std to 1");
                s = 1.0;
            }
            mean.push(m);
            std.push(s);
        }
        Self { mean, std }
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn normalize(&self, channel: usize, v: f64) -> f64 {
        (v - self.mean[channel]) / self.std[channel]
    }

    /// Normalize a `c × …` tensor channel by channel.
    pub fn apply(&self, x: &Tensor) -> Tensor {
        let c = x.shape()[0];
        let per = x.numel() / c;
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ch = i / per;
            *v = (*v - self.mean[ch]) / self.std[ch];
        }
        out
    }
}

/// Label statistics from the training split. Rain stays in mm for every
/// target; the other elements are z-scored for the auxiliary regressors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub mean: [f64; 5],
    pub std: [f64; 5],
    pub max_rain: f64,
}

impl LabelStats {
    pub fn fit(records: &[StationRecord]) -> Self {
        let n = records.len().max(1) as f64;
        let mut mean = [0.0; 5];
        let mut std = [1.0; 5];
        for e in 0..5 {
            let m = records.iter().map(|r| r.labels()[e]).sum::<f64>() / n;
            let var = records.iter().map(|r| (r.labels()[e] - m).powi(2)).sum::<f64>() / n;
            mean[e] = m;
            std[e] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        }
        let max_rain = records.iter().map(|r| r.rain).fold(0.0, f64::max);
        Self { mean, std, max_rain }
    }

    /// Regression targets: rain in mm, other elements standardized.
    pub fn targets(&self, labels: [f64; 5]) -> [f64; 5] {
        let mut t = labels;
        for e in 1..5 {
            t[e] = (labels[e] - self.mean[e]) / self.std[e];
        }
        t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub split: String,
    pub channels: usize,
    pub channel_names: Vec<String>,
    pub max_lag: usize,
    /// Side of the stored crops (the uniform input scale).
    pub input_scale: usize,
    pub scales: Vec<usize>,
    pub stations: Vec<StationGeometry>,
    /// Station index per sample.
    pub sample_station: Vec<usize>,
    /// Timestamp (hours) per sample.
    pub sample_timestamp: Vec<i64>,
    pub channel_stats: ChannelStats,
    pub label_stats: LabelStats,
    pub generator: GeneratorConfig,
    pub seed: u64,
}

/// One split: `fields` is row-major `(N, C, max_lag, u, u)` with lag 0 the
/// current time.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub fields: Vec<f32>,
    pub records: Vec<StationRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn sample_stride(&self) -> usize {
        let u = self.meta.input_scale;
        self.meta.channels * self.meta.max_lag * u * u
    }

    pub fn labels(&self, i: usize) -> [f64; 5] {
        self.records[i].labels()
    }

    /// Regression targets (see [`LabelStats::targets`]).
    pub fn targets(&self, i: usize) -> [f64; 5] {
        self.meta.label_stats.targets(self.labels(i))
    }

    pub fn rain(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.rain).collect()
    }

    /// Raw `C × u × u` crop of sample `i` at lag `lag`.
    pub fn raw_crop(&self, i: usize, lag: usize) -> Tensor {
        let (c, l, u) = (self.meta.channels, self.meta.max_lag, self.meta.input_scale);
        let base = i * self.sample_stride();
        let mut data = Vec::with_capacity(c * u * u);
        for ch in 0..c {
            let start = base + (ch * l + lag) * u * u;
            data.extend(self.fields[start..start + u * u].iter().map(|&v| v as f64));
        }
        Tensor::new(&[c, u, u], data)
    }

    /// Normalized crop of side `scale`, centred on the station.
    pub fn crop(&self, i: usize, lag: usize, scale: usize) -> Result<Tensor> {
        if lag >= self.meta.max_lag {
            return Err(StasError::InsufficientHistory {
                t: i,
                lags: lag + 1,
                earliest: lag,
            });
        }
        let u = self.meta.input_scale;
        if scale > u || scale % 2 == 0 {
            return Err(StasError::Config(format!(
                "scale {scale} not available from stored {u}x{u} crops"
            )));
        }
        let raw = center_crop(&self.raw_crop(i, lag), scale);
        Ok(self.meta.channel_stats.apply(&raw))
    }

    /// Normalized lagged sample following `plan` (one scale per lag, newest
    /// first).
    pub fn sample(&self, i: usize, plan: &[usize]) -> Result<TimeSeriesSample> {
        if plan.is_empty() {
            return Err(StasError::Empty("scale plan".into()));
        }
        if plan.len() > self.meta.max_lag {
            return Err(StasError::InsufficientHistory {
                t: i,
                lags: plan.len(),
                earliest: plan.len() - 1,
            });
        }
        let lags = plan
            .iter()
            .enumerate()
            .map(|(k, &s)| self.crop(i, k, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(TimeSeriesSample {
            station_id: self.records[i].station_id.clone(),
            timestamp: self.records[i].timestamp,
            scales: plan.to_vec(),
            lags,
        })
    }

    /// New dataset holding the given samples, in the given order.
    pub fn subset(&self, indices: &[usize], name: &str) -> Dataset {
        let stride = self.sample_stride();
        let mut fields = Vec::with_capacity(indices.len() * stride);
        let mut meta = self.meta.clone();
        meta.split = name.to_string();
        meta.sample_station = indices.iter().map(|&i| self.meta.sample_station[i]).collect();
        meta.sample_timestamp = indices.iter().map(|&i| self.meta.sample_timestamp[i]).collect();
        for &i in indices {
            fields.extend_from_slice(&self.fields[i * stride..(i + 1) * stride]);
        }
        Dataset {
            meta,
            fields,
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    /// First `n` samples (all if fewer).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx, &self.meta.split.clone())
    }

    /// Intensity-stratified view by name: `ECbT`, `ECbM`, `ECbH` or `ECbMi`
    /// (largest mixture the classes can supply at 9:3:1).
    pub fn intensity_split(&self, name: &str, seed: u64) -> Result<Dataset> {
        let parts = partition_by_intensity(&self.rain());
        let idx = match name {
            "ECbT" => parts.get(IntensityClass::Tiny).to_vec(),
            "ECbM" => parts.get(IntensityClass::Moderate).to_vec(),
            "ECbH" => parts.get(IntensityClass::Heavy).to_vec(),
            "ECbMi" => {
                let total = max_mixture_total(&parts, MIX_RATIO);
                mix_ratio(&parts, MIX_RATIO, total, seed)?
            }
            other => return Err(StasError::Config(format!("unknown intensity split {other}"))),
        };
        Ok(self.subset(&idx, name))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut blob = BufWriter::new(fs::File::create(dir.join(FIELDS_FILE))?);
        for v in &self.fields {
            blob.write_all(&v.to_le_bytes())?;
        }
        blob.flush()?;
        fs::write(dir.join(META_FILE), serde_json::to_vec_pretty(&self.meta)?)?;
        let mut w = csv::Writer::from_path(dir.join(RECORDS_FILE))?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let meta: DatasetMeta = serde_json::from_slice(&fs::read(dir.join(META_FILE))?)?;
        let bytes = fs::read(dir.join(FIELDS_FILE))?;
        if bytes.len() % 4 != 0 {
            return Err(StasError::Format(format!("{FIELDS_FILE} length not a multiple of 4")));
        }
        let fields: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let mut rdr = csv::Reader::from_path(dir.join(RECORDS_FILE))?;
        let records = rdr.deserialize().collect::<std::result::Result<Vec<StationRecord>, _>>()?;
        let ds = Dataset { meta, fields, records };
        let expected = ds.len() * ds.sample_stride();
        if ds.fields.len() != expected
            || ds.meta.sample_station.len() != ds.len()
            || ds.meta.sample_timestamp.len() != ds.len()
        {
            return Err(StasError::Format(format!(
                "{}: {} samples but {} field values (expected {expected})",
                dir.display(),
                ds.len(),
                ds.fields.len()
            )));
        }
        Ok(ds)
    }
}

/// Train / validation / test splits sharing training-split statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitSet {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl SplitSet {
    pub fn save(&self, root: &Path) -> Result<()> {
        self.train.save(&root.join("train"))?;
        self.val.save(&root.join("val"))?;
        self.test.save(&root.join("test"))
    }

    pub fn load(root: &Path) -> Result<SplitSet> {
        Ok(SplitSet {
            train: Dataset::load(&root.join("train"))?,
            val: Dataset::load(&root.join("val"))?,
            test: Dataset::load(&root.join("test"))?,
        })
    }

    /// A named split: `train`, `val`, `test`, or an intensity split of test.
    pub fn get(&self, name: &str, seed: u64) -> Result<Dataset> {
        match name {
            "train" => Ok(self.train.clone()),
            "val" => Ok(self.val.clone()),
            "test" => Ok(self.test.clone()),
            other => self.test.intensity_split(other, seed),
        }
    }
}

/// Every split name understood by [`SplitSet::get`].
pub const SPLIT_NAMES: [&str; 7] = ["train", "val", "test", "ECbT", "ECbM", "ECbH", "ECbMi"];

/// Cut the world into lagged samples and split 70/15/15 by timestamp.
/// Channel and label statistics come from the training split only.
pub fn build_splits(world: &SyntheticWorld, cfg: &GeneratorConfig, seed: u64) -> Result<SplitSet> {
    cfg.validate()?;
    let u = cfg.max_scale();
    let lags = cfg.max_lag;
    let frames = &world.frames;
    let nst = world.stations.len();
    if frames.len() < lags {
        return Err(StasError::InsufficientHistory {
            t: frames.len().saturating_sub(1),
            lags,
            earliest: lags - 1,
        });
    }
    let valid: Vec<usize> = (lags - 1..frames.len()).collect();
    let n_train = (valid.len() as f64 * 0.70).round() as usize;
    let n_val = (valid.len() as f64 * 0.15).round() as usize;
    let cuts = [
        ("train", &valid[..n_train]),
        ("val", &valid[n_train..n_train + n_val]),
        ("test", &valid[n_train + n_val..]),
    ];
    let plan = vec![u; lags];
    let mut raw = Vec::new();
    for (name, ts) in cuts {
        let mut fields = Vec::new();
        let mut records = Vec::new();
        let mut sample_station = Vec::new();
        let mut sample_timestamp = Vec::new();
        for &t in ts {
            for (si, st) in world.stations.iter().enumerate() {
                let seq = make_lagged_sequence(frames, st, t, &plan)?;
                let c = cfg.channels;
                for ch in 0..c {
                    for lag in &seq.lags {
                        fields.extend(lag.channel(ch).iter().map(|&v| v as f32));
                    }
                }
                records.push(world.records[t * nst + si].clone());
                sample_station.push(si);
                sample_timestamp.push(frames[t].timestamp);
            }
        }
        raw.push((name, fields, records, sample_station, sample_timestamp));
    }

    let (_, train_fields, train_records, _, _) = &raw[0];
    let plane = lags * u * u;
    let n_train_samples = train_records.len();
    let channel_stats = ChannelStats::fit(cfg.channels, |c| {
        let mut v = Vec::with_capacity(n_train_samples * plane);
        for i in 0..n_train_samples {
            let start = (i * cfg.channels + c) * plane;
            v.extend(train_fields[start..start + plane].iter().map(|&x| x as f64));
        }
        v
    });
    let label_stats = LabelStats::fit(train_records);

    let mut out = raw.into_iter().map(|(name, fields, records, sample_station, sample_timestamp)| Dataset {
        meta: DatasetMeta {
            split: name.to_string(),
            channels: cfg.channels,
            channel_names: channel_names(cfg.channels),
            max_lag: lags,
            input_scale: u,
            scales: cfg.scales.clone(),
            stations: world.stations.clone(),
            sample_station,
            sample_timestamp,
            channel_stats: channel_stats.clone(),
            label_stats: label_stats.clone(),
            generator: cfg.clone(),
            seed,
        },
        fields,
        records,
    });
    let train = out.next().expect("three splits");
    let val = out.next().expect("three splits");
    let test = out.next().expect("three splits");
    Ok(SplitSet { train, val, test })
}

/// Element names in label order, for CSV headers and logs.
pub fn element_names() -> [&'static str; 5] {
    Element::ALL.map(|e| e.name())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;

    #[test]
    fn zscore_arithmetic() {
        let stats = ChannelStats {
            mean: vec![5.0],
            std: vec![2.0],
        };
        assert_eq!(stats.normalize(0, 9.0), 2.0);
    }

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let stats = ChannelStats::fit(1, |_| vec![3.0; 10]);
        assert_eq!(stats.std[0], 1.0);
        let x = Tensor::full(&[1, 2, 2], 3.0);
        assert!(stats.apply(&x).data().iter().all(|&v| v == 0.0));
    }

    fn tiny_cfg() -> GeneratorConfig {
        GeneratorConfig {
            grid_h: 16,
            grid_w: 16,
            timestamps: 30,
            stations: 3,
            scales: vec![7, 3],
            max_lag: 3,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn temporal_split_sizes_and_order() {
        let cfg = tiny_cfg();
        let world = generate_synthetic(&cfg, 2).unwrap();
        let s = build_splits(&world, &cfg, 2).unwrap();
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), 28 * 3);
        let last_train = *s.train.meta.sample_timestamp.iter().max().unwrap();
        let first_val = *s.val.meta.sample_timestamp.iter().min().unwrap();
        let first_test = *s.test.meta.sample_timestamp.iter().min().unwrap();
        assert!(last_train < first_val && first_val < first_test);
    }

    #[test]
    fn stored_lags_match_direct_crops() {
        let cfg = tiny_cfg();
        let world = generate_synthetic(&cfg, 2).unwrap();
        let s = build_splits(&world, &cfg, 2).unwrap();
        let i = 4;
        let st = &world.stations[s.val.meta.sample_station[i]];
        let t = (s.val.meta.sample_timestamp[i] / 6) as usize;
        for lag in 0..3 {
            let direct = crate::data::crop_multiscale(&world.frames[t - lag], st, &[3]).unwrap().remove(0);
            let normalized = s.val.meta.channel_stats.apply(&direct);
            assert!(s.val.crop(i, lag, 3).unwrap().max_abs_diff(&normalized) < 1e-12);
        }
    }

    #[test]
    fn validation_mean_is_not_forced_to_zero() {
        let cfg = tiny_cfg();
        let world = generate_synthetic(&cfg, 5).unwrap();
        let s = build_splits(&world, &cfg, 5).unwrap();
        let mut total = 0.0;
        let mut n = 0.0;
        for i in 0..s.val.len() {
            let x = s.val.crop(i, 0, 7).unwrap();
            total += x.channel(1).iter().sum::<f64>();
            n += 49.0;
        }
        assert!((total / n).abs() > 1e-6);
    }

    #[test]
    fn save_load_round_trip() {
        let cfg = tiny_cfg();
        let world = generate_synthetic(&cfg, 9).unwrap();
        let s = build_splits(&world, &cfg, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        s.save(dir.path()).unwrap();
        let back = SplitSet::load(dir.path()).unwrap();
        assert_eq!(back, s);
    }
}
