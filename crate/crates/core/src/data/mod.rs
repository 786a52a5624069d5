//! Synthetic gridded forecasts, station observations, multi-scale crops and
//! the on-disk dataset container.

pub mod crop;
pub mod dataset;
pub mod generator;
pub mod partition;

use serde::{Deserialize, Serialize};

pub use crop::{crop_multiscale, make_lagged_sequence, TimeSeriesSample};
pub use dataset::{build_splits, ChannelStats, Dataset, DatasetMeta, LabelStats, SplitSet, SPLIT_NAMES};
pub use generator::{generate_synthetic, GeneratorConfig, SyntheticWorld};
pub use partition::{mix_ratio, partition_by_intensity, IntensityClass, IntensitySplits};

/// The five observed meteorological elements, in loss-weight order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Element {
    Rain,
    Temp,
    Pressure,
    Wind,
    Dew,
}

impl Element {
    pub const ALL: [Element; 5] = [
        Element::Rain,
        Element::Temp,
        Element::Pressure,
        Element::Wind,
        Element::Dew,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Element::Rain => "rain",
            Element::Temp => "temp",
            Element::Pressure => "pressure",
            Element::Wind => "wind",
            Element::Dew => "dew",
        }
    }
}

/// Loss weights per element: rain 2, the rest 1.
pub const ELEMENT_WEIGHTS: [f64; 5] = [2.0, 1.0, 1.0, 1.0, 1.0];

/// One timestamp of `channels × h × w` gridded forecast fields.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFrame {
    /// Hours since the start of the record; consecutive frames are 6 h apart.
    pub timestamp: i64,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl GridFrame {
    pub fn get(&self, c: usize, row: usize, col: usize) -> f32 {
        self.data[(c * self.h + row) * self.w + col]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationGeometry {
    pub station_id: String,
    /// Latitude in degrees.
    pub lat: f64,
    /// Longitude in degrees.
    pub lon: f64,
    pub row: usize,
    pub col: usize,
    /// Half-width of the widest crop, in pixels.
    pub omega: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationRecord {
    pub station_id: String,
    pub timestamp: i64,
    pub rain: f64,
    pub temp: f64,
    pub pressure: f64,
    pub wind: f64,
    pub dew: f64,
}

impl StationRecord {
    pub fn labels(&self) -> [f64; 5] {
        [self.rain, self.temp, self.pressure, self.wind, self.dew]
    }
}

/// Channel names: the five primary elements followed by auxiliary fields.
pub fn channel_names(channels: usize) -> Vec<String> {
    let mut names: Vec<String> = Element::ALL.iter().map(|e| e.name().to_string()).collect();
    for i in 5..channels {
        names.push(format!("aux{}", i - 4));
    }
    names.truncate(channels);
    names
}
