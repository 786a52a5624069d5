//! Square crops around stations and lagged multi-scale sequences.

use super::{GridFrame, StationGeometry};
use crate::error::{Result, StasError};
use crate::tensor::Tensor;

/// Square `channels × s × s` crops centred on the station pixel, one per scale.
pub fn crop_multiscale(frame: &GridFrame, station: &StationGeometry, scales: &[usize]) -> Result<Vec<Tensor>> {
    scales
        .iter()
        .map(|&s| crop_one(frame, station, s))
        .collect()
}

fn crop_one(frame: &GridFrame, station: &StationGeometry, scale: usize) -> Result<Tensor> {
    if scale % 2 == 0 {
        return Err(StasError::Config(format!("crop scale must be odd, got {scale}")));
    }
    let r = scale / 2;
    let out_of_bounds = station.row < r
        || station.col < r
        || station.row + r >= frame.h
        || station.col + r >= frame.w;
    if out_of_bounds {
        return Err(StasError::CropOutOfBounds {
            station: station.station_id.clone(),
            scale,
            row: station.row,
            col: station.col,
            grid_h: frame.h,
            grid_w: frame.w,
        });
    }
    let (r0, c0) = (station.row - r, station.col - r);
    let mut data = Vec::with_capacity(frame.channels * scale * scale);
    for c in 0..frame.channels {
        for row in r0..r0 + scale {
            let start = (c * frame.h + row) * frame.w + c0;
            data.extend(frame.data[start..start + scale].iter().map(|&v| v as f64));
        }
    }
    Ok(Tensor::new(&[frame.channels, scale, scale], data))
}

/// Lagged crops for one station, newest first: `lags[k]` comes from frame
/// `t - k` at side `scales[k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesSample {
    pub station_id: String,
    pub timestamp: i64,
    pub scales: Vec<usize>,
    pub lags: Vec<Tensor>,
}

impl TimeSeriesSample {
    pub fn len(&self) -> usize {
        self.lags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lags.is_empty()
    }
}

/// Build the sequence `[X_t, X_{t-1}, …]` of length `scale_plan.len()`
/// ending at frame index `t`.
pub fn make_lagged_sequence(
    frames: &[GridFrame],
    station: &StationGeometry,
    t: usize,
    scale_plan: &[usize],
) -> Result<TimeSeriesSample> {
    let lags = scale_plan.len();
    if lags == 0 {
        return Err(StasError::Empty("scale plan".into()));
    }
    if t + 1 < lags || t >= frames.len() {
        return Err(StasError::InsufficientHistory {
            t,
            lags,
            earliest: lags - 1,
        });
    }
    let crops = scale_plan
        .iter()
        .enumerate()
        .map(|(k, &s)| crop_one(&frames[t - k], station, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(TimeSeriesSample {
        station_id: station.station_id.clone(),
        timestamp: frames[t].timestamp,
        scales: scale_plan.to_vec(),
        lags: crops,
    })
}

/// Centre `scale × scale` window of a `c × n × n` crop.
pub fn center_crop(x: &Tensor, scale: usize) -> Tensor {
    let s = x.shape();
    let (c, n) = (s[0], s[1]);
    assert!(scale <= n && (n - scale) % 2 == 0, "cannot centre-crop {scale} from {n}");
    if scale == n {
        return x.clone();
    }
    let off = (n - scale) / 2;
    let mut data = Vec::with_capacity(c * scale * scale);
    for ch in 0..c {
        for row in off..off + scale {
            let start = (ch * n + row) * n + off;
            data.extend_from_slice(&x.data()[start..start + scale]);
        }
    }
    Tensor::new(&[c, scale, scale], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: usize, w: usize, t: i64) -> GridFrame {
        let data = (0..h * w).map(|i| ((i / w) * 10 + i % w) as f32 + t as f32 * 1000.0).collect();
        GridFrame {
            timestamp: t,
            channels: 1,
            h,
            w,
            data,
        }
    }

    fn station(row: usize, col: usize) -> StationGeometry {
        StationGeometry {
            station_id: "S".into(),
            lat: 0.0,
            lon: 0.0,
            row,
            col,
            omega: 2,
        }
    }

    #[test]
    fn three_by_three_block() {
        let crops = crop_multiscale(&grid(5, 5, 0), &station(2, 2), &[3]).unwrap();
        assert_eq!(
            crops[0].data(),
            &[11.0, 12.0, 13.0, 21.0, 22.0, 23.0, 31.0, 32.0, 33.0]
        );
    }

    #[test]
    fn unit_scale_is_center_pixel() {
        let crops = crop_multiscale(&grid(5, 5, 0), &station(2, 2), &[1]).unwrap();
        assert_eq!(crops[0].data(), &[22.0]);
    }

    #[test]
    fn out_of_bounds_names_station_and_scale() {
        let err = crop_multiscale(&grid(5, 5, 0), &station(1, 1), &[5]).unwrap_err();
        assert!(matches!(err, StasError::CropOutOfBounds { scale: 5, .. }));
        assert!(err.to_string().contains("station S"));
    }

    #[test]
    fn lagged_sequence_shapes_and_order() {
        let frames: Vec<GridFrame> = (0..5).map(|t| grid(31, 31, t)).collect();
        let s = station(15, 15);
        let one = make_lagged_sequence(&frames, &s, 4, &[29]).unwrap();
        assert_eq!(one.len(), 1);
        let seq = make_lagged_sequence(&frames, &s, 4, &[29, 15, 7]).unwrap();
        let sides: Vec<usize> = seq.lags.iter().map(|x| x.shape()[1]).collect();
        assert_eq!(sides, vec![29, 15, 7]);
        // centre pixel carries the frame index in the thousands
        assert_eq!(seq.lags[1].data()[7 * 15 + 7], 165.0 + 3000.0);
        assert_eq!(seq.lags[2].data()[3 * 7 + 3], 165.0 + 2000.0);
    }

    #[test]
    fn insufficient_history_reports_earliest() {
        let frames: Vec<GridFrame> = (0..5).map(|t| grid(9, 9, t)).collect();
        let err = make_lagged_sequence(&frames, &station(4, 4), 1, &[3, 3, 3, 3]).unwrap_err();
        match err {
            StasError::InsufficientHistory { earliest, .. } => assert_eq!(earliest, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn center_crop_agrees_with_direct_crop() {
        let f = grid(11, 11, 0);
        let s = station(5, 5);
        let big = crop_multiscale(&f, &s, &[9]).unwrap().remove(0);
        for scale in [1, 3, 5, 7, 9] {
            let direct = crop_multiscale(&f, &s, &[scale]).unwrap().remove(0);
            assert_eq!(center_crop(&big, scale), direct);
        }
    }
}
