//! Synthetic stand-in for a gridded NWP archive with co-located station
//! observations.
//!
//! Precipitation comes from anisotropic Gaussian rain cells advected across
//! a periodic domain by a common steering wind. The "truth" field drives the
//! station labels; the gridded forecast channels see the same cells displaced
//! and amplified in proportion to `bias`, which is the error a corrector has
//! to learn to undo.

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{channel_names, GridFrame, StationGeometry, StationRecord};
use crate::error::{Result, StasError};

/// Hours between consecutive frames.
pub const STEP_HOURS: i64 = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    pub timestamps: usize,
    pub stations: usize,
    pub channels: usize,
    /// Odd crop sides, largest first; the largest is the uniform input scale.
    pub scales: Vec<usize>,
    pub max_lag: usize,
    /// Target fraction of station records with rain ≥ 0.1 mm.
    pub rain_fraction: f64,
    /// Target fraction of station records with rain ≥ 10 mm.
    pub heavy_fraction: f64,
    pub max_rain: f64,
    pub cells: usize,
    /// Steering wind speed in pixels per step.
    pub wind_speed: f64,
    /// Forecast error strength; 0 makes the rain channel exact.
    pub bias: f64,
    /// Forecast displacement in pixels at `bias = 1`.
    pub displacement: f64,
    pub obs_noise: f64,
    pub channel_noise: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            grid_h: 48,
            grid_w: 48,
            timestamps: 200,
            stations: 16,
            channels: 8,
            scales: vec![29, 15, 7, 3],
            max_lag: 4,
            rain_fraction: 0.35,
            heavy_fraction: 0.06,
            max_rain: 30.0,
            cells: 10,
            wind_speed: 1.5,
            bias: 1.0,
            displacement: 3.0,
            obs_noise: 0.05,
            channel_noise: 0.1,
        }
    }
}

impl GeneratorConfig {
    pub fn max_scale(&self) -> usize {
        self.scales.iter().copied().max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.scales.iter().any(|s| s % 2 == 0) {
            return Err(StasError::Config(format!(
                "scales must be non-empty and odd, got {:?}",
                self.scales
            )));
        }
        let need = self.max_scale() + 4;
        if self.grid_h < need || self.grid_w < need {
            return Err(StasError::GridTooSmall {
                grid_h: self.grid_h,
                grid_w: self.grid_w,
                detail: format!(
                    "largest crop scale {} needs at least {need}x{need} (scale + 4)",
                    self.max_scale()
                ),
            });
        }
        if self.max_lag == 0 || self.timestamps < self.max_lag + 1 {
            return Err(StasError::Config(format!(
                "need at least max_lag + 1 = {} timestamps, got {}",
                self.max_lag + 1,
                self.timestamps
            )));
        }
        if self.stations == 0 {
            return Err(StasError::Config("at least one station required".into()));
        }
        if self.channels < 5 {
            return Err(StasError::Config(format!(
                "at least 5 channels (one per element) required, got {}",
                self.channels
            )));
        }
        if !(0.0 < self.heavy_fraction && self.heavy_fraction < self.rain_fraction && self.rain_fraction < 1.0) {
            return Err(StasError::Config(format!(
                "need 0 < heavy_fraction ({}) < rain_fraction ({}) < 1",
                self.heavy_fraction, self.rain_fraction
            )));
        }
        if self.bias < 0.0 || self.obs_noise < 0.0 || self.channel_noise < 0.0 {
            return Err(StasError::Config("bias and noise levels must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub frames: Vec<GridFrame>,
    pub stations: Vec<StationGeometry>,
    /// One record per station per timestamp, station-major within a timestamp.
    pub records: Vec<StationRecord>,
}

#[derive(Clone, Debug)]
struct Cell {
    y: f64,
    x: f64,
    amp: f64,
    major: f64,
    minor: f64,
    cos_a: f64,
    sin_a: f64,
    age: f64,
    life: f64,
    vy: f64,
    vx: f64,
}

impl Cell {
    fn spawn(rng: &mut ChaCha8Rng, h: usize, w: usize, wind: (f64, f64), fresh: bool) -> Self {
        let angle: f64 = rng.random_range(0.0..PI);
        let life = rng.random_range(8.0..20.0);
        Self {
            y: rng.random_range(0.0..h as f64),
            x: rng.random_range(0.0..w as f64),
            amp: rng.random_range(0.5..1.5),
            major: rng.random_range(2.5..5.5),
            minor: rng.random_range(1.2..2.5),
            cos_a: angle.cos(),
            sin_a: angle.sin(),
            age: if fresh { 0.0 } else { rng.random_range(0.0..life) },
            life,
            vy: wind.0 + rng.random_range(-0.3..0.3),
            vx: wind.1 + rng.random_range(-0.3..0.3),
        }
    }

    fn intensity(&self) -> f64 {
        self.amp * (PI * self.age / self.life).sin().max(0.0)
    }
}

fn wrap_delta(d: f64, n: f64) -> f64 {
    let mut d = d % n;
    if d > n / 2.0 {
        d -= n;
    } else if d < -n / 2.0 {
        d += n;
    }
    d
}

/// Latent rain intensity at `(y, x)` with every cell centre shifted by `shift`.
fn latent(cells: &[Cell], y: f64, x: f64, shift: (f64, f64), h: f64, w: f64) -> f64 {
    cells
        .iter()
        .map(|c| {
            let dy = wrap_delta(y - c.y - shift.0, h);
            let dx = wrap_delta(x - c.x - shift.1, w);
            let u = dy * c.cos_a + dx * c.sin_a;
            let v = -dy * c.sin_a + dx * c.cos_a;
            c.intensity() * (-0.5 * (u * u / (c.major * c.major) + v * v / (c.minor * c.minor))).exp()
        })
        .sum()
}

/// Monotone map from latent intensity to millimetres, calibrated so that the
/// station-level rain and heavy-rain fractions hit their targets.
#[derive(Clone, Copy, Debug)]
struct RainCurve {
    onset: f64,
    heavy: f64,
    rate: f64,
    cap: f64,
}

impl RainCurve {
    fn calibrate(samples: &mut [f64], rain_fraction: f64, heavy_fraction: f64, cap: f64) -> Self {
        samples.sort_by(|a, b| a.partial_cmp(b).expect("finite latent values"));
        let q = |frac: f64| {
            let idx = ((1.0 - frac) * samples.len() as f64).floor() as usize;
            samples[idx.min(samples.len() - 1)]
        };
        let onset = q(rain_fraction);
        let mut heavy = q(heavy_fraction);
        if heavy <= onset {
            heavy = onset + 1e-6;
        }
        Self {
            onset,
            heavy,
            rate: 100f64.ln() / (heavy - onset),
            cap,
        }
    }

    fn mm(&self, f: f64) -> f64 {
        let v = if f < self.onset {
            0.0
        } else if f < self.heavy {
            0.1 * (self.rate * (f - self.onset)).exp()
        } else {
            10.0 + 10.0 * self.rate * (f - self.heavy)
        };
        v.min(self.cap)
    }

    /// Latent intensity scaled so the heavy threshold sits at 1, capped at 1.5.
    fn norm(&self, f: f64) -> f64 {
        (f / self.heavy).min(1.5)
    }
}

struct Backdrop {
    h: f64,
    w: f64,
}

impl Backdrop {
    fn temp(&self, t: f64, x: f64, fn_: f64) -> f64 {
        295.0 + 3.0 * (2.0 * PI * x / self.w + 0.02 * t).sin() + 1.5 * (2.0 * PI * t / 4.0).sin()
            - 4.0 * fn_
    }
    fn pressure(&self, t: f64, y: f64, fn_: f64) -> f64 {
        1008.0 + 4.0 * (2.0 * PI * y / self.h + 0.015 * t).cos() - 5.0 * fn_
    }
    fn wind(&self, speed: f64, fn_: f64) -> f64 {
        2.0 + 0.5 * speed + 5.0 * fn_
    }
    fn dew(&self, temp: f64, fn_: f64) -> f64 {
        temp - 8.0 + 6.0 * fn_
    }
    fn aux(&self, j: usize, t: f64, y: f64, x: f64, fn_: f64) -> f64 {
        (0.6 - 0.1 * j as f64) * fn_
            + 0.3 * (2.0 * PI * (x + y) / (self.w * (j + 1) as f64) + 0.05 * t).sin()
    }
}

fn place_stations(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Vec<StationGeometry> {
    let omega = cfg.max_scale() / 2;
    let (lo_r, hi_r) = (omega, cfg.grid_h - 1 - omega);
    let (lo_c, hi_c) = (omega, cfg.grid_w - 1 - omega);
    let mut taken: Vec<(usize, usize)> = Vec::new();
    let mut min_gap = 3usize;
    let mut attempts = 0;
    while taken.len() < cfg.stations {
        let r = rng.random_range(lo_r..=hi_r);
        let c = rng.random_range(lo_c..=hi_c);
        attempts += 1;
        if attempts % 500 == 0 && min_gap > 0 {
            min_gap -= 1;
        }
        let clash = taken
            .iter()
            .any(|&(tr, tc)| tr.abs_diff(r) < min_gap.max(1) && tc.abs_diff(c) < min_gap.max(1));
        if !clash || (min_gap == 0 && attempts > 5000) {
            taken.push((r, c));
        }
    }
    taken
        .into_iter()
        .enumerate()
        .map(|(i, (row, col))| StationGeometry {
            station_id: format!("S{i:03}"),
            // one degree per pixel, north-up grid
            lat: 40.0 - row as f64,
            lon: 100.0 + col as f64,
            row,
            col,
            omega,
        })
        .collect()
}

fn q32(v: f64) -> f64 {
    v as f32 as f64
}

pub fn generate_synthetic(cfg: &GeneratorConfig, seed: u64) -> Result<SyntheticWorld> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.grid_h as f64, cfg.grid_w as f64);
    let stations = place_stations(cfg, &mut rng);

    let heading: f64 = rng.random_range(0.0..2.0 * PI);
    let wind = (cfg.wind_speed * heading.sin(), cfg.wind_speed * heading.cos());
    let err_heading: f64 = rng.random_range(0.0..2.0 * PI);
    let shift = (
        cfg.bias * cfg.displacement * err_heading.sin(),
        cfg.bias * cfg.displacement * err_heading.cos(),
    );
    let gain = 1.0 + 0.5 * cfg.bias;

    // Advect cells and snapshot them per timestamp.
    let mut cells: Vec<Cell> = (0..cfg.cells)
        .map(|_| Cell::spawn(&mut rng, cfg.grid_h, cfg.grid_w, wind, false))
        .collect();
    let mut history = Vec::with_capacity(cfg.timestamps);
    for _ in 0..cfg.timestamps {
        history.push(cells.clone());
        for c in cells.iter_mut() {
            c.y = (c.y + c.vy).rem_euclid(h);
            c.x = (c.x + c.vx).rem_euclid(w);
            c.age += 1.0;
        }
        for c in cells.iter_mut() {
            if c.age >= c.life {
                *c = Cell::spawn(&mut rng, cfg.grid_h, cfg.grid_w, wind, true);
            }
        }
    }

    let truth: Vec<Vec<f64>> = history
        .iter()
        .map(|cs| {
            stations
                .iter()
                .map(|s| latent(cs, s.row as f64, s.col as f64, (0.0, 0.0), h, w))
                .collect()
        })
        .collect();
    let mut pool: Vec<f64> = truth.iter().flatten().copied().collect();
    let curve = RainCurve::calibrate(&mut pool, cfg.rain_fraction, cfg.heavy_fraction, cfg.max_rain);
    let backdrop = Backdrop { h, w };

    let noise_scale = [0.0, 1.0, 1.0, 0.5, 1.0];
    let bias_offset = [0.0, -0.8 * cfg.bias, 0.5 * cfg.bias, 0.0, -0.5 * cfg.bias];
    let mut frames = Vec::with_capacity(cfg.timestamps);
    let mut records = Vec::with_capacity(cfg.timestamps * stations.len());
    for (ti, cs) in history.iter().enumerate() {
        let t = ti as f64;
        let plane = cfg.grid_h * cfg.grid_w;
        let mut data = vec![0f32; cfg.channels * plane];
        for row in 0..cfg.grid_h {
            for col in 0..cfg.grid_w {
                let (y, x) = (row as f64, col as f64);
                let f = latent(cs, y, x, shift, h, w);
                let fnorm = curve.norm(f);
                let temp = backdrop.temp(t, x, fnorm);
                let values = [
                    curve.mm(f) * gain,
                    temp,
                    backdrop.pressure(t, y, fnorm),
                    backdrop.wind(cfg.wind_speed, fnorm) * (1.0 + 0.2 * cfg.bias),
                    backdrop.dew(temp, fnorm),
                ];
                let px = row * cfg.grid_w + col;
                for (c, v) in values.iter().enumerate() {
                    let eps: f64 = rng.sample(StandardNormal);
                    let noisy = v + bias_offset[c] + cfg.channel_noise * noise_scale[c] * eps;
                    data[c * plane + px] = noisy as f32;
                }
                for c in 5..cfg.channels {
                    let eps: f64 = rng.sample(StandardNormal);
                    let v = backdrop.aux(c - 5, t, y, x, fnorm) + cfg.channel_noise * eps;
                    data[c * plane + px] = v as f32;
                }
            }
        }
        frames.push(GridFrame {
            timestamp: ti as i64 * STEP_HOURS,
            channels: cfg.channels,
            h: cfg.grid_h,
            w: cfg.grid_w,
            data,
        });

        for (si, s) in stations.iter().enumerate() {
            let f = truth[ti][si];
            let fnorm = curve.norm(f);
            let (y, x) = (s.row as f64, s.col as f64);
            let mut n = || -> f64 { cfg.obs_noise * rng.sample::<f64, _>(StandardNormal) };
            let rain = (curve.mm(f) * (1.0 + n())).max(0.0);
            let temp_true = backdrop.temp(t, x, fnorm);
            records.push(StationRecord {
                station_id: s.station_id.clone(),
                timestamp: ti as i64 * STEP_HOURS,
                rain: q32(rain),
                temp: q32(temp_true + n()),
                pressure: q32(backdrop.pressure(t, y, fnorm) + n()),
                wind: q32((backdrop.wind(cfg.wind_speed, fnorm) + 0.5 * n()).max(0.0)),
                dew: q32(backdrop.dew(temp_true, fnorm) + n()),
            });
        }
    }
    debug_assert_eq!(channel_names(cfg.channels).len(), cfg.channels);

    Ok(SyntheticWorld {
        frames,
        stations,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            grid_h: 24,
            grid_w: 24,
            timestamps: 40,
            stations: 6,
            scales: vec![15, 7, 3],
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let a = generate_synthetic(&small(), 3).unwrap();
        let b = generate_synthetic(&small(), 3).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.records, b.records);
        assert_eq!(a.stations, b.stations);
        let c = generate_synthetic(&small(), 4).unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn unbiased_noiseless_rain_matches_grid() {
        let cfg = GeneratorConfig {
            bias: 0.0,
            obs_noise: 0.0,
            ..small()
        };
        let world = generate_synthetic(&cfg, 1).unwrap();
        let n = world.stations.len();
        for (i, rec) in world.records.iter().enumerate() {
            let frame = &world.frames[i / n];
            let s = &world.stations[i % n];
            assert_eq!(rec.station_id, s.station_id);
            assert_eq!(rec.rain, frame.get(0, s.row, s.col) as f64);
        }
    }

    #[test]
    fn rejects_small_grid_with_bound() {
        let cfg = GeneratorConfig {
            grid_h: 30,
            grid_w: 30,
            ..GeneratorConfig::default()
        };
        let err = generate_synthetic(&cfg, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("33x33"), "{msg}");
    }

    #[test]
    fn rain_is_nonnegative_and_values_finite() {
        let world = generate_synthetic(&small(), 9).unwrap();
        let plane = 24 * 24;
        for f in &world.frames {
            assert!(f.data.iter().all(|v| v.is_finite()));
            assert!(f.data[..plane].iter().all(|&v| v >= 0.0));
        }
        assert!(world.records.iter().all(|r| r.rain >= 0.0));
    }

    #[test]
    fn consecutive_frames_are_advected() {
        let world = generate_synthetic(&small(), 5).unwrap();
        // Rain pattern changes between frames but stays spatially correlated
        // with a shifted copy of itself.
        let a = &world.frames[10].data[..576];
        let b = &world.frames[11].data[..576];
        assert_ne!(a, b);
    }
}
