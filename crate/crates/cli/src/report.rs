//! Station heatmaps and the Markdown summary.
//!
//! Station values are rasterized onto the generator grid by nearest-station
//! assignment. All panels of one figure share a colour scale from 0 to the
//! largest value shown in any panel.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use stas::backbone::PredictionRecord;
use stas::data::{Dataset, SplitSet, StationGeometry};
use stas::metrics::{evaluate, ReportRow};
use stas::training::read_predictions;

use crate::{CliError, Result};

/// Pixels per grid cell.
const CELL: u32 = 6;
const GAP: u32 = 8;
const BAR_HEIGHT: u32 = 12;
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);

/// Colour ramp stops from 0 to 1: white, light blue, blue, purple.
const RAMP: [(f64, [f64; 3]); 4] = [
    (0.0, [255.0, 255.0, 255.0]),
    (0.2, [150.0, 200.0, 240.0]),
    (0.6, [30.0, 80.0, 200.0]),
    (1.0, [120.0, 20.0, 120.0]),
];

pub fn colour(v: f64, vmax: f64) -> Rgb<u8> {
    let t = if vmax > 0.0 { (v / vmax).clamp(0.0, 1.0) } else { 0.0 };
    let k = RAMP.windows(2).position(|w| t <= w[1].0).unwrap_or(RAMP.len() - 2);
    let (a, b) = (RAMP[k], RAMP[k + 1]);
    let f = (t - a.0) / (b.0 - a.0);
    let c = |i: usize| (a.1[i] + f * (b.1[i] - a.1[i])).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

/// Index of the nearest station for every grid cell, ties to the lower index.
pub fn nearest_station_map(stations: &[StationGeometry], h: usize, w: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let d = |s: &StationGeometry| {
                let dr = r as i64 - s.row as i64;
                let dc = c as i64 - s.col as i64;
                dr * dr + dc * dc
            };
            let best = (0..stations.len()).min_by_key(|&i| (d(&stations[i]), i)).unwrap_or(0);
            out.push(best);
        }
    }
    out
}

/// Panels left to right with a colour bar underneath.
pub fn render_panels(panels: &[Vec<f64>], nearest: &[usize], h: usize, w: usize, vmax: f64) -> RgbImage {
    let n = panels.len() as u32;
    let pw = w as u32 * CELL;
    let ph = h as u32 * CELL;
    let width = n * pw + (n + 1) * GAP;
    let height = ph + BAR_HEIGHT + 3 * GAP;
    let mut img = RgbImage::from_pixel(width, height, BACKGROUND);
    for (p, values) in panels.iter().enumerate() {
        let x0 = GAP + p as u32 * (pw + GAP);
        for r in 0..h {
            for c in 0..w {
                let col = colour(values[nearest[r * w + c]], vmax);
                for dy in 0..CELL {
                    for dx in 0..CELL {
                        img.put_pixel(x0 + c as u32 * CELL + dx, GAP + r as u32 * CELL + dy, col);
                    }
                }
            }
        }
    }
    let bar_w = width - 2 * GAP;
    let y0 = ph + 2 * GAP;
    for x in 0..bar_w {
        let col = colour(vmax * x as f64 / (bar_w - 1).max(1) as f64, vmax);
        for y in 0..BAR_HEIGHT {
            img.put_pixel(GAP + x, y0 + y, col);
        }
    }
    img
}

struct Method {
    name: String,
    preds: HashMap<(String, i64), f64>,
}

fn load_method(spec: &str) -> Result<Method> {
    let (name, path) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--pred expects METHOD=FILE, got {spec:?}")))?;
    let path = Path::new(path);
    if !path.exists() {
        return Err(CliError::Missing(format!("predictions {}", path.display())));
    }
    let records: Vec<PredictionRecord> = read_predictions(fs::File::open(path)?)?;
    if records.is_empty() {
        return Err(CliError::Config(format!("{} holds no predictions", path.display())));
    }
    Ok(Method {
        name: name.to_string(),
        preds: records.into_iter().map(|r| ((r.station_id, r.timestamp), r.y_t)).collect(),
    })
}

fn key(ds: &Dataset, i: usize) -> (String, i64) {
    (ds.records[i].station_id.clone(), ds.records[i].timestamp)
}

/// Metrics over the samples of `ds` that `m` predicted; `None` if none.
fn method_row(m: &Method, ds: &Dataset, split: &str) -> Result<Option<ReportRow>> {
    let mut y = Vec::new();
    let mut obs = Vec::new();
    for i in 0..ds.len() {
        if let Some(&v) = m.preds.get(&key(ds, i)) {
            y.push(v);
            obs.push(ds.records[i].rain);
        }
    }
    if y.is_empty() {
        return Ok(None);
    }
    Ok(Some(evaluate(split, &m.name, &y, &obs)?))
}

fn summary(rows: &[ReportRow], figures: &[(i64, String)], drawn: &[&str]) -> String {
    let mut s = String::from("# Precipitation correction summary\n\n");
    s.push_str("| split | method | MAE | MAPE | TS_0.1 | TS_1 | TS_10 |\n");
    s.push_str("|---|---|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} |",
            r.split, r.method, r.mae, r.mape, r.ts[0], r.ts[1], r.ts[2]
        );
    }
    if !figures.is_empty() {
        let mut panels: Vec<&str> = drawn.to_vec();
        panels.push("observed");
        let _ = write!(
            s,
            "\n## Heatmaps\n\nPanels left to right: {}. Colour runs from white (0 mm) to purple (the largest value in the figure); the bar underneath shows the ramp.\n\n",
            panels.join(", ")
        );
        for (ts, file) in figures {
            let _ = writeln!(s, "- timestamp {ts} h: `{file}`");
        }
    }
    s
}

pub fn run(data: &SplitSet, specs: &[String], splits: &[String], frames: usize, out: &Path) -> Result<()> {
    let methods = specs.iter().map(|s| load_method(s)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for split in splits {
        let ds = data.get(split, data.test.meta.seed)?;
        for m in &methods {
            if let Some(r) = method_row(m, &ds, split)? {
                rows.push(r);
            }
        }
    }
    if rows.is_empty() {
        return Err(CliError::Config("no prediction matches a sample of the requested splits".into()));
    }

    // heatmaps on timestamps every drawn method covers, rainiest first
    let drawn = &methods[..methods.len().min(2)];
    let mut by_ts: HashMap<i64, Vec<usize>> = HashMap::new();
    for ds in [&data.train, &data.val, &data.test] {
        for i in 0..ds.len() {
            if drawn.iter().all(|m| m.preds.contains_key(&key(ds, i))) {
                by_ts.entry(ds.records[i].timestamp).or_default().push(i);
            }
        }
    }
    let source = |ts: i64| -> &Dataset {
        [&data.train, &data.val, &data.test]
            .into_iter()
            .find(|d| d.meta.sample_timestamp.contains(&ts))
            .expect("timestamp from a split")
    };
    let stations = &data.test.meta.stations;
    let gen = &data.test.meta.generator;
    let (h, w) = (gen.grid_h, gen.grid_w);
    let nearest = nearest_station_map(stations, h, w);
    let mut ranked: Vec<(i64, f64)> = by_ts
        .iter()
        .filter(|(_, idx)| idx.len() == stations.len())
        .map(|(&ts, idx)| (ts, idx.iter().map(|&i| source(ts).records[i].rain).sum()))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    fs::create_dir_all(out)?;
    let mut figures = Vec::new();
    for &(ts, _) in ranked.iter().take(frames) {
        let ds = source(ts);
        let idx = &by_ts[&ts];
        let mut panels = Vec::new();
        for m in drawn {
            let mut v = vec![0.0; stations.len()];
            for &i in idx {
                v[ds.meta.sample_station[i]] = m.preds[&key(ds, i)];
            }
            panels.push(v);
        }
        let mut observed = vec![0.0; stations.len()];
        for &i in idx {
            observed[ds.meta.sample_station[i]] = ds.records[i].rain;
        }
        panels.push(observed);
        let vmax = panels.iter().flatten().fold(0.0f64, |m, &v| m.max(v));
        let file = format!("heatmap_{ts}.png");
        render_panels(&panels, &nearest, h, w, vmax).save(out.join(&file))?;
        figures.push((ts, file));
    }
    let names: Vec<&str> = drawn.iter().map(|m| m.name.as_str()).collect();
    fs::write(out.join("summary.md"), summary(&rows, &figures, &names))?;
    log::info!("{} summary rows and {} heatmaps written to {}", rows.len(), figures.len(), out.display());
    Ok(())
}
