//! Static line charts. Each PNG carries its legend and the plotted series
//! as `tEXt` chunks (`legend`, `series`) so results can be checked without
//! reading pixels.

use std::path::{Path, PathBuf};

use fret_core::engine::AdaptationRecord;
use fret_core::raster::{self, Canvas, BLACK, GREY, PALETTE, WHITE};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub label: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

const WIDTH: i64 = 720;
const HEIGHT: i64 = 440;
const LEFT: i64 = 78;
const RIGHT: i64 = 24;
const TOP: i64 = 40;
const BOTTOM: i64 = 56;

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if (1e-3..1e4).contains(&a) {
        let s = format!("{v:.4}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        s.chars().take(7).collect()
    } else {
        format!("{v:.2e}")
    }
}

fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.05 };
        return (lo - pad, hi + pad);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

/// Renders `chart` to `path`.
pub fn draw_chart(chart: &Chart, path: &Path) -> Result<()> {
    if chart.series.iter().all(|s| s.x.is_empty()) {
        return Err(HarnessError::EmptyRecords);
    }
    let mut c = Canvas::new(WIDTH as u32, HEIGHT as u32, WHITE);
    let (x0, x1) = padded_range(chart.series.iter().flat_map(|s| s.x.iter().copied()));
    let (y0, y1) = padded_range(chart.series.iter().flat_map(|s| s.y.iter().copied()));
    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let px = |x: f64| LEFT + ((x - x0) / (x1 - x0) * pw as f64).round() as i64;
    let py = |y: f64| TOP + ph - ((y - y0) / (y1 - y0) * ph as f64).round() as i64;

    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let (gx, gy) = (px(fx), py(fy));
        c.line(gx, TOP, gx, TOP + ph, GREY, 1);
        c.line(LEFT, gy, LEFT + pw, gy, GREY, 1);
        let lx = tick_label(fx);
        c.text(gx - Canvas::text_width(&lx, 1) / 2, TOP + ph + 6, &lx, BLACK, 1);
        let ly = tick_label(fy);
        c.text(LEFT - 6 - Canvas::text_width(&ly, 1), gy - 3, &ly, BLACK, 1);
    }
    c.line(LEFT, TOP, LEFT, TOP + ph, BLACK, 1);
    c.line(LEFT, TOP + ph, LEFT + pw, TOP + ph, BLACK, 1);
    c.text(LEFT, 12, &chart.title, BLACK, 2);
    let xl_w = Canvas::text_width(&chart.x_label, 1);
    c.text(LEFT + pw / 2 - xl_w / 2, HEIGHT - 20, &chart.x_label, BLACK, 1);
    c.text(6, TOP - 14, &chart.y_label, BLACK, 1);

    for (k, s) in chart.series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<(i64, i64)> = s
            .x
            .iter()
            .zip(&s.y)
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(&x, &y)| (px(x), py(y)))
            .collect();
        for w in pts.windows(2) {
            c.line(w[0].0, w[0].1, w[1].0, w[1].1, color, 2);
        }
        if pts.len() <= 20 {
            for &(x, y) in &pts {
                c.fill_rect(x - 2, y - 2, 5, 5, color);
            }
        }
    }

    let legend_w = chart
        .series
        .iter()
        .map(|s| Canvas::text_width(&s.label, 1))
        .max()
        .unwrap_or(0)
        + 30;
    let lx = LEFT + pw - legend_w - 6;
    let mut ly = TOP + 6;
    c.fill_rect(lx - 4, ly - 4, legend_w + 8, chart.series.len() as i64 * 12 + 6, WHITE);
    for (k, s) in chart.series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        c.fill_rect(lx, ly + 1, 16, 5, color);
        c.text(lx + 22, ly, &s.label, BLACK, 1);
        ly += 12;
    }

    let legend: Vec<&str> = chart.series.iter().map(|s| s.label.as_str()).collect();
    let series = serde_json::to_string(&chart.series).expect("series serialize");
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    c.save_png(
        path,
        &[
            ("title", &chart.title),
            ("legend", &legend.join(",")),
            ("series", &series),
        ],
    )?;
    Ok(())
}

/// Reads back the legend and series stored in a chart PNG.
pub fn read_chart(path: &Path) -> Result<(Vec<String>, Vec<Series>)> {
    let (_, _, meta) = raster::read_png_text(path)?;
    let get = |k: &str| {
        meta.iter()
            .find(|(key, _)| key == k)
            .map(|(_, v)| v.clone())
            .ok_or_else(|| HarnessError::Log {
                path: path.to_path_buf(),
                message: format!("no `{k}` chunk"),
            })
    };
    let legend = get("legend")?.split(',').map(str::to_string).collect();
    let series = serde_json::from_str(&get("series")?).map_err(|e| HarnessError::Log {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok((legend, series))
}

/// Draws NRS, loss and cumulative-accuracy traces versus step, one series
/// per labelled run. Returns the written paths.
pub fn plot_traces(runs: &[(String, Vec<AdaptationRecord>)], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if runs.iter().all(|(_, r)| r.is_empty()) {
        return Err(HarnessError::EmptyRecords);
    }
    type Pick = fn(&AdaptationRecord) -> Option<f64>;
    let panels: [(&str, &str, Pick); 3] = [
        ("nrs", "normalized redundancy", |r| Some(r.nrs)),
        ("loss", "loss", |r| r.loss.map(|l| l.total())),
        ("accuracy", "cumulative accuracy", |r| r.cumulative_accuracy),
    ];
    let mut written = Vec::new();
    for (name, y_label, pick) in panels {
        let series: Vec<Series> = runs
            .iter()
            .map(|(label, recs)| {
                let (x, y) = recs
                    .iter()
                    .filter_map(|r| pick(r).map(|v| (r.step as f64, v)))
                    .unzip();
                Series {
                    label: label.clone(),
                    x,
                    y,
                }
            })
            .collect();
        if series.iter().all(|s| s.x.is_empty()) {
            continue;
        }
        let path = out_dir.join(format!("{name}.png"));
        draw_chart(
            &Chart {
                title: name.to_uppercase(),
                x_label: "step".into(),
                y_label: y_label.into(),
                series,
            },
            &path,
        )?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_round_trips_series() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        let chart = Chart {
            title: "t".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            series: vec![
                Series {
                    label: "a".into(),
                    x: vec![0.0],
                    y: vec![1.0],
                },
                Series {
                    label: "b".into(),
                    x: vec![0.0, 1.0, 2.0],
                    y: vec![0.5, 0.25, 0.125],
                },
            ],
        };
        draw_chart(&chart, &p).unwrap();
        let (legend, series) = read_chart(&p).unwrap();
        assert_eq!(legend, vec!["a", "b"]);
        assert_eq!(series, chart.series);
    }

    #[test]
    fn empty_input_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            plot_traces(&[("x".into(), vec![])], dir.path()),
            Err(HarnessError::EmptyRecords)
        ));
    }
}
