//! Tables and SVG charts from an [`AggregateSummary`].
//!
//! Three chart families are produced:
//!
//! - `bars_<metric>_<regime>_k<k>.svg`: final-epoch metric per hidden
//!   width, one bar per layer with a ±2 SD whisker, and the epoch-0
//!   baseline drawn as a red line with a shaded ±2 SD band;
//! - `radius_<regime>_k<k>.svg`: PR ratio against ball radius, one line
//!   per (h, layer) with its band;
//! - `distance_<regime>_h<h>_<layer>_k<k>.svg`: box plots of per-image PR
//!   ratios for each minimum pixel separation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::aggregate::{AggregateSummary, SummaryRow, SUMMARY_CSV, SUMMARY_JSON};
use super::runner::PerInputRecord;
use crate::error::{Error, Result};
use crate::mlp::{Layer, Regime};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Svg,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "svg" => Ok(ReportFormat::Svg),
            other => Err(Error::InvalidArgument(format!("unknown format {other:?}"))),
        }
    }
}

/// Metrics drawn as bar charts, with the metric that serves as their
/// epoch-0 baseline.
const BAR_METRICS: [(&str, &str); 4] = [
    ("pr_ratio", "pr_ratio"),
    ("kl", "kl_floor"),
    ("rr", "rr"),
    ("zero_row_fraction", "zero_row_fraction"),
];

const PALETTE: [&str; 6] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#9467bd", "#8c564b", "#17becf",
];

/// Writes the requested format into `out_dir` and returns the files.
/// `per_input` feeds the distance box plots and may be empty.
pub fn emit_report(
    summary: &AggregateSummary,
    per_input: &[PerInputRecord],
    format: ReportFormat,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if summary.is_empty() {
        return Err(Error::EmptyResults("summary has no rows".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    match format {
        ReportFormat::Csv => {
            let path = out_dir.join(SUMMARY_CSV);
            summary.write_csv(&path)?;
            Ok(vec![path])
        }
        ReportFormat::Json => {
            let path = out_dir.join(SUMMARY_JSON);
            summary.write_json(&path)?;
            Ok(vec![path])
        }
        ReportFormat::Svg => {
            let mut files = Vec::new();
            for (name, svg) in bar_charts(summary)
                .into_iter()
                .chain(radius_charts(summary))
                .chain(distance_charts(per_input))
            {
                let path = out_dir.join(name);
                fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
                files.push(path);
            }
            Ok(files)
        }
    }
}

/// Last epoch present for each (h, regime).
fn final_epochs(summary: &AggregateSummary) -> BTreeMap<(usize, Regime), usize> {
    let mut out = BTreeMap::new();
    for r in &summary.rows {
        let e = out.entry((r.h, r.regime)).or_insert(0);
        *e = (*e).max(r.epoch);
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn find<'a>(
    summary: &'a AggregateSummary,
    h: usize,
    regime: Regime,
    layer: Layer,
    k: usize,
    condition: &str,
    epoch: usize,
    metric: &str,
) -> Option<&'a SummaryRow> {
    summary.rows.iter().find(|r| {
        r.h == h
            && r.regime == regime
            && r.layer == layer
            && r.k == k
            && r.condition == condition
            && r.epoch == epoch
            && r.metric == metric
    })
}

fn bar_charts(summary: &AggregateSummary) -> Vec<(String, String)> {
    let finals = final_epochs(summary);
    let full: Vec<&SummaryRow> = summary
        .rows
        .iter()
        .filter(|r| r.condition == "full")
        .collect();
    let regimes: BTreeSet<Regime> = full.iter().map(|r| r.regime).collect();
    let ks: BTreeSet<usize> = full.iter().map(|r| r.k).collect();
    let hs: BTreeSet<usize> = full.iter().map(|r| r.h).collect();
    let mut out = Vec::new();
    for &regime in &regimes {
        for &k in &ks {
            for (metric, base_metric) in BAR_METRICS {
                let mut groups = Vec::new();
                for &h in &hs {
                    let Some(&epoch) = finals.get(&(h, regime)) else {
                        continue;
                    };
                    let bars: Vec<Bar> = Layer::ALL
                        .iter()
                        .filter_map(|&layer| {
                            let row = find(summary, h, regime, layer, k, "full", epoch, metric)?;
                            let base = find(summary, h, regime, layer, k, "full", 0, base_metric);
                            Some(Bar {
                                label: layer.to_string(),
                                mean: row.mean,
                                lower: row.lower,
                                upper: row.upper,
                                baseline: base.map(|b| (b.mean, b.lower, b.upper)),
                            })
                        })
                        .collect();
                    if !bars.is_empty() {
                        groups.push((format!("h={h}"), bars));
                    }
                }
                if groups.is_empty() {
                    continue;
                }
                let title = format!("{metric} ({regime}, k={k}, final epoch)");
                out.push((
                    format!("bars_{metric}_{regime}_k{k}.svg"),
                    grouped_bar_chart(&title, metric, &groups),
                ));
            }
        }
    }
    out
}

fn radius_of(condition: &str) -> Option<f64> {
    condition.strip_prefix("ball_r")?.parse().ok()
}

fn radius_charts(summary: &AggregateSummary) -> Vec<(String, String)> {
    let finals = final_epochs(summary);
    let balls: Vec<&SummaryRow> = summary
        .rows
        .iter()
        .filter(|r| r.metric == "pr_ratio" && radius_of(&r.condition).is_some())
        .filter(|r| finals.get(&(r.h, r.regime)) == Some(&r.epoch))
        .collect();
    let keys: BTreeSet<(Regime, usize)> = balls.iter().map(|r| (r.regime, r.k)).collect();
    let mut out = Vec::new();
    for (regime, k) in keys {
        let mut series: BTreeMap<(usize, Layer), Vec<BandPoint>> = BTreeMap::new();
        for r in balls.iter().filter(|r| r.regime == regime && r.k == k) {
            let x = radius_of(&r.condition).expect("filtered");
            series
                .entry((r.h, r.layer))
                .or_default()
                .push((x, r.mean, r.lower, r.upper));
        }
        let lines: Vec<Line> = series
            .into_iter()
            .map(|((h, layer), mut pts)| {
                pts.sort_by(|a, b| a.0.total_cmp(&b.0));
                Line {
                    label: format!("h={h} {layer}"),
                    points: pts,
                }
            })
            .collect();
        let title = format!("PR ratio vs ball radius ({regime}, k={k})");
        out.push((
            format!("radius_{regime}_k{k}.svg"),
            line_chart(&title, "radius (pixels)", "pr_ratio", &lines, Some(1.0)),
        ));
    }
    out
}

fn distance_of(condition: &str) -> Option<f64> {
    condition.strip_prefix("sep_d")?.parse().ok()
}

fn distance_charts(per_input: &[PerInputRecord]) -> Vec<(String, String)> {
    let mut finals: BTreeMap<(usize, Regime), usize> = BTreeMap::new();
    for r in per_input {
        let e = finals.entry((r.h, r.regime)).or_insert(0);
        *e = (*e).max(r.epoch);
    }
    type Key = (Regime, usize, Layer, usize);
    let mut groups: BTreeMap<Key, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    for r in per_input {
        let Some(d) = distance_of(&r.condition) else {
            continue;
        };
        if finals.get(&(r.h, r.regime)) != Some(&r.epoch) {
            continue;
        }
        groups
            .entry((r.regime, r.h, r.layer, r.k))
            .or_default()
            .entry(d.to_bits())
            .or_default()
            .push(r.pr_ratio);
    }
    groups
        .into_iter()
        .map(|((regime, h, layer, k), by_d)| {
            let mut boxes: Vec<(f64, BoxStats)> = by_d
                .into_iter()
                .map(|(bits, v)| (f64::from_bits(bits), BoxStats::from_values(v)))
                .collect();
            boxes.sort_by(|a, b| a.0.total_cmp(&b.0));
            let title = format!("PR ratio vs minimum separation ({regime}, h={h}, {layer}, k={k})");
            (
                format!("distance_{regime}_h{h}_{layer}_k{k}.svg"),
                box_chart(&title, &boxes),
            )
        })
        .collect()
}

// ---- SVG primitives -------------------------------------------------------

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

struct Canvas {
    body: String,
    y_min: f64,
    y_max: f64,
}

impl Canvas {
    fn new(title: &str, y_label: &str, y_min: f64, y_max: f64) -> Self {
        let (y_min, y_max) = if y_max > y_min {
            (y_min, y_max)
        } else {
            (y_min - 0.5, y_min + 0.5)
        };
        let mut c = Canvas {
            body: String::new(),
            y_min,
            y_max,
        };
        let _ = write!(
            c.body,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">
<rect width="100%" height="100%" fill="white"/>
<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>
"#,
            WIDTH / 2.0,
            esc(title)
        );
        c.y_axis(y_label);
        c
    }

    fn plot_right(&self) -> f64 {
        WIDTH - RIGHT
    }

    fn y(&self, v: f64) -> f64 {
        let t = (v - self.y_min) / (self.y_max - self.y_min);
        HEIGHT - BOTTOM - t * (HEIGHT - TOP - BOTTOM)
    }

    fn y_axis(&mut self, label: &str) {
        let (x0, x1) = (LEFT, self.plot_right());
        let _ = writeln!(
            self.body,
            r##"<line x1="{x0}" y1="{TOP}" x2="{x0}" y2="{}" stroke="#333"/>"##,
            HEIGHT - BOTTOM
        );
        let _ = writeln!(
            self.body,
            r##"<line x1="{x0}" y1="{y}" x2="{x1}" y2="{y}" stroke="#333"/>"##,
            y = HEIGHT - BOTTOM
        );
        for t in nice_ticks(self.y_min, self.y_max, 6) {
            let y = self.y(t);
            let _ = writeln!(
                self.body,
                r##"<line x1="{}" y1="{y:.2}" x2="{x0}" y2="{y:.2}" stroke="#333"/><line x1="{x0}" y1="{y:.2}" x2="{x1}" y2="{y:.2}" stroke="#eee"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"##,
                x0 - 4.0,
                x0 - 6.0,
                y + 4.0,
                fmt_tick(t)
            );
        }
        let _ = writeln!(
            self.body,
            r#"<text transform="translate(18,{}) rotate(-90)" text-anchor="middle">{}</text>"#,
            (TOP + HEIGHT - BOTTOM) / 2.0,
            esc(label)
        );
    }

    fn x_label(&mut self, x: f64, text: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"#,
            HEIGHT - BOTTOM + 18.0,
            esc(text)
        );
    }

    fn x_title(&mut self, text: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            (LEFT + self.plot_right()) / 2.0,
            HEIGHT - 16.0,
            esc(text)
        );
    }

    fn legend(&mut self, entries: &[(String, &str)]) {
        let x = self.plot_right() + 14.0;
        for (i, (label, color)) in entries.iter().enumerate() {
            let y = TOP + 10.0 + 18.0 * i as f64;
            let _ = writeln!(
                self.body,
                r#"<rect x="{x}" y="{}" width="12" height="12" fill="{color}"/><text x="{}" y="{}">{}</text>"#,
                y - 10.0,
                x + 18.0,
                y,
                esc(label)
            );
        }
    }

    fn finish(mut self) -> String {
        self.body.push_str("</svg>\n");
        self.body
    }
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-3 {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

/// Roughly `n` round-valued ticks spanning `[lo, hi]`.
pub fn nice_ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return vec![lo];
    }
    let raw = (hi - lo) / n.max(1) as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 2.5, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|&s| s >= raw)
        .unwrap_or(10.0 * mag);
    let start = (lo / step).ceil() as i64;
    let end = (hi / step).floor() as i64;
    (start..=end).map(|i| i as f64 * step).collect()
}

fn padded_range(values: impl IntoIterator<Item = f64>, include_zero: bool) -> (f64, f64) {
    let (mut lo, mut hi) = values
        .into_iter()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if include_zero {
        lo = lo.min(0.0);
        hi = hi.max(0.0);
    }
    let pad = 0.05 * (hi - lo).max(1e-12);
    if !include_zero || lo < 0.0 {
        lo -= pad;
    }
    hi += pad;
    (lo, hi)
}

struct Bar {
    label: String,
    mean: f64,
    lower: f64,
    upper: f64,
    baseline: Option<(f64, f64, f64)>,
}

fn grouped_bar_chart(title: &str, y_label: &str, groups: &[(String, Vec<Bar>)]) -> String {
    let values = groups.iter().flat_map(|(_, bars)| {
        bars.iter().flat_map(|b| {
            let base = b.baseline.map_or([f64::NAN; 3], |(m, l, u)| [m, l, u]);
            [b.mean, b.lower, b.upper].into_iter().chain(base)
        })
    });
    let (lo, hi) = padded_range(values, true);
    let mut c = Canvas::new(title, y_label, lo, hi);
    let slot = (c.plot_right() - LEFT) / groups.len() as f64;
    let mut legend: Vec<(String, &str)> = Vec::new();
    for (g, (name, bars)) in groups.iter().enumerate() {
        let x0 = LEFT + slot * g as f64;
        let bar_w = slot * 0.7 / bars.len() as f64;
        for (b, bar) in bars.iter().enumerate() {
            let color = PALETTE[b % PALETTE.len()];
            if !legend.iter().any(|(l, _)| *l == bar.label) {
                legend.push((bar.label.clone(), color));
            }
            let x = x0 + slot * 0.15 + bar_w * b as f64;
            let (y_top, y_zero) = (c.y(bar.mean.max(0.0)), c.y(bar.mean.min(0.0)));
            let cx = x + bar_w / 2.0;
            let _ = writeln!(
                c.body,
                r#"<rect class="bar" x="{x:.2}" y="{y_top:.2}" width="{:.2}" height="{:.2}" fill="{color}"/>"#,
                bar_w * 0.9,
                (y_zero - y_top).max(0.5)
            );
            let _ = writeln!(
                c.body,
                r##"<line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="#000"/>"##,
                c.y(bar.lower),
                c.y(bar.upper)
            );
            if let Some((m, l, u)) = bar.baseline {
                let (bx0, bx1) = (x - bar_w * 0.05, x + bar_w * 0.95);
                let _ = writeln!(
                    c.body,
                    r#"<rect class="baseline-band" x="{bx0:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="red" fill-opacity="0.15"/>"#,
                    c.y(u),
                    bx1 - bx0,
                    (c.y(l) - c.y(u)).max(0.0)
                );
                let _ = writeln!(
                    c.body,
                    r#"<line class="baseline" x1="{bx0:.2}" y1="{y:.2}" x2="{bx1:.2}" y2="{y:.2}" stroke="red" stroke-width="2"/>"#,
                    y = c.y(m)
                );
            }
        }
        c.x_label(x0 + slot / 2.0, name);
    }
    legend.push(("epoch-0 baseline".into(), "red"));
    c.legend(&legend);
    c.finish()
}

/// `(x, mean, lower, upper)`.
type BandPoint = (f64, f64, f64, f64);

struct Line {
    label: String,
    /// Sorted by x.
    points: Vec<BandPoint>,
}

fn line_chart(
    title: &str,
    x_title: &str,
    y_label: &str,
    lines: &[Line],
    reference: Option<f64>,
) -> String {
    let ys = lines
        .iter()
        .flat_map(|l| l.points.iter().flat_map(|p| [p.1, p.2, p.3]))
        .chain(reference);
    let (lo, hi) = padded_range(ys, false);
    let mut c = Canvas::new(title, y_label, lo, hi);
    let xs: Vec<f64> = lines
        .iter()
        .flat_map(|l| l.points.iter().map(|p| p.0))
        .collect();
    let (x_lo, x_hi) = padded_range(xs.iter().copied(), false);
    let x_of = |x: f64| LEFT + (x - x_lo) / (x_hi - x_lo) * (WIDTH - RIGHT - LEFT);
    let mut ticks: Vec<f64> = xs.clone();
    ticks.sort_by(f64::total_cmp);
    ticks.dedup();
    for t in ticks {
        c.x_label(x_of(t), &fmt_tick(t));
    }
    c.x_title(x_title);
    if let Some(r) = reference {
        let _ = writeln!(
            c.body,
            r#"<line class="baseline" x1="{LEFT}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="red" stroke-dasharray="5,3"/>"#,
            c.plot_right(),
            y = c.y(r)
        );
    }
    let mut legend = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        legend.push((line.label.clone(), color));
        let upper: Vec<String> = line
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", x_of(p.0), c.y(p.3)))
            .collect();
        let lower: Vec<String> = line
            .points
            .iter()
            .rev()
            .map(|p| format!("{:.2},{:.2}", x_of(p.0), c.y(p.2)))
            .collect();
        let _ = writeln!(
            c.body,
            r#"<polygon points="{} {}" fill="{color}" fill-opacity="0.15"/>"#,
            upper.join(" "),
            lower.join(" ")
        );
        let mean: Vec<String> = line
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", x_of(p.0), c.y(p.1)))
            .collect();
        let _ = writeln!(
            c.body,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            mean.join(" ")
        );
        for p in &line.points {
            let _ = writeln!(
                c.body,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                x_of(p.0),
                c.y(p.1)
            );
        }
    }
    c.legend(&legend);
    c.finish()
}

/// Five-number summary with linear-interpolated quartiles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub n: usize,
}

impl BoxStats {
    pub fn from_values(mut v: Vec<f64>) -> Self {
        v.sort_by(f64::total_cmp);
        BoxStats {
            min: v[0],
            q1: quantile(&v, 0.25),
            median: quantile(&v, 0.5),
            q3: quantile(&v, 0.75),
            max: v[v.len() - 1],
            n: v.len(),
        }
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos.fract());
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

fn box_chart(title: &str, boxes: &[(f64, BoxStats)]) -> String {
    let ys = boxes.iter().flat_map(|(_, b)| [b.min, b.max]).chain([1.0]);
    let (lo, hi) = padded_range(ys, false);
    let mut c = Canvas::new(title, "per-image pr_ratio", lo, hi);
    let slot = (c.plot_right() - LEFT) / boxes.len() as f64;
    let _ = writeln!(
        c.body,
        r#"<line class="baseline" x1="{LEFT}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="red" stroke-dasharray="5,3"/>"#,
        c.plot_right(),
        y = c.y(1.0)
    );
    for (i, (d, b)) in boxes.iter().enumerate() {
        let cx = LEFT + slot * (i as f64 + 0.5);
        let w = slot * 0.5;
        let _ = writeln!(
            c.body,
            r##"<line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="#333"/>"##,
            c.y(b.min),
            c.y(b.max)
        );
        let _ = writeln!(
            c.body,
            r##"<rect class="box" x="{:.2}" y="{:.2}" width="{w:.2}" height="{:.2}" fill="{}" stroke="#333"/>"##,
            cx - w / 2.0,
            c.y(b.q3),
            (c.y(b.q1) - c.y(b.q3)).max(0.5),
            PALETTE[0]
        );
        let _ = writeln!(
            c.body,
            r##"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#000" stroke-width="2"/>"##,
            cx - w / 2.0,
            cx + w / 2.0,
            y = c.y(b.median)
        );
        c.x_label(cx, &format!("D={}", fmt_tick(*d)));
    }
    c.x_title("minimum pairwise pixel distance");
    c.finish()
}
