use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::report::{compare_conditions, read_summary, Comparison};
use super::write_text;
use crate::ewc::{SweepRow, SweepTable};
use crate::{Error, Result};

pub const FIGURES: [&str; 2] = ["learning-curves", "lambda-tradeoff"];

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 32.0;
const BOTTOM: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// One named line of `(x, y)` points in data coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Line {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub lines: Vec<Line>,
    /// Vertical markers at data x with a caption.
    pub markers: Vec<(f64, String)>,
    /// Tick labels to show in place of numeric x values.
    pub x_ticks: Vec<(f64, String)>,
}

fn bounds(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl Chart {
    pub fn to_svg(&self) -> String {
        let xs = self.lines.iter().flat_map(|l| l.points.iter().map(|p| p.0)).chain(self.markers.iter().map(|m| m.0));
        let (x0, x1) = bounds(xs);
        let (y0, y1) = bounds(self.lines.iter().flat_map(|l| l.points.iter().map(|p| p.1)));
        let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
        let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
        let py = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#,
            LEFT + pw / 2.0,
            esc(&self.title)
        );
        let _ = writeln!(s, r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
        for k in 0..=4 {
            let y = y0 + (y1 - y0) * k as f64 / 4.0;
            let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{:.3}</text>"#, LEFT - 4.0, py(y) + 4.0, y);
        }
        let ticks: Vec<(f64, String)> = if self.x_ticks.is_empty() {
            (0..=4).map(|k| x0 + (x1 - x0) * k as f64 / 4.0).map(|x| (x, format!("{x:.1}"))).collect()
        } else {
            self.x_ticks.clone()
        };
        for (x, label) in &ticks {
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
                px(*x),
                TOP + ph + 16.0,
                esc(label)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            H - 10.0,
            esc(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
            TOP + ph / 2.0,
            TOP + ph / 2.0,
            esc(&self.y_label)
        );
        for (x, caption) in &self.markers {
            let _ = writeln!(
                s,
                r#"<line class="marker" x1="{0:.2}" y1="{TOP}" x2="{0:.2}" y2="{1}" stroke="gray" stroke-dasharray="4 3"/>"#,
                px(*x),
                TOP + ph
            );
            let _ =
                writeln!(s, r#"<text x="{:.2}" y="{}" fill="gray">{}</text>"#, px(*x) + 3.0, TOP + 12.0, esc(caption));
        }
        for (i, l) in self.lines.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let pts: Vec<String> = l.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
            let _ = writeln!(
                s,
                r#"<polyline data-label="{}" points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                esc(&l.label),
                pts.join(" ")
            );
            let ly = TOP + 14.0 + 16.0 * i as f64;
            let _ = writeln!(
                s,
                r#"<line x1="{0}" y1="{ly}" x2="{1}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
                W - RIGHT + 10.0,
                W - RIGHT + 28.0
            );
            let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, W - RIGHT + 32.0, ly + 4.0, esc(&l.label));
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Learning-curve chart of one comparison: one line per condition through
/// the mean over seeds, with the phase boundary marked.
pub fn learning_curve_chart(c: &Comparison, epochs_per_phase: usize) -> Chart {
    let lines = c
        .series
        .iter()
        .map(|s| Line {
            label: s.condition.clone(),
            points: s.points.iter().map(|p| (p.epoch as f64, p.mean)).collect(),
        })
        .collect();
    Chart {
        title: format!("{} per epoch", c.metric),
        x_label: "epoch".into(),
        y_label: c.metric.clone(),
        lines,
        markers: vec![(epochs_per_phase as f64, "phase 2".into())],
        x_ticks: Vec::new(),
    }
}

pub fn learning_curve_csv(c: &Comparison) -> String {
    let mut s = String::from("condition,epoch,mean,min,max,n\n");
    for series in &c.series {
        for p in &series.points {
            let _ = writeln!(s, "{},{},{},{},{},{}", series.condition, p.epoch, p.mean, p.min, p.max, p.n);
        }
    }
    s
}

/// Position of a λ on the logarithmic axis; zero sits one decade below the
/// smallest positive value.
pub fn lambda_axis(lambda: f64, smallest_positive: f64) -> f64 {
    if lambda > 0.0 {
        lambda.log10()
    } else {
        smallest_positive.log10() - 1.0
    }
}

pub fn tradeoff_chart(t: &SweepTable) -> Chart {
    let smallest = t.rows.iter().map(|r| r.lambda).filter(|&l| l > 0.0).fold(f64::INFINITY, f64::min);
    let smallest = if smallest.is_finite() { smallest } else { 1.0 };
    let x = |l: f64| lambda_axis(l, smallest);
    let line = |label: &str, f: fn(&SweepRow) -> f64| Line {
        label: label.into(),
        points: t.rows.iter().map(|r| (x(r.lambda), f(r))).collect(),
    };
    let markers = if t.rows.is_empty() {
        Vec::new()
    } else {
        let c = t.crossover();
        vec![(x(c.lambda), format!("crossover λ={}", c.lambda))]
    };
    Chart {
        title: "L1 and L2 cross-entropy against EWC strength".into(),
        x_label: "λ (log scale)".into(),
        y_label: "final validation CE (nats)".into(),
        lines: vec![line("l1.ce", |r| r.l1_ce), line("l2.ce", |r| r.l2_ce)],
        markers,
        x_ticks: t.rows.iter().map(|r| (x(r.lambda), format!("{}", r.lambda))).collect(),
    }
}

pub fn parse_sweep_csv(text: &str) -> Result<SweepTable> {
    let mut lines = text.lines();
    if lines.next() != Some("lambda,l1_ce,l2_ce") {
        return Err(Error::usage("sweep.csv has an unexpected header"));
    }
    let rows = lines
        .map(|l| {
            let f: Vec<f64> = l
                .split(',')
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::usage(format!("bad sweep row {l:?}")))?;
            match f.as_slice() {
                [lambda, l1_ce, l2_ce] => Ok(SweepRow { lambda: *lambda, l1_ce: *l1_ce, l2_ce: *l2_ce }),
                _ => Err(Error::usage(format!("bad sweep row {l:?}"))),
            }
        })
        .collect::<Result<_>>()?;
    Ok(SweepTable { rows })
}

/// Writes the requested figure as SVG plus the CSV of its plotted points
/// under `root/plots`, returning the written paths.
pub fn emit_plots(root: &Path, figure: &str, metrics: &[String], epochs_per_phase: usize) -> Result<Vec<PathBuf>> {
    let dir = root.join("plots");
    let mut out = Vec::new();
    match figure {
        "learning-curves" => {
            let rows = read_summary(root)?;
            if metrics.is_empty() {
                return Err(Error::usage("learning-curves needs at least one metric"));
            }
            for m in metrics {
                let c = compare_conditions(&rows, m, None, None)?;
                let svg = dir.join(format!("learning-curves.{m}.svg"));
                let csv = dir.join(format!("learning-curves.{m}.csv"));
                write_text(&svg, &learning_curve_chart(&c, epochs_per_phase).to_svg())?;
                write_text(&csv, &learning_curve_csv(&c))?;
                out.extend([svg, csv]);
            }
        }
        "lambda-tradeoff" => {
            let path = root.join("sweep").join("sweep.csv");
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let t = parse_sweep_csv(&text)?;
            let svg = dir.join("lambda-tradeoff.svg");
            let csv = dir.join("lambda-tradeoff.csv");
            write_text(&svg, &tradeoff_chart(&t).to_svg())?;
            write_text(&csv, &t.to_csv())?;
            out.extend([svg, csv]);
        }
        other => {
            return Err(Error::usage(format!("unknown figure {other:?}; available: {}", FIGURES.join(", "))));
        }
    }
    Ok(out)
}
