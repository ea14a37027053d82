use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::manifest::RunManifest;
use super::{read_metrics, write_text};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct SummaryRow {
    pub run_id: String,
    pub condition: String,
    pub seed: u64,
    pub phase: usize,
    /// Epochs completed since the start of training, across phases.
    pub epoch: usize,
    pub language: String,
    pub metric: String,
    pub value: f64,
}

pub const SUMMARY_HEADER: &str = "run-id,condition,seed,phase,epoch,language,metric,value";

/// Validation records of every run directory under `runs`, with the
/// language taken from the metric-name prefix.
pub fn collect_summary(runs: &Path) -> Result<Vec<SummaryRow>> {
    let Ok(entries) = std::fs::read_dir(runs) else { return Ok(Vec::new()) };
    let mut dirs: Vec<_> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    dirs.sort();
    let mut rows = Vec::new();
    for dir in dirs {
        let Ok(m) = RunManifest::load(&dir) else { continue };
        for r in read_metrics(&dir.join("metrics.jsonl"))? {
            if r.split != "valid" {
                continue;
            }
            let (language, metric) = r.metric.split_once('.').unwrap_or(("", &r.metric));
            rows.push(SummaryRow {
                run_id: r.run_id.clone(),
                condition: r.condition.clone(),
                seed: m.seed,
                phase: r.phase,
                epoch: (r.phase - 1) * m.epochs_per_phase + r.epoch,
                language: language.to_string(),
                metric: metric.to_string(),
                value: r.value,
            });
        }
    }
    Ok(rows)
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from(SUMMARY_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.run_id, r.condition, r.seed, r.phase, r.epoch, r.language, r.metric, r.value
        );
    }
    s
}

pub fn parse_summary(text: &str) -> Result<Vec<SummaryRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(SUMMARY_HEADER) {
        return Err(Error::usage("summary.csv has an unexpected header"));
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::usage(format!("summary.csv line {}: malformed row", i + 2));
            if f.len() != 8 {
                return Err(bad());
            }
            Ok(SummaryRow {
                run_id: f[0].into(),
                condition: f[1].into(),
                seed: f[2].parse().map_err(|_| bad())?,
                phase: f[3].parse().map_err(|_| bad())?,
                epoch: f[4].parse().map_err(|_| bad())?,
                language: f[5].into(),
                metric: f[6].into(),
                value: f[7].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn write_summary(root: &Path) -> Result<Vec<SummaryRow>> {
    let rows = collect_summary(&root.join("runs"))?;
    write_text(&root.join("summary.csv"), &summary_csv(&rows))?;
    Ok(rows)
}

pub fn read_summary(root: &Path) -> Result<Vec<SummaryRow>> {
    let path = root.join("summary.csv");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    parse_summary(&text)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct Point {
    pub epoch: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct Series {
    pub condition: String,
    pub seeds: Vec<u64>,
    pub points: Vec<Point>,
}

impl Series {
    pub fn last(&self) -> &Point {
        self.points.last().expect("series has points")
    }

    pub fn at(&self, epoch: usize) -> Option<&Point> {
        self.points.iter().find(|p| p.epoch == epoch)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct Delta {
    pub a: String,
    pub b: String,
    /// Final-epoch mean of `a` minus that of `b`.
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct Comparison {
    pub metric: String,
    pub epochs: Option<(usize, usize)>,
    pub series: Vec<Series>,
    pub deltas: Vec<Delta>,
}

/// Mean and min-max range across seeds per condition and epoch, plus
/// pairwise final-epoch deltas. `metric` is `language.name`, e.g. `l1.ce`.
/// `conditions` selects and orders the series; by default every condition
/// present is used.
pub fn compare_conditions(
    rows: &[SummaryRow],
    metric: &str,
    epochs: Option<(usize, usize)>,
    conditions: Option<&[String]>,
) -> Result<Comparison> {
    let (lang, name) = metric
        .split_once('.')
        .ok_or_else(|| Error::usage(format!("metric {metric:?} must be language.name, e.g. l1.ce")))?;
    let mut by: BTreeMap<&str, BTreeMap<usize, BTreeMap<u64, f64>>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.language == lang && r.metric == name) {
        if epochs.is_some_and(|(lo, hi)| r.epoch < lo || r.epoch > hi) {
            continue;
        }
        by.entry(&r.condition).or_default().entry(r.epoch).or_default().insert(r.seed, r.value);
    }
    let chosen: Vec<String> = match conditions {
        Some(c) => c.to_vec(),
        None => by.keys().map(|s| s.to_string()).collect(),
    };
    if chosen.len() < 2 {
        return Err(Error::usage(format!(
            "comparing {metric} needs at least two conditions with results, found {}",
            chosen.len()
        )));
    }
    let mut series = Vec::new();
    for c in &chosen {
        let per_epoch =
            by.get(c.as_str()).ok_or_else(|| Error::usage(format!("no {metric} results for condition {c:?}")))?;
        let seeds: BTreeSet<u64> = per_epoch.values().flat_map(|m| m.keys().copied()).collect();
        let points = per_epoch
            .iter()
            .map(|(&epoch, vals)| {
                let v: Vec<f64> = vals.values().copied().collect();
                Point {
                    epoch,
                    mean: v.iter().sum::<f64>() / v.len() as f64,
                    min: v.iter().copied().fold(f64::INFINITY, f64::min),
                    max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    n: v.len(),
                }
            })
            .collect();
        series.push(Series { condition: c.clone(), seeds: seeds.into_iter().collect(), points });
    }
    let first = &series[0];
    let odd: Vec<String> = series
        .iter()
        .filter(|s| s.seeds != first.seeds)
        .map(|s| format!("{} has seeds {:?}", s.condition, s.seeds))
        .collect();
    if !odd.is_empty() {
        return Err(Error::usage(format!(
            "conditions do not share seeds: {} has seeds {:?}; {}",
            first.condition,
            first.seeds,
            odd.join("; ")
        )));
    }
    let mut deltas = Vec::new();
    for i in 0..series.len() {
        for j in i + 1..series.len() {
            deltas.push(Delta {
                a: series[i].condition.clone(),
                b: series[j].condition.clone(),
                delta: series[i].last().mean - series[j].last().mean,
            });
        }
    }
    Ok(Comparison { metric: metric.to_string(), epochs, series, deltas })
}

/// Aligned text table: one row per epoch, `mean [min, max]` per condition.
pub fn render_comparison(c: &Comparison) -> String {
    let epochs: BTreeSet<usize> = c.series.iter().flat_map(|s| s.points.iter().map(|p| p.epoch)).collect();
    let mut table = vec![std::iter::once("epoch".to_string())
        .chain(c.series.iter().map(|s| s.condition.clone()))
        .collect::<Vec<_>>()];
    for e in epochs {
        let mut row = vec![e.to_string()];
        for s in &c.series {
            row.push(s.at(e).map_or("-".into(), |p| format!("{:.4} [{:.4}, {:.4}]", p.mean, p.min, p.max)));
        }
        table.push(row);
    }
    let widths: Vec<usize> = (0..table[0].len()).map(|k| table.iter().map(|r| r[k].len()).max().unwrap_or(0)).collect();
    let mut out = format!("{} (mean [min, max] over seeds)\n", c.metric);
    for r in &table {
        let cells: Vec<String> = r.iter().zip(&widths).map(|(x, w)| format!("{x:>w$}")).collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out.push_str("\nfinal-epoch deltas\n");
    let w = c.deltas.iter().map(|d| d.a.len() + d.b.len() + 3).max().unwrap_or(0);
    for d in &c.deltas {
        let label = format!("{} - {}", d.a, d.b);
        let _ = writeln!(out, "{label:<w$}  {:+.4}", d.delta);
    }
    out
}
