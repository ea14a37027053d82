use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    Accuracy,
    F1,
    Mcc,
}

impl MetricKind {
    pub fn tag(self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::F1 => "f1",
            MetricKind::Mcc => "mcc",
        }
    }
}

/// Reported metric per benchmark task.
pub const TASK_METRICS: &[(&str, MetricKind)] = &[
    ("cola", MetricKind::Mcc),
    ("sst2", MetricKind::Accuracy),
    ("mrpc", MetricKind::F1),
    ("qqp", MetricKind::F1),
    ("mnli", MetricKind::Accuracy),
    ("mnli-mm", MetricKind::Accuracy),
    ("qnli", MetricKind::Accuracy),
    ("rte", MetricKind::Accuracy),
    ("boolq", MetricKind::Accuracy),
    ("multirc", MetricKind::F1),
    ("wsc", MetricKind::Accuracy),
];

pub fn task_metric(task: &str) -> Result<MetricKind> {
    TASK_METRICS.iter().find(|(t, _)| *t == task).map(|(_, m)| *m).ok_or_else(|| {
        let names: Vec<&str> = TASK_METRICS.iter().map(|(t, _)| *t).collect();
        Error::usage(format!("unknown task {task:?}; known: {}", names.join(", ")))
    })
}

/// `confusion[truth][predicted]`.
pub fn confusion(truth: &[usize], pred: &[usize], classes: usize) -> Vec<Vec<u64>> {
    let mut c = vec![vec![0u64; classes]; classes];
    for (&t, &p) in truth.iter().zip(pred) {
        c[t][p] += 1;
    }
    c
}

pub fn accuracy(truth: &[usize], pred: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    truth.iter().zip(pred).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

/// Binary F1 of class 1; macro-averaged over classes when there are more
/// than two.
pub fn f1(truth: &[usize], pred: &[usize], classes: usize) -> f64 {
    let c = confusion(truth, pred, classes);
    let f1_of = |k: usize| {
        let tp = c[k][k] as f64;
        let fp: f64 = (0..classes).filter(|&j| j != k).map(|j| c[j][k] as f64).sum();
        let fn_: f64 = (0..classes).filter(|&j| j != k).map(|j| c[k][j] as f64).sum();
        if tp == 0.0 {
            0.0
        } else {
            2.0 * tp / (2.0 * tp + fp + fn_)
        }
    };
    if classes == 2 {
        f1_of(1)
    } else {
        (0..classes).map(f1_of).sum::<f64>() / classes as f64
    }
}

/// Multiclass Matthews correlation (Gorodkin's R_K); 0 when undefined.
pub fn mcc(truth: &[usize], pred: &[usize], classes: usize) -> f64 {
    let c = confusion(truth, pred, classes);
    let n: f64 = truth.len() as f64;
    let correct: f64 = (0..classes).map(|k| c[k][k] as f64).sum();
    let t: Vec<f64> = (0..classes).map(|k| c[k].iter().sum::<u64>() as f64).collect();
    let p: Vec<f64> = (0..classes).map(|k| (0..classes).map(|j| c[j][k]).sum::<u64>() as f64).collect();
    let tp: f64 = t.iter().zip(&p).map(|(a, b)| a * b).sum();
    let num = correct * n - tp;
    let den = ((n * n - p.iter().map(|x| x * x).sum::<f64>()) * (n * n - t.iter().map(|x| x * x).sum::<f64>())).sqrt();
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman needs paired samples");
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

/// Normal-approximation 95% interval for `n` trials at success rate `p`.
pub fn binomial_interval(p: f64, n: usize) -> (f64, f64) {
    let half = 1.96 * (p * (1.0 - p) / n as f64).sqrt();
    (p - half, p + half)
}
