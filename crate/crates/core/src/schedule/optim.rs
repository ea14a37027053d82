use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::{ParameterVector, Scalar};
use crate::{Error, Result};

/// Linear warmup from 0 to `base` over `warmup` updates, then linear decay
/// to 0 at `total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearSchedule {
    pub base: f64,
    pub warmup: u64,
    pub total: u64,
}

impl LinearSchedule {
    /// Warmup is `ceil(ratio * total)` updates, computed with a small
    /// tolerance so that e.g. 7% of 1000 is 70.
    pub fn new(base: f64, warmup_ratio: f64, total: u64) -> Self {
        let warmup = ((warmup_ratio * total as f64) - 1e-9).ceil().max(0.0) as u64;
        LinearSchedule { base, warmup, total }
    }

    /// Learning rate for the update that follows `step` completed updates.
    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup {
            return self.base * step as f64 / self.warmup as f64;
        }
        if self.total <= self.warmup {
            return 0.0;
        }
        self.base * ((self.total.saturating_sub(step)) as f64 / (self.total - self.warmup) as f64).max(0.0)
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm` and
/// returns the norm before clipping.
pub fn clip_grad_norm<S: Scalar>(params: &mut ParameterVector<S>, max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for s in params.segments() {
        for &g in &s.grad {
            let g = g.f64();
            sq += g * g;
        }
    }
    let norm = sq.sqrt();
    let coef = max_norm / (norm + 1e-6);
    if coef < 1.0 {
        let c = S::of(coef);
        for s in params.segments_mut() {
            s.grad.iter_mut().for_each(|g| *g *= c);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Adam with decoupled weight decay and bias correction folded into the
/// step size.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub hyper: AdamHyper,
    pub t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct AdamFile {
    hyper: AdamHyper,
    t: u64,
    dim: usize,
}

impl AdamW {
    pub fn new(dim: usize, hyper: AdamHyper) -> Self {
        AdamW { hyper, t: 0, m: vec![0.0; dim], v: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }

    pub fn step<S: Scalar>(&mut self, params: &mut ParameterVector<S>, lr: f64) -> Result<()> {
        if params.total_dim() != self.dim() {
            return Err(Error::usage("optimizer and parameter dimensions differ"));
        }
        self.t += 1;
        let h = &self.hyper;
        let bc1 = 1.0 - h.beta1.powi(self.t as i32);
        let bc2 = 1.0 - h.beta2.powi(self.t as i32);
        let step_size = lr * bc2.sqrt() / bc1;
        let mut i = 0;
        for s in params.segments_mut() {
            let (value, grad) = (s.value.data_mut(), &s.grad);
            for (p, &g) in value.iter_mut().zip(grad) {
                let g = g.f64();
                let m = &mut self.m[i];
                let v = &mut self.v[i];
                *m = h.beta1 * *m + (1.0 - h.beta1) * g;
                *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
                let mut x = p.f64() - step_size * *m / (v.sqrt() + h.eps);
                if h.weight_decay > 0.0 {
                    x -= lr * h.weight_decay * x;
                }
                *p = S::of(x);
                i += 1;
            }
        }
        Ok(())
    }

    /// Writes `stem.json` and `stem.bin` (first then second moments).
    pub fn save(&self, stem: &Path) -> Result<()> {
        let bin = stem.with_extension("bin");
        let json = stem.with_extension("json");
        let mut buf = Vec::with_capacity(16 * self.dim());
        for x in self.m.iter().chain(&self.v) {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        std::fs::write(&bin, buf).map_err(|e| Error::io(&bin, e))?;
        let file = AdamFile { hyper: self.hyper.clone(), t: self.t, dim: self.dim() };
        std::fs::write(&json, serde_json::to_string_pretty(&file).expect("optimizer file serializes"))
            .map_err(|e| Error::io(&json, e))
    }

    pub fn load(stem: &Path, dim: usize) -> Result<Self> {
        let bin = stem.with_extension("bin");
        let json = stem.with_extension("json");
        let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let file: AdamFile =
            serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", json.display())))?;
        let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        if file.dim != dim || bytes.len() != 16 * dim {
            return Err(Error::usage(format!("{}: optimizer state does not match {dim} parameters", bin.display())));
        }
        let vals: Vec<f64> =
            bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let (m, v) = vals.split_at(dim);
        Ok(AdamW { hyper: file.hyper, t: file.t, m: m.to_vec(), v: v.to_vec() })
    }
}
