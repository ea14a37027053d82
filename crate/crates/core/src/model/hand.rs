//! Hand-set weights realising a given bigram table exactly.
//!
//! Token `i` embeds as `e_i`, a signed pair of unit entries in its own two
//! coordinates, so embeddings are orthogonal and each has zero mean. Attention
//! contributes nothing. One MLP unit per token fires only for that token
//! (other tokens give pre-activation exactly 0 and GELU(0) = 0) and writes
//! `sum_j L_ij e_j - e_i` into the residual stream. With zero-mean inputs the
//! final layer norm scales by `1/sqrt(var + eps)`, and `L` is sized so the
//! tied output logits equal the log-probabilities.

use super::{LanguageModel, ModelConfig, Objective};
use crate::{Error, Result};

/// Log-probabilities at or below this floor are treated as impossible.
pub const LOG_FLOOR: f64 = -70.0;

const GAIN: f64 = 1000.0;

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// A one-layer causal model whose next-token distribution after token `i`
/// is `table[i]`. Position embeddings are zero, so the table applies at
/// every position regardless of context.
pub fn bigram_model(table: &[Vec<f64>], n_positions: usize) -> Result<LanguageModel<f64>> {
    let v = table.len();
    if v < 2 || table.iter().any(|r| r.len() != v) {
        return Err(Error::usage("bigram table must be square with at least 2 tokens"));
    }
    for row in table {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-9 || row.iter().any(|&p| p < 0.0) {
            return Err(Error::usage("bigram rows must be probability distributions"));
        }
    }
    let d = 2 * v;
    let cfg = ModelConfig {
        n_layer: 1,
        n_head: 1,
        n_embd: d,
        n_positions,
        vocab_size: v,
        objective: Objective::Causal,
        mlm_probability: None,
        dropout: 0.0,
        layer_norm_eps: 1e-5,
        seed: 0,
    };
    let eps = cfg.layer_norm_eps;
    let mut m = LanguageModel::<f64>::init(cfg, "bigram")?;
    for s in m.params.segments_mut() {
        if !s.name.ends_with(".g") {
            s.value.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }
    let e = |i: usize| {
        let mut x = vec![0.0; d];
        x[2 * i] = 1.0;
        x[2 * i + 1] = -1.0;
        x
    };

    let wte = m.params.get_mut("wte").expect("wte");
    for i in 0..v {
        wte.data_mut()[i * d..(i + 1) * d].copy_from_slice(&e(i));
    }

    // ln_2 maps e_i to e_i / sqrt(var + eps) with var = 2 / d.
    let ln_in = 1.0 / (2.0 / d as f64 + eps).sqrt();
    let pre = 4.0;
    let fired = gelu(pre);
    let fc = m.params.get_mut("h.0.mlp.c_fc.w").expect("c_fc");
    for i in 0..v {
        // Unit i reads coordinates of e_i: dot(e_i * ln_in, col) = pre.
        fc.data_mut()[(2 * i) * 4 * d + i] = pre / (2.0 * ln_in);
        fc.data_mut()[(2 * i + 1) * 4 * d + i] = -pre / (2.0 * ln_in);
    }

    let ln_f = m.params.get_mut("ln_f.g").expect("ln_f");
    ln_f.data_mut().iter_mut().for_each(|x| *x = GAIN);

    let proj = m.params.get_mut("h.0.mlp.c_proj.w").expect("c_proj");
    for (i, row) in table.iter().enumerate() {
        let a: Vec<f64> = row.iter().map(|&p| if p > 0.0 { p.ln().max(LOG_FLOOR) } else { LOG_FLOOR }).collect();
        // Logit_j = GAIN * 2 L_ij / sqrt(sum_j L_ij^2 / v + eps) with L = t * a.
        // Setting logit_j = a_j gives t^2 = eps / (4 GAIN^2 - sum a^2 / v).
        let s: f64 = a.iter().map(|x| x * x).sum::<f64>() / v as f64;
        let t = (eps / (4.0 * GAIN * GAIN - s)).sqrt();
        let mut target = vec![0.0; d];
        for (j, &aj) in a.iter().enumerate() {
            let ej = e(j);
            for k in 0..d {
                target[k] += t * aj * ej[k];
            }
        }
        let ei = e(i);
        for k in 0..d {
            proj.data_mut()[i * d + k] = (target[k] - ei[k]) / fired;
        }
    }
    Ok(m)
}

/// Entropy rate in nats of a stationary bigram chain with the given
/// stationary distribution.
pub fn bigram_entropy(table: &[Vec<f64>], stationary: &[f64]) -> f64 {
    table
        .iter()
        .zip(stationary)
        .map(|(row, &pi)| -pi * row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>())
        .sum()
}
