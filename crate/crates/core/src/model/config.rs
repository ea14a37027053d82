use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    Causal,
    Masked,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ModelConfig {
    pub n_layer: usize,
    pub n_head: usize,
    pub n_embd: usize,
    pub n_positions: usize,
    pub vocab_size: usize,
    pub objective: Objective,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlm_probability: Option<f64>,
    pub dropout: f64,
    pub layer_norm_eps: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Named presets: `paper-causal`, `paper-masked`, `desk-causal`,
    /// `desk-masked`, `mini-causal`, `mini-masked`. The masked probability defaults to 0.3.
    pub fn preset(name: &str) -> Result<Self> {
        let base = |n_layer, n_head, n_embd, n_positions, vocab_size, objective, eps| ModelConfig {
            n_layer,
            n_head,
            n_embd,
            n_positions,
            vocab_size,
            objective,
            mlm_probability: (objective == Objective::Masked).then_some(0.3),
            dropout: 0.1,
            layer_norm_eps: eps,
            seed: 0,
        };
        Ok(match name {
            "paper-causal" => base(12, 12, 768, 1024, 32_002, Objective::Causal, 1e-5),
            "paper-masked" => base(12, 12, 768, 512, 32_002, Objective::Masked, 1e-12),
            "desk-causal" => base(4, 4, 128, 128, 2002, Objective::Causal, 1e-5),
            "desk-masked" => base(4, 4, 128, 128, 2002, Objective::Masked, 1e-5),
            "mini-causal" => base(2, 2, 32, 32, 2002, Objective::Causal, 1e-5),
            "mini-masked" => base(2, 2, 32, 32, 2002, Objective::Masked, 1e-5),
            other => {
                return Err(Error::config(format!(
                    "unknown model preset {other:?}; available: paper-causal, paper-masked, desk-causal, desk-masked, mini-causal, mini-masked"
                )))
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.n_layer == 0 || self.n_head == 0 || self.n_embd == 0 || self.n_positions == 0 {
            return fail("model dimensions must be positive".into());
        }
        if self.n_embd % self.n_head != 0 {
            return fail(format!("n_embd {} not divisible by n_head {}", self.n_embd, self.n_head));
        }
        if self.vocab_size < 2 {
            return fail(format!("vocab size {} too small", self.vocab_size));
        }
        match (self.objective, self.mlm_probability) {
            (Objective::Masked, Some(p)) if p > 0.0 && p <= 1.0 => {}
            (Objective::Masked, p) => {
                return fail(format!("masked objective needs mlm_probability in (0, 1], got {p:?}"))
            }
            (Objective::Causal, Some(_)) => {
                return fail("mlm_probability is only valid for the masked objective".into())
            }
            (Objective::Causal, None) => {}
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.layer_norm_eps > 0.0) {
            return fail("layer_norm_eps must be positive".into());
        }
        Ok(())
    }

    /// Closed-form parameter count with tied input/output embeddings.
    pub fn param_count(&self) -> usize {
        let d = self.n_embd;
        self.vocab_size * d + self.n_positions * d + self.n_layer * (12 * d * d + 13 * d) + 2 * d
    }

    pub fn head_dim(&self) -> usize {
        self.n_embd / self.n_head
    }
}
