//! Training conditions as resolved batch streams, the learning-rate schedule,
//! the optimizer and the training loop.

mod optim;
mod train;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use optim::{clip_grad_norm, AdamHyper, AdamW, LinearSchedule};
pub use train::{
    checkpoint_name, latest_checkpoint, run_training, ChannelSink, CheckpointState, EvalFn, EwcContext, JsonlSink,
    MemorySink, MetricRecord, MetricsSink, TrainOutcome, TrainRun,
};

use crate::rng;
use crate::tokenizer::BlockDataset;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Condition {
    Monolingual,
    Interleaved,
    Sequential,
    SequentialInterleaved,
    SequentialEwc,
}

impl Condition {
    pub const ALL: [Condition; 5] = [
        Condition::Monolingual,
        Condition::Interleaved,
        Condition::Sequential,
        Condition::SequentialInterleaved,
        Condition::SequentialEwc,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Condition::Monolingual => "monolingual",
            Condition::Interleaved => "interleaved",
            Condition::Sequential => "sequential",
            Condition::SequentialInterleaved => "sequential-interleaved",
            Condition::SequentialEwc => "sequential-ewc",
        }
    }

    pub fn is_sequential(self) -> bool {
        !matches!(self, Condition::Interleaved)
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Condition::ALL
            .into_iter()
            .find(|c| c.tag() == s)
            .ok_or_else(|| Error::config(format!("unknown condition {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub grad_accum: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    /// Epochs per language.
    pub epochs: usize,
    /// Overrides the model's masking probability when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlm_probability: Option<f64>,
    pub seed: u64,
}

impl TrainConfig {
    fn base(learning_rate: f64, warmup_ratio: f64, grad_accum: usize, batch_size: usize) -> Self {
        TrainConfig {
            learning_rate,
            warmup_ratio,
            grad_accum,
            batch_size,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            max_grad_norm: 1.0,
            epochs: 6,
            mlm_probability: None,
            seed: 0,
        }
    }

    /// `gpt2-c1`..`gpt2-c5`, `roberta-c1`..`roberta-c5`, `desk`, `mini`.
    pub fn preset(name: &str) -> Result<Self> {
        let gpt2 = |lr, w, acc| Self::base(lr, w, acc, 4);
        let roberta = |lr, w, acc, mlm| TrainConfig { mlm_probability: Some(mlm), ..Self::base(lr, w, acc, 8) };
        Ok(match name {
            "gpt2-c1" => gpt2(1e-3, 0.07, 16),
            "gpt2-c2" => gpt2(1e-3, 0.09, 32),
            "gpt2-c3" => gpt2(8e-3, 0.10, 32),
            "gpt2-c4" => gpt2(1e-3, 0.07, 16),
            "gpt2-c5" => gpt2(1e-3, 0.07, 4),
            "roberta-c1" => roberta(4.75e-4, 0.05, 32, 0.3),
            "roberta-c2" => roberta(3.88e-4, 0.10, 32, 0.15),
            "roberta-c3" => roberta(3.90e-4, 0.09, 16, 0.3),
            "roberta-c4" => roberta(3.00e-4, 0.01, 32, 0.3),
            "roberta-c5" => roberta(4.00e-4, 0.01, 1, 0.3),
            "desk" => Self::base(2e-3, 0.05, 1, 16),
            "mini" => Self::base(1e-2, 0.05, 1, 16),
            other => {
                return Err(Error::config(format!(
                    "unknown train preset {other:?}; available: gpt2-c1..gpt2-c5, roberta-c1..roberta-c5, desk, mini"
                )))
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::config(format!("train.{field}: {why}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning-rate", "must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad("warmup-ratio", "must lie in [0, 1)");
        }
        if self.grad_accum == 0 {
            return bad("grad-accum", "must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch-size", "must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1/beta2", "must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) || !(self.max_grad_norm > 0.0) {
            return bad("adam-eps/max-grad-norm", "must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight-decay", "must be non-negative");
        }
        if let Some(p) = self.mlm_probability {
            if !(p > 0.0 && p < 1.0) {
                return bad("mlm-probability", "must lie in (0, 1)");
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper { beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps, weight_decay: self.weight_decay }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerPolicy {
    Fresh,
    Carry,
}

/// One device batch: block indices into one source dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub source: usize,
    pub blocks: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct Phase {
    /// 1-based.
    pub index: usize,
    pub optimizer: OptimizerPolicy,
    pub ewc_active: bool,
    pub epochs: usize,
    /// Sources streamed in this phase; two sources alternate batch by batch,
    /// starting with the first.
    pub sources: Vec<usize>,
    /// Optimizer updates per epoch.
    pub steps_per_epoch: u64,
}

impl Phase {
    pub fn steps(&self) -> u64 {
        self.steps_per_epoch * self.epochs as u64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainPlan {
    pub condition: Condition,
    /// Language of each source dataset.
    pub languages: Vec<String>,
    pub source_blocks: Vec<usize>,
    pub phases: Vec<Phase>,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub seed: u64,
}

impl TrainPlan {
    /// Device batches of one epoch of a phase. Each source is permuted per
    /// epoch with a key that ignores the phase and condition, so every
    /// condition sees the same block order for a given source and epoch.
    pub fn epoch_batches(&self, phase: usize, epoch: usize) -> Vec<Batch> {
        let ph = &self.phases[phase - 1];
        let per_source: Vec<Vec<Batch>> = ph
            .sources
            .iter()
            .map(|&s| {
                let mut order: Vec<usize> = (0..self.source_blocks[s]).collect();
                order.shuffle(&mut rng::stream(self.seed, &["block-order", &s.to_string(), &epoch.to_string()]));
                order.chunks(self.batch_size).map(|c| Batch { source: s, blocks: c.to_vec() }).collect()
            })
            .collect();
        match per_source.as_slice() {
            [one] => one.clone(),
            [a, b] => crate::corpus::interleave(a, b),
            _ => unreachable!("phases stream one or two sources"),
        }
    }

    /// Block visits per language over the whole plan.
    pub fn visits(&self) -> std::collections::BTreeMap<String, usize> {
        let mut out = std::collections::BTreeMap::new();
        for ph in &self.phases {
            for e in 1..=ph.epochs {
                for b in self.epoch_batches(ph.index, e) {
                    *out.entry(self.languages[b.source].clone()).or_insert(0) += b.blocks.len();
                }
            }
        }
        out
    }

    pub fn total_steps(&self) -> u64 {
        self.phases.iter().map(Phase::steps).sum()
    }
}

/// Resolves a condition over two size-aligned datasets. For the monolingual
/// condition both datasets must be in one language; otherwise the first is
/// L1 and the second L2.
pub fn build_plan(condition: Condition, datasets: [&BlockDataset; 2], cfg: &TrainConfig) -> Result<TrainPlan> {
    cfg.validate()?;
    let [a, b] = datasets;
    if a.is_empty() || b.is_empty() {
        return Err(Error::config("training datasets must be non-empty"));
    }
    if a.len() != b.len() {
        return Err(Error::config(format!("datasets are not size-aligned: {} vs {} blocks", a.len(), b.len())));
    }
    if a.fingerprint != b.fingerprint {
        return Err(Error::config("datasets were tokenized with different tokenizers"));
    }
    let lang = |d: &BlockDataset| -> Result<String> {
        let first = d.languages[0].clone();
        if d.languages.iter().any(|l| l != &first) {
            return Err(Error::config("a training dataset mixes languages"));
        }
        Ok(first)
    };
    let (la, lb) = (lang(a)?, lang(b)?);
    match condition {
        Condition::Monolingual if la != lb => {
            return Err(Error::config(format!("monolingual condition given two languages ({la}, {lb})")))
        }
        Condition::Monolingual => {}
        _ if la == lb => return Err(Error::config(format!("{condition} needs two languages, both datasets are {la}"))),
        _ => {}
    }
    let batches = a.len().div_ceil(cfg.batch_size) as u64;
    let acc = cfg.grad_accum as u64;
    let one = batches.div_ceil(acc);
    let two = (2 * batches).div_ceil(acc);
    let phase = |index, sources: Vec<usize>, ewc_active| Phase {
        index,
        optimizer: OptimizerPolicy::Fresh,
        ewc_active,
        epochs: cfg.epochs,
        steps_per_epoch: if sources.len() == 2 { two } else { one },
        sources,
    };
    let phases = match condition {
        Condition::Interleaved => vec![phase(1, vec![0, 1], false)],
        Condition::Monolingual | Condition::Sequential => vec![phase(1, vec![0], false), phase(2, vec![1], false)],
        Condition::SequentialInterleaved => vec![phase(1, vec![0], false), phase(2, vec![0, 1], false)],
        Condition::SequentialEwc => vec![phase(1, vec![0], false), phase(2, vec![1], true)],
    };
    Ok(TrainPlan {
        condition,
        languages: vec![la, lb],
        source_blocks: vec![a.len(), b.len()],
        phases,
        batch_size: cfg.batch_size,
        grad_accum: cfg.grad_accum,
        seed: cfg.seed,
    })
}

#[cfg(test)]
mod tests;
