//! Perplexity per character, zero-shot minimal-pair accuracy and a
//! fine-tuned classifier harness.

mod classifier;
mod metrics;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use classifier::{finetune_classifier, read_labeled, ClassifierHead, ClassifierResult};
pub use metrics::{accuracy, binomial_interval, confusion, f1, mcc, spearman, task_metric, MetricKind, TASK_METRICS};

use crate::corpus::MinimalPair;
use crate::model::{LanguageModel, Objective};
use crate::tensor::Scalar;
use crate::tokenizer::{BlockDataset, Tokenizer};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct EvalResult {
    pub metric: String,
    pub value: f64,
    pub split: String,
    pub language: String,
    pub epoch: usize,
    pub n_items: usize,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct Perplexity {
    pub ppl_per_char: f64,
    /// Mean NLL in nats per scored token.
    pub ce: f64,
    pub nll: f64,
    pub chars: u64,
    pub scored_tokens: usize,
}

/// `exp(nll / chars)`.
pub fn ppl_from_nll(nll: f64, chars: u64) -> Result<f64> {
    if chars == 0 {
        return Err(Error::usage("perplexity per character needs a non-empty character count"));
    }
    Ok((nll / chars as f64).exp())
}

/// Perplexity per character over a block dataset.
///
/// Causal models score every position after the first of each block, and
/// the character count is that of the scored tokens. Masked models score the
/// positions of a mask drawn from `mask_seed` and scale the NLL by the
/// inverse masked fraction before dividing by all block characters.
pub fn ppl_per_char<S: Scalar>(
    m: &LanguageModel<S>,
    data: &BlockDataset,
    mask_seed: u64,
    batch_size: usize,
) -> Result<Perplexity> {
    if data.fingerprint != m.fingerprint {
        return Err(Error::usage("dataset was tokenized with a different tokenizer than the model's"));
    }
    let per_block = m.block_nll(&data.blocks, mask_seed, batch_size)?;
    let nll: f64 = per_block.iter().map(|x| x.0).sum();
    let scored: usize = per_block.iter().map(|x| x.1).sum();
    if scored == 0 {
        return Err(Error::usage("no scored positions"));
    }
    let (total_nll, chars) = match m.config.objective {
        Objective::Causal => {
            let chars: u64 = data.block_chars.iter().zip(&data.lead_chars).map(|(b, l)| b - l).sum();
            (nll, chars)
        }
        Objective::Masked => {
            let positions = data.tokens() as f64;
            (nll * positions / scored as f64, data.block_chars.iter().sum())
        }
    };
    Ok(Perplexity {
        ppl_per_char: ppl_from_nll(total_nll, chars)?,
        ce: nll / scored as f64,
        nll: total_nll,
        chars,
        scored_tokens: scored,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct PairAccuracy {
    pub accuracy: f64,
    pub per_phenomenon: BTreeMap<String, f64>,
    pub scored: usize,
    pub skipped: usize,
    pub ties: usize,
}

/// Accuracy from `(grammatical, ungrammatical)` scores. Ties count wrong.
pub fn accuracy_from_scores(scores: &[(f64, f64)], phenomena: &[&str]) -> Result<PairAccuracy> {
    if scores.is_empty() {
        return Err(Error::usage("no minimal pairs to score"));
    }
    let mut by: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    let mut ties = 0;
    for (&(g, b), ph) in scores.iter().zip(phenomena) {
        let ok = g > b;
        ties += usize::from(g == b);
        correct += usize::from(ok);
        let e = by.entry(ph.to_string()).or_default();
        e.0 += usize::from(ok);
        e.1 += 1;
    }
    Ok(PairAccuracy {
        accuracy: correct as f64 / scores.len() as f64,
        per_phenomenon: by.into_iter().map(|(k, (c, n))| (k, c as f64 / n as f64)).collect(),
        scored: scores.len(),
        skipped: 0,
        ties,
    })
}

/// Compares total log-probabilities of each pair's members. Pairs with a
/// member longer than the context are skipped and tallied.
pub fn minimal_pair_accuracy<S: Scalar>(
    m: &LanguageModel<S>,
    tok: &Tokenizer,
    pairs: &[MinimalPair],
) -> Result<PairAccuracy> {
    if pairs.is_empty() {
        return Err(Error::usage("no minimal pairs to score"));
    }
    let mut seqs = Vec::with_capacity(2 * pairs.len());
    let mut kept = Vec::new();
    let mut skipped = 0;
    for p in pairs {
        let (g, b) = (tok.encode(&p.good), tok.encode(&p.bad));
        if g.len() > m.config.n_positions || b.len() > m.config.n_positions || g.is_empty() || b.is_empty() {
            skipped += 1;
            continue;
        }
        seqs.push(g);
        seqs.push(b);
        kept.push(p.phenomenon.as_str());
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} minimal pairs longer than the context of {}", m.config.n_positions);
    }
    if kept.is_empty() {
        return Err(Error::usage("every minimal pair exceeds the context length"));
    }
    let lp = m.sequence_logprobs(&seqs)?;
    let scores: Vec<(f64, f64)> = lp.chunks(2).map(|c| (c[0], c[1])).collect();
    let mut out = accuracy_from_scores(&scores, &kept)?;
    out.skipped = skipped;
    Ok(out)
}

#[cfg(test)]
mod tests;
