//! Elastic weight consolidation: diagonal Fisher estimation at the end of
//! first-language training and the quadratic penalty that anchors later
//! training to it.

use std::collections::BTreeMap;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{LanguageModel, Objective};
use crate::rng;
use crate::tensor::{softmax_in_place, Graph, ParameterVector, Scalar, Var};
use crate::tokenizer::BlockDataset;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FisherMode {
    /// `K` samples per position, one squared gradient per sample.
    MonteCarlo,
    /// Exact expectation over the whole vocabulary.
    Exhaustive,
    /// Squared gradient of the batch-mean loss of sampled labels.
    BatchedCompat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Divide the accumulator by `K` only.
    RawSum,
    /// Additionally divide by the number of positions.
    PerToken,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct EwcConfig {
    pub lambda: f64,
    #[serde(default)]
    pub mu: f64,
    pub samples: usize,
    pub mode: FisherMode,
    pub normalization: Normalization,
    /// Blocks drawn from the first-language training set.
    pub subset_blocks: usize,
    /// Blocks per forward pass in batched mode.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for EwcConfig {
    fn default() -> Self {
        EwcConfig {
            lambda: 20.0,
            mu: 0.0,
            samples: 10,
            mode: FisherMode::MonteCarlo,
            normalization: Normalization::RawSum,
            subset_blocks: 256,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl EwcConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let base = EwcConfig::default();
        match name {
            "gpt2" => Ok(EwcConfig { lambda: 20.0, ..base }),
            "roberta" => Ok(EwcConfig { lambda: 150.0, ..base }),
            "desk" => Ok(EwcConfig { lambda: 1.0, subset_blocks: 16, ..base }),
            _ => Err(Error::config(format!("unknown ewc preset {name:?}; available: gpt2, roberta, desk"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::config(format!("ewc lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.mu.is_finite() && self.mu >= 0.0) {
            return Err(Error::config(format!("ewc mu must be finite and >= 0, got {}", self.mu)));
        }
        if self.samples < 1 {
            return Err(Error::config("ewc samples per position must be at least 1"));
        }
        if self.subset_blocks < 1 || self.batch_size < 1 {
            return Err(Error::config("ewc subset and batch sizes must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct FisherProvenance {
    pub dim: usize,
    pub samples: usize,
    pub seed: u64,
    pub positions: u64,
    pub blocks: usize,
    pub dataset_hash: String,
    pub mode: FisherMode,
    pub normalization: Normalization,
}

/// Anchor point and diagonal Fisher, both flattened in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct FisherSnapshot {
    theta_star: Vec<f64>,
    fisher: Vec<f64>,
    pub provenance: FisherProvenance,
}

impl FisherSnapshot {
    pub fn new(theta_star: Vec<f64>, fisher: Vec<f64>, provenance: FisherProvenance) -> Result<Self> {
        if theta_star.len() != fisher.len() || provenance.dim != fisher.len() {
            return Err(Error::usage("theta-star and fisher lengths differ"));
        }
        if let Some(i) = fisher.iter().position(|&f| !(f >= 0.0 && f.is_finite())) {
            return Err(Error::Numeric(format!("fisher entry {i} is {}", fisher[i])));
        }
        Ok(FisherSnapshot { theta_star, fisher, provenance })
    }

    pub fn dim(&self) -> usize {
        self.fisher.len()
    }

    pub fn theta_star(&self) -> &[f64] {
        &self.theta_star
    }

    pub fn fisher(&self) -> &[f64] {
        &self.fisher
    }

    /// Writes `stem.json` (provenance) and `stem.bin` (theta-star then
    /// fisher, little-endian f64).
    pub fn save(&self, stem: &Path) -> Result<()> {
        let bin = stem.with_extension("bin");
        let json = stem.with_extension("json");
        let mut buf = Vec::with_capacity(16 * self.dim());
        for x in self.theta_star.iter().chain(&self.fisher) {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        std::fs::write(&bin, buf).map_err(|e| Error::io(&bin, e))?;
        let text = serde_json::to_string_pretty(&self.provenance).expect("provenance serializes");
        std::fs::write(&json, text).map_err(|e| Error::io(&json, e))
    }

    pub fn load(stem: &Path, expected_dim: usize) -> Result<Self> {
        let bin = stem.with_extension("bin");
        let json = stem.with_extension("json");
        let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let provenance: FisherProvenance =
            serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", json.display())))?;
        if provenance.dim != expected_dim {
            return Err(Error::usage(format!(
                "fisher snapshot has dimension {}, model has {expected_dim}",
                provenance.dim
            )));
        }
        let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        if bytes.len() != 16 * expected_dim {
            return Err(Error::usage(format!("{}: expected {} bytes", bin.display(), 16 * expected_dim)));
        }
        let vals: Vec<f64> =
            bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let (t, f) = vals.split_at(expected_dim);
        Self::new(t.to_vec(), f.to_vec(), provenance)
    }
}

fn check_dim<S: Scalar>(theta: &ParameterVector<S>, snap: &FisherSnapshot) -> Result<()> {
    if theta.total_dim() != snap.dim() {
        return Err(Error::usage(format!(
            "parameter dimension {} does not match fisher snapshot dimension {}",
            theta.total_dim(),
            snap.dim()
        )));
    }
    Ok(())
}

/// `lambda * sum F (theta - theta*)^2 + mu * sum theta^2`.
pub fn penalty<S: Scalar>(theta: &ParameterVector<S>, snap: &FisherSnapshot, lambda: f64, mu: f64) -> Result<f64> {
    check_dim(theta, snap)?;
    let mut quad = 0.0;
    let mut norm = 0.0;
    let mut i = 0;
    for seg in theta.segments() {
        for &x in seg.value.data() {
            let x = x.f64();
            let d = x - snap.theta_star[i];
            quad += snap.fisher[i] * d * d;
            norm += x * x;
            i += 1;
        }
    }
    Ok(lambda * quad + mu * norm)
}

/// Total regularised loss. Reported metrics stay plain cross-entropy.
pub fn ewc_loss<S: Scalar>(ce: f64, theta: &ParameterVector<S>, snap: &FisherSnapshot, cfg: &EwcConfig) -> Result<f64> {
    Ok(ce + penalty(theta, snap, cfg.lambda, cfg.mu)?)
}

/// Adds `weight * (2 lambda F (theta - theta*) + 2 mu theta)` onto the
/// parameter gradients.
pub fn add_penalty_grad<S: Scalar>(
    theta: &mut ParameterVector<S>,
    snap: &FisherSnapshot,
    lambda: f64,
    mu: f64,
    weight: f64,
) -> Result<()> {
    check_dim(theta, snap)?;
    let mut i = 0;
    for seg in theta.segments_mut() {
        for (g, &x) in seg.grad.iter_mut().zip(seg.value.data()) {
            let x = x.f64();
            let d = 2.0 * lambda * snap.fisher[i] * (x - snap.theta_star[i]) + 2.0 * mu * x;
            *g += S::of(weight * d);
            i += 1;
        }
    }
    Ok(())
}

fn add_squared_grads<S: Scalar>(g: &Graph<S>, vars: &[Var], acc: &mut [f64], weight: f64, block: usize) -> Result<()> {
    let mut i = 0;
    for &v in vars {
        let n = g.value(v).numel();
        match g.grad(v) {
            Some(gr) => {
                for (a, &x) in acc[i..i + n].iter_mut().zip(gr) {
                    let x = x.f64();
                    if !x.is_finite() {
                        return Err(Error::Numeric(format!("non-finite fisher gradient in block {block}")));
                    }
                    *a += weight * x * x;
                }
            }
            None => {}
        }
        i += n;
    }
    Ok(())
}

fn subset_indices(n: usize, want: usize, seed: u64) -> Vec<usize> {
    if want >= n {
        return (0..n).collect();
    }
    let mut r = rng::stream(seed, &["fisher-subset"]);
    let mut idx = rand::seq::index::sample(&mut r, n, want).into_vec();
    idx.sort_unstable();
    idx
}

fn hash_blocks(blocks: &[Vec<u32>]) -> String {
    let mut h = Sha256::new();
    for b in blocks {
        for t in b {
            h.update(t.to_le_bytes());
        }
        h.update([0xff; 4]);
    }
    hex::encode(&h.finalize()[..16])
}

/// Per-position inputs and the row whose distribution is sampled.
fn position_inputs<S: Scalar>(m: &LanguageModel<S>, block: &[u32]) -> Vec<(Vec<u32>, usize)> {
    match m.config.objective {
        Objective::Causal => vec![(block.to_vec(), usize::MAX)],
        Objective::Masked => (0..block.len())
            .map(|t| {
                let mut ids = block.to_vec();
                ids[t] = m.mask_id();
                (ids, t)
            })
            .collect(),
    }
}

/// Diagonal Fisher at the model's current parameters over a fixed random
/// subset of `dataset`. Causal models sample every next-token position;
/// masked models sample each position with only that position masked.
pub fn estimate_fisher_diagonal<S: Scalar>(
    m: &LanguageModel<S>,
    dataset: &BlockDataset,
    cfg: &EwcConfig,
) -> Result<FisherSnapshot> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::usage("fisher estimation needs a non-empty dataset"));
    }
    let idx = subset_indices(dataset.len(), cfg.subset_blocks, cfg.seed);
    let blocks: Vec<Vec<u32>> = idx.iter().map(|&i| dataset.blocks[i].clone()).collect();
    let dim = m.params.total_dim();
    let mut acc = vec![0.0f64; dim];
    let vocab = m.config.vocab_size;
    let mut positions = 0u64;

    if cfg.mode == FisherMode::BatchedCompat {
        for (bi, chunk) in blocks.chunks(cfg.batch_size).enumerate() {
            let seq = chunk[0].len();
            let ids = chunk.concat();
            let mut g = Graph::new();
            let vars = m.bind(&mut g);
            let mut r = rng::stream(cfg.seed, &["fisher-batch", &bi.to_string()]);
            let logits = m.logits(&mut g, &vars, &ids, chunk.len(), seq, None)?;
            let rows: Vec<usize> = match m.config.objective {
                Objective::Causal => (0..ids.len()).filter(|i| (i + 1) % seq != 0).collect(),
                Objective::Masked => (0..ids.len()).collect(),
            };
            positions += rows.len() as u64;
            let probs = row_probs(g.value(logits).data(), vocab, &rows);
            let base = g.len();
            for _ in 0..cfg.samples {
                let mut targets = vec![None; ids.len()];
                for (k, &row) in rows.iter().enumerate() {
                    let dist = WeightedIndex::new(&probs[k]).map_err(|e| Error::Numeric(e.to_string()))?;
                    targets[row] = Some(dist.sample(&mut r) as u32);
                }
                let loss = g.cross_entropy(logits, &targets)?;
                g.backward(loss)?;
                add_squared_grads(&g, &vars, &mut acc, 1.0, idx[bi * cfg.batch_size])?;
                g.zero_grads();
                g.truncate(base);
            }
        }
    } else {
        for (bi, block) in blocks.iter().enumerate() {
            let mut r = rng::stream(cfg.seed, &["fisher-block", &idx[bi].to_string()]);
            let seq = block.len();
            for (ids, masked_row) in position_inputs(m, block) {
                let mut g = Graph::new();
                let vars = m.bind(&mut g);
                let logits = m.logits(&mut g, &vars, &ids, 1, seq, None)?;
                let rows: Vec<usize> = if masked_row == usize::MAX { (0..seq - 1).collect() } else { vec![masked_row] };
                let probs = row_probs(g.value(logits).data(), vocab, &rows);
                let base = g.len();
                for (k, &row) in rows.iter().enumerate() {
                    positions += 1;
                    let weights: BTreeMap<u32, f64> = match cfg.mode {
                        FisherMode::Exhaustive => (0..vocab as u32).map(|x| (x, probs[k][x as usize])).collect(),
                        _ => {
                            let dist = WeightedIndex::new(&probs[k]).map_err(|e| Error::Numeric(e.to_string()))?;
                            let mut counts = BTreeMap::new();
                            for _ in 0..cfg.samples {
                                *counts.entry(dist.sample(&mut r) as u32).or_insert(0.0) += 1.0;
                            }
                            counts
                        }
                    };
                    for (x, w) in weights {
                        if w == 0.0 {
                            continue;
                        }
                        let mut targets = vec![None; seq];
                        targets[row] = Some(x);
                        let nll = g.cross_entropy(logits, &targets)?;
                        g.backward(nll)?;
                        add_squared_grads(&g, &vars, &mut acc, w, idx[bi])?;
                        g.zero_grads();
                        g.truncate(base);
                    }
                }
            }
        }
    }

    let mut denom = match cfg.mode {
        FisherMode::Exhaustive => 1.0,
        _ => cfg.samples as f64,
    };
    if cfg.normalization == Normalization::PerToken {
        denom *= positions.max(1) as f64;
    }
    acc.iter_mut().for_each(|a| *a /= denom);
    let theta: Vec<f64> = m.params.flatten().into_iter().map(Scalar::f64).collect();
    FisherSnapshot::new(
        theta,
        acc,
        FisherProvenance {
            dim,
            samples: cfg.samples,
            seed: cfg.seed,
            positions,
            blocks: blocks.len(),
            dataset_hash: hash_blocks(&blocks),
            mode: cfg.mode,
            normalization: cfg.normalization,
        },
    )
}

fn row_probs<S: Scalar>(logits: &[S], vocab: usize, rows: &[usize]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|&r| {
            let mut row: Vec<f64> = logits[r * vocab..(r + 1) * vocab].iter().map(|x| x.f64()).collect();
            softmax_in_place(&mut row);
            row
        })
        .collect()
}

/// One row of a lambda sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct SweepRow {
    pub lambda: f64,
    pub l1_ce: f64,
    pub l2_ce: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Row minimising `|L1 CE - L2 CE|`; the smaller lambda wins ties.
    pub fn crossover(&self) -> SweepRow {
        *self
            .rows
            .iter()
            .min_by(|a, b| {
                (a.l1_ce - a.l2_ce).abs().total_cmp(&(b.l1_ce - b.l2_ce).abs()).then(a.lambda.total_cmp(&b.lambda))
            })
            .expect("sweep table is non-empty")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("lambda,l1_ce,l2_ce\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{}\n", r.lambda, r.l1_ce, r.l2_ce));
        }
        s
    }
}

/// Runs `run(lambda) -> (final L1 CE, final L2 CE)` for every grid value in
/// ascending order.
pub fn sweep_lambda(grid: &[f64], mut run: impl FnMut(f64) -> Result<(f64, f64)>) -> Result<SweepTable> {
    if grid.is_empty() {
        return Err(Error::config("lambda grid is empty"));
    }
    if grid.iter().any(|&l| !(l.is_finite() && l >= 0.0)) {
        return Err(Error::config("lambda grid values must be finite and >= 0"));
    }
    if !grid.contains(&0.0) {
        return Err(Error::config("lambda grid must include 0"));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut rows = Vec::with_capacity(sorted.len());
    for lambda in sorted {
        let (l1_ce, l2_ce) = run(lambda)?;
        rows.push(SweepRow { lambda, l1_ce, l2_ce });
    }
    Ok(SweepTable { rows })
}
