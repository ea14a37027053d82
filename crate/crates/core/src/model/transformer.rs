use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ModelConfig, Objective};
use crate::rng::{self, Rng};
use crate::tensor::{
    load_parameters, log_sum_exp, save_parameters, AttentionMask, Graph, ParameterVector, Scalar, Tensor, Var,
};
use crate::{Error, Result};

/// Segment indices of one transformer layer inside the parameter vector.
#[derive(Clone, Copy, Debug)]
struct LayerSlots {
    ln_1: (usize, usize),
    c_attn: (usize, usize),
    attn_proj: (usize, usize),
    ln_2: (usize, usize),
    c_fc: (usize, usize),
    mlp_proj: (usize, usize),
}

const WTE: usize = 0;
const WPE: usize = 1;

fn layer_slots(i: usize) -> LayerSlots {
    let o = 2 + 12 * i;
    LayerSlots {
        ln_1: (o, o + 1),
        c_attn: (o + 2, o + 3),
        attn_proj: (o + 4, o + 5),
        ln_2: (o + 6, o + 7),
        c_fc: (o + 8, o + 9),
        mlp_proj: (o + 10, o + 11),
    }
}

/// Masked-objective inputs for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedBatch {
    pub inputs: Vec<u32>,
    pub targets: Vec<Option<u32>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ModelFile {
    config: ModelConfig,
    step: u64,
    fingerprint: String,
}

/// GPT-2-style transformer with learned absolute positions, pre-norm blocks
/// and an output projection tied to the token embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageModel<S> {
    pub config: ModelConfig,
    pub params: ParameterVector<S>,
    pub step: u64,
    pub fingerprint: String,
}

impl<S: Scalar> LanguageModel<S> {
    /// Normal(0, 0.02) weights, zero biases, unit gains; both residual
    /// projections per layer use std 0.02 / sqrt(2 * n_layer).
    pub fn init(config: ModelConfig, fingerprint: impl Into<String>) -> Result<Self> {
        config.validate()?;
        let d = config.n_embd;
        let mut rng = rng::stream(config.seed, &["model-init"]);
        let std = 0.02;
        let resid = std / (2.0 * config.n_layer as f64).sqrt();
        let mut normal = |shape: &[usize], s: f64| -> Tensor<S> {
            let dist = Normal::new(0.0, s).expect("positive std");
            let n = shape.iter().product();
            Tensor::from_parts(shape.to_vec(), (0..n).map(|_| S::of(dist.sample(&mut rng))).collect())
        };
        let zeros = |n: usize| Tensor::<S>::zeros(&[n]);
        let ones = |n: usize| Tensor::from_parts(vec![n], vec![S::one(); n]);
        let mut p = ParameterVector::new();
        p.push("wte", normal(&[config.vocab_size, d], std))?;
        p.push("wpe", normal(&[config.n_positions, d], std))?;
        for i in 0..config.n_layer {
            let h = format!("h.{i}");
            p.push(format!("{h}.ln_1.g"), ones(d))?;
            p.push(format!("{h}.ln_1.b"), zeros(d))?;
            p.push(format!("{h}.attn.c_attn.w"), normal(&[d, 3 * d], std))?;
            p.push(format!("{h}.attn.c_attn.b"), zeros(3 * d))?;
            p.push(format!("{h}.attn.c_proj.w"), normal(&[d, d], resid))?;
            p.push(format!("{h}.attn.c_proj.b"), zeros(d))?;
            p.push(format!("{h}.ln_2.g"), ones(d))?;
            p.push(format!("{h}.ln_2.b"), zeros(d))?;
            p.push(format!("{h}.mlp.c_fc.w"), normal(&[d, 4 * d], std))?;
            p.push(format!("{h}.mlp.c_fc.b"), zeros(4 * d))?;
            p.push(format!("{h}.mlp.c_proj.w"), normal(&[4 * d, d], resid))?;
            p.push(format!("{h}.mlp.c_proj.b"), zeros(d))?;
        }
        p.push("ln_f.g", ones(d))?;
        p.push("ln_f.b", zeros(d))?;
        debug_assert_eq!(p.total_dim(), config.param_count());
        Ok(LanguageModel { config, params: p, step: 0, fingerprint: fingerprint.into() })
    }

    pub fn attention_mask(&self) -> AttentionMask {
        match self.config.objective {
            Objective::Causal => AttentionMask::Causal,
            Objective::Masked => AttentionMask::Bidirectional,
        }
    }

    pub fn mask_id(&self) -> u32 {
        (self.config.vocab_size - 1) as u32
    }

    /// Binds parameters as gradient-tracking leaves.
    pub fn bind(&self, g: &mut Graph<S>) -> Vec<Var> {
        self.params.bind(g)
    }

    /// Binds parameters as constants for scoring.
    pub fn bind_frozen(&self, g: &mut Graph<S>) -> Vec<Var> {
        self.params.segments().iter().map(|s| g.constant(s.value.clone())).collect()
    }

    fn check_ids(&self, ids: &[u32], batch: usize, seq: usize) -> Result<()> {
        if batch == 0 || seq == 0 || ids.len() != batch * seq {
            return Err(Error::usage(format!("{} ids do not form a {batch}x{seq} batch", ids.len())));
        }
        if seq > self.config.n_positions {
            return Err(Error::usage(format!(
                "sequence length {seq} exceeds context length {}",
                self.config.n_positions
            )));
        }
        Ok(())
    }

    /// Final layer-normalised hidden states, `[batch*seq, n_embd]`. Dropout
    /// applies only when `dropout_rng` is given.
    pub fn hidden(
        &self,
        g: &mut Graph<S>,
        vars: &[Var],
        ids: &[u32],
        batch: usize,
        seq: usize,
        mut dropout_rng: Option<&mut Rng>,
    ) -> Result<Var> {
        self.check_ids(ids, batch, seq)?;
        let cfg = &self.config;
        let eps = cfg.layer_norm_eps;
        let p = cfg.dropout;
        let mut drop = |g: &mut Graph<S>, x: Var| -> Result<Var> {
            Ok(match dropout_rng.as_deref_mut() {
                Some(r) if p > 0.0 => g.dropout(x, p, r)?,
                _ => x,
            })
        };
        let positions: Vec<u32> = (0..batch).flat_map(|_| 0..seq as u32).collect();
        let tok = g.embedding(vars[WTE], ids)?;
        let pos = g.embedding(vars[WPE], &positions)?;
        let mut x = g.add(tok, pos)?;
        x = drop(g, x)?;
        for i in 0..cfg.n_layer {
            let s = layer_slots(i);
            let h = g.layer_norm(x, vars[s.ln_1.0], vars[s.ln_1.1], eps)?;
            let qkv = g.linear(h, vars[s.c_attn.0], Some(vars[s.c_attn.1]))?;
            let a = g.attention(qkv, batch, seq, cfg.n_head, self.attention_mask())?;
            let a = g.linear(a, vars[s.attn_proj.0], Some(vars[s.attn_proj.1]))?;
            let a = drop(g, a)?;
            x = g.add(x, a)?;
            let h = g.layer_norm(x, vars[s.ln_2.0], vars[s.ln_2.1], eps)?;
            let f = g.linear(h, vars[s.c_fc.0], Some(vars[s.c_fc.1]))?;
            let f = g.gelu(f)?;
            let f = g.linear(f, vars[s.mlp_proj.0], Some(vars[s.mlp_proj.1]))?;
            let f = drop(g, f)?;
            x = g.add(x, f)?;
        }
        let lnf = 2 + 12 * cfg.n_layer;
        Ok(g.layer_norm(x, vars[lnf], vars[lnf + 1], eps)?)
    }

    /// Output logits `[batch*seq, vocab]` through the tied embedding.
    pub fn logits(
        &self,
        g: &mut Graph<S>,
        vars: &[Var],
        ids: &[u32],
        batch: usize,
        seq: usize,
        dropout_rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let h = self.hidden(g, vars, ids, batch, seq, dropout_rng)?;
        Ok(g.matmul_nt(h, vars[WTE])?)
    }

    fn flatten_batch(&self, batch: &[Vec<u32>]) -> Result<(Vec<u32>, usize)> {
        let Some(first) = batch.first() else {
            return Err(Error::usage("empty batch"));
        };
        let seq = first.len();
        if batch.iter().any(|b| b.len() != seq) {
            return Err(Error::usage("blocks in a batch must share one length"));
        }
        Ok((batch.concat(), seq))
    }

    /// Selects positions i.i.d. with the masking probability and corrupts them:
    /// 80% become the mask token, 10% a random non-special token, 10% stay.
    pub fn mask_batch(&self, ids: &[u32], rng: &mut Rng) -> Result<MaskedBatch> {
        let p = self.config.mlm_probability.ok_or_else(|| Error::usage("masking requires the masked objective"))?;
        let ordinary = (self.config.vocab_size.saturating_sub(2)).max(1) as u32;
        for attempt in 0..2 {
            let mut inputs = ids.to_vec();
            let mut targets = vec![None; ids.len()];
            for (i, &id) in ids.iter().enumerate() {
                if rng.random::<f64>() < p {
                    targets[i] = Some(id);
                    let r = rng.random::<f64>();
                    if r < 0.8 {
                        inputs[i] = self.mask_id();
                    } else if r < 0.9 {
                        inputs[i] = rng.random_range(0..ordinary);
                    }
                }
            }
            if targets.iter().any(Option::is_some) {
                return Ok(MaskedBatch { inputs, targets });
            }
            if attempt == 0 {
                log::debug!("no position selected for masking; resampling once");
            }
        }
        Err(Error::Numeric("no position selected for masking after one resample".into()))
    }

    /// Inputs and targets for the model's objective.
    pub fn objective_targets(&self, ids: &[u32], seq: usize, rng: &mut Rng) -> Result<MaskedBatch> {
        match self.config.objective {
            Objective::Causal => {
                let targets = ids
                    .iter()
                    .enumerate()
                    .map(|(i, _)| if (i + 1) % seq == 0 { None } else { Some(ids[i + 1]) })
                    .collect();
                Ok(MaskedBatch { inputs: ids.to_vec(), targets })
            }
            Objective::Masked => self.mask_batch(ids, rng),
        }
    }

    fn build_loss(
        &self,
        g: &mut Graph<S>,
        vars: &[Var],
        batch: &[Vec<u32>],
        rng: &mut Rng,
        train: bool,
    ) -> Result<Var> {
        let (ids, seq) = self.flatten_batch(batch)?;
        if self.config.objective == Objective::Causal && seq < 2 {
            return Err(Error::usage("causal loss needs blocks of at least 2 tokens"));
        }
        let mb = self.objective_targets(&ids, seq, rng)?;
        let logits = self.logits(g, vars, &mb.inputs, batch.len(), seq, train.then_some(rng))?;
        Ok(g.cross_entropy(logits, &mb.targets)?)
    }

    /// Mean cross-entropy in nats per predicted token, without gradients.
    pub fn loss(&self, batch: &[Vec<u32>], rng: &mut Rng, train: bool) -> Result<f64> {
        let mut g = Graph::new();
        let vars = self.bind_frozen(&mut g);
        let root = self.build_loss(&mut g, &vars, batch, rng, train)?;
        Ok(g.forward(root)[0].f64())
    }

    /// Mean cross-entropy, adding `weight` times its gradient onto the
    /// parameter gradient buffers.
    pub fn loss_grad(&mut self, batch: &[Vec<u32>], rng: &mut Rng, train: bool, weight: f64) -> Result<f64> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let loss = self.build_loss(&mut g, &vars, batch, rng, train)?;
        let root = g.scale(loss, S::of(weight))?;
        g.backward(root)?;
        self.params.accumulate_grads(&g, &vars);
        Ok(g.forward(loss)[0].f64())
    }

    /// Per-row log-probabilities of `targets` under the given logits.
    pub(crate) fn target_logprobs(logits: &[S], vocab: usize, targets: &[Option<u32>]) -> Vec<Option<f64>> {
        targets
            .iter()
            .enumerate()
            .map(|(r, t)| {
                t.map(|t| {
                    let row = &logits[r * vocab..(r + 1) * vocab];
                    (row[t as usize] - log_sum_exp(row)).f64()
                })
            })
            .collect()
    }

    /// Log-probability of a token sequence. Causal: sum over t >= 1 of
    /// log p(x_t | x_<t). Masked: pseudo-log-likelihood, each position scored
    /// with only that position masked.
    pub fn sequence_logprob(&self, ids: &[u32]) -> Result<f64> {
        Ok(self.sequence_logprobs(std::slice::from_ref(&ids.to_vec()))?[0])
    }

    /// [`Self::sequence_logprob`] for many sequences, batching equal lengths.
    pub fn sequence_logprobs(&self, seqs: &[Vec<u32>]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; seqs.len()];
        let mut by_len: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (i, s) in seqs.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::usage("cannot score an empty sequence"));
            }
            if s.len() > self.config.n_positions {
                return Err(Error::usage(format!(
                    "sequence of {} tokens exceeds context length {}",
                    s.len(),
                    self.config.n_positions
                )));
            }
            by_len.entry(s.len()).or_default().push(i);
        }
        let vocab = self.config.vocab_size;
        let mut g = Graph::new();
        let vars = self.bind_frozen(&mut g);
        let base = g.len();
        for (len, members) in by_len {
            let chunk = match self.config.objective {
                Objective::Causal => 64,
                Objective::Masked => (256 / len).max(1),
            };
            for group in members.chunks(chunk) {
                let (ids, targets, owners) = match self.config.objective {
                    Objective::Causal => {
                        let mut ids = Vec::with_capacity(group.len() * len);
                        let mut targets = Vec::with_capacity(group.len() * len);
                        let mut owners = Vec::with_capacity(group.len() * len);
                        for &i in group {
                            ids.extend_from_slice(&seqs[i]);
                            for t in 0..len {
                                targets.push(seqs[i].get(t + 1).copied());
                                owners.push(i);
                            }
                        }
                        (ids, targets, owners)
                    }
                    Objective::Masked => {
                        let mut ids = Vec::with_capacity(group.len() * len * len);
                        let mut targets = Vec::with_capacity(group.len() * len * len);
                        let mut owners = Vec::with_capacity(group.len() * len * len);
                        for &i in group {
                            for m in 0..len {
                                for t in 0..len {
                                    ids.push(if t == m { self.mask_id() } else { seqs[i][t] });
                                    targets.push((t == m).then_some(seqs[i][t]));
                                    owners.push(i);
                                }
                            }
                        }
                        (ids, targets, owners)
                    }
                };
                let rows = ids.len() / len;
                let logits = self.logits(&mut g, &vars, &ids, rows, len, None)?;
                let lp = Self::target_logprobs(g.value(logits).data(), vocab, &targets);
                for (o, v) in owners.iter().zip(lp) {
                    if let Some(v) = v {
                        out[*o] += v;
                    }
                }
                g.truncate(base);
            }
        }
        Ok(out)
    }

    /// Summed negative log-likelihood and scored-token count for each block.
    /// Causal models score positions 1.. of every block. Masked models score
    /// the positions selected by a mask drawn from `mask_seed`.
    pub fn block_nll(&self, blocks: &[Vec<u32>], mask_seed: u64, batch_size: usize) -> Result<Vec<(f64, usize)>> {
        let mut out = Vec::with_capacity(blocks.len());
        let vocab = self.config.vocab_size;
        let mut g = Graph::new();
        let vars = self.bind_frozen(&mut g);
        let base = g.len();
        for (bi, chunk) in blocks.chunks(batch_size.max(1)).enumerate() {
            let (ids, seq) = self.flatten_batch(chunk)?;
            let mut rng = rng::stream(mask_seed, &["eval-mask", &bi.to_string()]);
            let mb = match self.config.objective {
                Objective::Causal => self.objective_targets(&ids, seq, &mut rng)?,
                Objective::Masked => self.mask_batch(&ids, &mut rng)?,
            };
            let logits = self.logits(&mut g, &vars, &mb.inputs, chunk.len(), seq, None)?;
            let lp = Self::target_logprobs(g.value(logits).data(), vocab, &mb.targets);
            for b in 0..chunk.len() {
                let mut nll = 0.0;
                let mut n = 0;
                for v in lp[b * seq..(b + 1) * seq].iter().flatten() {
                    nll -= v;
                    n += 1;
                }
                out.push((nll, n));
            }
            g.truncate(base);
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_parameters(&dir.join("params"), &self.params)?;
        let file = ModelFile { config: self.config.clone(), step: self.step, fingerprint: self.fingerprint.clone() };
        let path = dir.join("model.json");
        let text = serde_json::to_string_pretty(&file).expect("model file serializes");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("model.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let file: ModelFile =
            serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let (params, _) = load_parameters(&dir.join("params"))?;
        let fresh = Self::init(file.config.clone(), file.fingerprint.clone())?;
        let expect: Vec<_> = fresh.params.segments().iter().map(|s| (&s.name, s.value.shape())).collect();
        let got: Vec<_> = params.segments().iter().map(|s| (&s.name, s.value.shape())).collect();
        if expect != got {
            return Err(Error::config(format!("{}: parameter layout does not match config", dir.display())));
        }
        Ok(LanguageModel { config: file.config, params, step: file.step, fingerprint: file.fingerprint })
    }

    pub fn cast<T: Scalar>(&self) -> LanguageModel<T> {
        LanguageModel {
            config: self.config.clone(),
            params: self.params.cast(),
            step: self.step,
            fingerprint: self.fingerprint.clone(),
        }
    }

    /// SHA-256 of the flattened parameter bytes.
    pub fn param_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for x in self.params.flatten() {
            buf.clear();
            x.write_le(&mut buf);
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }
}
