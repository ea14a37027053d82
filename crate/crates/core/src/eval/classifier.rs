use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::metrics::{accuracy, f1, mcc};
use crate::model::LanguageModel;
use crate::rng;
use crate::schedule::{clip_grad_norm, AdamW, LinearSchedule, TrainConfig};
use crate::tensor::{Graph, Scalar, Tensor, Var};
use crate::tokenizer::Tokenizer;
use crate::{Error, Result};

/// Feed-forward head over the mean-pooled final hidden states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ClassifierHead {
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ClassifierResult {
    pub accuracy: f64,
    pub f1: f64,
    pub mcc: f64,
    pub heldout: usize,
    pub predictions: Vec<usize>,
}

/// Reads `text TAB label` lines with integer labels.
pub fn read_labeled(path: &Path) -> Result<Vec<(String, usize)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let (t, lab) = l
                .rsplit_once('\t')
                .ok_or_else(|| Error::config(format!("{}:{}: expected text TAB label", path.display(), i + 1)))?;
            let lab = lab
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("{}:{}: label {lab:?} is not an integer", path.display(), i + 1)))?;
            Ok((t.to_string(), lab))
        })
        .collect()
}

struct Encoded {
    ids: Vec<u32>,
    label: usize,
}

fn encode(tok: &Tokenizer, data: &[(String, usize)], max_len: usize, classes: usize) -> Result<Vec<Encoded>> {
    data.iter()
        .map(|(t, l)| {
            if *l >= classes {
                return Err(Error::usage(format!("label {l} outside 0..{classes}")));
            }
            let mut ids = tok.encode(t);
            if ids.is_empty() {
                return Err(Error::usage("cannot classify an empty text"));
            }
            ids.truncate(max_len);
            Ok(Encoded { ids, label: *l })
        })
        .collect()
}

fn head_logits<S: Scalar>(
    m: &LanguageModel<S>,
    g: &mut Graph<S>,
    vars: &[Var],
    n_backbone: usize,
    items: &[&Encoded],
    rng: Option<&mut rng::Rng>,
) -> Result<Var> {
    let len = items[0].ids.len();
    let ids: Vec<u32> = items.iter().flat_map(|e| e.ids.iter().copied()).collect();
    let h = m.hidden(g, &vars[..n_backbone], &ids, items.len(), len, rng)?;
    let mut x = g.mean_rows(h, items.len())?;
    let head = &vars[n_backbone..];
    let layers = head.len() / 2;
    for l in 0..layers {
        x = g.linear(x, head[2 * l], Some(head[2 * l + 1]))?;
        if l + 1 < layers {
            x = g.tanh(x)?;
        }
    }
    Ok(x)
}

/// Indices grouped by sequence length.
fn by_length(items: &[usize], enc: &[Encoded]) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in items {
        groups.entry(enc[i].ids.len()).or_default().push(i);
    }
    groups.into_values().collect()
}

/// Fine-tunes a copy of the backbone jointly with a fresh head on `train`
/// and reports accuracy, F1 and Matthews correlation on `heldout`. The given
/// model is not modified. Gradient accumulation is not used.
pub fn finetune_classifier<S: Scalar>(
    m: &LanguageModel<S>,
    tok: &Tokenizer,
    train: &[(String, usize)],
    heldout: &[(String, usize)],
    head: &ClassifierHead,
    cfg: &TrainConfig,
) -> Result<ClassifierResult> {
    cfg.validate()?;
    if head.classes < 2 {
        return Err(Error::usage("a classifier needs at least two classes"));
    }
    if train.is_empty() || heldout.is_empty() {
        return Err(Error::usage("fine-tune and heldout splits must be non-empty"));
    }
    let seen: BTreeSet<usize> = train.iter().map(|x| x.1).collect();
    if seen.len() < 2 {
        return Err(Error::usage("fine-tuning data has a single class"));
    }
    let max_len = m.config.n_positions;
    let train = encode(tok, train, max_len, head.classes)?;
    let heldout = encode(tok, heldout, max_len, head.classes)?;

    let mut work = m.clone();
    let n_backbone = work.params.len();
    let mut init = rng::stream(head.seed, &["classifier-head"]);
    let normal = Normal::new(0.0, 0.02).expect("positive std");
    let mut dims = vec![m.config.n_embd];
    dims.extend(&head.hidden);
    dims.push(head.classes);
    for (l, w) in dims.windows(2).enumerate() {
        let data: Vec<S> = (0..w[0] * w[1]).map(|_| S::of(normal.sample(&mut init))).collect();
        work.params.push(format!("head.{l}.w"), Tensor::matrix(w[0], w[1], data)?)?;
        work.params.push(format!("head.{l}.b"), Tensor::zeros(&[w[1]]))?;
    }

    let per_epoch = train.len().div_ceil(cfg.batch_size) as u64;
    let schedule = LinearSchedule::new(cfg.learning_rate, cfg.warmup_ratio, per_epoch * cfg.epochs as u64);
    let mut opt = AdamW::new(work.params.total_dim(), cfg.adam());
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &["finetune-order", &epoch.to_string()]));
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            work.params.zero_grad();
            let mut r = rng::stream(cfg.seed, &["finetune", &epoch.to_string(), &bi.to_string()]);
            for group in by_length(chunk, &train) {
                let group: Vec<&Encoded> = group.iter().map(|&i| &train[i]).collect();
                let mut g = Graph::new();
                let vars = work.bind(&mut g);
                let logits = head_logits(&work, &mut g, &vars, n_backbone, &group, Some(&mut r))?;
                let targets: Vec<Option<u32>> = group.iter().map(|e| Some(e.label as u32)).collect();
                let loss = g.cross_entropy(logits, &targets)?;
                let root = g.scale(loss, S::of(group.len() as f64 / chunk.len() as f64))?;
                g.backward(root)?;
                work.params.accumulate_grads(&g, &vars);
            }
            let norm = clip_grad_norm(&mut work.params, cfg.max_grad_norm);
            if !norm.is_finite() {
                return Err(Error::Abort(format!("non-finite gradient while fine-tuning, epoch {epoch}")));
            }
            opt.step(&mut work.params, schedule.lr(step))?;
            step += 1;
        }
    }

    let mut pred = vec![0usize; heldout.len()];
    let all: Vec<usize> = (0..heldout.len()).collect();
    for group in by_length(&all, &heldout) {
        for part in group.chunks(64) {
            let items: Vec<&Encoded> = part.iter().map(|&i| &heldout[i]).collect();
            let mut g = Graph::new();
            let vars = work.bind_frozen(&mut g);
            let logits = head_logits(&work, &mut g, &vars, n_backbone, &items, None)?;
            let v = g.value(logits).data();
            for (k, &i) in part.iter().enumerate() {
                let row = &v[k * head.classes..(k + 1) * head.classes];
                let best = (0..head.classes)
                    .max_by(|&a, &b| row[a].partial_cmp(&row[b]).expect("finite logits").then(b.cmp(&a)));
                pred[i] = best.expect("at least two classes");
            }
        }
    }
    let truth: Vec<usize> = heldout.iter().map(|e| e.label).collect();
    Ok(ClassifierResult {
        accuracy: accuracy(&truth, &pred),
        f1: f1(&truth, &pred, head.classes),
        mcc: mcc(&truth, &pred, head.classes),
        heldout: heldout.len(),
        predictions: pred,
    })
}
