use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::Sender;

use serde::{Deserialize, Serialize};

use super::{clip_grad_norm, AdamW, LinearSchedule, OptimizerPolicy, TrainConfig, TrainPlan};
use crate::ewc::{add_penalty_grad, estimate_fisher_diagonal, penalty, EwcConfig, FisherSnapshot};
use crate::model::LanguageModel;
use crate::rng;
use crate::tensor::{Scalar, TensorError};
use crate::tokenizer::BlockDataset;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    #[serde(rename = "run-id")]
    pub run_id: String,
    pub condition: String,
    pub phase: usize,
    pub epoch: usize,
    pub step: u64,
    pub split: String,
    #[serde(rename = "metric-name")]
    pub metric: String,
    pub value: f64,
}

pub trait MetricsSink {
    fn emit(&mut self, record: MetricRecord) -> Result<()>;

    fn flush(&mut self) -> Result<()> {
        Ok(())
    }
}

/// Appends one JSON object per line.
pub struct JsonlSink {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonlSink {
    pub fn append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(JsonlSink { path: path.to_path_buf(), out: BufWriter::new(file) })
    }
}

impl MetricsSink for JsonlSink {
    fn emit(&mut self, record: MetricRecord) -> Result<()> {
        let line = serde_json::to_string(&record).expect("metric record serializes");
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Default)]
pub struct MemorySink {
    pub records: Vec<MetricRecord>,
}

impl MetricsSink for MemorySink {
    fn emit(&mut self, record: MetricRecord) -> Result<()> {
        self.records.push(record);
        Ok(())
    }
}

/// Forwards records to a receiver on another thread.
pub struct ChannelSink(pub Sender<MetricRecord>);

impl MetricsSink for ChannelSink {
    fn emit(&mut self, record: MetricRecord) -> Result<()> {
        self.0.send(record).map_err(|_| Error::Abort("metrics receiver disconnected".into()))
    }
}

/// Per-epoch evaluation returning `(split, metric-name, value)` triples.
pub type EvalFn<'a, S> = dyn FnMut(&LanguageModel<S>) -> Result<Vec<(String, String, f64)>> + 'a;

/// EWC inputs. Without a snapshot, the Fisher is estimated on `data` when
/// the first EWC phase starts and stored next to the checkpoints.
pub struct EwcContext<'a> {
    pub cfg: EwcConfig,
    pub data: Option<&'a BlockDataset>,
    pub snapshot: Option<FisherSnapshot>,
}

pub struct TrainRun<'a, S> {
    pub run_id: String,
    pub checkpoint_dir: Option<PathBuf>,
    pub ewc: Option<EwcContext<'a>>,
    pub sink: &'a mut dyn MetricsSink,
    pub eval: Option<&'a mut EvalFn<'a, S>>,
    /// Returns early after this (phase, epoch) checkpoint.
    pub stop_after: Option<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct CheckpointState {
    pub phase: usize,
    pub epoch: usize,
    pub step: u64,
    pub param_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub steps: u64,
    pub resumed_from: Option<(usize, usize)>,
    pub finished: bool,
    pub fisher: Option<FisherSnapshot>,
}

pub fn checkpoint_name(phase: usize, epoch: usize) -> String {
    format!("p{phase}-e{epoch}")
}

/// Most advanced checkpoint under `dir` whose state file exists.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<(PathBuf, CheckpointState)>> {
    let Ok(entries) = std::fs::read_dir(dir) else { return Ok(None) };
    let mut best: Option<(PathBuf, CheckpointState)> = None;
    for e in entries {
        let path = e.map_err(|e| Error::io(dir, e))?.path();
        let state_path = path.join("state.json");
        if !state_path.is_file() {
            continue;
        }
        let text = std::fs::read_to_string(&state_path).map_err(|e| Error::io(&state_path, e))?;
        let state: CheckpointState =
            serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", state_path.display())))?;
        if best.as_ref().is_none_or(|(_, b)| (state.phase, state.epoch) > (b.phase, b.epoch)) {
            best = Some((path, state));
        }
    }
    Ok(best)
}

fn save_checkpoint<S: Scalar>(dir: &Path, m: &LanguageModel<S>, opt: &AdamW, state: &CheckpointState) -> Result<()> {
    m.save(&dir.join("model"))?;
    opt.save(&dir.join("optimizer"))?;
    let path = dir.join("state.json");
    std::fs::write(&path, serde_json::to_string_pretty(state).expect("state serializes"))
        .map_err(|e| Error::io(&path, e))
}

struct Cursor {
    phase: usize,
    epoch: usize,
    step: u64,
}

/// Trains through every phase of `plan`, checkpointing each epoch under
/// `run.checkpoint_dir` and resuming from the latest checkpoint found there.
pub fn run_training<S: Scalar>(
    m: &mut LanguageModel<S>,
    plan: &TrainPlan,
    data: [&BlockDataset; 2],
    cfg: &TrainConfig,
    run: &mut TrainRun<'_, S>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    for d in data {
        if d.fingerprint != m.fingerprint {
            return Err(Error::usage(format!(
                "model tokenizer {} does not match dataset tokenizer {}",
                m.fingerprint, d.fingerprint
            )));
        }
    }
    if plan.phases.iter().any(|p| p.ewc_active) && run.ewc.is_none() {
        return Err(Error::config(format!("{} requires an ewc configuration", plan.condition)));
    }
    if let Some(ctx) = &run.ewc {
        ctx.cfg.validate()?;
    }
    let dim = m.params.total_dim();
    let mut opt = AdamW::new(dim, cfg.adam());
    let mut at = Cursor { phase: 1, epoch: 0, step: 0 };
    let mut resumed_from = None;
    if let Some(dir) = &run.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if let Some((path, state)) = latest_checkpoint(dir)? {
            *m = LanguageModel::load(&path.join("model"))?;
            if m.param_hash() != state.param_hash {
                return Err(Error::config(format!("{}: parameter hash does not match state", path.display())));
            }
            opt = AdamW::load(&path.join("optimizer"), dim)?;
            at = Cursor { phase: state.phase, epoch: state.epoch, step: state.step };
            resumed_from = Some((state.phase, state.epoch));
            log::info!("resuming {} from {}", run.run_id, path.display());
        }
    }
    if at.phase <= plan.phases.len() && at.epoch == plan.phases[at.phase - 1].epochs {
        at.phase += 1;
        at.epoch = 0;
    }
    let condition = plan.condition.tag().to_string();
    let mut fisher_out = None;

    while at.phase <= plan.phases.len() {
        let ph = &plan.phases[at.phase - 1];
        if at.epoch == 0 && ph.optimizer == OptimizerPolicy::Fresh {
            opt = AdamW::new(dim, cfg.adam());
        }
        let snapshot = if ph.ewc_active { Some(fisher_for(m, run)?) } else { None };
        if let Some(s) = &snapshot {
            fisher_out = Some(s.clone());
        }
        let (lambda, mu) = run.ewc.as_ref().map_or((0.0, 0.0), |c| (c.cfg.lambda, c.cfg.mu));
        let schedule = LinearSchedule::new(cfg.learning_rate, cfg.warmup_ratio, ph.steps());
        let mut phase_step = ph.steps_per_epoch * at.epoch as u64;
        for epoch in at.epoch + 1..=ph.epochs {
            let batches = plan.epoch_batches(ph.index, epoch);
            for (gi, group) in batches.chunks(cfg.grad_accum).enumerate() {
                m.params.zero_grad();
                let mut ce = 0.0;
                for (k, batch) in group.iter().enumerate() {
                    let bi = gi * cfg.grad_accum + k;
                    let mut r =
                        rng::stream(plan.seed, &["train", &ph.index.to_string(), &epoch.to_string(), &bi.to_string()]);
                    let blocks: Vec<Vec<u32>> =
                        batch.blocks.iter().map(|&i| data[batch.source].blocks[i].clone()).collect();
                    let loss = match m.loss_grad(&blocks, &mut r, true, 1.0 / group.len() as f64) {
                        Err(Error::Tensor(TensorError::NonFinite { .. })) => f64::NAN,
                        other => other?,
                    };
                    if !loss.is_finite() {
                        return Err(abort(m, run, &at, epoch, "non-finite training loss"));
                    }
                    ce += loss / group.len() as f64;
                }
                let mut pen = None;
                if let Some(s) = &snapshot {
                    if lambda > 0.0 || mu > 0.0 {
                        pen = Some(penalty(&m.params, s, lambda, mu)?);
                        add_penalty_grad(&mut m.params, s, lambda, mu, 1.0)?;
                    }
                }
                let norm = clip_grad_norm(&mut m.params, cfg.max_grad_norm);
                if !norm.is_finite() {
                    return Err(abort(m, run, &at, epoch, "non-finite gradient norm"));
                }
                let lr = schedule.lr(phase_step);
                opt.step(&mut m.params, lr)?;
                phase_step += 1;
                at.step += 1;
                m.step = at.step;
                let mut emit = |metric: &str, value: f64| {
                    run.sink.emit(MetricRecord {
                        run_id: run.run_id.clone(),
                        condition: condition.clone(),
                        phase: ph.index,
                        epoch,
                        step: at.step,
                        split: "train".into(),
                        metric: metric.into(),
                        value,
                    })
                };
                emit("ce", ce)?;
                emit("lr", lr)?;
                emit("grad-norm", norm)?;
                if let Some(p) = pen {
                    emit("ewc-penalty", p)?;
                }
            }
            if let Some(eval) = run.eval.as_mut() {
                for (split, metric, value) in eval(m)? {
                    run.sink.emit(MetricRecord {
                        run_id: run.run_id.clone(),
                        condition: condition.clone(),
                        phase: ph.index,
                        epoch,
                        step: at.step,
                        split,
                        metric,
                        value,
                    })?;
                }
            }
            run.sink.flush()?;
            at.epoch = epoch;
            if let Some(dir) = &run.checkpoint_dir {
                let state = CheckpointState { phase: ph.index, epoch, step: at.step, param_hash: m.param_hash() };
                save_checkpoint(&dir.join(checkpoint_name(ph.index, epoch)), m, &opt, &state)?;
            }
            if run.stop_after == Some((ph.index, epoch)) {
                return Ok(TrainOutcome { steps: at.step, resumed_from, finished: false, fisher: fisher_out });
            }
        }
        at.phase += 1;
        at.epoch = 0;
    }
    Ok(TrainOutcome { steps: at.step, resumed_from, finished: true, fisher: fisher_out })
}

fn fisher_for<S: Scalar>(m: &LanguageModel<S>, run: &mut TrainRun<'_, S>) -> Result<FisherSnapshot> {
    let ctx = run.ewc.as_mut().expect("checked before training");
    if let Some(s) = &ctx.snapshot {
        return Ok(s.clone());
    }
    let stem = run.checkpoint_dir.as_ref().map(|d| d.join("fisher"));
    if let Some(stem) = &stem {
        if stem.with_extension("json").is_file() {
            let s = FisherSnapshot::load(stem, m.params.total_dim())?;
            ctx.snapshot = Some(s.clone());
            return Ok(s);
        }
    }
    let data = ctx.data.ok_or_else(|| Error::usage("ewc needs either a fisher snapshot or a fisher dataset"))?;
    log::info!("estimating fisher diagonal on {} blocks", data.len().min(ctx.cfg.subset_blocks));
    let s = estimate_fisher_diagonal(m, data, &ctx.cfg)?;
    if let Some(stem) = &stem {
        s.save(stem)?;
    }
    ctx.snapshot = Some(s.clone());
    Ok(s)
}

fn abort<S: Scalar>(m: &LanguageModel<S>, run: &TrainRun<'_, S>, at: &Cursor, epoch: usize, what: &str) -> Error {
    let mut msg = format!("{what} at phase {} epoch {epoch} step {}", at.phase, at.step + 1);
    if let Some(dir) = &run.checkpoint_dir {
        let path = dir.join(format!("abort-p{}-e{epoch}-s{}", at.phase, at.step + 1));
        match m.save(&path) {
            Ok(()) => msg.push_str(&format!("; diagnostic checkpoint at {}", path.display())),
            Err(e) => msg.push_str(&format!("; diagnostic checkpoint failed: {e}")),
        }
    }
    Error::Abort(msg)
}
