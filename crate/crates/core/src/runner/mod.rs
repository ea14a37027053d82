//! Declarative experiments: data generation, one training run per
//! (condition, seed), λ sweeps, summaries, comparisons and plots, all under
//! one reproducible directory tree.

mod config;
mod data;
mod manifest;
mod plot;
mod report;

use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub use config::{
    DataSpec, EvalSpec, ExperimentConfig, FileSource, Resolved, SyntheticSpec, ENV_OUTPUT_ROOT, ENV_PARALLELISM,
    EXPERIMENT_PRESETS, LARGE_SCALE_PARAMS, LARGE_SCALE_TOKENS,
};
pub use data::{data_hash, prepare_data, DataRecord, PreparedData, LANGUAGES};
pub use manifest::{files_under, lint, Artifact, LintReport, RunManifest, RunStatus, MANIFEST};
pub use plot::{
    emit_plots, lambda_axis, learning_curve_chart, learning_curve_csv, parse_sweep_csv, tradeoff_chart, Chart, Line,
    FIGURES,
};
pub use report::{
    collect_summary, compare_conditions, parse_summary, read_summary, render_comparison, summary_csv, write_summary,
    Comparison, Delta, Point, Series, SummaryRow, SUMMARY_HEADER,
};

use crate::eval::{minimal_pair_accuracy, ppl_per_char};
use crate::ewc::{self, FisherSnapshot, SweepTable};
use crate::model::{LanguageModel, ModelConfig};
use crate::rng;
use crate::schedule::{
    build_plan, checkpoint_name, latest_checkpoint, run_training, Condition, EwcContext, JsonlSink, MetricRecord,
    MetricsSink, TrainConfig, TrainRun,
};
use crate::{Error, Result};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
/// Metrics compared and plotted after a full experiment.
pub const DEFAULT_METRICS: [&str; 5] = ["l1.ce", "l2.ce", "l1.ppl-per-char", "l2.ppl-per-char", "l2.pair-accuracy"];

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Writes through a temporary sibling and renames into place.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    write_text(path, &s)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

/// Parses a metrics JSONL file, skipping a torn final line.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let Ok(text) = std::fs::read_to_string(path) else { return Ok(Vec::new()) };
    Ok(text.lines().filter_map(|l| serde_json::from_str(l).ok()).collect())
}

/// Keeps the lines whose record satisfies `keep`, byte for byte.
fn filter_metrics(path: &Path, keep: impl Fn(&MetricRecord) -> bool) -> Result<()> {
    let Ok(text) = std::fs::read_to_string(path) else { return Ok(()) };
    let mut out = String::new();
    for l in text.lines() {
        if let Ok(r) = serde_json::from_str::<MetricRecord>(l) {
            if keep(&r) {
                out.push_str(l);
                out.push('\n');
            }
        }
    }
    write_text(path, &out)
}

pub fn run_id(condition: Condition, seed: u64, lambda: Option<f64>) -> String {
    match lambda {
        Some(l) => format!("{}-s{seed}-lambda{l}", condition.tag()),
        None => format!("{}-s{seed}", condition.tag()),
    }
}

pub fn data_dir(root: &Path, seed: u64) -> PathBuf {
    root.join("data").join(format!("s{seed}"))
}

/// Directory of a run; sweep runs live under `sweep/runs`.
pub fn run_dir(root: &Path, id: &str, sweep: bool) -> PathBuf {
    if sweep {
        root.join("sweep").join("runs").join(id)
    } else {
        root.join("runs").join(id)
    }
}

pub fn sub_seeds(seed: u64) -> BTreeMap<String, u64> {
    ["data", "init", "train", "fisher", "eval-mask"].iter().map(|l| (l.to_string(), rng::derive(seed, &[l]))).collect()
}

/// Validation metrics on both languages: CE, PPL per character and, when
/// pairs exist, minimal-pair accuracy.
pub fn evaluate_model(
    m: &LanguageModel<f32>,
    d: &PreparedData,
    batch_size: usize,
    mask_seed: u64,
) -> Result<Vec<(String, String, f64)>> {
    let mut out = Vec::new();
    for (i, lang) in LANGUAGES.iter().enumerate() {
        let p = ppl_per_char(m, &d.valid[i], mask_seed, batch_size)?;
        out.push(("valid".into(), format!("{lang}.ce"), p.ce));
        out.push(("valid".into(), format!("{lang}.ppl-per-char"), p.ppl_per_char));
        if !d.pairs[i].is_empty() {
            let a = minimal_pair_accuracy(m, &d.tok, &d.pairs[i])?;
            out.push(("valid".into(), format!("{lang}.pair-accuracy"), a.accuracy));
        }
    }
    Ok(out)
}

/// Removes checkpoints other than the latest and the phase ends.
fn prune_checkpoints(dir: &Path, epochs: usize) -> Result<()> {
    let Some((latest, _)) = latest_checkpoint(dir)? else { return Ok(()) };
    let Ok(entries) = std::fs::read_dir(dir) else { return Ok(()) };
    for e in entries.flatten() {
        let p = e.path();
        let name = e.file_name().to_string_lossy().to_string();
        let Some((ph, ep)) = name.strip_prefix('p').and_then(|s| s.split_once("-e")) else { continue };
        let (Ok(_), Ok(ep)) = (ph.parse::<usize>(), ep.parse::<usize>()) else { continue };
        if p != latest && ep != epochs && p.join("state.json").is_file() {
            std::fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(())
}

fn copy_dir(from: &Path, to: &Path) -> Result<()> {
    for f in files_under(from)? {
        let dest = to.join(f.strip_prefix(from).expect("under source"));
        if let Some(parent) = dest.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::copy(&f, &dest).map_err(|e| Error::io(&dest, e))?;
    }
    Ok(())
}

/// Conditions whose first phase is identical: L1 alone with a fresh optimizer.
pub const SHARED_PHASE1: [Condition; 3] =
    [Condition::Sequential, Condition::SequentialInterleaved, Condition::SequentialEwc];

/// A finished phase 1 of another run with identical phase-1 training.
fn find_phase1_donor(root: &Path, own: &RunManifest, epochs: usize) -> Option<PathBuf> {
    let mut dirs = Vec::new();
    for coll in [root.join("runs"), root.join("sweep").join("runs")] {
        if let Ok(entries) = std::fs::read_dir(coll) {
            dirs.extend(entries.flatten().map(|e| e.path()));
        }
    }
    dirs.sort();
    dirs.into_iter().find(|d| {
        let Ok(m) = RunManifest::load(d) else { return false };
        m.run_id != own.run_id
            && m.seed == own.seed
            && SHARED_PHASE1.iter().any(|c| c.tag() == m.condition)
            && m.verify_against(own).is_ok()
            && d.join("checkpoints").join(checkpoint_name(1, epochs)).join("state.json").is_file()
    })
}

/// One training run request.
#[derive(Clone, Debug)]
pub struct RunRequest {
    pub condition: Condition,
    pub seed: u64,
    /// EWC strength override; places the run under `sweep/runs`.
    pub lambda: Option<f64>,
    pub stop_after: Option<(usize, usize)>,
    pub fisher: Option<FisherSnapshot>,
}

impl RunRequest {
    pub fn new(condition: Condition, seed: u64) -> Self {
        RunRequest { condition, seed, lambda: None, stop_after: None, fisher: None }
    }
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub run_id: String,
    pub dir: PathBuf,
    pub status: RunStatus,
    pub fisher: Option<FisherSnapshot>,
}

pub fn model_config(r: &Resolved, seed: u64) -> ModelConfig {
    ModelConfig { seed: rng::derive(seed, &["init"]), ..r.model.clone() }
}

pub fn train_config(r: &Resolved, seed: u64) -> TrainConfig {
    TrainConfig { seed: rng::derive(seed, &["train"]), ..r.train.clone() }
}

fn new_manifest(r: &Resolved, d: &PreparedData, req: &RunRequest, id: &str, phase_steps: Vec<u64>) -> RunManifest {
    let mut dataset_hashes = d.record.files.clone();
    dataset_hashes.insert("data-hash".into(), d.record.data_hash.clone());
    RunManifest {
        run_id: id.to_string(),
        condition: req.condition.tag().into(),
        seed: req.seed,
        lambda: req.lambda,
        sub_seeds: sub_seeds(req.seed),
        config: serde_json::to_value(r).expect("config serializes"),
        config_hash: r.config_hash(),
        dataset_hashes,
        tokenizer_fingerprint: d.tok.fingerprint(),
        code_version: CODE_VERSION.into(),
        epochs_per_phase: r.train.epochs,
        phase_steps,
        status: RunStatus::Running,
        error: None,
        resumed_from: None,
        phase1_from: None,
        artifacts: Vec::new(),
    }
}

/// Trains one (condition, seed) run with per-epoch validation, resuming
/// from its latest checkpoint. Completed runs are left untouched.
pub fn train_run(r: &Resolved, d: &PreparedData, req: &RunRequest) -> Result<RunReport> {
    let root = r.root();
    let id = run_id(req.condition, req.seed, req.lambda);
    let dir = run_dir(&root, &id, req.lambda.is_some());
    let ckpt = dir.join("checkpoints");
    let metrics = dir.join("metrics.jsonl");
    let epochs = r.train.epochs;

    let cfg = train_config(r, req.seed);
    let sets = if req.condition == Condition::Monolingual {
        let k = d.language(r.monolingual_language())?;
        [&d.train[k], &d.train[k]]
    } else {
        [&d.train[0], &d.train[1]]
    };
    let plan = build_plan(req.condition, sets, &cfg)?;
    let mut manifest = new_manifest(r, d, req, &id, plan.phases.iter().map(|p| p.steps()).collect());
    if let Ok(old) = RunManifest::load(&dir) {
        old.verify_against(&manifest)?;
        if old.status == RunStatus::Complete {
            log::info!("{id} already complete");
            return Ok(RunReport { run_id: id, dir, status: RunStatus::Complete, fisher: None });
        }
        manifest.phase1_from = old.phase1_from;
    }
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let mask_seed = rng::derive(req.seed, &["eval-mask"]);
    let batch = r.exp.eval.batch_size;
    let mut emit_initial = false;
    match latest_checkpoint(&ckpt)? {
        Some((_, s)) => {
            manifest.resumed_from = Some((s.phase, s.epoch));
            filter_metrics(&metrics, |m| (m.phase, m.epoch) <= (s.phase, s.epoch))?;
        }
        None => match find_phase1_donor(&root, &manifest, epochs) {
            Some(donor) if SHARED_PHASE1.contains(&req.condition) => {
                let name = checkpoint_name(1, epochs);
                copy_dir(&donor.join("checkpoints").join(&name), &ckpt.join(&name))?;
                let mut lines = String::new();
                for mut rec in read_metrics(&donor.join("metrics.jsonl"))?.into_iter().filter(|m| m.phase == 1) {
                    rec.run_id = id.clone();
                    rec.condition = req.condition.tag().into();
                    lines.push_str(&serde_json::to_string(&rec).expect("record serializes"));
                    lines.push('\n');
                }
                write_text(&metrics, &lines)?;
                manifest.phase1_from = Some(donor.file_name().expect("named").to_string_lossy().into());
                log::info!("{id}: phase 1 reused from {}", donor.display());
            }
            _ => {
                write_text(&metrics, "")?;
                emit_initial = true;
            }
        },
    }
    manifest.save(&dir)?;

    let mut m = LanguageModel::<f32>::init(model_config(r, req.seed), d.tok.fingerprint())?;
    let mut sink = JsonlSink::append(&metrics)?;
    if emit_initial {
        for (split, metric, value) in evaluate_model(&m, d, batch, mask_seed)? {
            sink.emit(MetricRecord {
                run_id: id.clone(),
                condition: req.condition.tag().into(),
                phase: 1,
                epoch: 0,
                step: 0,
                split,
                metric,
                value,
            })?;
        }
        sink.flush()?;
    }
    let mut eval = |m: &LanguageModel<f32>| -> Result<Vec<(String, String, f64)>> {
        prune_checkpoints(&ckpt, epochs)?;
        evaluate_model(m, d, batch, mask_seed)
    };
    let ewc = (req.condition == Condition::SequentialEwc).then(|| {
        let mut cfg = r.ewc.clone();
        cfg.seed = rng::derive(req.seed, &["fisher"]);
        if let Some(l) = req.lambda {
            cfg.lambda = l;
        }
        EwcContext { cfg, data: Some(&d.train[0]), snapshot: req.fisher.clone() }
    });
    let mut run = TrainRun {
        run_id: id.clone(),
        checkpoint_dir: Some(ckpt.clone()),
        ewc,
        sink: &mut sink,
        eval: Some(&mut eval),
        stop_after: req.stop_after,
    };
    let result = run_training(&mut m, &plan, sets, &cfg, &mut run);
    drop(run);
    sink.flush()?;
    match result {
        Ok(outcome) => {
            manifest.status = if outcome.finished { RunStatus::Complete } else { RunStatus::Partial };
            manifest.finalize(&dir)?;
            Ok(RunReport { run_id: id, dir, status: manifest.status, fisher: outcome.fisher })
        }
        Err(e) => {
            manifest.status = RunStatus::Aborted;
            manifest.error = Some(e.to_string());
            manifest.finalize(&dir)?;
            Err(e)
        }
    }
}

/// Final validation value of `metric` in a run's metrics file.
pub fn final_metric(dir: &Path, metric: &str) -> Result<f64> {
    read_metrics(&dir.join("metrics.jsonl"))?
        .into_iter()
        .filter(|r| r.split == "valid" && r.metric == metric)
        .last()
        .map(|r| r.value)
        .ok_or_else(|| Error::usage(format!("{}: no {metric} record", dir.display())))
}

fn load_fisher(dir: &Path, dim: usize) -> Option<FisherSnapshot> {
    let stem = dir.join("checkpoints").join("fisher");
    FisherSnapshot::load(&stem, dim).ok()
}

/// Trains sequential-ewc at every λ of `grid` for each seed and tabulates
/// the final validation CE of both languages, averaged over seeds. The
/// Fisher diagonal is estimated once per seed and shared across λ.
pub fn run_sweep(r: &Resolved, grid: &[f64], data: &BTreeMap<u64, PreparedData>) -> Result<SweepTable> {
    let root = r.root();
    let dim = r.model.param_count();
    let mut fisher: BTreeMap<u64, FisherSnapshot> = BTreeMap::new();
    let table = ewc::sweep_lambda(grid, |lambda| {
        let (mut l1, mut l2) = (0.0, 0.0);
        for &seed in &r.exp.seeds {
            let d = &data[&seed];
            let req = RunRequest {
                lambda: Some(lambda),
                fisher: fisher.get(&seed).cloned(),
                ..RunRequest::new(Condition::SequentialEwc, seed)
            };
            let rep = train_run(r, d, &req)?;
            if let Some(f) = rep.fisher.or_else(|| load_fisher(&rep.dir, dim)) {
                fisher.entry(seed).or_insert(f);
            }
            if rep.status != RunStatus::Complete {
                return Err(Error::Abort(format!("{} did not complete", rep.run_id)));
            }
            l1 += final_metric(&rep.dir, "l1.ce")?;
            l2 += final_metric(&rep.dir, "l2.ce")?;
        }
        let n = r.exp.seeds.len() as f64;
        Ok((l1 / n, l2 / n))
    })?;
    let dir = root.join("sweep");
    write_text(&dir.join("sweep.csv"), &table.to_csv())?;
    let c = table.crossover();
    write_json(
        &dir.join("sweep.json"),
        &serde_json::json!({ "seeds": r.exp.seeds, "rows": table.rows.iter().map(|r| [r.lambda, r.l1_ce, r.l2_ce]).collect::<Vec<_>>(), "crossover-lambda": c.lambda }),
    )?;
    Ok(table)
}

/// Free bytes on the filesystem holding `path` or its nearest existing
/// ancestor.
pub fn free_bytes(path: &Path) -> Option<u64> {
    let mut p = path.to_path_buf();
    while !p.exists() {
        p = p.parent()?.to_path_buf();
        if p.as_os_str().is_empty() {
            p = PathBuf::from(".");
        }
    }
    let c = std::ffi::CString::new(p.as_os_str().as_encoded_bytes()).ok()?;
    let mut s: libc::statvfs = unsafe { std::mem::zeroed() };
    // SAFETY: `c` is NUL-terminated and `s` is a valid out-pointer.
    if unsafe { libc::statvfs(c.as_ptr(), &mut s) } != 0 {
        return None;
    }
    Some(s.f_bavail as u64 * s.f_frsize as u64)
}

/// Rough upper bound on the bytes an experiment writes.
pub fn disk_estimate(r: &Resolved) -> u64 {
    let params = r.model.param_count() as u64;
    // Three kept checkpoints of f32 weights and f64 moments, plus a Fisher snapshot.
    let per_run = 3 * params * 20 + params * 16 + (1 << 20);
    let sweep_runs = if r.exp.sweep { r.exp.lambda_grid.len() as u64 } else { 0 };
    let runs = r.exp.seeds.len() as u64 * (r.conditions.len() as u64 + sweep_runs);
    let data = r.exp.seeds.len() as u64 * 2 * r.exp.tokens_per_language * 12;
    runs * per_run + data
}

pub fn check_disk(r: &Resolved) -> Result<()> {
    let need = disk_estimate(r);
    match free_bytes(&r.exp.output_root) {
        Some(free) if free < need => Err(Error::Abort(format!(
            "{} has {} MiB free, the experiment needs about {} MiB",
            r.exp.output_root.display(),
            free >> 20,
            need >> 20
        ))),
        _ => Ok(()),
    }
}

/// Runs `jobs` on up to `workers` threads and returns every result in
/// job order.
fn run_parallel<T: Send, J: Send>(jobs: Vec<J>, workers: usize, f: impl Fn(J) -> Result<T> + Sync) -> Vec<Result<T>> {
    let n = jobs.len();
    let queue = Mutex::new(jobs.into_iter().enumerate().collect::<VecDeque<_>>());
    let results: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.max(1).min(n.max(1)) {
            s.spawn(|| loop {
                let Some((i, job)) = queue.lock().expect("queue lock").pop_front() else { break };
                let out = f(job);
                results.lock().expect("results lock")[i] = Some(out);
            });
        }
    });
    results.into_inner().expect("results lock").into_iter().map(|r| r.expect("every job ran")).collect()
}

pub fn prepare_all(r: &Resolved) -> Result<BTreeMap<u64, PreparedData>> {
    let root = r.root();
    r.exp.seeds.iter().map(|&s| Ok((s, prepare_data(r, s, &data_dir(&root, s))?))).collect()
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub root: PathBuf,
    pub runs: Vec<RunReport>,
    pub sweep: Option<SweepTable>,
    pub outputs: Vec<PathBuf>,
}

/// Generates data, trains every (condition, seed) run, optionally sweeps λ,
/// and writes the summary, comparisons and plots.
pub fn run_experiment(r: &Resolved) -> Result<ExperimentReport> {
    check_disk(r)?;
    let root = r.root();
    write_text(&root.join("experiment.toml"), &r.exp.to_toml())?;
    let data = prepare_all(r)?;
    // Sequential first so later sequential variants can reuse its phase 1.
    let mut order = r.conditions.clone();
    order.sort_by_key(|c| (*c != Condition::Sequential, !c.is_sequential()));
    let jobs: Vec<RunRequest> =
        r.exp.seeds.iter().flat_map(|&s| order.iter().map(move |&c| RunRequest::new(c, s))).collect();
    let results = run_parallel(jobs, r.exp.parallelism, |req| {
        log::info!("run {}", run_id(req.condition, req.seed, None));
        train_run(r, &data[&req.seed], &req)
    });
    let mut runs = Vec::new();
    let mut first_err = None;
    for res in results {
        match res {
            Ok(rep) => runs.push(rep),
            Err(e) => {
                log::error!("{e}");
                first_err.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    let sweep = if r.exp.sweep && r.conditions.contains(&Condition::SequentialEwc) {
        Some(run_sweep(r, &r.exp.lambda_grid, &data)?)
    } else {
        None
    };
    let rows = write_summary(&root)?;
    let mut outputs = vec![root.join("summary.csv")];
    let metrics: Vec<String> = DEFAULT_METRICS
        .iter()
        .filter(|m| rows.iter().any(|r| format!("{}.{}", r.language, r.metric) == **m))
        .map(|m| m.to_string())
        .collect();
    let distinct: std::collections::BTreeSet<&str> = rows.iter().map(|r| r.condition.as_str()).collect();
    if distinct.len() >= 2 {
        for m in &metrics {
            let c = compare_conditions(&rows, m, None, None)?;
            let (j, t) =
                (root.join("compare").join(format!("{m}.json")), root.join("compare").join(format!("{m}.txt")));
            write_json(&j, &c)?;
            write_text(&t, &render_comparison(&c))?;
            outputs.extend([j, t]);
        }
        outputs.extend(emit_plots(&root, "learning-curves", &metrics, r.train.epochs)?);
    }
    if sweep.is_some() {
        outputs.extend(emit_plots(&root, "lambda-tradeoff", &[], r.train.epochs)?);
    }
    Ok(ExperimentReport { root, runs, sweep, outputs })
}
