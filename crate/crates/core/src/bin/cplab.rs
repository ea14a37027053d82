use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cplab::eval::{
    finetune_classifier, minimal_pair_accuracy, ppl_per_char, read_labeled, task_metric, ClassifierHead, EvalResult,
};
use cplab::model::{LanguageModel, Objective};
use cplab::runner::{
    self, compare_conditions, data_dir, emit_plots, lint, prepare_data, read_summary, render_comparison, run_dir,
    run_experiment, run_sweep, train_run, write_json, ExperimentConfig, Resolved, RunManifest, RunRequest, LANGUAGES,
};
use cplab::schedule::{latest_checkpoint, Condition};
use cplab::{rng, Error, Result};

#[derive(Parser)]
#[command(name = "cplab", version, about = "Bilingual exposure experiments for small transformer language models")]
struct Cli {
    /// Log verbosity: -v info, -vv debug.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment TOML file, or `preset:<name>`.
    config: String,
    /// Allow runs above the desk-scale limits.
    #[arg(long)]
    large_scale: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate or verify the corpora, tokenizer and minimal pairs.
    GenerateData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Seeds to prepare; defaults to the config's seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Train one (condition, seed) run, resuming if possible.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        condition: Condition,
        #[arg(long)]
        seed: u64,
        /// EWC strength override; the run is stored with the sweep runs.
        #[arg(long)]
        lambda: Option<f64>,
        /// Stop after this phase:epoch checkpoint.
        #[arg(long, value_parser = parse_phase_epoch)]
        stop_after: Option<(usize, usize)>,
    },
    /// Evaluate a run's checkpoint on a data split and optional classifier task.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        run: String,
        #[arg(long, default_value = "valid")]
        split: String,
        /// Checkpoint name such as p2-e6; defaults to the latest.
        #[arg(long)]
        checkpoint: Option<String>,
        /// Labeled `text TAB label` training file for a classifier task.
        #[arg(long, requires = "classifier_heldout")]
        classifier_train: Option<PathBuf>,
        #[arg(long, requires = "classifier_train")]
        classifier_heldout: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        /// Task name selecting the reported metric, e.g. cola or sst2.
        #[arg(long, default_value = "sst2")]
        task: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train sequential-ewc across a grid of λ values.
    SweepLambda {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated λ values; defaults to the config's grid.
        #[arg(long, value_delimiter = ',')]
        grid: Vec<f64>,
    },
    /// Compare conditions on one metric across seeds.
    Compare {
        /// Experiment directory holding summary.csv.
        root: PathBuf,
        /// Metric as language.name, e.g. l1.ce.
        #[arg(long)]
        metric: String,
        /// Inclusive epoch range lo..hi.
        #[arg(long, value_parser = parse_range)]
        epochs: Option<(usize, usize)>,
        #[arg(long, value_delimiter = ',')]
        conditions: Vec<String>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Write SVG figures and their CSV data.
    Plot {
        root: PathBuf,
        #[arg(long)]
        figure: String,
        #[arg(long = "metric")]
        metrics: Vec<String>,
    },
    /// Run a whole experiment: data, every run, sweep, summary and plots.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Check that every file in the run directories is listed in a manifest.
    Lint { root: PathBuf },
    /// Print the resolved configuration.
    ShowConfig {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn parse_phase_epoch(s: &str) -> std::result::Result<(usize, usize), String> {
    let (p, e) = s.split_once(':').ok_or("expected phase:epoch")?;
    Ok((p.parse().map_err(|_| "bad phase")?, e.parse().map_err(|_| "bad epoch")?))
}

fn parse_range(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once("..").ok_or("expected lo..hi")?;
    Ok((a.parse().map_err(|_| "bad lower bound")?, b.parse().map_err(|_| "bad upper bound")?))
}

fn resolve(a: &ConfigArgs) -> Result<Resolved> {
    let mut c = ExperimentConfig::load(&a.config)?;
    c.apply_env()?;
    c.large_scale |= a.large_scale;
    c.resolve()
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("value serializes"));
}

fn epochs_per_phase(root: &Path) -> Result<usize> {
    let text = std::fs::read_to_string(root.join("experiment.toml"))
        .map_err(|e| Error::io(root.join("experiment.toml"), e))?;
    Ok(ExperimentConfig::parse(&text)?.epochs)
}

fn evaluate(
    r: &Resolved,
    run: &str,
    split: &str,
    checkpoint: Option<&str>,
    classifier: Option<(&Path, &Path, usize, &str)>,
) -> Result<Vec<EvalResult>> {
    let root = r.root();
    let dir = [run_dir(&root, run, false), run_dir(&root, run, true)]
        .into_iter()
        .find(|d| d.is_dir())
        .ok_or_else(|| Error::usage(format!("no run {run:?} under {}", root.display())))?;
    let manifest = RunManifest::load(&dir)?;
    let ckpt = match checkpoint {
        Some(name) => dir.join("checkpoints").join(name),
        None => {
            latest_checkpoint(&dir.join("checkpoints"))?
                .ok_or_else(|| Error::usage(format!("{run} has no checkpoint")))?
                .0
        }
    };
    let (phase, epoch) = ckpt
        .file_name()
        .and_then(|n| n.to_str())
        .and_then(|n| n.strip_prefix('p'))
        .and_then(|n| n.split_once("-e"))
        .and_then(|(p, e)| Some((p.parse::<usize>().ok()?, e.parse::<usize>().ok()?)))
        .ok_or_else(|| Error::usage(format!("{} is not a checkpoint directory", ckpt.display())))?;
    let global_epoch = (phase - 1) * manifest.epochs_per_phase + epoch;
    let m: LanguageModel<f32> = LanguageModel::load(&ckpt.join("model"))?;
    let d = prepare_data(r, manifest.seed, &data_dir(&root, manifest.seed))?;
    let sets = match split {
        "valid" => &d.valid,
        "test" => &d.test,
        other => return Err(Error::usage(format!("unknown split {other:?}; use valid or test"))),
    };
    let mut meta = BTreeMap::from([
        ("run-id".to_string(), manifest.run_id.clone()),
        ("checkpoint".to_string(), ckpt.file_name().unwrap_or_default().to_string_lossy().into_owned()),
        ("sentence-wrappers".to_string(), "none".to_string()),
        (
            "pair-scoring".to_string(),
            match m.config.objective {
                Objective::Causal => "sum-log-prob",
                Objective::Masked => "pseudo-log-likelihood",
            }
            .to_string(),
        ),
    ]);
    let result =
        |metric: &str, value: f64, language: &str, n_items: usize, meta: &BTreeMap<String, String>| EvalResult {
            metric: metric.into(),
            value,
            split: split.into(),
            language: language.into(),
            epoch: global_epoch,
            n_items,
            metadata: meta.clone(),
        };
    let mask_seed = rng::derive(manifest.seed, &["eval-mask"]);
    let mut out = Vec::new();
    for (i, lang) in LANGUAGES.iter().enumerate() {
        let p = ppl_per_char(&m, &sets[i], mask_seed, r.exp.eval.batch_size)?;
        out.push(result("ce", p.ce, lang, p.scored_tokens, &meta));
        out.push(result("ppl-per-char", p.ppl_per_char, lang, sets[i].len(), &meta));
        if !d.pairs[i].is_empty() {
            let a = minimal_pair_accuracy(&m, &d.tok, &d.pairs[i])?;
            let mut pm = meta.clone();
            pm.insert("skipped".into(), a.skipped.to_string());
            for (ph, acc) in &a.per_phenomenon {
                pm.insert(format!("accuracy.{ph}"), acc.to_string());
            }
            out.push(result("pair-accuracy", a.accuracy, lang, a.scored, &pm));
        }
    }
    if let Some((train, heldout, classes, task)) = classifier {
        let kind = task_metric(task)?;
        let head = ClassifierHead {
            hidden: vec![m.config.n_embd],
            classes,
            seed: rng::derive(manifest.seed, &["classifier"]),
        };
        let res = finetune_classifier(&m, &d.tok, &read_labeled(train)?, &read_labeled(heldout)?, &head, &r.train)?;
        meta.insert("task".into(), task.into());
        let value = match kind.tag() {
            "mcc" => res.mcc,
            "f1" => res.f1,
            _ => res.accuracy,
        };
        out.push(result(kind.tag(), value, "task", res.heldout, &meta));
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenerateData { cfg, seeds } => {
            let r = resolve(&cfg)?;
            runner::check_disk(&r)?;
            let seeds = if seeds.is_empty() { r.exp.seeds.clone() } else { seeds };
            for s in seeds {
                let d = prepare_data(&r, s, &data_dir(&r.root(), s))?;
                println!(
                    "seed {s}: {} blocks per language, {} / {} training tokens, tokenizer {}",
                    d.record.train_blocks,
                    d.record.train_tokens[0],
                    d.record.train_tokens[1],
                    d.record.tokenizer_fingerprint
                );
            }
        }
        Cmd::Train { cfg, condition, seed, lambda, stop_after } => {
            let r = resolve(&cfg)?;
            runner::check_disk(&r)?;
            let d = prepare_data(&r, seed, &data_dir(&r.root(), seed))?;
            let req = RunRequest { lambda, stop_after, ..RunRequest::new(condition, seed) };
            let rep = train_run(&r, &d, &req)?;
            println!("{}: {:?} ({})", rep.run_id, rep.status, rep.dir.display());
        }
        Cmd::Evaluate { cfg, run, split, checkpoint, classifier_train, classifier_heldout, classes, task, out } => {
            let r = resolve(&cfg)?;
            let cls = match (&classifier_train, &classifier_heldout) {
                (Some(a), Some(b)) => Some((a.as_path(), b.as_path(), classes, task.as_str())),
                _ => None,
            };
            let res = evaluate(&r, &run, &split, checkpoint.as_deref(), cls)?;
            match out {
                Some(p) => write_json(&p, &res)?,
                None => print_json(&res),
            }
        }
        Cmd::SweepLambda { cfg, grid } => {
            let r = resolve(&cfg)?;
            runner::check_disk(&r)?;
            let grid = if grid.is_empty() { r.exp.lambda_grid.clone() } else { grid };
            let data = runner::prepare_all(&r)?;
            let t = run_sweep(&r, &grid, &data)?;
            print!("{}", t.to_csv());
            println!("crossover lambda: {}", t.crossover().lambda);
        }
        Cmd::Compare { root, metric, epochs, conditions, json } => {
            let rows = read_summary(&root)?;
            let sel = (!conditions.is_empty()).then_some(conditions.as_slice());
            let c = compare_conditions(&rows, &metric, epochs, sel)?;
            if let Some(p) = json {
                write_json(&p, &c)?;
            }
            print!("{}", render_comparison(&c));
        }
        Cmd::Plot { root, figure, metrics } => {
            let e = epochs_per_phase(&root)?;
            for p in emit_plots(&root, &figure, &metrics, e)? {
                println!("{}", p.display());
            }
        }
        Cmd::Run { cfg } => {
            let r = resolve(&cfg)?;
            let rep = run_experiment(&r)?;
            for x in &rep.runs {
                println!("{}: {:?}", x.run_id, x.status);
            }
            if let Some(t) = &rep.sweep {
                println!("crossover lambda: {}", t.crossover().lambda);
            }
            for p in &rep.outputs {
                println!("{}", p.display());
            }
        }
        Cmd::Lint { root } => {
            let rep = lint(&root)?;
            for p in &rep.orphans {
                println!("orphan: {}", p.display());
            }
            for p in &rep.broken {
                println!("broken: {}", p.display());
            }
            if !rep.is_clean() {
                return Err(Error::Abort(format!(
                    "{} orphan and {} broken artifacts",
                    rep.orphans.len(),
                    rep.broken.len()
                )));
            }
            println!("clean");
        }
        Cmd::ShowConfig { cfg } => {
            let r = resolve(&cfg)?;
            print_json(&r);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    // Exit quietly when piped into `head`.
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
