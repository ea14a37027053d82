use std::collections::BTreeMap;

use super::*;
use crate::ewc::{EwcConfig, FisherMode};
use crate::model::{LanguageModel, ModelConfig, Objective};
use crate::tensor::ParameterVector;
use crate::tokenizer::Tokenizer;

fn dataset(tok: &Tokenizer, text: &str, lang: &str, block: usize) -> BlockDataset {
    BlockDataset::from_text(tok, text, block, lang).unwrap()
}

fn toy_sets(blocks: usize) -> (BlockDataset, BlockDataset) {
    let tok = Tokenizer::bytes_only();
    let l1: String = "ab ".repeat(blocks * 8).chars().take(blocks * 8).collect();
    let l2: String = "cdd".repeat(blocks * 8).chars().take(blocks * 8).collect();
    (dataset(&tok, &l1, "l1", 8), dataset(&tok, &l2, "l2", 8))
}

fn cfg(batch: usize, accum: usize, epochs: usize) -> TrainConfig {
    TrainConfig { batch_size: batch, grad_accum: accum, epochs, ..TrainConfig::preset("desk").unwrap() }
}

#[test]
fn condition_tags_roundtrip() {
    for c in Condition::ALL {
        assert_eq!(c.tag().parse::<Condition>().unwrap(), c);
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(json, format!("\"{}\"", c.tag()));
    }
    assert!(matches!("sequentialish".parse::<Condition>(), Err(Error::Config(_))));
}

#[test]
fn presets_carry_table_values() {
    let c1 = TrainConfig::preset("gpt2-c1").unwrap();
    assert_eq!((c1.learning_rate, c1.warmup_ratio, c1.grad_accum, c1.batch_size), (1e-3, 0.07, 16, 4));
    assert_eq!((c1.beta1, c1.beta2, c1.adam_eps, c1.weight_decay, c1.max_grad_norm), (0.9, 0.999, 1e-8, 0.0, 1.0));
    let c3 = TrainConfig::preset("gpt2-c3").unwrap();
    assert_eq!((c3.learning_rate, c3.warmup_ratio, c3.grad_accum), (8e-3, 0.10, 32));
    let r2 = TrainConfig::preset("roberta-c2").unwrap();
    assert_eq!((r2.learning_rate, r2.warmup_ratio, r2.grad_accum, r2.mlm_probability), (3.88e-4, 0.10, 32, Some(0.15)));
    assert_eq!(TrainConfig::preset("roberta-c5").unwrap().grad_accum, 1);
    assert!(TrainConfig::preset("gpt2-c6").is_err());
    for bad in [
        TrainConfig { warmup_ratio: 1.0, ..c1.clone() },
        TrainConfig { epochs: 0, ..c1.clone() },
        TrainConfig { learning_rate: 0.0, ..c1.clone() },
        TrainConfig { grad_accum: 0, ..c1.clone() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}

#[test]
fn warmup_peaks_at_seventy_of_a_thousand() {
    let s = LinearSchedule::new(1.0, 0.07, 1000);
    assert_eq!(s.warmup, 70);
    let lrs: Vec<f64> = (0..=1000).map(|t| s.lr(t)).collect();
    let peak = lrs.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    assert_eq!(peak, 70);
    assert_eq!(lrs[70], 1.0);
    assert_eq!((lrs[0], lrs[1000]), (0.0, 0.0));
    // Piecewise linear: constant differences on each side of the peak.
    for w in lrs[..=70].windows(3) {
        assert!(((w[1] - w[0]) - (w[2] - w[1])).abs() < 1e-12);
    }
    for w in lrs[70..].windows(3) {
        assert!(((w[1] - w[0]) - (w[2] - w[1])).abs() < 1e-12);
    }
    assert_eq!(LinearSchedule::new(2.0, 0.0, 10).lr(0), 2.0);
}

fn oracle_visits(c: Condition, b: usize, e: usize) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    let (l1, l2) = match c {
        Condition::Monolingual => (2 * e * b, 0),
        Condition::SequentialInterleaved => (2 * e * b, e * b),
        _ => (e * b, e * b),
    };
    if l1 > 0 {
        m.insert("l1".to_string(), l1);
    }
    if l2 > 0 {
        m.insert("l2".to_string(), l2);
    }
    m
}

#[test]
fn plan_exposure_counts() {
    let (l1, l2) = toy_sets(8);
    let (m1, _) = toy_sets(8);
    let mut mono_b = m1.clone();
    mono_b.blocks.reverse();
    for c in Condition::ALL {
        let sets = if c == Condition::Monolingual { [&l1, &mono_b] } else { [&l1, &l2] };
        let plan = build_plan(c, sets, &cfg(3, 2, 2)).unwrap();
        assert_eq!(plan.visits(), oracle_visits(c, 8, 2), "{c}");
        let seq_phases = if c == Condition::Interleaved { 1 } else { 2 };
        assert_eq!(plan.phases.len(), seq_phases);
        assert_eq!(plan.phases.iter().filter(|p| p.ewc_active).count(), usize::from(c == Condition::SequentialEwc));
        if c == Condition::SequentialEwc {
            assert!(plan.phases[1].ewc_active);
        }
        for ph in &plan.phases {
            for ep in 1..=ph.epochs {
                let n = plan.epoch_batches(ph.index, ep).len() as u64;
                assert_eq!(n.div_ceil(2), ph.steps_per_epoch);
            }
        }
    }
    let one = build_plan(Condition::Sequential, [&l1, &l2], &cfg(2, 1, 2)).unwrap();
    let inter = build_plan(Condition::Interleaved, [&l1, &l2], &cfg(2, 1, 2)).unwrap();
    assert_eq!(inter.total_steps(), one.total_steps());
    assert_eq!(inter.phases[0].steps(), 2 * one.phases[0].steps());
}

#[test]
fn block_order_is_shared_across_conditions() {
    let (l1, l2) = toy_sets(12);
    let c = cfg(2, 1, 3);
    let seq = build_plan(Condition::Sequential, [&l1, &l2], &c).unwrap();
    let inter = build_plan(Condition::Interleaved, [&l1, &l2], &c).unwrap();
    let si = build_plan(Condition::SequentialInterleaved, [&l1, &l2], &c).unwrap();
    for e in 1..=3 {
        let only = |v: Vec<Batch>, s: usize| v.into_iter().filter(|b| b.source == s).collect::<Vec<_>>();
        assert_eq!(only(inter.epoch_batches(1, e), 1), seq.epoch_batches(2, e));
        assert_eq!(only(inter.epoch_batches(1, e), 0), seq.epoch_batches(1, e));
        assert_eq!(only(si.epoch_batches(2, e), 0), si.epoch_batches(1, e));
        let first = &inter.epoch_batches(1, e)[0];
        assert_eq!(first.source, 0);
    }
    assert_ne!(seq.epoch_batches(1, 1), seq.epoch_batches(1, 2));
}

#[test]
fn plan_errors() {
    let (l1, l2) = toy_sets(8);
    let (short, _) = toy_sets(6);
    let c = cfg(2, 1, 1);
    assert!(matches!(build_plan(Condition::Sequential, [&l1, &short], &c), Err(Error::Config(_))));
    assert!(matches!(build_plan(Condition::Monolingual, [&l1, &l2], &c), Err(Error::Config(_))));
    assert!(matches!(build_plan(Condition::Interleaved, [&l1, &l1], &c), Err(Error::Config(_))));
}

fn params(values: &[f64], grads: &[f64]) -> ParameterVector<f64> {
    let mut p = ParameterVector::new();
    p.push("x", crate::tensor::Tensor::vector(values.to_vec())).unwrap();
    p.segments_mut()[0].grad = grads.to_vec();
    p
}

#[test]
fn adamw_matches_textbook_form() {
    let hyper = AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 };
    let mut p = params(&[0.5, -1.0, 2.0], &[0.0; 3]);
    let mut opt = AdamW::new(3, hyper.clone());
    let (mut x, mut m, mut v) = (vec![0.5, -1.0, 2.0], vec![0.0; 3], vec![0.0; 3]);
    let grads = [[0.1, -0.2, 0.3], [1.0, 0.5, -0.25], [-0.3, 0.0, 2.0]];
    for (t, g) in grads.iter().enumerate() {
        let lr = 0.01 * (t + 1) as f64;
        p.segments_mut()[0].grad = g.to_vec();
        opt.step(&mut p, lr).unwrap();
        let t = (t + 1) as i32;
        for i in 0..3 {
            m[i] = 0.9 * m[i] + 0.1 * g[i];
            v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
            let mhat = m[i] / (1.0 - 0.9f64.powi(t));
            let vhat = v[i] / (1.0 - 0.999f64.powi(t));
            let eps_hat = 1e-8 / (1.0 - 0.999f64.powi(t)).sqrt();
            x[i] -= lr * mhat / (vhat.sqrt() + eps_hat);
            x[i] *= 1.0 - lr * 0.01;
        }
    }
    for (a, b) in p.segments()[0].value.data().iter().zip(&x) {
        assert!((a - b).abs() < 1e-12, "{a} {b}");
    }
    let dir = tempfile::tempdir().unwrap();
    opt.save(&dir.path().join("opt")).unwrap();
    assert_eq!(AdamW::load(&dir.path().join("opt"), 3).unwrap(), opt);
    assert!(AdamW::load(&dir.path().join("opt"), 4).is_err());
}

#[test]
fn clipping_scales_to_max_norm() {
    let mut p = params(&[0.0; 2], &[3.0, 4.0]);
    assert_eq!(clip_grad_norm(&mut p, 1.0), 5.0);
    let g = &p.segments()[0].grad;
    assert!(((g[0] * g[0] + g[1] * g[1]).sqrt() - 5.0 / (5.0 + 1e-6)).abs() < 1e-12);
    let mut q = params(&[0.0; 2], &[0.3, 0.4]);
    clip_grad_norm(&mut q, 1.0);
    assert_eq!(q.segments()[0].grad, vec![0.3, 0.4]);
}

fn toy_model(fp: &str) -> LanguageModel<f64> {
    let cfg = ModelConfig {
        n_layer: 1,
        n_head: 2,
        n_embd: 8,
        n_positions: 8,
        vocab_size: 258,
        objective: Objective::Causal,
        mlm_probability: None,
        dropout: 0.1,
        layer_norm_eps: 1e-5,
        seed: 3,
    };
    LanguageModel::init(cfg, fp).unwrap()
}

fn train(
    c: Condition,
    lambda: Option<f64>,
    dir: Option<std::path::PathBuf>,
    stop: Option<(usize, usize)>,
) -> (Vec<MetricRecord>, LanguageModel<f64>, TrainOutcome) {
    let (l1, l2) = toy_sets(8);
    let tc = TrainConfig { learning_rate: 1e-2, ..cfg(2, 2, 2) };
    let plan = build_plan(c, [&l1, &l2], &tc).unwrap();
    let mut m = toy_model(&l1.fingerprint);
    let mut sink = MemorySink::default();
    let mut eval = |m: &LanguageModel<f64>| -> Result<Vec<(String, String, f64)>> {
        let mut r = rng::stream(0, &["eval"]);
        Ok(vec![
            ("validation".into(), "l1.ce".into(), m.loss(&l1.blocks, &mut r, false)?),
            ("validation".into(), "l2.ce".into(), m.loss(&l2.blocks, &mut r, false)?),
        ])
    };
    let ewc = lambda.map(|lambda| EwcContext {
        cfg: EwcConfig { lambda, samples: 2, subset_blocks: 4, mode: FisherMode::MonteCarlo, ..Default::default() },
        data: Some(&l1),
        snapshot: None,
    });
    let mut run = TrainRun {
        run_id: "t".into(),
        checkpoint_dir: dir,
        ewc,
        sink: &mut sink,
        eval: Some(&mut eval),
        stop_after: stop,
    };
    let out = run_training(&mut m, &plan, [&l1, &l2], &tc, &mut run).unwrap();
    (sink.records, m, out)
}

fn series(r: &[MetricRecord], metric: &str) -> Vec<f64> {
    r.iter().filter(|x| x.metric == metric).map(|x| x.value).collect()
}

#[test]
fn training_reduces_loss_and_is_deterministic() {
    let (a, ma, out) = train(Condition::Interleaved, None, None, None);
    let (b, mb, _) = train(Condition::Interleaved, None, None, None);
    assert_eq!(a, b);
    assert_eq!(ma, mb);
    assert!(out.finished);
    let l1 = series(&a, "l1.ce");
    assert!(l1.last().unwrap() < &(258f64).ln());
    assert_eq!(out.steps, 2 * 4);
    assert!(a.iter().filter(|r| r.metric == "grad-norm").all(|r| r.value.is_finite()));
}

#[test]
fn lr_restarts_at_fresh_boundary() {
    let (r, _, _) = train(Condition::Sequential, None, None, None);
    let lr: Vec<(usize, f64)> = r.iter().filter(|x| x.metric == "lr").map(|x| (x.phase, x.value)).collect();
    let p1: Vec<f64> = lr.iter().filter(|x| x.0 == 1).map(|x| x.1).collect();
    let p2: Vec<f64> = lr.iter().filter(|x| x.0 == 2).map(|x| x.1).collect();
    assert_eq!(p1, p2);
    assert_eq!(p1[0], 0.0);
}

#[test]
fn ewc_with_zero_lambda_reproduces_sequential() {
    let (seq, mseq, _) = train(Condition::Sequential, None, None, None);
    let (ewc, mewc, out) = train(Condition::SequentialEwc, Some(0.0), None, None);
    let (a, b) = (series(&seq, "ce"), series(&ewc, "ce"));
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-6);
    }
    assert_eq!(mseq.params, mewc.params);
    assert!(out.fisher.is_some());
    let (strong, _, _) = train(Condition::SequentialEwc, Some(1e3), None, None);
    assert!(series(&strong, "ewc-penalty").iter().all(|&p| p >= 0.0));
    assert_ne!(series(&strong, "l1.ce"), series(&seq, "l1.ce"));
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    for c in [Condition::Sequential, Condition::SequentialEwc] {
        let lambda = (c == Condition::SequentialEwc).then_some(10.0);
        let full_dir = tempfile::tempdir().unwrap();
        let (full, mfull, _) = train(c, lambda, Some(full_dir.path().to_path_buf()), None);
        for stop in [(1, 1), (1, 2), (2, 1)] {
            let dir = tempfile::tempdir().unwrap();
            let (first, _, out) = train(c, lambda, Some(dir.path().to_path_buf()), Some(stop));
            assert!(!out.finished);
            let (rest, m, out) = train(c, lambda, Some(dir.path().to_path_buf()), None);
            assert_eq!(out.resumed_from, Some(stop));
            let joined: Vec<MetricRecord> = first.into_iter().chain(rest).collect();
            assert_eq!(joined.len(), full.len());
            for (a, b) in joined.iter().zip(&full) {
                assert_eq!((a.phase, a.epoch, a.step, &a.metric), (b.phase, b.epoch, b.step, &b.metric));
                assert!((a.value - b.value).abs() <= 1e-6, "{c} {stop:?} {a:?} {b:?}");
            }
            assert_eq!(m.params, mfull.params);
        }
        assert!(full_dir.path().join("p2-e2/state.json").is_file());
    }
}

struct FailingSink;

impl MetricsSink for FailingSink {
    fn emit(&mut self, _: MetricRecord) -> Result<()> {
        Err(Error::Abort("sink closed".into()))
    }
}

#[test]
fn failures_abort() {
    let (l1, l2) = toy_sets(8);
    let tc = cfg(2, 1, 1);
    let plan = build_plan(Condition::Sequential, [&l1, &l2], &tc).unwrap();

    let mut m = toy_model(&l1.fingerprint);
    let mut sink = FailingSink;
    let mut run =
        TrainRun { run_id: "x".into(), checkpoint_dir: None, ewc: None, sink: &mut sink, eval: None, stop_after: None };
    assert!(matches!(run_training(&mut m, &plan, [&l1, &l2], &tc, &mut run), Err(Error::Abort(_))));

    let dir = tempfile::tempdir().unwrap();
    let mut m = toy_model(&l1.fingerprint);
    m.params.segments_mut()[0].value.data_mut()[b'a' as usize * 8] = f64::NAN;
    let mut sink = MemorySink::default();
    let mut run = TrainRun {
        run_id: "x".into(),
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ewc: None,
        sink: &mut sink,
        eval: None,
        stop_after: None,
    };
    match run_training(&mut m, &plan, [&l1, &l2], &tc, &mut run) {
        Err(Error::Abort(msg)) => assert!(msg.contains("diagnostic checkpoint"), "{msg}"),
        other => panic!("{other:?}"),
    }
    assert!(std::fs::read_dir(dir.path()).unwrap().any(|e| e
        .unwrap()
        .file_name()
        .to_string_lossy()
        .starts_with("abort-")));

    let mut m = toy_model("other");
    let mut sink = MemorySink::default();
    let mut run =
        TrainRun { run_id: "x".into(), checkpoint_dir: None, ewc: None, sink: &mut sink, eval: None, stop_after: None };
    assert!(matches!(run_training(&mut m, &plan, [&l1, &l2], &tc, &mut run), Err(Error::Usage(_))));

    let ewc_plan = build_plan(Condition::SequentialEwc, [&l1, &l2], &tc).unwrap();
    let mut m = toy_model(&l1.fingerprint);
    let mut run =
        TrainRun { run_id: "x".into(), checkpoint_dir: None, ewc: None, sink: &mut sink, eval: None, stop_after: None };
    assert!(matches!(run_training(&mut m, &ewc_plan, [&l1, &l2], &tc, &mut run), Err(Error::Config(_))));
}

#[test]
fn jsonl_and_channel_sinks() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    let rec = MetricRecord {
        run_id: "r".into(),
        condition: "sequential".into(),
        phase: 1,
        epoch: 2,
        step: 3,
        split: "validation".into(),
        metric: "l1.ce".into(),
        value: 0.5,
    };
    {
        let mut s = JsonlSink::append(&path).unwrap();
        s.emit(rec.clone()).unwrap();
        s.flush().unwrap();
    }
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.contains("\"run-id\":\"r\"") && text.contains("\"metric-name\":\"l1.ce\""));
    assert_eq!(serde_json::from_str::<MetricRecord>(text.trim()).unwrap(), rec);
    let (tx, rx) = std::sync::mpsc::channel();
    let handle = std::thread::spawn(move || rx.iter().count());
    let mut s = ChannelSink(tx);
    s.emit(rec).unwrap();
    drop(s);
    assert_eq!(handle.join().unwrap(), 1);
}
