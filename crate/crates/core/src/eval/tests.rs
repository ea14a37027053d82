use proptest::prelude::*;

use super::*;
use crate::corpus::{GrammarConfig, SyntheticGrammar};
use crate::model::hand::{bigram_entropy, bigram_model};
use crate::model::ModelConfig;
use crate::rng;
use crate::schedule::TrainConfig;
use crate::tokenizer::TrainOptions;

fn uniform(objective: Objective, vocab: usize, fp: &str) -> LanguageModel<f64> {
    let cfg = ModelConfig {
        n_layer: 1,
        n_head: 1,
        n_embd: 4,
        n_positions: 16,
        vocab_size: vocab,
        objective,
        mlm_probability: (objective == Objective::Masked).then_some(0.3),
        dropout: 0.0,
        layer_norm_eps: 1e-5,
        seed: 0,
    };
    let mut m = LanguageModel::init(cfg, fp).unwrap();
    m.params.get_mut("wte").unwrap().data_mut().iter_mut().for_each(|x| *x = 0.0);
    m
}

#[test]
fn uniform_byte_model_has_closed_form_ppl() {
    let tok = Tokenizer::bytes_only();
    let text: String = (0..400).map(|i| (b'a' + (i * 7 % 26) as u8) as char).collect();
    let data = BlockDataset::from_text(&tok, &text, 16, "x").unwrap();
    for obj in [Objective::Causal, Objective::Masked] {
        let m = uniform(obj, 256, &tok.fingerprint());
        let p = ppl_per_char(&m, &data, 7, 8).unwrap();
        assert!((p.ppl_per_char - 256.0).abs() < 1e-9 * 256.0, "{obj:?} {}", p.ppl_per_char);
        assert!(p.ppl_per_char >= 1.0);
    }
    // Every token spans two characters.
    let pairs = "ab".repeat(300);
    let tok2 = Tokenizer::train(&pairs, TrainOptions { vocab_size: 257, min_frequency: 1, seed: 0, pre_split: false })
        .unwrap();
    let data2 = BlockDataset::from_text(&tok2, &pairs, 10, "x").unwrap();
    assert!(data2.blocks.iter().flatten().all(|&t| tok2.token_chars(t) == 2));
    assert_eq!(tok2.vocab_size(), 259);
    let m = uniform(Objective::Causal, 259, &tok2.fingerprint());
    let p = ppl_per_char(&m, &data2, 0, 4).unwrap();
    assert!((p.ppl_per_char - 259f64.sqrt()).abs() < 1e-9 * 16.0);
}

#[test]
fn byte_uniform_reference_is_tokenizer_invariant() {
    let text = "the cat sat on the mat and the cat ate the rat ".repeat(20);
    let a = Tokenizer::bytes_only();
    let b = Tokenizer::train(&text, TrainOptions { vocab_size: 300, ..Default::default() }).unwrap();
    let ppl = |tok: &Tokenizer| {
        let ids = tok.encode(&text);
        let nll: f64 = ids.iter().map(|&t| tok.token_bytes(t).unwrap().len() as f64 * 256f64.ln()).sum();
        ppl_from_nll(nll, text.chars().count() as u64).unwrap()
    };
    assert!(b.encode(&text).len() < a.encode(&text).len());
    assert!((ppl(&a) - ppl(&b)).abs() < 1e-9);
    assert!((ppl(&a) - 256.0).abs() < 1e-9);
    assert!(matches!(ppl_from_nll(1.0, 0), Err(Error::Usage(_))));
}

proptest! {
    #[test]
    fn ppl_is_monotone_in_nll(a in 0.0f64..1e4, d in 1e-3f64..1e3, chars in 1u64..100_000) {
        prop_assert!(ppl_from_nll(a, chars).unwrap() < ppl_from_nll(a + d, chars).unwrap());
    }
}

fn chain_table() -> Vec<Vec<f64>> {
    vec![vec![0.0, 0.7, 0.3, 0.0], vec![0.2, 0.0, 0.0, 0.8], vec![0.5, 0.5, 0.0, 0.0], vec![0.0, 0.0, 0.6, 0.4]]
}

fn sample_chain(table: &[Vec<f64>], n: usize, seed: u64) -> Vec<u32> {
    let mut r = rng::stream(seed, &["chain"]);
    let mut x = 0usize;
    let mut out = vec![0u32];
    for _ in 1..n {
        let u: f64 = rand::Rng::random(&mut r);
        let mut acc = 0.0;
        let mut next = table[x].len() - 1;
        for (j, &p) in table[x].iter().enumerate() {
            acc += p;
            if u < acc {
                next = j;
                break;
            }
        }
        x = next;
        out.push(x as u32);
    }
    out
}

#[test]
fn hand_bigram_ppl_matches_analytic_entropy() {
    let table = chain_table();
    let m = bigram_model(&table, 32).unwrap();
    let tok = Tokenizer::bytes_only();
    let ids = sample_chain(&table, 32 * 400, 1);
    let mut data = BlockDataset::from_ids(&tok, &ids, ids.len() as u64, 32, "x").unwrap();
    data.fingerprint = m.fingerprint.clone();
    let p = ppl_per_char(&m, &data, 0, 16).unwrap();
    // Exact oracle: sum of table log-probabilities over the scored transitions.
    let nll: f64 =
        data.blocks.iter().flat_map(|b| b.windows(2)).map(|w| -table[w[0] as usize][w[1] as usize].ln()).sum();
    let chars = (data.len() * 31) as f64;
    assert!((p.ppl_per_char.ln() - nll / chars).abs() < 1e-6, "{} {}", p.ppl_per_char.ln(), nll / chars);
    // Stationary distribution by power iteration.
    let mut pi = vec![0.25; 4];
    for _ in 0..1000 {
        let mut next = vec![0.0; 4];
        for i in 0..4 {
            for j in 0..4 {
                next[j] += pi[i] * table[i][j];
            }
        }
        pi = next;
    }
    let h = bigram_entropy(&table, &pi);
    assert!((p.ppl_per_char / h.exp() - 1.0).abs() < 0.02, "{} vs {}", p.ppl_per_char, h.exp());
}

#[test]
fn accuracy_scoring_rules() {
    let s = [(1.0, 0.0), (0.0, 0.0), (-1.0, 2.0), (5.0, 4.0)];
    let a = accuracy_from_scores(&s, &["a", "a", "b", "b"]).unwrap();
    assert_eq!(a.accuracy, 0.5);
    assert_eq!(a.ties, 1);
    assert_eq!(a.per_phenomenon["a"], 0.5);
    assert_eq!(a.per_phenomenon["b"], 0.5);
    assert!(accuracy_from_scores(&[], &[]).is_err());
}

proptest! {
    #[test]
    fn accuracy_invariant_under_monotone_transform(scores in proptest::collection::vec((-50.0f64..0.0, -50.0f64..0.0), 1..200)) {
        let ph: Vec<&str> = scores.iter().enumerate().map(|(i, _)| if i % 3 == 0 { "x" } else { "y" }).collect();
        let a = accuracy_from_scores(&scores, &ph).unwrap();
        let t: Vec<(f64, f64)> = scores.iter().map(|&(g, b)| (2.0 * g + 7.0, 2.0 * b + 7.0)).collect();
        let b = accuracy_from_scores(&t, &ph).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn bigram_model_solves_zero_probability_violations() {
    let table = chain_table();
    let m = bigram_model(&table, 8).unwrap();
    let tok = Tokenizer::bytes_only();
    let mut m = m;
    m.fingerprint = tok.fingerprint();
    let s = |ids: &[u32]| ids.iter().map(|&i| char::from(i as u8)).collect::<String>();
    let pairs = vec![
        MinimalPair { good: s(&[0, 1, 3, 2]), bad: s(&[0, 1, 2, 2]), phenomenon: "p".into() },
        MinimalPair { good: s(&[2, 0, 2, 1]), bad: s(&[2, 0, 0, 1]), phenomenon: "p".into() },
        MinimalPair { good: s(&[3, 3, 2, 0]), bad: s(&[3, 1, 2, 0]), phenomenon: "q".into() },
        MinimalPair { good: s(&[0; 9]), bad: s(&[1; 9]), phenomenon: "q".into() },
    ];
    let a = minimal_pair_accuracy(&m, &tok, &pairs).unwrap();
    assert_eq!(a.accuracy, 1.0);
    assert_eq!((a.scored, a.skipped), (3, 1));
}

#[test]
fn metric_definitions() {
    let truth = [0, 1, 0, 1, 1, 0];
    assert_eq!(mcc(&truth, &truth, 2), 1.0);
    let flipped: Vec<usize> = truth.iter().map(|t| 1 - t).collect();
    assert_eq!(mcc(&truth, &flipped, 2), -1.0);
    assert_eq!(mcc(&truth, &[0; 6], 2), 0.0);
    // tp 2, fp 1, fn 1.
    assert!((f1(&truth, &[0, 1, 1, 1, 0, 0], 2) - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(accuracy(&truth, &[0, 1, 1, 1, 0, 0]), 4.0 / 6.0);
    assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 90.0]), 1.0);
    assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), -1.0);
    assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0, 2.0, 3.0]) - 0.9486832980505138).abs() < 1e-12);
    assert_eq!(task_metric("cola").unwrap(), MetricKind::Mcc);
    assert_eq!(task_metric("mrpc").unwrap(), MetricKind::F1);
    assert_eq!(task_metric("rte").unwrap(), MetricKind::Accuracy);
    assert!(task_metric("squad").is_err());
    let (lo, hi) = binomial_interval(0.5, 100);
    assert!((lo - 0.402).abs() < 1e-12 && (hi - 0.598).abs() < 1e-12);
}

fn small_lm(fp: &str) -> LanguageModel<f32> {
    let cfg = ModelConfig {
        n_layer: 1,
        n_head: 2,
        n_embd: 16,
        n_positions: 64,
        vocab_size: 258,
        objective: Objective::Causal,
        mlm_probability: None,
        dropout: 0.1,
        layer_norm_eps: 1e-5,
        seed: 1,
    };
    LanguageModel::init(cfg, fp).unwrap()
}

fn ft_cfg() -> TrainConfig {
    TrainConfig { learning_rate: 3e-3, epochs: 3, batch_size: 16, ..TrainConfig::preset("desk").unwrap() }
}

#[test]
fn language_id_is_easy_and_backbone_untouched() {
    let tok = Tokenizer::bytes_only();
    let m = small_lm(&tok.fingerprint());
    let before = m.param_hash();
    let g = SyntheticGrammar::new(GrammarConfig::default()).unwrap();
    let d = g.generate(300, 0).unwrap();
    let labeled: Vec<(String, usize)> =
        d.l1.lines
            .iter()
            .map(|l| (l.clone(), 0))
            .zip(d.l2.lines.iter().map(|l| (l.clone(), 1)))
            .flat_map(|(a, b)| [a, b])
            .collect();
    let (train, held) = labeled.split_at(400);
    let head = ClassifierHead { hidden: vec![16], classes: 2, seed: 0 };
    let r = finetune_classifier(&m, &tok, train, held, &head, &ft_cfg()).unwrap();
    assert!(r.accuracy > 0.9, "{r:?}");
    assert_eq!(r.heldout, 200);
    assert_eq!(m.param_hash(), before);
}

#[test]
fn shuffled_labels_give_chance() {
    let tok = Tokenizer::bytes_only();
    let m = small_lm(&tok.fingerprint());
    let g = SyntheticGrammar::new(GrammarConfig::default()).unwrap();
    let d = g.generate(400, 0).unwrap();
    let mut r = rng::stream(3, &["labels"]);
    let labeled: Vec<(String, usize)> =
        d.l2.lines.iter().map(|l| (l.clone(), rand::Rng::random_range(&mut r, 0..2usize))).collect();
    let (train, held) = labeled.split_at(200);
    let head = ClassifierHead { hidden: vec![16], classes: 2, seed: 0 };
    let res = finetune_classifier(&m, &tok, train, held, &head, &ft_cfg()).unwrap();
    let (lo, hi) = binomial_interval(0.5, held.len());
    assert!(res.accuracy >= lo && res.accuracy <= hi, "{}", res.accuracy);
}

#[test]
fn classifier_input_errors() {
    let tok = Tokenizer::bytes_only();
    let m = small_lm(&tok.fingerprint());
    let head = ClassifierHead { hidden: vec![], classes: 2, seed: 0 };
    let one = vec![("a b".to_string(), 0), ("c d".to_string(), 0)];
    assert!(matches!(finetune_classifier(&m, &tok, &one, &one, &head, &ft_cfg()), Err(Error::Usage(_))));
    let bad = vec![("a".to_string(), 0), ("b".to_string(), 5)];
    assert!(finetune_classifier(&m, &tok, &bad, &bad, &head, &ft_cfg()).is_err());
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.tsv");
    std::fs::write(&p, "hello world\t1\nbye\t0\n").unwrap();
    assert_eq!(read_labeled(&p).unwrap(), vec![("hello world".to_string(), 1), ("bye".to_string(), 0)]);
    std::fs::write(&p, "no label here\n").unwrap();
    assert!(read_labeled(&p).is_err());
}
