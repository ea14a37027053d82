//! Transformer language models with causal and masked objectives.

mod config;
pub mod hand;
mod transformer;

pub use config::{ModelConfig, Objective};
pub use transformer::{LanguageModel, MaskedBatch};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::Graph;

    fn tiny(objective: Objective, vocab: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            n_layer: 2,
            n_head: 2,
            n_embd: 8,
            n_positions: 8,
            vocab_size: vocab,
            objective,
            mlm_probability: (objective == Objective::Masked).then_some(0.3),
            dropout: 0.0,
            layer_norm_eps: 1e-5,
            seed,
        }
    }

    // Weights drawn wider than the default init so distributions are far
    // from uniform.
    fn random_model(objective: Objective, vocab: usize, seed: u64) -> LanguageModel<f64> {
        let mut m = LanguageModel::<f64>::init(tiny(objective, vocab, seed), "t").unwrap();
        let flat: Vec<f64> = m.params.flatten().iter().map(|x| x * 40.0).collect();
        m.params.unflatten(&flat).unwrap();
        m
    }

    #[test]
    fn desk_parameter_count() {
        let cfg = ModelConfig { vocab_size: 2000, ..ModelConfig::preset("desk-causal").unwrap() };
        let m = LanguageModel::<f32>::init(cfg.clone(), "x").unwrap();
        let by_segments: usize = m.params.segments().iter().map(|s| s.value.numel()).sum();
        assert_eq!(by_segments, 1_065_728);
        assert_eq!(cfg.param_count(), by_segments);
        assert_eq!(m.params.total_dim(), by_segments);
    }

    #[test]
    fn preset_counts_match_formula() {
        for name in ["desk-causal", "desk-masked", "paper-causal", "paper-masked"] {
            let cfg = ModelConfig::preset(name).unwrap();
            cfg.validate().unwrap();
            let d = cfg.n_embd;
            let per_layer = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * 4 * d + 4 * d) + (4 * d * d + d);
            let expect = cfg.vocab_size * d + cfg.n_positions * d + cfg.n_layer * per_layer + 2 * d;
            assert_eq!(cfg.param_count(), expect, "{name}");
        }
        let paper = ModelConfig::preset("paper-causal").unwrap();
        assert_eq!((paper.n_layer, paper.n_head, paper.n_embd, paper.n_positions), (12, 12, 768, 1024));
        assert_eq!(ModelConfig::preset("paper-masked").unwrap().n_positions, 512);
        assert!(ModelConfig::preset("huge").is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = tiny(Objective::Causal, 10, 0);
        c.n_head = 3;
        assert!(c.validate().is_err());
        let mut c = tiny(Objective::Masked, 10, 0);
        c.mlm_probability = None;
        assert!(c.validate().is_err());
        let mut c = tiny(Objective::Causal, 10, 0);
        c.mlm_probability = Some(0.2);
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let a = LanguageModel::<f32>::init(tiny(Objective::Causal, 50, 7), "x").unwrap();
        let b = LanguageModel::<f32>::init(tiny(Objective::Causal, 50, 7), "x").unwrap();
        let c = LanguageModel::<f32>::init(tiny(Objective::Causal, 50, 8), "x").unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn untrained_loss_is_near_log_vocab() {
        let cfg = ModelConfig { vocab_size: 2000, ..ModelConfig::preset("desk-causal").unwrap() };
        let m = LanguageModel::<f32>::init(cfg, "x").unwrap();
        let mut r = rng::stream(1, &["batch"]);
        use rand::Rng as _;
        let batch: Vec<Vec<u32>> = (0..2).map(|_| (0..64).map(|_| r.random_range(0..2000)).collect()).collect();
        let ce = m.loss(&batch, &mut r, false).unwrap();
        assert!((ce - 2000f64.ln()).abs() / 2000f64.ln() < 0.05, "{ce}");
    }

    #[test]
    fn empty_and_overlong_inputs() {
        let m = random_model(Objective::Causal, 5, 1);
        let mut r = rng::stream(0, &[]);
        assert!(m.loss(&[], &mut r, false).is_err());
        assert!(m.sequence_logprob(&[1; 9]).is_err());
        assert!(m.sequence_logprob(&[]).is_err());
    }

    #[test]
    fn hand_bigram_matches_analytic_cross_entropy() {
        let table = vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.1, 0.8], vec![0.3, 0.3, 0.4]];
        let m = hand::bigram_model(&table, 8).unwrap();
        let batch = vec![vec![0, 1, 2, 2, 0, 0], vec![2, 1, 1, 0, 2, 1]];
        let mut expect = 0.0;
        let mut n = 0.0;
        for b in &batch {
            for w in b.windows(2) {
                expect -= table[w[0] as usize][w[1] as usize].ln();
                n += 1.0;
            }
        }
        let ce = m.loss(&batch, &mut rng::stream(0, &[]), false).unwrap();
        assert!((ce - expect / n).abs() < 1e-8, "{ce} vs {}", expect / n);
    }

    #[test]
    fn deterministic_bigram_continuation_has_zero_logprob() {
        let table = vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]];
        let m = hand::bigram_model(&table, 8).unwrap();
        assert_eq!(m.sequence_logprob(&[0, 1, 2, 0, 1]).unwrap(), 0.0);
        assert!(m.sequence_logprob(&[0, 2]).unwrap() < -60.0);
    }

    // Chain rule evaluated one prefix at a time, each with its own forward.
    fn chain_rule_logprob(m: &LanguageModel<f64>, ids: &[u32]) -> f64 {
        let v = m.config.vocab_size;
        let mut total = 0.0;
        for t in 1..ids.len() {
            let mut g = Graph::new();
            let vars = m.bind_frozen(&mut g);
            let logits = m.logits(&mut g, &vars, &ids[..t], 1, t, None).unwrap();
            let row = &g.value(logits).data()[(t - 1) * v..t * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            total += row[ids[t] as usize] - max - z.ln();
        }
        total
    }

    fn all_sequences(v: u32, len: usize) -> Vec<Vec<u32>> {
        let mut out = vec![vec![]];
        for _ in 0..len {
            out = out.into_iter().flat_map(|s| (0..v).map(move |x| [s.clone(), vec![x]].concat())).collect();
        }
        out
    }

    #[test]
    fn logprob_matches_enumerated_chain_rule() {
        let m = random_model(Objective::Causal, 3, 11);
        for s in all_sequences(3, 4) {
            let a = m.sequence_logprob(&s).unwrap();
            let b = chain_rule_logprob(&m, &s);
            assert!((a - b).abs() < 1e-10, "{s:?}: {a} vs {b}");
            assert!(a <= 0.0);
        }
    }

    #[test]
    fn continuations_normalise() {
        for (v, len) in [(3u32, 4usize), (5, 3), (4, 4), (2, 1)] {
            let m = random_model(Objective::Causal, v as usize, 3 + v as u64);
            let seqs = all_sequences(v, len);
            let lps = m.sequence_logprobs(&seqs).unwrap();
            for first in 0..v {
                let total: f64 = seqs.iter().zip(&lps).filter(|(s, _)| s[0] == first).map(|(_, lp)| lp.exp()).sum();
                assert!((total - 1.0).abs() < 1e-6, "V={v} L={len} first={first}: {total}");
            }
        }
    }

    #[test]
    fn causal_positions_ignore_the_future() {
        let m = random_model(Objective::Causal, 7, 5);
        let a = vec![1, 4, 2, 6, 3, 0];
        for t in 0..a.len() - 1 {
            let mut b = a.clone();
            b[t + 1] = (b[t + 1] + 3) % 7;
            for s in t + 2..b.len() {
                b[s] = (b[s] + 1) % 7;
            }
            let rows = |ids: &[u32]| {
                let mut g = Graph::new();
                let vars = m.bind_frozen(&mut g);
                let l = m.logits(&mut g, &vars, ids, 1, ids.len(), None).unwrap();
                g.value(l).data()[..(t + 1) * 7].to_vec()
            };
            assert_eq!(rows(&a), rows(&b));
        }
    }

    #[test]
    fn fully_masked_loss_ignores_context_order() {
        let mut m = random_model(Objective::Masked, 6, 2);
        m.params.get_mut("wpe").unwrap().data_mut().iter_mut().for_each(|x| *x = 0.0);
        let loss = |seq: &[u32]| {
            let mut g = Graph::new();
            let vars = m.bind_frozen(&mut g);
            let inputs = vec![m.mask_id(); seq.len()];
            let l = m.logits(&mut g, &vars, &inputs, 1, seq.len(), None).unwrap();
            let targets: Vec<Option<u32>> = seq.iter().map(|&t| Some(t)).collect();
            let ce = g.cross_entropy(l, &targets).unwrap();
            g.forward(ce)[0]
        };
        let a = loss(&[0, 1, 2, 3, 4]);
        let b = loss(&[3, 0, 4, 2, 1]);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn masking_follows_the_corruption_rule() {
        let mut cfg = tiny(Objective::Masked, 1000, 0);
        cfg.mlm_probability = Some(0.5);
        let m = LanguageModel::<f32>::init(cfg, "x").unwrap();
        let ids: Vec<u32> = (0..40_000).map(|i| (i % 900) as u32).collect();
        let mb = m.mask_batch(&ids, &mut rng::stream(3, &[])).unwrap();
        let selected: Vec<usize> = (0..ids.len()).filter(|&i| mb.targets[i].is_some()).collect();
        let frac = selected.len() as f64 / ids.len() as f64;
        assert!((frac - 0.5).abs() < 0.01);
        let masked = selected.iter().filter(|&&i| mb.inputs[i] == m.mask_id()).count() as f64;
        let kept = selected.iter().filter(|&&i| mb.inputs[i] == ids[i]).count() as f64;
        let n = selected.len() as f64;
        assert!((masked / n - 0.8).abs() < 0.015);
        // Random replacements occasionally land on the original token.
        assert!((kept / n - 0.1).abs() < 0.015);
        assert!((0..ids.len()).filter(|&i| mb.targets[i].is_none()).all(|i| mb.inputs[i] == ids[i]));
    }

    #[test]
    fn masking_with_no_selection_errors() {
        let mut cfg = tiny(Objective::Masked, 10, 0);
        cfg.mlm_probability = Some(1e-12);
        let m = LanguageModel::<f64>::init(cfg, "x").unwrap();
        assert!(m.mask_batch(&[1, 2, 3], &mut rng::stream(0, &[])).is_err());
    }

    #[test]
    fn masked_pll_scores_each_position() {
        let m = random_model(Objective::Masked, 6, 9);
        let s = vec![1, 3, 2, 4];
        let lp = m.sequence_logprob(&s).unwrap();
        let mut expect = 0.0;
        for t in 0..s.len() {
            let mut ids = s.clone();
            ids[t] = m.mask_id();
            let mut g = Graph::new();
            let vars = m.bind_frozen(&mut g);
            let l = m.logits(&mut g, &vars, &ids, 1, s.len(), None).unwrap();
            let row = &g.value(l).data()[t * 6..(t + 1) * 6];
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            expect += row[s[t] as usize] - z.ln();
        }
        assert!((lp - expect).abs() < 1e-10);
    }

    #[test]
    fn gradient_accumulates_with_weight() {
        let mut m = random_model(Objective::Causal, 5, 4);
        let batch = vec![vec![0, 1, 2, 3], vec![4, 3, 2, 1]];
        m.loss_grad(&batch, &mut rng::stream(0, &[]), false, 0.5).unwrap();
        let half = m.params.grad_flat();
        m.params.zero_grad();
        m.loss_grad(&batch, &mut rng::stream(0, &[]), false, 1.0).unwrap();
        for (a, b) in half.iter().zip(m.params.grad_flat()) {
            assert!((2.0 * a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = LanguageModel::<f32>::init(tiny(Objective::Masked, 20, 3), "fp").unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = LanguageModel::<f32>::load(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.param_hash(), m.param_hash());
    }
}
