//! Cleaning, unifying, splitting, interleaving and size alignment of plain
//! text corpora, plus a synthetic bilingual grammar.

mod pipeline;
mod synth;

use std::path::Path;

pub use pipeline::{
    align_from, align_size, apportion, clean_line, interleave, split, unify, Aligned, CorpusSource, LineBlock,
    UnifiedCorpus, DEFAULT_BLOCK_LINES, SPLIT_PER_MILLE,
};
pub use synth::{
    GrammarConfig, LanguageSpec, Lexicon, MinimalPair, Phenomenon, SyntheticData, SyntheticGrammar, WordOrder,
};

use crate::{Error, Result};

pub fn write_lines(path: &Path, c: &UnifiedCorpus) -> Result<()> {
    std::fs::write(path, c.text()).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Tab-separated `grammatical TAB ungrammatical TAB phenomenon` lines.
pub fn write_pairs(path: &Path, pairs: &[MinimalPair]) -> Result<()> {
    let mut s = String::new();
    for p in pairs {
        s.push_str(&format!("{}\t{}\t{}\n", p.good, p.bad, p.phenomenon));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_pairs(path: &Path) -> Result<Vec<MinimalPair>> {
    let text = read_text(path)?;
    parse_pairs(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

pub fn parse_pairs(text: &str) -> std::result::Result<Vec<MinimalPair>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split('\t').collect();
            match f.as_slice() {
                [g, b, p] if !g.is_empty() && !b.is_empty() && g != b => {
                    Ok(MinimalPair { good: g.to_string(), bad: b.to_string(), phenomenon: p.to_string() })
                }
                _ => Err(format!("line {}: expected three tab-separated fields with distinct sentences", i + 1)),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use proptest::prelude::*;

    use super::*;
    use crate::tokenizer::Tokenizer;

    fn source(domain: &str, n: usize) -> CorpusSource {
        CorpusSource {
            domain: domain.into(),
            language: "x".into(),
            lines: (0..n).map(|i| format!("{domain} line {i}")).collect(),
        }
    }

    #[test]
    fn cleaning_contract() {
        assert_eq!(clean_line("  a  \u{a0}b\t\tc  ").as_deref(), Some("a b c"));
        assert_eq!(clean_line(" \u{a0} "), None);
        let s = CorpusSource::from_text("d", "x", "one\n\n  two  words \n");
        assert_eq!(s.lines, vec!["one", "two words"]);
        assert_eq!((s.line_count(), s.char_count()), (2, 12));
    }

    #[test]
    fn unify_two_to_one_counts_lines() {
        let srcs = [source("a", 30_000), source("b", 30_000)];
        let u = unify(&srcs, &[("a".into(), 2.0), ("b".into(), 1.0)], 10_000, 1).unwrap();
        let count = |d: &str| u.blocks.iter().filter(|b| b.origin == d).map(|b| b.lines.len()).sum::<usize>();
        assert_eq!((count("a"), count("b")), (20_000, 10_000));
    }

    #[test]
    fn unify_paper_ratio() {
        let srcs = [source("spoken", 80_000), source("literature", 80_000), source("nonfiction", 80_000)];
        let w = [("spoken".into(), 2.0), ("literature".into(), 1.0), ("nonfiction".into(), 1.0)];
        let u = unify(&srcs, &w, 10_000, 3).unwrap();
        let total = u.line_count() as f64;
        for (d, share) in [("spoken", 0.5), ("literature", 0.25), ("nonfiction", 0.25)] {
            let n: usize = u.blocks.iter().filter(|b| b.origin == d).map(|b| b.lines.len()).sum();
            assert!((n as f64 - share * total).abs() <= 10_000.0, "{d}");
        }
    }

    #[test]
    fn unify_single_source_partitions_and_preserves_inner_order() {
        let s = source("a", 25);
        let u = unify(&[s.clone()], &[("a".into(), 1.0)], 10, 9).unwrap();
        assert_eq!(u.blocks.len(), 3);
        let mut all: Vec<String> = u.blocks.iter().flat_map(|b| b.lines.clone()).collect();
        all.sort();
        let mut expect = s.lines.clone();
        expect.sort();
        assert_eq!(all, expect);
        for b in &u.blocks {
            let first: usize = b.lines[0].rsplit(' ').next().unwrap().parse().unwrap();
            for (k, l) in b.lines.iter().enumerate() {
                assert_eq!(l, &format!("a line {}", first + k));
            }
        }
    }

    #[test]
    fn unify_errors() {
        assert!(unify(&[source("a", 5)], &[("b".into(), 1.0)], 10, 0).is_err());
        assert!(unify(&[source("a", 5)], &[("a".into(), 0.0)], 10, 0).is_err());
    }

    #[test]
    fn split_examples() {
        assert_eq!(apportion(200, &SPLIT_PER_MILLE), vec![166, 17, 17]);
        assert_eq!(apportion(12, &SPLIT_PER_MILLE), vec![10, 1, 1]);
        let c = UnifiedCorpus {
            language: "x".into(),
            blocks: (0..11).map(|i| LineBlock { origin: "a".into(), lines: vec![i.to_string()] }).collect(),
        };
        assert!(split(&c).is_err());
    }

    // Independent apportionment: exact rationals, remainders compared by
    // cross-multiplication, ties to the earlier share.
    fn oracle_apportion(n: usize) -> Vec<usize> {
        let shares = [830u128, 85, 85];
        let quotas: Vec<(u128, u128)> =
            shares.iter().map(|&s| ((n as u128) * s / 1000, (n as u128) * s % 1000)).collect();
        let mut counts: Vec<usize> = quotas.iter().map(|q| q.0 as usize).collect();
        let mut left = n - counts.iter().sum::<usize>();
        let mut taken = [false; 3];
        while left > 0 {
            let mut best = None;
            for i in 0..3 {
                if taken[i] {
                    continue;
                }
                if best.map_or(true, |b: usize| quotas[i].1 > quotas[b].1) {
                    best = Some(i);
                }
            }
            let b = best.unwrap();
            taken[b] = true;
            counts[b] += 1;
            left -= 1;
        }
        counts
    }

    #[test]
    fn split_apportionment_exact_for_all_n() {
        for n in 12..=500 {
            let k = apportion(n, &SPLIT_PER_MILLE);
            assert_eq!(k, oracle_apportion(n), "n={n}");
            assert_eq!(k.iter().sum::<usize>(), n);
            assert!(k.iter().all(|&x| x > 0));
            for (i, &s) in SPLIT_PER_MILLE.iter().enumerate() {
                assert!((k[i] as f64 - n as f64 * s as f64 / 1000.0).abs() < 1.0);
            }
        }
    }

    #[test]
    fn interleave_examples() {
        assert_eq!(interleave(&["A1", "A2"], &["B1", "B2"]), vec!["A1", "B1", "A2", "B2"]);
        assert_eq!(interleave(&["A1"], &["B1", "B2", "B3"]), vec!["A1", "B1", "B2", "B3"]);
    }

    proptest! {
        #[test]
        fn interleave_preserves_each_order(a in proptest::collection::vec(0u32..1000, 1..40), b in proptest::collection::vec(1000u32..2000, 1..40)) {
            let out = interleave(&a, &b);
            let pa: Vec<u32> = out.iter().copied().filter(|&x| x < 1000).collect();
            let pb: Vec<u32> = out.iter().copied().filter(|&x| x >= 1000).collect();
            prop_assert_eq!(pa, a);
            prop_assert_eq!(pb, b);
        }
    }

    #[test]
    fn align_takes_blocks_up_to_target() {
        let tok = Tokenizer::bytes_only();
        let mk = |n| UnifiedCorpus {
            language: "x".into(),
            blocks: (0..n).map(|i| LineBlock { origin: "a".into(), lines: vec![format!("{i:04}")] }).collect(),
        };
        let a = align_size(&[mk(10), mk(20)], 23, &tok).unwrap();
        for x in &a {
            assert_eq!(x.tokens, 25);
            assert_eq!(x.corpus.blocks.len(), 5);
        }
        let full = align_size(&[mk(4)], 20, &tok).unwrap();
        assert_eq!(full[0].corpus, mk(4));
        let err = align_size(&[mk(3)], 20, &tok).unwrap_err().to_string();
        assert!(err.contains("short of") && err.contains('5'), "{err}");
        let next = align_from(&mk(20), a[1].next_block, 23, &tok).unwrap();
        assert_eq!(next.corpus.blocks[0].lines[0], "0005");
    }

    fn grammar() -> SyntheticGrammar {
        SyntheticGrammar::new(GrammarConfig::default()).unwrap()
    }

    #[test]
    fn disjoint_lexicons_without_overlap() {
        let g = grammar();
        assert!(g.word_types(0).is_disjoint(&g.word_types(1)));
        let shared = SyntheticGrammar::new(GrammarConfig { overlap_fraction: 0.5, ..Default::default() }).unwrap();
        let stems =
            |l: &Lexicon| l.nouns.iter().flatten().chain(&l.verbs).cloned().collect::<std::collections::HashSet<_>>();
        assert!(stems(&g.lexicons[0]).is_disjoint(&stems(&g.lexicons[1])));
        assert!(!stems(&shared.lexicons[0]).is_disjoint(&stems(&shared.lexicons[1])));
    }

    #[test]
    fn lexicon_too_small_is_config_error() {
        let cfg = GrammarConfig { nouns_per_class: 200, ..Default::default() };
        assert!(matches!(SyntheticGrammar::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn word_orders() {
        let g = grammar();
        let data = g.generate(400, 0).unwrap();
        let l1_verbs: std::collections::HashSet<String> = g.lexicons[0]
            .verbs
            .iter()
            .flat_map(|v| g.lexicons[0].spec.verb_suffix.iter().map(move |s| format!("{v}{s}")))
            .collect();
        for l in &data.l1.lines {
            let w: Vec<&str> = l.split(' ').collect();
            assert!(w.len() == 3 || w.len() == 5);
            assert!(l1_verbs.contains(*w.last().unwrap()), "{l}");
        }
        for l in &data.l2.lines {
            let w: Vec<&str> = l.split(' ').collect();
            assert!(w.len() == 3 || w.len() == 5);
        }
    }

    // Morpheme diff: align words, segment, and count differing morphemes.
    fn morpheme_diff(g: &SyntheticGrammar, lang: usize, a: &str, b: &str) -> Option<usize> {
        let wa: Vec<&str> = a.split(' ').collect();
        let wb: Vec<&str> = b.split(' ').collect();
        if wa.len() != wb.len() {
            return None;
        }
        let mut diff = 0;
        for (x, y) in wa.iter().zip(&wb) {
            let (mx, my) = (g.segment(lang, x), g.segment(lang, y));
            if mx.len() != my.len() {
                return None;
            }
            diff += mx.iter().zip(&my).filter(|(p, q)| p != q).count();
        }
        Some(diff)
    }

    #[test]
    fn pairs_differ_in_one_morpheme() {
        let g = grammar();
        let data = g.generate(10, 10_000).unwrap();
        for lang in 0..2 {
            for p in &data.pairs[lang] {
                assert_eq!(morpheme_diff(&g, lang, &p.good, &p.bad), Some(1), "{p:?}");
                assert_ne!(p.good, p.bad);
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_pairs_unseen() {
        let g = grammar();
        let a = g.generate(2000, 300).unwrap();
        let b = g.generate(2000, 300).unwrap();
        assert_eq!(a, b);
        for lang in 0..2 {
            let src = if lang == 0 { &a.l1 } else { &a.l2 };
            let lines: std::collections::HashSet<&String> = src.lines.iter().collect();
            assert!(a.pairs[lang].iter().all(|p| !lines.contains(&p.bad)));
        }
        assert!(g.generate(0, 1).is_err());
    }

    #[test]
    fn pairs_tsv_roundtrip() {
        let g = grammar();
        let data = g.generate(5, 30).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pairs.tsv");
        write_pairs(&p, &data.pairs[0]).unwrap();
        assert_eq!(read_pairs(&p).unwrap(), data.pairs[0]);
        assert!(parse_pairs("a\ta\tx\n").is_err());
    }

    // Interpolated word trigram with add-one unigrams and sentence markers,
    // trained on the grammatical corpus only.
    struct Trigram {
        uni: HashMap<String, f64>,
        bi: HashMap<(String, String), f64>,
        bi_ctx: HashMap<String, f64>,
        tri: HashMap<(String, String, String), f64>,
        tri_ctx: HashMap<(String, String), f64>,
        total: f64,
        types: f64,
    }

    impl Trigram {
        fn padded(s: &str) -> Vec<String> {
            let mut w = vec!["<s>".to_string(), "<s>".to_string()];
            w.extend(s.split(' ').map(str::to_string));
            w.push("</s>".into());
            w
        }

        fn train(lines: &[String]) -> Self {
            let mut t = Trigram {
                uni: HashMap::new(),
                bi: HashMap::new(),
                bi_ctx: HashMap::new(),
                tri: HashMap::new(),
                tri_ctx: HashMap::new(),
                total: 0.0,
                types: 0.0,
            };
            for l in lines {
                let w = Self::padded(l);
                for i in 2..w.len() {
                    *t.uni.entry(w[i].clone()).or_default() += 1.0;
                    *t.bi.entry((w[i - 1].clone(), w[i].clone())).or_default() += 1.0;
                    *t.bi_ctx.entry(w[i - 1].clone()).or_default() += 1.0;
                    *t.tri.entry((w[i - 2].clone(), w[i - 1].clone(), w[i].clone())).or_default() += 1.0;
                    *t.tri_ctx.entry((w[i - 2].clone(), w[i - 1].clone())).or_default() += 1.0;
                    t.total += 1.0;
                }
            }
            t.types = t.uni.len() as f64 + 1.0;
            t
        }

        fn logprob(&self, s: &str) -> f64 {
            let w = Self::padded(s);
            let mut lp = 0.0;
            for i in 2..w.len() {
                let p1 = (self.uni.get(&w[i]).copied().unwrap_or(0.0) + 1.0) / (self.total + self.types);
                let ctx = self.bi_ctx.get(&w[i - 1]).copied().unwrap_or(0.0);
                let p2 = if ctx > 0.0 {
                    self.bi.get(&(w[i - 1].clone(), w[i].clone())).copied().unwrap_or(0.0) / ctx
                } else {
                    0.0
                };
                let key = (w[i - 2].clone(), w[i - 1].clone());
                let ctx3 = self.tri_ctx.get(&key).copied().unwrap_or(0.0);
                let p3 = if ctx3 > 0.0 {
                    self.tri.get(&(key.0, key.1, w[i].clone())).copied().unwrap_or(0.0) / ctx3
                } else {
                    0.0
                };
                lp += (0.6 * p3 + 0.3 * p2 + 0.1 * p1).ln();
            }
            lp
        }
    }

    #[test]
    fn trigram_oracle_prefers_grammatical_members() {
        let g = grammar();
        let data = g.generate(60_000, 3000).unwrap();
        for (lang, src) in [(0, &data.l1), (1, &data.l2)] {
            let lm = Trigram::train(&src.lines);
            let pairs = &data.pairs[lang];
            let correct = pairs.iter().filter(|p| lm.logprob(&p.good) > lm.logprob(&p.bad)).count();
            let acc = correct as f64 / pairs.len() as f64;
            assert!(acc > 0.9, "lang {lang}: {acc}");
        }
    }
}
