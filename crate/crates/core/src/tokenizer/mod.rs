//! Byte-level BPE and fixed-length blockification.

mod blocks;
mod bpe;

pub use blocks::{blockify, BlockDataset};
pub use bpe::{chunks, Tokenizer, TrainOptions, EOS, MASK};

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn opts(vocab_size: usize) -> TrainOptions {
        TrainOptions { vocab_size, ..TrainOptions::default() }
    }

    // Count adjacent pairs over whitespace-split chunks, then take the max
    // with the smallest byte pair on ties.
    fn oracle_first_merge(corpus: &str) -> ((Vec<u8>, Vec<u8>), u64) {
        let mut counts = std::collections::BTreeMap::new();
        for c in chunks(corpus, true) {
            for w in c.as_bytes().windows(2) {
                *counts.entry((vec![w[0]], vec![w[1]])).or_insert(0u64) += 1;
            }
        }
        let best = counts.values().copied().max().unwrap();
        let pair = counts.iter().find(|(_, &v)| v == best).unwrap().0.clone();
        (pair, best)
    }

    #[test]
    fn first_merge_matches_hand_count() {
        let (pair, count) = oracle_first_merge("aaab aaab");
        assert_eq!((pair.clone(), count), ((b"a".to_vec(), b"a".to_vec()), 4));
        let tok = Tokenizer::train("aaab aaab", opts(258)).unwrap();
        let (a, b) = tok.merges()[0];
        assert_eq!((tok.token_bytes(a).unwrap().to_vec(), tok.token_bytes(b).unwrap().to_vec()), pair);
        assert_eq!(tok.merges().len(), 2);

        // Only the first merge applied.
        let first = Tokenizer::train("aaab aaab", opts(257)).unwrap();
        let ids = first.encode("aaab");
        assert_eq!(ids.len(), 3);
        assert_eq!(first.token_bytes(ids[0]).unwrap(), b"aa");
        assert_eq!(&ids[1..], &[u32::from(b'a'), u32::from(b'b')]);

        // The second merge is (a, b): it ties (aa, a) at count 2 and "a" < "aa".
        let ids = tok.encode("aaab");
        let pieces: Vec<&[u8]> = ids.iter().map(|&i| tok.token_bytes(i).unwrap()).collect();
        assert_eq!(pieces, vec![&b"aa"[..], &b"ab"[..]]);
    }

    #[test]
    fn vocab_257_learns_one_merge() {
        let tok = Tokenizer::train("the cat sat on the mat", opts(257)).unwrap();
        assert_eq!(tok.merges().len(), 1);
        assert_eq!(tok.vocab_size(), 257 + 2);
    }

    #[test]
    fn min_frequency_stops_training() {
        let tok =
            Tokenizer::train("abcdef", TrainOptions { vocab_size: 300, min_frequency: 2, ..TrainOptions::default() })
                .unwrap();
        assert!(tok.merges().is_empty());
    }

    #[test]
    fn tie_break_prefers_smallest_pair() {
        let tok =
            Tokenizer::train("zy ba", TrainOptions { vocab_size: 257, min_frequency: 1, ..TrainOptions::default() })
                .unwrap();
        let (a, b) = tok.merges()[0];
        assert_eq!((tok.token_bytes(a).unwrap(), tok.token_bytes(b).unwrap()), (&b" "[..], &b"b"[..]));
    }

    #[test]
    fn errors() {
        assert!(Tokenizer::train("", opts(300)).is_err());
        assert!(Tokenizer::train("abc", opts(256)).is_err());
        let tok = Tokenizer::bytes_only();
        assert!(tok.decode(&[tok.vocab_size() as u32]).is_err());
        assert!(tok.encode("").is_empty());
    }

    #[test]
    fn chunks_cover_text() {
        let t = "  hello world\n\tfoo  bar ";
        assert_eq!(chunks(t, true).concat(), t);
        assert_eq!(chunks(t, true), vec![" ", " hello", " world", "\n\t", "foo", " ", " bar", " "]);
        assert_eq!(chunks("a\nb", false), vec!["a\n", "b"]);
    }

    #[test]
    fn serialization_roundtrip() {
        let corpus = "le chat noir et le chien blanc; the black cat and the white dog 🐈 ";
        for pre_split in [true, false] {
            let tok =
                Tokenizer::train(&corpus.repeat(3), TrainOptions { vocab_size: 300, pre_split, ..Default::default() })
                    .unwrap();
            let back = Tokenizer::from_text(&tok.to_text()).unwrap();
            assert_eq!(back, tok);
            assert_eq!(back.encode(corpus), tok.encode(corpus));
            assert_eq!(back.fingerprint(), tok.fingerprint());
        }
        assert!(Tokenizer::from_text("nonsense").is_err());
    }

    #[test]
    fn blockify_counts() {
        let ids: Vec<u32> = (0..1025).map(|i| i % 200).collect();
        assert_eq!(blockify(&ids, 512).unwrap().0.len(), 2);
        assert_eq!(blockify(&ids, 512).unwrap().1, 1);
        assert_eq!(blockify(&ids[..512], 512).unwrap().0.len(), 1);
        assert_eq!(blockify(&ids[..511], 512).unwrap().0.len(), 0);
        assert!(blockify(&ids, 1).is_err());
    }

    #[test]
    fn block_chars_count_scalars() {
        let tok = Tokenizer::bytes_only();
        let text = "héllo wörld ✓✓";
        let ds = BlockDataset::from_text(&tok, text, 4, "x").unwrap();
        assert_eq!(ds.source_chars, text.chars().count() as u64);
        let kept: u64 = ds.block_chars.iter().sum();
        let ids = tok.encode(text);
        let dropped_chars: u64 =
            ids[ids.len() - ds.dropped_tokens..].iter().map(|&i| u64::from(tok.token_chars(i))).sum();
        assert_eq!(kept + dropped_chars, ds.source_chars);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn roundtrip_random_utf8(bytes in proptest::collection::vec(any::<u8>(), 0..200), s in "\\PC{0,40}") {
            let tok = Tokenizer::train("hello wörld 😀 ça va? 你好 hello", TrainOptions { vocab_size: 280, min_frequency: 1, ..Default::default() }).unwrap();
            let text = String::from_utf8_lossy(&bytes).into_owned() + &s;
            prop_assert_eq!(tok.decode(&tok.encode(&text)).unwrap(), text);
        }

        #[test]
        fn merges_never_lengthen_training_corpus(words in proptest::collection::vec("[abc]{1,6}", 1..30)) {
            let corpus = words.join(" ");
            let mut last = usize::MAX;
            for v in [256 + 1, 256 + 3, 256 + 8, 256 + 20] {
                let tok = Tokenizer::train(&corpus, TrainOptions { vocab_size: v, min_frequency: 1, ..Default::default() }).unwrap();
                let n = tok.encode(&corpus).len();
                prop_assert!(n <= last);
                last = n;
            }
        }
    }
}
