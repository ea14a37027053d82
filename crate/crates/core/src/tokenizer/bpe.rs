use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const EOS: &str = "<eos>";
pub const MASK: &str = "<mask>";
const MAGIC: &str = "cplab-bpe";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainOptions {
    pub vocab_size: usize,
    pub min_frequency: u64,
    pub seed: u64,
    pub pre_split: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { vocab_size: 2000, min_frequency: 2, seed: 0, pre_split: true }
    }
}

/// Byte-level BPE model. Ids `0..256` are raw bytes, then one id per merge in
/// rank order, then the `<eos>` and `<mask>` specials.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    opts: TrainOptions,
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), u32>,
    vocab: Vec<Vec<u8>>,
}

/// Splits text into the units BPE never merges across. With `pre_split`, a
/// unit is a run of non-whitespace optionally led by one space, or a run of
/// whitespace; without it, a unit is a line including its newline.
pub fn chunks(text: &str, pre_split: bool) -> Vec<&str> {
    let mut out = Vec::new();
    if !pre_split {
        out.extend(text.split_inclusive('\n'));
        return out;
    }
    let b = text.as_bytes();
    let mut i = 0;
    while i < b.len() {
        let start = i;
        let ws = |c: u8| c.is_ascii_whitespace();
        if ws(b[i]) {
            while i < b.len() && ws(b[i]) {
                i += 1;
            }
            if i < b.len() && b[i - 1] == b' ' {
                if i - 1 > start {
                    out.push(&text[start..i - 1]);
                }
                let word = i - 1;
                while i < b.len() && !ws(b[i]) {
                    i += 1;
                }
                out.push(&text[word..i]);
            } else {
                out.push(&text[start..i]);
            }
        } else {
            while i < b.len() && !ws(b[i]) {
                i += 1;
            }
            out.push(&text[start..i]);
        }
    }
    out
}

#[derive(PartialEq, Eq)]
struct Entry {
    count: u64,
    key: Reverse<(Vec<u8>, Vec<u8>)>,
    pair: (u32, u32),
}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.count.cmp(&other.count).then_with(|| self.key.cmp(&other.key))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn merge_word(word: &[u32], pair: (u32, u32), id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(word.len());
    let mut i = 0;
    while i < word.len() {
        if i + 1 < word.len() && (word[i], word[i + 1]) == pair {
            out.push(id);
            i += 2;
        } else {
            out.push(word[i]);
            i += 1;
        }
    }
    out
}

impl Tokenizer {
    /// Learns merges greedily by pair count. Equal counts resolve to the
    /// lexicographically smallest pair of token byte strings.
    pub fn train(corpus: &str, opts: TrainOptions) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::usage("cannot train a tokenizer on an empty corpus"));
        }
        if opts.vocab_size < 257 {
            return Err(Error::config(format!("vocab size {} below 257", opts.vocab_size)));
        }
        if opts.min_frequency < 1 {
            return Err(Error::config("min frequency must be at least 1"));
        }
        let mut freq: HashMap<&str, u64> = HashMap::new();
        for c in chunks(corpus, opts.pre_split) {
            *freq.entry(c).or_default() += 1;
        }
        let mut uniq: Vec<(&str, u64)> = freq.into_iter().collect();
        uniq.sort_unstable();
        let mut words: Vec<Vec<u32>> = uniq.iter().map(|(w, _)| w.bytes().map(u32::from).collect()).collect();
        let counts: Vec<u64> = uniq.iter().map(|&(_, c)| c).collect();

        let mut vocab: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut pair_count: HashMap<(u32, u32), u64> = HashMap::new();
        let mut locs: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
        for (wi, w) in words.iter().enumerate() {
            for p in w.windows(2) {
                let pair = (p[0], p[1]);
                *pair_count.entry(pair).or_default() += counts[wi];
                locs.entry(pair).or_default().insert(wi);
            }
        }
        let entry = |vocab: &[Vec<u8>], pair: (u32, u32), count: u64| Entry {
            count,
            key: Reverse((vocab[pair.0 as usize].clone(), vocab[pair.1 as usize].clone())),
            pair,
        };
        let mut heap: BinaryHeap<Entry> = pair_count.iter().map(|(&p, &c)| entry(&vocab, p, c)).collect();

        let budget = opts.vocab_size - 256;
        let mut merges = Vec::new();
        while merges.len() < budget {
            let Some(top) = heap.pop() else { break };
            if pair_count.get(&top.pair).copied().unwrap_or(0) != top.count {
                continue;
            }
            if top.count < opts.min_frequency {
                break;
            }
            let pair = top.pair;
            let id = vocab.len() as u32;
            let mut bytes = vocab[pair.0 as usize].clone();
            bytes.extend_from_slice(&vocab[pair.1 as usize]);
            vocab.push(bytes);
            merges.push(pair);

            let mut touched: Vec<usize> = locs.remove(&pair).unwrap_or_default().into_iter().collect();
            touched.sort_unstable();
            let mut changed: HashSet<(u32, u32)> = HashSet::new();
            for wi in touched {
                let old = &words[wi];
                if !old.windows(2).any(|p| (p[0], p[1]) == pair) {
                    continue;
                }
                let c = counts[wi];
                for p in old.windows(2) {
                    let k = (p[0], p[1]);
                    if let Some(v) = pair_count.get_mut(&k) {
                        *v -= c;
                    }
                    changed.insert(k);
                }
                let new = merge_word(old, pair, id);
                for p in new.windows(2) {
                    let k = (p[0], p[1]);
                    *pair_count.entry(k).or_default() += c;
                    locs.entry(k).or_default().insert(wi);
                    changed.insert(k);
                }
                words[wi] = new;
            }
            pair_count.remove(&pair);
            let mut changed: Vec<_> = changed.into_iter().collect();
            changed.sort_unstable();
            for k in changed {
                match pair_count.get(&k).copied() {
                    Some(0) => {
                        pair_count.remove(&k);
                    }
                    Some(c) => heap.push(entry(&vocab, k, c)),
                    None => {}
                }
            }
        }
        if merges.len() < budget {
            log::info!("bpe stopped at {} of {} merges: no pair reaches min frequency", merges.len(), budget);
        }
        Ok(Self::from_merges(opts, merges))
    }

    fn from_merges(opts: TrainOptions, merges: Vec<(u32, u32)>) -> Self {
        let mut vocab: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut ranks = HashMap::with_capacity(merges.len());
        for (r, &(a, b)) in merges.iter().enumerate() {
            let mut bytes = vocab[a as usize].clone();
            bytes.extend_from_slice(&vocab[b as usize]);
            vocab.push(bytes);
            ranks.insert((a, b), r as u32);
        }
        vocab.push(EOS.as_bytes().to_vec());
        vocab.push(MASK.as_bytes().to_vec());
        Tokenizer { opts, merges, ranks, vocab }
    }

    /// A tokenizer with no merges: one id per byte plus the specials.
    pub fn bytes_only() -> Self {
        Self::from_merges(TrainOptions { vocab_size: 256, min_frequency: 1, seed: 0, pre_split: true }, Vec::new())
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn options(&self) -> &TrainOptions {
        &self.opts
    }

    pub fn eos_id(&self) -> u32 {
        (self.vocab.len() - 2) as u32
    }

    pub fn mask_id(&self) -> u32 {
        (self.vocab.len() - 1) as u32
    }

    pub fn is_special(&self, id: u32) -> bool {
        id >= self.eos_id()
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.vocab.get(id as usize).map(|v| v.as_slice())
    }

    /// Unicode scalar values a token contributes to decoded text, counted as
    /// UTF-8 lead bytes so partial characters split across tokens add up.
    pub fn token_chars(&self, id: u32) -> u32 {
        if self.is_special(id) {
            return 0;
        }
        self.vocab[id as usize].iter().filter(|&&b| b & 0xC0 != 0x80).count() as u32
    }

    fn encode_chunk(&self, chunk: &[u8], out: &mut Vec<u32>) {
        let mut w: Vec<u32> = chunk.iter().map(|&b| u32::from(b)).collect();
        while w.len() > 1 {
            let best =
                w.windows(2).enumerate().filter_map(|(i, p)| self.ranks.get(&(p[0], p[1])).map(|&r| (r, i))).min();
            let Some((rank, _)) = best else { break };
            w = merge_word(&w, self.merges[rank as usize], 256 + rank);
        }
        out.extend_from_slice(&w);
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::with_capacity(text.len() / 2);
        let mut cache: HashMap<&str, (usize, usize)> = HashMap::new();
        for c in chunks(text, self.opts.pre_split) {
            if let Some(&(s, e)) = cache.get(c) {
                out.extend_from_within(s..e);
                continue;
            }
            let s = out.len();
            self.encode_chunk(c.as_bytes(), &mut out);
            cache.insert(c, (s, out.len()));
        }
        out
    }

    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let t = self.token_bytes(id).ok_or_else(|| {
                Error::usage(format!("token id {id} out of range for vocabulary of {}", self.vocab.len()))
            })?;
            out.extend_from_slice(t);
        }
        Ok(out)
    }

    /// Concatenates token bytes. Invalid UTF-8 (possible only for id
    /// sequences the encoder would never produce) is replaced lossily.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let bytes = self.decode_bytes(ids)?;
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    pub fn to_text(&self) -> String {
        let o = &self.opts;
        let mut s = String::new();
        let _ = writeln!(s, "{MAGIC} {VERSION}");
        let _ = writeln!(s, "vocab_size {}", o.vocab_size);
        let _ = writeln!(s, "min_frequency {}", o.min_frequency);
        let _ = writeln!(s, "seed {}", o.seed);
        let _ = writeln!(s, "pre_split {}", u8::from(o.pre_split));
        let _ = writeln!(s, "merges {}", self.merges.len());
        for &(a, b) in &self.merges {
            let _ = writeln!(s, "{} {}", hex::encode(&self.vocab[a as usize]), hex::encode(&self.vocab[b as usize]));
        }
        let _ = writeln!(s, "vocab {}", self.vocab.len());
        for (i, v) in self.vocab.iter().enumerate() {
            let _ = writeln!(s, "{i} {}", hex::encode(v));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |what: &str| Error::config(format!("tokenizer file: {what}"));
        let mut lines = text.lines();
        fn field<'a>(lines: &mut impl Iterator<Item = &'a str>, name: &str) -> Result<String> {
            let bad = |what: &str| Error::config(format!("tokenizer file: {what}"));
            let line = lines.next().ok_or_else(|| bad(&format!("missing {name}")))?;
            let (k, v) = line.split_once(' ').ok_or_else(|| bad(&format!("malformed line {line:?}")))?;
            if k != name {
                return Err(bad(&format!("expected {name}, found {k}")));
            }
            Ok(v.to_string())
        }
        if field(&mut lines, MAGIC)? != VERSION.to_string() {
            return Err(bad("unsupported version"));
        }
        let num = |s: String| s.parse::<u64>().map_err(|_| bad(&format!("bad number {s:?}")));
        let vocab_size = num(field(&mut lines, "vocab_size")?)? as usize;
        let min_frequency = num(field(&mut lines, "min_frequency")?)?;
        let seed = num(field(&mut lines, "seed")?)?;
        let pre_split = num(field(&mut lines, "pre_split")?)? != 0;
        let n = num(field(&mut lines, "merges")?)? as usize;
        let mut lookup: HashMap<Vec<u8>, u32> = (0..=255u8).map(|b| (vec![b], u32::from(b))).collect();
        let mut merges = Vec::with_capacity(n);
        for r in 0..n {
            let line = lines.next().ok_or_else(|| bad("truncated merges"))?;
            let (a, b) = line.split_once(' ').ok_or_else(|| bad("malformed merge"))?;
            let a = hex::decode(a).map_err(|_| bad("merge hex"))?;
            let b = hex::decode(b).map_err(|_| bad("merge hex"))?;
            let (Some(&ia), Some(&ib)) = (lookup.get(&a), lookup.get(&b)) else {
                return Err(bad(&format!("merge {r} references unknown token")));
            };
            merges.push((ia, ib));
            lookup.insert([a, b].concat(), 256 + r as u32);
        }
        let opts = TrainOptions { vocab_size, min_frequency, seed, pre_split };
        let tok = Self::from_merges(opts, merges);
        let count = num(field(&mut lines, "vocab")?)? as usize;
        if count != tok.vocab.len() {
            return Err(bad("vocabulary size disagrees with merges"));
        }
        for (i, expect) in tok.vocab.iter().enumerate() {
            let line = lines.next().ok_or_else(|| bad("truncated vocabulary"))?;
            let (id, h) = line.split_once(' ').ok_or_else(|| bad("malformed vocabulary entry"))?;
            if id != i.to_string() || hex::decode(h).ok().as_ref() != Some(expect) {
                return Err(bad(&format!("vocabulary entry {i} disagrees with merges")));
            }
        }
        Ok(tok)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Stable identity of the merge table and options.
    pub fn fingerprint(&self) -> String {
        hex::encode(&Sha256::digest(self.to_text().as_bytes())[..8])
    }
}
