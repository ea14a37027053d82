use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::tokenizer::Tokenizer;
use crate::{Error, Result};

pub const DEFAULT_BLOCK_LINES: usize = 10_000;

/// Train/validation/test shares in thousandths.
pub const SPLIT_PER_MILLE: [u64; 3] = [830, 85, 85];

/// Strips ends, collapses space runs, removes non-breaking spaces. Returns
/// `None` for lines that end up empty.
pub fn clean_line(line: &str) -> Option<String> {
    let mut out = String::with_capacity(line.len());
    let mut space = false;
    for c in line.chars() {
        if c == '\u{a0}' || c == '\u{202f}' {
            continue;
        }
        if c == ' ' || c == '\t' {
            space = true;
            continue;
        }
        if space && !out.is_empty() {
            out.push(' ');
        }
        space = false;
        out.push(c);
    }
    let out = out.trim().to_string();
    (!out.is_empty()).then_some(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSource {
    pub domain: String,
    pub language: String,
    pub lines: Vec<String>,
}

impl CorpusSource {
    /// Cleans every line of `text`.
    pub fn from_text(domain: &str, language: &str, text: &str) -> Self {
        CorpusSource {
            domain: domain.to_string(),
            language: language.to_string(),
            lines: text.lines().filter_map(clean_line).collect(),
        }
    }

    pub fn line_count(&self) -> usize {
        self.lines.len()
    }

    pub fn char_count(&self) -> usize {
        self.lines.iter().map(|l| l.chars().count()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineBlock {
    pub origin: String,
    pub lines: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnifiedCorpus {
    pub language: String,
    pub blocks: Vec<LineBlock>,
}

impl UnifiedCorpus {
    pub fn line_count(&self) -> usize {
        self.blocks.iter().map(|b| b.lines.len()).sum()
    }

    pub fn text(&self) -> String {
        let mut s = String::new();
        for b in &self.blocks {
            for l in &b.lines {
                s.push_str(l);
                s.push('\n');
            }
        }
        s
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        UnifiedCorpus { language: self.language.clone(), blocks: self.blocks[range].to_vec() }
    }
}

/// Samples whole line blocks from each domain at the given integer-scaled
/// ratio, then shuffles the union once.
///
/// With `B_d` blocks available in domain `d` and weight `w_d`, the largest
/// integer `k` with `floor(k * w_d) <= B_d` for every domain is chosen and
/// `floor(k * w_d)` blocks are drawn uniformly without replacement per domain.
pub fn unify(
    sources: &[CorpusSource],
    weights: &[(String, f64)],
    block_lines: usize,
    seed: u64,
) -> Result<UnifiedCorpus> {
    if block_lines == 0 {
        return Err(Error::config("block_lines must be positive"));
    }
    if weights.is_empty() {
        return Err(Error::config("no domains requested"));
    }
    let language = sources.first().map(|s| s.language.clone()).unwrap_or_default();
    if sources.iter().any(|s| s.language != language) {
        return Err(Error::config("unify expects sources of a single language"));
    }
    let mut per_domain = Vec::new();
    for (domain, w) in weights {
        if !(*w > 0.0 && w.is_finite()) {
            return Err(Error::config(format!("weight for domain {domain:?} must be positive")));
        }
        let mut blocks = Vec::new();
        for s in sources.iter().filter(|s| &s.domain == domain) {
            for chunk in s.lines.chunks(block_lines) {
                blocks.push(LineBlock { origin: domain.clone(), lines: chunk.to_vec() });
            }
        }
        if blocks.is_empty() {
            return Err(Error::config(format!("requested domain {domain:?} has no data")));
        }
        per_domain.push((blocks, *w));
    }
    let fits = |k: usize| per_domain.iter().all(|(b, w)| ((k as f64) * w).floor() as usize <= b.len());
    let mut k = 0;
    while fits(k + 1) {
        k += 1;
    }
    let mut union = Vec::new();
    for (i, (blocks, w)) in per_domain.into_iter().enumerate() {
        let take = ((k as f64) * w).floor() as usize;
        if take == 0 {
            return Err(Error::config(format!("domain {:?} cannot supply a single block at this ratio", weights[i].0)));
        }
        let mut r = rng::stream(seed, &["unify-sample", &weights[i].0]);
        let mut picked: Vec<usize> = index::sample(&mut r, blocks.len(), take).into_vec();
        picked.sort_unstable();
        union.extend(picked.into_iter().map(|j| blocks[j].clone()));
    }
    union.shuffle(&mut rng::stream(seed, &["unify-shuffle"]));
    Ok(UnifiedCorpus { language, blocks: union })
}

/// Largest-remainder apportionment of `n` items over thousandth shares.
pub fn apportion(n: usize, shares: &[u64]) -> Vec<usize> {
    let total: u64 = shares.iter().sum();
    let n64 = n as u64;
    let mut counts: Vec<usize> = shares.iter().map(|&s| (n64 * s / total) as usize).collect();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(n64 * shares[i] % total));
    let left = n - counts.iter().sum::<usize>();
    for &i in order.iter().take(left) {
        counts[i] += 1;
    }
    counts
}

/// Splits block-wise in the corpus order: the first blocks go to train, the
/// next to validation, the rest to test.
pub fn split(c: &UnifiedCorpus) -> Result<[UnifiedCorpus; 3]> {
    let n = c.blocks.len();
    if n < 12 {
        return Err(Error::config(format!("split needs at least 12 blocks, corpus has {n}")));
    }
    let k = apportion(n, &SPLIT_PER_MILLE);
    Ok([c.slice(0..k[0]), c.slice(k[0]..k[0] + k[1]), c.slice(k[0] + k[1]..n)])
}

/// Alternates `a[0], b[0], a[1], b[1], ...` and appends the longer tail.
pub fn interleave<T: Clone>(a: &[T], b: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    for i in 0..a.len().max(b.len()) {
        if let Some(x) = a.get(i) {
            out.push(x.clone());
        }
        if let Some(y) = b.get(i) {
            out.push(y.clone());
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Aligned {
    pub corpus: UnifiedCorpus,
    pub tokens: usize,
    /// Index of the first block not taken.
    pub next_block: usize,
}

/// Takes blocks from `start` onward while the running token count is below
/// `target`, so the result holds at least `target` tokens and at most one
/// block more.
pub fn align_from(c: &UnifiedCorpus, start: usize, target: usize, tok: &Tokenizer) -> Result<Aligned> {
    let mut tokens = 0;
    let mut end = start;
    while tokens < target && end < c.blocks.len() {
        let mut text = c.blocks[end].lines.join("\n");
        text.push('\n');
        tokens += tok.encode(&text).len();
        end += 1;
    }
    if tokens < target {
        return Err(Error::config(format!(
            "{} corpus supplies {tokens} tokens from block {start}, short of the {target} target by {}",
            c.language,
            target - tokens
        )));
    }
    Ok(Aligned { corpus: c.slice(start..end), tokens, next_block: end })
}

pub fn align_size(corpora: &[UnifiedCorpus], target: usize, tok: &Tokenizer) -> Result<Vec<Aligned>> {
    corpora.iter().map(|c| align_from(c, 0, target, tok)).collect()
}
