use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{DataSpec, Resolved};
use super::{read_json, sha256_file, sha256_hex, write_json, write_text};
use crate::corpus::{self, CorpusSource, GrammarConfig, MinimalPair, SyntheticGrammar, UnifiedCorpus};
use crate::rng;
use crate::tokenizer::{BlockDataset, Tokenizer, TrainOptions};
use crate::{Error, Result};

pub const LANGUAGES: [&str; 2] = ["l1", "l2"];
const SPLITS: [&str; 3] = ["train", "valid", "test"];
/// Extra sentences generated beyond the estimated need.
const MARGIN: f64 = 1.15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct DataRecord {
    pub data_hash: String,
    pub seed: u64,
    pub tokenizer_fingerprint: String,
    /// sha256 per file name.
    pub files: BTreeMap<String, String>,
    pub train_tokens: [usize; 2],
    pub train_blocks: usize,
}

pub struct PreparedData {
    pub tok: Tokenizer,
    pub train: [BlockDataset; 2],
    pub valid: [BlockDataset; 2],
    pub test: [BlockDataset; 2],
    pub pairs: [Vec<MinimalPair>; 2],
    pub record: DataRecord,
}

impl PreparedData {
    pub fn language(&self, lang: &str) -> Result<usize> {
        LANGUAGES.iter().position(|l| *l == lang).ok_or_else(|| Error::config(format!("unknown language {lang:?}")))
    }
}

/// Hash of every setting that changes the generated data.
pub fn data_hash(r: &Resolved, seed: u64) -> String {
    let key = serde_json::json!({
        "data": r.exp.data,
        "tokens": r.exp.tokens_per_language,
        "block-lines": r.exp.block_lines,
        "tokenizer-lines": r.exp.tokenizer_sample_lines,
        "pairs": r.exp.eval.pairs,
        "vocab": r.model.vocab_size,
        "block-len": r.model.n_positions,
        "seed": seed,
    });
    sha256_hex(key.to_string().as_bytes())
}

fn file_name(lang: &str, split: &str) -> String {
    format!("{lang}.{split}.txt")
}

fn train_tokenizer(r: &Resolved, splits: &[[UnifiedCorpus; 3]; 2]) -> Result<Tokenizer> {
    let mut text = String::new();
    for s in splits {
        let lines = s[0].blocks.iter().flat_map(|b| &b.lines).take(r.exp.tokenizer_sample_lines);
        for l in lines {
            text.push_str(l);
            text.push('\n');
        }
    }
    let opts = TrainOptions { vocab_size: r.model.vocab_size - 2, min_frequency: 2, seed: 0, pre_split: true };
    Tokenizer::train(&text, opts)
}

fn synthetic_sources(r: &Resolved, seed: u64) -> Result<(Vec<CorpusSource>, Vec<CorpusSource>, [Vec<MinimalPair>; 2])> {
    let DataSpec::Synthetic(spec) = &r.exp.data else { unreachable!("synthetic spec") };
    let grammar = SyntheticGrammar::new(GrammarConfig {
        nouns_per_class: spec.nouns_per_class,
        verbs: spec.verbs,
        transitive_fraction: spec.transitive_fraction,
        overlap_fraction: spec.overlap_fraction,
        seed: rng::derive(seed, &["data"]),
        ..GrammarConfig::default()
    })?;
    let n0 = r.exp.tokenizer_sample_lines;
    let sample = grammar.generate(n0, 0)?;
    let opts = TrainOptions { vocab_size: r.model.vocab_size - 2, min_frequency: 2, seed: 0, pre_split: true };
    let mut all = sample.l1.lines.join("\n");
    all.push('\n');
    all.push_str(&sample.l2.lines.join("\n"));
    let probe = Tokenizer::train(&all, opts)?;
    let mut need = 0usize;
    for src in [&sample.l1, &sample.l2] {
        let mut text = src.lines.join("\n");
        text.push('\n');
        let per_line = probe.encode(&text).len() as f64 / n0 as f64;
        let train_lines = (r.exp.tokens_per_language as f64 / per_line * MARGIN).ceil() as usize + r.exp.block_lines;
        let total =
            (train_lines as f64 * 1000.0 / corpus::SPLIT_PER_MILLE[0] as f64).ceil() as usize + 3 * r.exp.block_lines;
        need = need.max(total).max(12 * r.exp.block_lines).max(n0);
    }
    log::info!("generating {need} sentences per language");
    let d = grammar.generate(need, r.exp.eval.pairs)?;
    Ok((vec![d.l1], vec![d.l2], d.pairs))
}

fn file_sources(r: &Resolved) -> Result<(Vec<CorpusSource>, Vec<CorpusSource>, [Vec<MinimalPair>; 2])> {
    let DataSpec::Files { l1, l2, pairs_l1, pairs_l2 } = &r.exp.data else { unreachable!("file spec") };
    let read = |lang: &str, srcs: &[super::config::FileSource]| -> Result<Vec<CorpusSource>> {
        srcs.iter().map(|s| Ok(CorpusSource::from_text(&s.domain, lang, &corpus::read_text(&s.path)?))).collect()
    };
    let pairs = |p: &Option<std::path::PathBuf>| p.as_ref().map_or(Ok(Vec::new()), |p| corpus::read_pairs(p));
    Ok((read("l1", l1)?, read("l2", l2)?, [pairs(pairs_l1)?, pairs(pairs_l2)?]))
}

fn weights(r: &Resolved, lang: usize) -> Vec<(String, f64)> {
    match &r.exp.data {
        DataSpec::Synthetic(_) => vec![("synthetic".into(), 1.0)],
        DataSpec::Files { l1, l2, .. } => {
            let mut w: Vec<(String, f64)> = Vec::new();
            for s in if lang == 0 { l1 } else { l2 } {
                if !w.iter().any(|(d, _)| d == &s.domain) {
                    w.push((s.domain.clone(), s.weight));
                }
            }
            w
        }
    }
}

fn generate(r: &Resolved, seed: u64, dir: &Path) -> Result<()> {
    let (s1, s2, pairs) = match &r.exp.data {
        DataSpec::Synthetic(_) => synthetic_sources(r, seed)?,
        DataSpec::Files { .. } => file_sources(r)?,
    };
    let mut splits = Vec::new();
    for (lang, sources) in [s1, s2].iter().enumerate() {
        let u = corpus::unify(
            sources,
            &weights(r, lang),
            r.exp.block_lines,
            rng::derive(seed, &["unify", LANGUAGES[lang]]),
        )?;
        splits.push(corpus::split(&u)?);
    }
    let splits: [[UnifiedCorpus; 3]; 2] = [splits.remove(0), splits.remove(0)];
    let tok = train_tokenizer(r, &splits)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = BTreeMap::new();
    let mut put = |name: String, text: &str| -> Result<()> {
        let path = dir.join(&name);
        write_text(&path, text)?;
        files.insert(name, sha256_hex(text.as_bytes()));
        Ok(())
    };
    put("tokenizer.txt".into(), &tok.to_text())?;
    let mut train_tokens = [0; 2];
    for (lang, s) in splits.iter().enumerate() {
        let aligned = corpus::align_from(&s[0], 0, r.exp.tokens_per_language as usize, &tok)?;
        train_tokens[lang] = aligned.tokens;
        put(file_name(LANGUAGES[lang], "train"), &aligned.corpus.text())?;
        put(file_name(LANGUAGES[lang], "valid"), &s[1].text())?;
        put(file_name(LANGUAGES[lang], "test"), &s[2].text())?;
        let mut tsv = Vec::new();
        for p in &pairs[lang] {
            tsv.push(format!("{}\t{}\t{}\n", p.good, p.bad, p.phenomenon));
        }
        put(format!("{}.pairs.tsv", LANGUAGES[lang]), &tsv.concat())?;
    }
    let record = DataRecord {
        data_hash: data_hash(r, seed),
        seed,
        tokenizer_fingerprint: tok.fingerprint(),
        files,
        train_tokens,
        train_blocks: 0,
    };
    write_json(&dir.join("data.json"), &record)
}

/// Generates the data for `seed` under `dir`, or loads and verifies it when
/// a matching record exists.
pub fn prepare_data(r: &Resolved, seed: u64, dir: &Path) -> Result<PreparedData> {
    let rec_path = dir.join("data.json");
    let fresh = match read_json::<DataRecord>(&rec_path) {
        Ok(rec) if rec.data_hash == data_hash(r, seed) => false,
        Ok(_) => {
            return Err(Error::config(format!(
                "{} holds data for a different configuration; choose another output root or remove it",
                dir.display()
            )))
        }
        Err(_) => true,
    };
    if fresh {
        generate(r, seed, dir)?;
    }
    let mut rec: DataRecord = read_json(&rec_path)?;
    for (name, hash) in &rec.files {
        if &sha256_file(&dir.join(name))? != hash {
            return Err(Error::config(format!("{}: content hash does not match data.json", dir.join(name).display())));
        }
    }
    let tok = Tokenizer::load(&dir.join("tokenizer.txt"))?;
    if tok.fingerprint() != rec.tokenizer_fingerprint {
        return Err(Error::config("tokenizer fingerprint does not match data.json"));
    }
    let block_len = r.model.n_positions;
    let load = |lang: usize, split: &str| -> Result<BlockDataset> {
        let text = corpus::read_text(&dir.join(file_name(LANGUAGES[lang], split)))?;
        BlockDataset::from_text(&tok, &text, block_len, LANGUAGES[lang])
    };
    let (a, b) = (load(0, SPLITS[0])?, load(1, SPLITS[0])?);
    let n = a.len().min(b.len());
    rec.train_blocks = n;
    let train = [a.prefix(n), b.prefix(n)];
    let eval = r.exp.eval.blocks;
    let valid = [load(0, SPLITS[1])?, load(1, SPLITS[1])?].map(|d| d.prefix(eval.min(d.len())));
    let test = [load(0, SPLITS[2])?, load(1, SPLITS[2])?].map(|d| d.prefix(eval.min(d.len())));
    let pairs = [corpus::read_pairs(&dir.join("l1.pairs.tsv"))?, corpus::read_pairs(&dir.join("l2.pairs.tsv"))?];
    Ok(PreparedData { tok, train, valid, test, pairs, record: rec })
}
