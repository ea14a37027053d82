use serde::{Deserialize, Serialize};

use super::Tokenizer;
use crate::{Error, Result};

/// Fixed-length token blocks in source order, with per-block character
/// counts for per-character perplexity.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDataset {
    pub block_len: usize,
    pub blocks: Vec<Vec<u32>>,
    pub languages: Vec<String>,
    /// Characters decoded from each block.
    pub block_chars: Vec<u64>,
    /// Characters of each block's first token.
    pub lead_chars: Vec<u64>,
    /// Unicode scalar values of the originating text, including any dropped tail.
    pub source_chars: u64,
    pub dropped_tokens: usize,
    pub fingerprint: String,
}

/// Cuts `ids` into full blocks and returns them with the dropped tail length.
pub fn blockify(ids: &[u32], block_len: usize) -> Result<(Vec<Vec<u32>>, usize)> {
    if block_len < 2 {
        return Err(Error::usage(format!("block length {block_len} below 2")));
    }
    let blocks: Vec<Vec<u32>> = ids.chunks_exact(block_len).map(|c| c.to_vec()).collect();
    let dropped = ids.len() % block_len;
    if blocks.is_empty() {
        log::warn!("{} tokens do not fill one block of {block_len}; no blocks produced", ids.len());
    } else if dropped > 0 {
        log::info!("dropped {dropped} trailing tokens that do not fill a block of {block_len}");
    }
    Ok((blocks, dropped))
}

impl BlockDataset {
    pub fn from_text(tok: &Tokenizer, text: &str, block_len: usize, language: &str) -> Result<Self> {
        let ids = tok.encode(text);
        Self::from_ids(tok, &ids, text.chars().count() as u64, block_len, language)
    }

    pub fn from_ids(tok: &Tokenizer, ids: &[u32], source_chars: u64, block_len: usize, language: &str) -> Result<Self> {
        let (blocks, dropped) = blockify(ids, block_len)?;
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= tok.vocab_size()) {
            return Err(Error::usage(format!("token id {bad} out of range for vocabulary of {}", tok.vocab_size())));
        }
        let block_chars = blocks.iter().map(|b| b.iter().map(|&i| u64::from(tok.token_chars(i))).sum()).collect();
        let lead_chars = blocks.iter().map(|b| u64::from(tok.token_chars(b[0]))).collect();
        Ok(BlockDataset {
            block_len,
            languages: vec![language.to_string(); blocks.len()],
            blocks,
            block_chars,
            lead_chars,
            source_chars,
            dropped_tokens: dropped,
            fingerprint: tok.fingerprint(),
        })
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn tokens(&self) -> usize {
        self.blocks.len() * self.block_len
    }

    /// Keeps the listed blocks in the given order.
    pub fn select(&self, idx: &[usize]) -> Self {
        BlockDataset {
            block_len: self.block_len,
            blocks: idx.iter().map(|&i| self.blocks[i].clone()).collect(),
            languages: idx.iter().map(|&i| self.languages[i].clone()).collect(),
            block_chars: idx.iter().map(|&i| self.block_chars[i]).collect(),
            lead_chars: idx.iter().map(|&i| self.lead_chars[i]).collect(),
            source_chars: idx.iter().map(|&i| self.block_chars[i]).sum(),
            dropped_tokens: 0,
            fingerprint: self.fingerprint.clone(),
        }
    }

    pub fn prefix(&self, n: usize) -> Self {
        self.select(&(0..n.min(self.len())).collect::<Vec<_>>())
    }
}
