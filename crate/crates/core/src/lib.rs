//! Train small causal and masked transformer language models on bilingual
//! exposure schedules, anchor first-language knowledge with elastic weight
//! consolidation, and score proficiency with perplexity per character,
//! minimal-pair surprisal and a fine-tuned classifier.

pub mod corpus;
pub mod eval;
pub mod ewc;
pub mod model;
pub mod rng;
pub mod runner;
pub mod schedule;
pub mod tensor;
pub mod tokenizer;

mod error;

pub use error::{Error, Result};
