use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ewc::EwcConfig;
use crate::model::{ModelConfig, Objective};
use crate::schedule::{Condition, TrainConfig};
use crate::{Error, Result};

/// Runs above this many tokens per language need the large-scale override.
pub const LARGE_SCALE_TOKENS: u64 = 20_000_000;
/// Models above this many parameters need the large-scale override.
pub const LARGE_SCALE_PARAMS: usize = 20_000_000;

pub const ENV_OUTPUT_ROOT: &str = "CPLAB_OUTPUT_ROOT";
pub const ENV_PARALLELISM: &str = "CPLAB_PARALLELISM";

pub const EXPERIMENT_PRESETS: [&str; 5] = ["desk", "desk-masked", "mini", "paper", "paper-masked"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct SyntheticSpec {
    pub nouns_per_class: usize,
    pub verbs: usize,
    pub transitive_fraction: f64,
    pub overlap_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        let g = crate::corpus::GrammarConfig::default();
        SyntheticSpec {
            nouns_per_class: g.nouns_per_class,
            verbs: g.verbs,
            transitive_fraction: g.transitive_fraction,
            overlap_fraction: g.overlap_fraction,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct FileSource {
    pub domain: String,
    pub path: PathBuf,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum DataSpec {
    Synthetic(SyntheticSpec),
    Files {
        l1: Vec<FileSource>,
        l2: Vec<FileSource>,
        #[serde(default)]
        pairs_l1: Option<PathBuf>,
        #[serde(default)]
        pairs_l2: Option<PathBuf>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct EvalSpec {
    /// Validation blocks scored per language and epoch.
    pub blocks: usize,
    /// Minimal pairs per language.
    pub pairs: usize,
    pub batch_size: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec { blocks: 64, pairs: 300, batch_size: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub data: DataSpec,
    pub conditions: Vec<String>,
    /// Language of the monolingual condition; exactly one entry.
    #[serde(default = "default_mono")]
    pub monolingual_languages: Vec<String>,
    pub model: String,
    pub train: String,
    pub ewc: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_overrides: Option<toml::Table>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_overrides: Option<toml::Table>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ewc_overrides: Option<toml::Table>,
    /// Training tokens per language.
    pub tokens_per_language: u64,
    /// Epochs per language.
    pub epochs: usize,
    pub seeds: Vec<u64>,
    pub output_root: PathBuf,
    #[serde(default = "default_block_lines")]
    pub block_lines: usize,
    #[serde(default = "default_tokenizer_lines")]
    pub tokenizer_sample_lines: usize,
    #[serde(default)]
    pub eval: EvalSpec,
    #[serde(default = "default_grid")]
    pub lambda_grid: Vec<f64>,
    #[serde(default)]
    pub sweep: bool,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub large_scale: bool,
}

fn default_mono() -> Vec<String> {
    vec!["l2".into()]
}

fn default_block_lines() -> usize {
    200
}

fn default_tokenizer_lines() -> usize {
    20_000
}

fn default_grid() -> Vec<f64> {
    vec![0.0, 0.1, 1.0, 10.0, 100.0, 1000.0]
}

fn default_parallelism() -> usize {
    1
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let all: Vec<String> = Condition::ALL.iter().map(|c| c.tag().to_string()).collect();
        let base = |name: &str, model: &str, train: &str, ewc: &str, s: u64, seeds: Vec<u64>| ExperimentConfig {
            name: name.into(),
            data: DataSpec::Synthetic(SyntheticSpec::default()),
            conditions: all.clone(),
            monolingual_languages: default_mono(),
            model: model.into(),
            train: train.into(),
            ewc: ewc.into(),
            model_overrides: None,
            train_overrides: None,
            ewc_overrides: None,
            tokens_per_language: s,
            epochs: 6,
            seeds,
            output_root: "runs".into(),
            block_lines: default_block_lines(),
            tokenizer_sample_lines: default_tokenizer_lines(),
            eval: EvalSpec::default(),
            lambda_grid: default_grid(),
            sweep: true,
            parallelism: 1,
            large_scale: false,
        };
        Ok(match name {
            "desk" => base("desk", "desk-causal", "desk", "desk", 2_000_000, vec![0, 1, 2]),
            "desk-masked" => base("desk-masked", "desk-masked", "desk", "desk", 2_000_000, vec![0, 1, 2]),
            "mini" => ExperimentConfig {
                epochs: 2,
                block_lines: 50,
                tokenizer_sample_lines: 2000,
                eval: EvalSpec { blocks: 16, pairs: 60, batch_size: 16 },
                lambda_grid: vec![0.0, 1.0, 100.0],
                model_overrides: Some(toml::Table::from_iter([("vocab-size".to_string(), toml::Value::Integer(402))])),
                ..base("mini", "mini-causal", "mini", "desk", 20_000, vec![0])
            },
            "paper" => ExperimentConfig {
                sweep: false,
                ..base("paper", "paper-causal", "gpt2-c1", "gpt2", 600_000_000, vec![0, 1, 2])
            },
            "paper-masked" => ExperimentConfig {
                sweep: false,
                ..base("paper-masked", "paper-masked", "roberta-c1", "roberta", 600_000_000, vec![0, 1, 2])
            },
            other => {
                return Err(Error::config(format!(
                    "unknown experiment preset {other:?}; available: {}",
                    EXPERIMENT_PRESETS.join(", ")
                )))
            }
        })
    }

    /// Parses TOML. A top-level `preset` key starts from that preset and
    /// overlays the remaining keys.
    pub fn parse(text: &str) -> Result<Self> {
        let mut table: toml::Table =
            text.parse().map_err(|e: toml::de::Error| Error::config(e.message().to_string()))?;
        if let Some(p) = table.remove("preset") {
            let name = p.as_str().ok_or_else(|| Error::config("preset: must be a string"))?;
            let mut base = toml::Table::try_from(Self::preset(name)?).expect("preset serializes");
            let kind = |t: &toml::Table| t.get("data").and_then(|d| d.get("kind")).cloned();
            if table.contains_key("data") && kind(&table) != kind(&base) {
                base.remove("data");
            }
            merge(&mut base, table);
            table = base;
        }
        toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::config(e.message().trim().to_string()))
    }

    /// Reads a config file, or a preset when `source` is `preset:<name>`.
    pub fn load(source: &str) -> Result<Self> {
        if let Some(name) = source.strip_prefix("preset:") {
            return Self::preset(name);
        }
        let text = std::fs::read_to_string(source).map_err(|e| Error::io(Path::new(source), e))?;
        Self::parse(&text)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(root) = std::env::var(ENV_OUTPUT_ROOT) {
            if !root.is_empty() {
                self.output_root = root.into();
            }
        }
        if let Ok(p) = std::env::var(ENV_PARALLELISM) {
            self.parallelism =
                p.parse().map_err(|_| Error::config(format!("{ENV_PARALLELISM}: {p:?} is not a positive integer")))?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Validates every field and resolves the presets.
    pub fn resolve(&self) -> Result<Resolved> {
        let bad = |field: &str, why: String| Err(Error::config(format!("{field}: {why}")));
        let field = |name: &'static str| move |e: Error| Error::config(format!("{name}: {}", strip(e)));
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || "._-".contains(c)) {
            return bad("name", format!("{:?} must be non-empty ASCII letters, digits, '.', '_' or '-'", self.name));
        }
        if self.conditions.is_empty() {
            return bad("conditions", "at least one condition is required".into());
        }
        let mut conditions = Vec::new();
        for (i, c) in self.conditions.iter().enumerate() {
            let cond: Condition = c.parse().map_err(|_| {
                let known: Vec<&str> = Condition::ALL.iter().map(|c| c.tag()).collect();
                Error::config(format!("conditions[{i}]: unknown condition {c:?}; known: {}", known.join(", ")))
            })?;
            if conditions.contains(&cond) {
                return bad(&format!("conditions[{i}]"), format!("{c:?} listed twice"));
            }
            conditions.push(cond);
        }
        match self.monolingual_languages.as_slice() {
            [l] if l == "l1" || l == "l2" => {}
            [l] => return bad("monolingual-languages", format!("{l:?} is not l1 or l2")),
            [] => return bad("monolingual-languages", "one language is required".into()),
            many => {
                return bad(
                    "monolingual-languages",
                    format!("monolingual condition given {} languages ({})", many.len(), many.join(", ")),
                )
            }
        }
        let model = overlay(
            ModelConfig::preset(&self.model).map_err(field("model"))?,
            &self.model_overrides,
            "model-overrides",
        )?;
        let mut train = overlay(
            TrainConfig::preset(&self.train).map_err(field("train"))?,
            &self.train_overrides,
            "train-overrides",
        )?;
        let ewc = overlay(EwcConfig::preset(&self.ewc).map_err(field("ewc"))?, &self.ewc_overrides, "ewc-overrides")?;
        if self.epochs == 0 {
            return bad("epochs", "must be positive".into());
        }
        train.epochs = self.epochs;
        let mut model = model;
        match (model.objective, train.mlm_probability) {
            (Objective::Masked, Some(p)) => model.mlm_probability = Some(p),
            (Objective::Causal, Some(_)) => {
                return bad(
                    "train",
                    format!("preset {:?} sets mlm-probability but model {:?} is causal", self.train, self.model),
                )
            }
            _ => {}
        }
        model.validate().map_err(field("model"))?;
        train.validate()?;
        ewc.validate().map_err(field("ewc"))?;
        if model.vocab_size < 259 {
            return bad("model.vocab-size", format!("{} leaves no room for merges (minimum 259)", model.vocab_size));
        }
        if self.tokens_per_language == 0 {
            return bad("tokens-per-language", "must be positive".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds", "at least one seed is required".into());
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return bad("seeds", "seeds must be distinct".into());
        }
        if self.block_lines == 0 {
            return bad("block-lines", "must be positive".into());
        }
        if self.tokenizer_sample_lines == 0 {
            return bad("tokenizer-sample-lines", "must be positive".into());
        }
        if self.eval.blocks == 0 || self.eval.batch_size == 0 {
            return bad("eval", "blocks and batch-size must be positive".into());
        }
        if self.lambda_grid.is_empty() || !self.lambda_grid.contains(&0.0) {
            return bad("lambda-grid", "must be non-empty and include 0".into());
        }
        if let Some(l) = self.lambda_grid.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
            return bad("lambda-grid", format!("{l} is not a finite non-negative value"));
        }
        if self.parallelism == 0 {
            return bad("parallelism", "must be at least 1".into());
        }
        match &self.data {
            DataSpec::Synthetic(s) => {
                if s.nouns_per_class == 0 || s.verbs == 0 {
                    return bad("data", "nouns-per-class and verbs must be positive".into());
                }
                if !(0.0..=1.0).contains(&s.transitive_fraction) || !(0.0..=1.0).contains(&s.overlap_fraction) {
                    return bad("data", "fractions must lie in [0, 1]".into());
                }
            }
            DataSpec::Files { l1, l2, .. } => {
                for (lang, srcs) in [("l1", l1), ("l2", l2)] {
                    if srcs.is_empty() {
                        return bad(&format!("data.{lang}"), "at least one source file is required".into());
                    }
                    if let Some(s) = srcs.iter().find(|s| !(s.weight > 0.0 && s.weight.is_finite())) {
                        return bad(
                            &format!("data.{lang}"),
                            format!("weight of domain {:?} must be positive", s.domain),
                        );
                    }
                }
            }
        }
        if !self.large_scale {
            if self.tokens_per_language > LARGE_SCALE_TOKENS {
                return bad(
                    "tokens-per-language",
                    format!(
                        "{} tokens per language is a large-scale run; pass --large-scale to run it",
                        self.tokens_per_language
                    ),
                );
            }
            if model.param_count() > LARGE_SCALE_PARAMS {
                return bad(
                    "model",
                    format!(
                        "{} has {} parameters, a large-scale run; pass --large-scale to run it",
                        self.model,
                        model.param_count()
                    ),
                );
            }
        }
        Ok(Resolved { exp: self.clone(), model, train, ewc, conditions })
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn overlay<T: Serialize + serde::de::DeserializeOwned>(base: T, over: &Option<toml::Table>, field: &str) -> Result<T> {
    let Some(over) = over else { return Ok(base) };
    let mut t = toml::Table::try_from(&base).expect("preset serializes");
    merge(&mut t, over.clone());
    toml::Value::Table(t)
        .try_into()
        .map_err(|e: toml::de::Error| Error::config(format!("{field}: {}", e.message().trim())))
}

/// A validated experiment with its presets resolved.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct Resolved {
    pub exp: ExperimentConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ewc: EwcConfig,
    pub conditions: Vec<Condition>,
}

impl Resolved {
    pub fn root(&self) -> PathBuf {
        self.exp.output_root.join(&self.exp.name)
    }

    pub fn monolingual_language(&self) -> &str {
        &self.exp.monolingual_languages[0]
    }

    /// Hash of the resolved configuration, excluding scheduling knobs that
    /// do not change results.
    pub fn config_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        for k in ["parallelism", "output-root", "large-scale", "sweep", "lambda-grid"] {
            v["exp"].as_object_mut().expect("object").remove(k);
        }
        super::sha256_hex(v.to_string().as_bytes())
    }
}
