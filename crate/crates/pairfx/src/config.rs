//! Run configuration: one TOML file feeding every subcommand. Every field
//! has a default, so an empty file is valid; unknown keys are rejected so
//! typos fail fast. Precedence is CLI flag > config file > default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::sha256_hex;
use crate::llm::ClientConfig;
use crate::pairs::CategoryPosition;
use crate::stage1::{ModelKind, Stage1Config};
use crate::stage2::{Decode, PromptStyle, TinyLmConfig};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsSection,
    pub stage1: Stage1Section,
    pub stage2: Stage2Section,
    pub tiny_lm: TinyLmSection,
    pub splits: SplitsSection,
    pub funnel: FunnelSection,
    pub negatives: NegativesSection,
    pub eval: EvalSection,
    pub llm: LlmSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub corpus: PathBuf,
    pub dictionary: PathBuf,
    pub catalog: PathBuf,
    pub output_dir: PathBuf,
    pub cache_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            corpus: "corpus.jsonl".into(),
            dictionary: "dictionary.txt".into(),
            catalog: "catalog.jsonl".into(),
            output_dir: "out".into(),
            cache_dir: "cache".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Section {
    pub kind: ModelKind,
    pub embed_dim: usize,
    pub hidden: usize,
    pub selection_ratio: f64,
    pub lasso_weight: f64,
    pub drop_pool_scaling: bool,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub top_k_words: usize,
}

impl Default for Stage1Section {
    fn default() -> Self {
        let base = Stage1Config::default();
        Stage1Section {
            kind: base.kind,
            embed_dim: base.embed_dim,
            hidden: base.hidden,
            selection_ratio: base.selection_ratio,
            lasso_weight: base.lasso_weight,
            drop_pool_scaling: base.drop_pool_scaling,
            lr: base.lr,
            epochs: base.epochs,
            batch_size: base.batch_size,
            top_k_words: 3,
        }
    }
}

impl Stage1Section {
    pub fn to_config(&self, seed: u64) -> Stage1Config {
        Stage1Config {
            kind: self.kind,
            embed_dim: self.embed_dim,
            hidden: self.hidden,
            selection_ratio: self.selection_ratio,
            lasso_weight: self.lasso_weight,
            drop_pool_scaling: self.drop_pool_scaling,
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Stub,
    TinyLm,
    Remote,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Section {
    pub backend: BackendKind,
    pub prompt_style: PromptStyle,
    pub max_new_tokens: usize,
    pub threshold: f64,
    pub decode: Decode,
}

impl Default for Stage2Section {
    fn default() -> Self {
        Stage2Section {
            backend: BackendKind::Stub,
            prompt_style: PromptStyle::CausalSuffix,
            max_new_tokens: 100,
            threshold: 0.5,
            decode: Decode::Greedy,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TinyLmSection {
    pub embed_dim: usize,
    pub hidden: usize,
    pub context_window: usize,
    pub max_vocab: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TinyLmSection {
    fn default() -> Self {
        let base = TinyLmConfig::default();
        TinyLmSection {
            embed_dim: base.embed_dim,
            hidden: base.hidden,
            context_window: base.context_window,
            max_vocab: base.max_vocab,
            lr: base.lr,
            epochs: base.epochs,
            batch_size: base.batch_size,
        }
    }
}

impl TinyLmSection {
    pub fn to_config(&self, seed: u64, prompt_style: PromptStyle) -> TinyLmConfig {
        TinyLmConfig {
            embed_dim: self.embed_dim,
            hidden: self.hidden,
            context_window: self.context_window,
            max_vocab: self.max_vocab,
            prompt_style,
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitsSection {
    /// Train/valid/test for the pair classifier.
    pub stage1: Vec<f64>,
    /// Train/test for explanation records.
    pub pfe: Vec<f64>,
}

impl Default for SplitsSection {
    fn default() -> Self {
        SplitsSection {
            stage1: vec![0.8, 0.1, 0.1],
            pfe: vec![0.9, 0.1],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FunnelSection {
    pub min_distinct_entities: usize,
    pub category_position: CategoryPosition,
}

impl Default for FunnelSection {
    fn default() -> Self {
        FunnelSection {
            min_distinct_entities: 2,
            category_position: CategoryPosition::Last,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NegativesSection {
    pub max_retries: usize,
}

impl Default for NegativesSection {
    fn default() -> Self {
        NegativesSection { max_retries: 100 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub negatives_per_anchor: usize,
    pub ks: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            negatives_per_anchor: 99,
            ks: vec![5, 10, 20, 50],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmSection {
    pub base_url: String,
    pub model_name: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub parallelism: usize,
    pub offline: bool,
    pub backoff_base_ms: u64,
}

impl Default for LlmSection {
    fn default() -> Self {
        LlmSection {
            base_url: String::new(),
            model_name: "gpt-3.5-turbo".into(),
            timeout_secs: 60,
            max_retries: 5,
            parallelism: 4,
            offline: false,
            backoff_base_ms: 1000,
        }
    }
}

impl LlmSection {
    /// The API key comes only from PAIRFX_API_KEY, never from the file.
    pub fn to_client_config(&self, cache_dir: &Path, offline: bool) -> ClientConfig {
        let mut config = ClientConfig::new(&self.base_url, &self.model_name, cache_dir);
        config.timeout_secs = self.timeout_secs;
        config.max_retries = self.max_retries;
        config.parallelism = self.parallelism;
        config.offline = self.offline || offline;
        config.backoff_base_ms = self.backoff_base_ms;
        config
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let check_ratios = |name: &str, ratios: &[f64]| -> Result<()> {
            if ratios.is_empty() || ratios.iter().any(|&r| r <= 0.0) {
                return Err(Error::config(format!("{name} ratios must be positive")));
            }
            let total: f64 = ratios.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::config(format!(
                    "{name} ratios sum to {total}, expected 1"
                )));
            }
            Ok(())
        };
        check_ratios("splits.stage1", &self.splits.stage1)?;
        check_ratios("splits.pfe", &self.splits.pfe)?;
        if !(0.0 < self.stage1.selection_ratio && self.stage1.selection_ratio <= 1.0) {
            return Err(Error::config("stage1.selection_ratio must be in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.stage2.threshold) {
            return Err(Error::config("stage2.threshold must be in [0, 1]"));
        }
        if self.stage2.max_new_tokens == 0 {
            return Err(Error::config("stage2.max_new_tokens must be >= 1"));
        }
        if self.funnel.min_distinct_entities < 2 {
            return Err(Error::config("funnel.min_distinct_entities must be >= 2"));
        }
        Ok(())
    }

    /// Hash of the effective configuration, recorded in artifact manifests.
    pub fn digest(&self) -> Result<String> {
        let text = toml::to_string(self)
            .map_err(|e| Error::config(format!("cannot serialize config: {e}")))?;
        Ok(sha256_hex(text.as_bytes()))
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    let config: RunConfig = toml::from_str(&text)
        .map_err(|e| Error::config(format!("invalid config {}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}
