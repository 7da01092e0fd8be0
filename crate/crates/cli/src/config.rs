use std::path::Path;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use regkit_core::chunking::{ChunkingConfig, Strategy};
use regkit_core::dataset::SamplingConfig;
use regkit_core::embedding::{BackoffPolicy, Embedder, ReferenceEmbedder, RemoteEmbedder, SystemClock, DEFAULT_REFERENCE_DIM};
use regkit_core::harness::{AblationConfig, IndexSpec};
use regkit_core::metrics::MetricConfig;
use regkit_core::rerank::{LexicalOverlapScorer, Scorer, WireScorer};
use regkit_core::wire::{HttpTransport, StdioTransport};

pub const EMBEDDER_URL_ENV: &str = "REGKIT_EMBEDDER_URL";
pub const SCORER_URL_ENV: &str = "REGKIT_SCORER_URL";

/// Contents of `regkit.toml`. Every section is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub strategy: Option<Strategy>,
    pub chunking: ChunkingConfig,
    pub index: IndexSpec,
    pub metrics: MetricConfig,
    pub train: Option<SamplingConfig>,
    pub eval: Option<SamplingConfig>,
    pub ablation: AblationConfig,
    pub embedder: EmbedderConfig,
    pub scorer: ScorerConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    Reference,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    pub url: Option<String>,
    pub dim: usize,
    pub batch_size: usize,
    pub timeout_secs: f64,
    pub backoff: BackoffPolicy,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            kind: EmbedderKind::Reference,
            url: None,
            dim: DEFAULT_REFERENCE_DIM,
            batch_size: 64,
            timeout_secs: 30.0,
            backoff: BackoffPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    Lexical,
    Remote,
    Stdio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerConfig {
    pub kind: ScorerKind,
    pub url: Option<String>,
    /// Program and arguments for the stdio transport.
    pub command: Vec<String>,
    pub identity: Option<String>,
    pub max_input_tokens: usize,
    pub timeout_secs: f64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            kind: ScorerKind::Lexical,
            url: None,
            command: Vec::new(),
            identity: None,
            max_input_tokens: 512,
            timeout_secs: 30.0,
        }
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let config: Config = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        config.chunking.validate()?;
        config.metrics.validate()?;
        Ok(config)
    }

    pub fn train_sampling(&self) -> SamplingConfig {
        self.train.clone().unwrap_or_else(SamplingConfig::train)
    }

    pub fn eval_sampling(&self) -> SamplingConfig {
        self.eval.clone().unwrap_or_else(SamplingConfig::eval)
    }
}

fn url_or_env(url: &Option<String>, env: &str, what: &str) -> Result<String> {
    if let Some(u) = url {
        return Ok(u.clone());
    }
    match std::env::var(env) {
        Ok(u) if !u.is_empty() => Ok(u),
        _ => bail!("{what} needs a url (config or {env})"),
    }
}

pub fn build_embedder(c: &EmbedderConfig) -> Result<Box<dyn Embedder>> {
    match c.kind {
        EmbedderKind::Reference => Ok(Box::new(ReferenceEmbedder::new(c.dim)?)),
        EmbedderKind::Remote => {
            let url = url_or_env(&c.url, EMBEDDER_URL_ENV, "remote embedder")?;
            let transport = HttpTransport::new(url, Duration::from_secs_f64(c.timeout_secs));
            let e = RemoteEmbedder::new(transport, SystemClock, c.backoff, c.dim)?.with_batch_size(c.batch_size);
            Ok(Box::new(e))
        }
    }
}

pub fn build_scorer(c: &ScorerConfig) -> Result<Box<dyn Scorer>> {
    match c.kind {
        ScorerKind::Lexical => Ok(Box::new(LexicalOverlapScorer)),
        ScorerKind::Remote => {
            let url = url_or_env(&c.url, SCORER_URL_ENV, "remote scorer")?;
            let identity = c.identity.clone().unwrap_or_else(|| format!("remote:{url}"));
            let transport = HttpTransport::new(url, Duration::from_secs_f64(c.timeout_secs));
            Ok(Box::new(WireScorer::new(transport, identity).with_max_input_tokens(c.max_input_tokens)))
        }
        ScorerKind::Stdio => {
            let Some((program, args)) = c.command.split_first() else {
                bail!("stdio scorer needs `command`");
            };
            let identity = c.identity.clone().unwrap_or_else(|| format!("stdio:{program}"));
            let transport = StdioTransport::spawn(program, args)?;
            Ok(Box::new(WireScorer::new(transport, identity).with_max_input_tokens(c.max_input_tokens)))
        }
    }
}
