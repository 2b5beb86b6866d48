use std::path::Path;

use anyhow::{bail, Context, Result};
use ratree::adrap::{IngestBatching, UpdateMode, UpdateOptions};
use ratree::clustering::ClusteringMode;
use ratree::embedding::{CachedEmbedder, Embedder, MockEmbedder, RemoteEmbedder, MOCK_DIM};
use ratree::persist::IndexManifest;
use ratree::remote::EndpointConfig;
use ratree::summarize::{ChatModel, LlmSummarizer, MockChat, MockSummarizer, RemoteChat, Summarizer};
use ratree::text::ChunkingConfig;
use serde::{Deserialize, Serialize};

pub const ENV_API_BASE: &str = "RATREE_API_BASE";
pub const ENV_API_KEY: &str = "RATREE_API_KEY";
pub const ENV_EMBED_MODEL: &str = "RATREE_EMBED_MODEL";
pub const ENV_CHAT_MODEL: &str = "RATREE_CHAT_MODEL";

const DEFAULT_API_BASE: &str = "https://api.openai.com";
const DEFAULT_EMBED_MODEL: &str = "text-embedding-3-large";
const DEFAULT_EMBED_DIM: usize = 3072;
const DEFAULT_CHAT_MODEL: &str = "gpt-4o-mini-2024-07-18";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum RetrieverKind {
    /// Collapsed search over every node of the index.
    #[default]
    Tree,
    /// Flat search over the indexed chunks only.
    Naive,
}

impl RetrieverKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RetrieverKind::Tree => "tree",
            RetrieverKind::Naive => "naive",
        }
    }
}

/// One layer of configuration. Every field is optional so that layers can be
/// stacked; the config file uses the same shape.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer {
    pub mock_llm: Option<bool>,
    pub seed: Option<u64>,
    pub clustering: Option<ClusteringMode>,
    pub embed_dim: Option<usize>,
    pub api_base: Option<String>,
    pub embed_model: Option<String>,
    pub chat_model: Option<String>,
    pub timeout_secs: Option<f64>,
    pub max_retries: Option<u32>,
    pub chunk_tokens: Option<usize>,
    pub overlap_tokens: Option<usize>,
    pub summary_tokens: Option<usize>,
    pub greedy: Option<bool>,
    pub recluster_on_delete: Option<bool>,
    pub batching: Option<IngestBatching>,
    pub k: Option<usize>,
    pub token_limit: Option<usize>,
    pub retriever: Option<RetrieverKind>,
    pub k0: Option<usize>,
    pub budget: Option<usize>,
    pub expand: Option<bool>,
    pub answer: Option<bool>,
    pub fraction: Option<f64>,
}

macro_rules! overlay {
    ($hi:expr, $lo:expr, $($f:ident),* $(,)?) => {
        Layer { $($f: $hi.$f.or($lo.$f),)* }
    };
}

impl Layer {
    /// Fields set in `self` win over `lower`.
    pub fn over(self, lower: Layer) -> Layer {
        overlay!(
            self, lower, mock_llm, seed, clustering, embed_dim, api_base, embed_model, chat_model, timeout_secs,
            max_retries, chunk_tokens, overlap_tokens, summary_tokens, greedy, recluster_on_delete, batching, k,
            token_limit, retriever, k0, budget, expand, answer, fraction,
        )
    }

    pub fn from_file(path: &Path) -> Result<Layer> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn from_env() -> Layer {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        Layer {
            api_base: var(ENV_API_BASE),
            embed_model: var(ENV_EMBED_MODEL),
            chat_model: var(ENV_CHAT_MODEL),
            ..Layer::default()
        }
    }
}

/// Fully resolved settings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Settings {
    pub mock_llm: bool,
    pub seed: u64,
    /// Unset means the default of the command (two-step for builds, one-step for `ask`).
    pub clustering: Option<ClusteringMode>,
    pub embed_dim: Option<usize>,
    pub api_base: String,
    pub embed_model: String,
    pub chat_model: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub chunking: ChunkingConfig,
    pub summary_tokens: usize,
    pub update: UpdateOptions,
    pub batching: Option<IngestBatching>,
    pub k: Option<usize>,
    pub token_limit: usize,
    pub retriever: RetrieverKind,
    pub k0: usize,
    pub budget: usize,
    pub expand: bool,
    pub answer: bool,
    pub fraction: f64,
}

impl Settings {
    /// Resolves `flags > environment > file > defaults`.
    pub fn resolve(flags: Layer, file: Option<&Path>) -> Result<Settings> {
        let file = match file {
            Some(p) => Layer::from_file(p)?,
            None => Layer::default(),
        };
        Self::from_layer(flags.over(Layer::from_env()).over(file))
    }

    pub fn from_layer(l: Layer) -> Result<Settings> {
        let chunk = ChunkingConfig::default();
        let s = Settings {
            mock_llm: l.mock_llm.unwrap_or(false),
            seed: l.seed.unwrap_or(0),
            clustering: l.clustering,
            embed_dim: l.embed_dim,
            api_base: l.api_base.unwrap_or_else(|| DEFAULT_API_BASE.to_string()),
            embed_model: l.embed_model.unwrap_or_else(|| DEFAULT_EMBED_MODEL.to_string()),
            chat_model: l.chat_model.unwrap_or_else(|| DEFAULT_CHAT_MODEL.to_string()),
            timeout_secs: l.timeout_secs.unwrap_or(60.0),
            max_retries: l.max_retries.unwrap_or(5),
            chunking: ChunkingConfig {
                max_body_tokens: l.chunk_tokens.unwrap_or(chunk.max_body_tokens),
                overlap_tokens: l.overlap_tokens.unwrap_or(chunk.overlap_tokens),
            },
            summary_tokens: l.summary_tokens.unwrap_or(1000),
            update: UpdateOptions {
                mode: if l.greedy.unwrap_or(false) { UpdateMode::Greedy } else { UpdateMode::Adaptive },
                recluster_on_delete: l.recluster_on_delete.unwrap_or(false),
            },
            batching: l.batching,
            k: l.k,
            token_limit: l.token_limit.unwrap_or(2000),
            retriever: l.retriever.unwrap_or_default(),
            k0: l.k0.unwrap_or(20),
            budget: l.budget.unwrap_or(2000),
            expand: l.expand.unwrap_or(false),
            answer: l.answer.unwrap_or(false),
            fraction: l.fraction.unwrap_or(0.7),
        };
        s.chunking.validate()?;
        if s.embed_dim == Some(0) {
            bail!("--embed-dim must be positive");
        }
        if s.k == Some(0) || s.token_limit == 0 || s.k0 == 0 || s.budget == 0 || s.summary_tokens == 0 {
            bail!("--k, --token-limit, --k0, --budget and --summary-tokens must be positive");
        }
        if !(s.fraction > 0.0 && s.fraction <= 1.0) {
            bail!("--fraction must be in (0, 1]");
        }
        Ok(s)
    }

    fn endpoint(&self, model: &str) -> EndpointConfig {
        EndpointConfig {
            api_key_env: ENV_API_KEY.to_string(),
            timeout_secs: self.timeout_secs,
            max_retries: self.max_retries,
            ..EndpointConfig::new(self.api_base.clone(), model)
        }
    }

    /// Embedder for a new index.
    pub fn embedder(&self) -> Result<Box<dyn Embedder>> {
        if self.mock_llm {
            return Ok(Box::new(MockEmbedder { dim: self.embed_dim.unwrap_or(MOCK_DIM) }));
        }
        let dim = self.embed_dim.unwrap_or(DEFAULT_EMBED_DIM);
        Ok(Box::new(CachedEmbedder::new(RemoteEmbedder::new(self.endpoint(&self.embed_model), dim)?)))
    }

    /// Embedder matching an existing index. A mock index is always queried
    /// with the mock embedder of the stored dimension.
    pub fn embedder_for(&self, manifest: &IndexManifest) -> Result<Box<dyn Embedder>> {
        let stored = &manifest.embedder;
        let e: Box<dyn Embedder> = if stored.name == MockEmbedder::default().name() {
            Box::new(MockEmbedder { dim: stored.dim })
        } else {
            let model = stored.name.strip_prefix("remote:").unwrap_or(&self.embed_model);
            Box::new(CachedEmbedder::new(RemoteEmbedder::new(self.endpoint(model), stored.dim)?))
        };
        manifest.check_embedder(e.as_ref())?;
        Ok(e)
    }

    pub fn summarizer(&self) -> Result<Box<dyn Summarizer>> {
        if self.mock_llm {
            return Ok(Box::new(MockSummarizer::new()));
        }
        Ok(Box::new(LlmSummarizer::new(RemoteChat::new(self.endpoint(&self.chat_model))?)))
    }

    pub fn chat(&self) -> Result<Box<dyn ChatModel>> {
        if self.mock_llm {
            return Ok(Box::new(MockChat));
        }
        Ok(Box::new(RemoteChat::new(self.endpoint(&self.chat_model))?))
    }
}
