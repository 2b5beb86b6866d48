//! Post-retrieval summarization: retrieve `k0` documents with any retriever,
//! build a small query-focused tree over them with one-step clustering, and
//! condense its top layer into one final query-focused summary.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::ClusteringConfig;
use crate::embedding::{cosine_similarity, EmbedError, Embedder, Embedding};
use crate::summarize::{PromptId, SummarizeError, Summarizer, SummaryRequest};
use crate::text::{Chunk, TokenCounter, WordPunctCounter};
use crate::tree::{build_tree, NodeId, NodeKind, RaTree, Retrieved, SummaryMode, TreeConfig, TreeError};

/// Token threshold meaning "no limit".
pub const UNLIMITED: usize = usize::MAX;

/// Documents retrieved to build the keyword prompt during query expansion.
pub const EXPANSION_DOCS: usize = 3;
/// Times the original query is repeated in the expanded query.
pub const QUERY_REPEATS: usize = 5;

#[derive(Debug, Error)]
pub enum PostQfrapError {
    #[error("the retriever returned no documents")]
    NoDocuments,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Summarize(#[from] SummarizeError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

/// Any function from (query, k, token threshold) to ranked documents.
pub trait Retriever: Send + Sync {
    fn retrieve(&self, query: &str, k: usize, token_threshold: usize) -> Result<Vec<Retrieved>, PostQfrapError>;

    /// Number of retrievable documents.
    fn size(&self) -> usize;
}

/// Top-k cosine retrieval over a flat list of documents.
pub struct NaiveRetriever<'a> {
    items: Vec<(Retrieved, Embedding)>,
    embedder: &'a dyn Embedder,
}

impl<'a> NaiveRetriever<'a> {
    pub fn from_chunks(chunks: &[Chunk], embedder: &'a dyn Embedder) -> Result<Self, PostQfrapError> {
        let texts: Vec<String> = chunks.iter().map(|c| c.text.clone()).collect();
        let embeddings = embedder.embed_batch(&texts)?;
        let items = chunks
            .iter()
            .zip(embeddings)
            .enumerate()
            .map(|(i, (c, e))| {
                let r = Retrieved { id: NodeId(i as u64), layer: 0, text: c.text.clone(), token_count: c.token_count, similarity: 0.0 };
                (r, e)
            })
            .collect();
        Ok(Self { items, embedder })
    }

    /// The leaves of `tree`, reusing their stored embeddings.
    pub fn from_tree_leaves(tree: &RaTree, embedder: &'a dyn Embedder) -> Self {
        let items = tree
            .leaves()
            .map(|n| {
                let r = Retrieved { id: n.id, layer: 0, text: n.text.clone(), token_count: n.token_count, similarity: 0.0 };
                (r, n.embedding.clone())
            })
            .collect();
        Self { items, embedder }
    }
}

impl Retriever for NaiveRetriever<'_> {
    fn retrieve(&self, query: &str, k: usize, token_threshold: usize) -> Result<Vec<Retrieved>, PostQfrapError> {
        let q = self.embedder.embed(query)?;
        let mut scored: Vec<(f64, &Retrieved)> =
            self.items.iter().map(|(r, e)| Ok((cosine_similarity(&q.0, &e.0)?, r))).collect::<Result<_, EmbedError>>()?;
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.id.cmp(&b.1.id)));
        let mut out = Vec::new();
        let mut used = 0usize;
        for (sim, r) in scored {
            if out.len() == k || used.saturating_add(r.token_count) > token_threshold {
                break;
            }
            used += r.token_count;
            out.push(Retrieved { similarity: sim, ..r.clone() });
        }
        Ok(out)
    }

    fn size(&self) -> usize {
        self.items.len()
    }
}

/// Collapsed-tree retrieval over every node of a tree.
pub struct TreeRetriever<'a> {
    pub tree: &'a RaTree,
    pub embedder: &'a dyn Embedder,
    /// Restrict results to leaves.
    pub leaves_only: bool,
}

impl<'a> TreeRetriever<'a> {
    pub fn new(tree: &'a RaTree, embedder: &'a dyn Embedder) -> Self {
        Self { tree, embedder, leaves_only: false }
    }
}

impl Retriever for TreeRetriever<'_> {
    fn retrieve(&self, query: &str, k: usize, token_threshold: usize) -> Result<Vec<Retrieved>, PostQfrapError> {
        let q = self.embedder.embed(query)?;
        let leaves_only = self.leaves_only;
        Ok(self.tree.collapsed_query_filtered(&q.0, k, token_threshold, |n| !leaves_only || n.kind == NodeKind::Leaf)?)
    }

    fn size(&self) -> usize {
        if self.leaves_only {
            self.tree.leaves().count()
        } else {
            self.tree.len()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostQfrapConfig {
    pub k0: usize,
    /// Token budget of the final summary.
    pub token_budget: usize,
    pub expand_query: bool,
    /// Token budget of the intermediate tree summaries.
    pub summary_tokens: usize,
    pub clustering: ClusteringConfig,
    pub seed: u64,
}

impl Default for PostQfrapConfig {
    fn default() -> Self {
        Self {
            k0: 20,
            token_budget: 2000,
            expand_query: false,
            summary_tokens: 1000,
            clustering: ClusteringConfig::one_step(),
            seed: 0,
        }
    }
}

impl PostQfrapConfig {
    pub fn validate(&self) -> Result<(), PostQfrapError> {
        if self.k0 == 0 || self.token_budget == 0 || self.summary_tokens == 0 {
            return Err(PostQfrapError::Config("k0, token_budget and summary_tokens must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostQfrapOutput {
    pub summary: String,
    pub token_count: usize,
    /// Query given to the retriever (expanded when enabled).
    pub retrieval_query: String,
    pub documents: Vec<Retrieved>,
    /// Summaries generated while building the per-query tree.
    pub tree_summary_calls: usize,
    pub tree_layers: usize,
}

/// Concatenation of the query repeated five times and extracted keywords.
pub fn expanded_query_text(query: &str, keywords: &str) -> String {
    let mut parts = vec![query.trim(); QUERY_REPEATS];
    let kw = keywords.split_whitespace().collect::<Vec<_>>().join(" ");
    if !kw.is_empty() {
        parts.push(&kw);
        return parts.join(" ");
    }
    parts.join(" ")
}

/// Retrieves the top documents for `query`, asks for keywords, and returns
/// the expanded query.
pub fn expand_query(retriever: &dyn Retriever, query: &str, summarizer: &dyn Summarizer) -> Result<String, PostQfrapError> {
    let docs = retriever.retrieve(query, EXPANSION_DOCS, UNLIMITED)?;
    let context = docs.iter().map(|d| d.text.as_str()).collect::<Vec<_>>().join("\n\n");
    let req = SummaryRequest::new(context, 100).with_question(query);
    let keywords = summarizer.complete(PromptId::QueryExpand, &req)?;
    Ok(expanded_query_text(query, &keywords))
}

/// Runs the post-retrieval pipeline for one query.
pub fn run_postqfrap(
    retriever: &dyn Retriever,
    query: &str,
    cfg: &PostQfrapConfig,
    embedder: &dyn Embedder,
    summarizer: &dyn Summarizer,
) -> Result<PostQfrapOutput, PostQfrapError> {
    cfg.validate()?;
    let retrieval_query = if cfg.expand_query { expand_query(retriever, query, summarizer)? } else { query.to_string() };
    let k = cfg.k0.min(retriever.size());
    if k == 0 {
        return Err(PostQfrapError::NoDocuments);
    }
    let documents = retriever.retrieve(&retrieval_query, k, UNLIMITED)?;
    if documents.is_empty() {
        return Err(PostQfrapError::NoDocuments);
    }
    let counter = WordPunctCounter;
    let chunks: Vec<Chunk> =
        documents.iter().enumerate().map(|(i, d)| Chunk::standalone("retrieved", i, &d.text, &counter)).collect();
    let tree_cfg = TreeConfig {
        clustering: cfg.clustering,
        summary_mode: SummaryMode::QueryFocused { question: query.to_string() },
        summary_tokens: cfg.summary_tokens,
        seed: cfg.seed,
        ..TreeConfig::default()
    };
    let tree = build_tree(&chunks, embedder, summarizer, tree_cfg)?;
    let top = tree.layers.last().ok_or(TreeError::Empty)?;
    let context = top.iter().map(|id| tree.nodes[id].text.as_str()).collect::<Vec<_>>().join("\n\n");
    let req = SummaryRequest::new(context, cfg.token_budget).with_question(query);
    let raw = summarizer.summarize(&req)?;
    let summary = counter.truncate(&raw, cfg.token_budget).to_string();
    Ok(PostQfrapOutput {
        token_count: counter.count(&summary),
        summary,
        retrieval_query,
        documents,
        tree_summary_calls: tree.len() - tree.leaves().count(),
        tree_layers: tree.height(),
    })
}
