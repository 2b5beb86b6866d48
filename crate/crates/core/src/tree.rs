//! The recursive-abstractive tree: construction and collapsed retrieval.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{cluster, ClusterError, ClusteringConfig, GlobalClustering, LocalClustering};
use crate::embedding::{cosine_similarity, EmbedError, Embedder, Embedding};
use crate::gmm::{AdaptiveConfig, ClusterState, GmmError};
use crate::reduction::{ReduceError, ReducerModel};
use crate::seed::mix_seed;
use crate::summarize::{SummarizeError, Summarizer, SummaryRequest};
use crate::text::{Chunk, TokenCounter, WordPunctCounter};

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("the tree is empty")]
    Empty,
    #[error("no input chunks")]
    NoChunks,
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("tree invariant violated: {0}")]
    Invariant(String),
    #[error("unknown chunk or document {0:?}")]
    Unknown(String),
    #[error("layer {0} has no retained clustering models")]
    MissingModels(usize),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Summarize(#[from] SummarizeError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Gmm(#[from] GmmError),
    #[error(transparent)]
    Reduce(#[from] ReduceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Leaf,
    Summary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeafSource {
    pub chunk_id: String,
    pub doc_id: String,
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: NodeId,
    pub layer: usize,
    pub kind: NodeKind,
    pub text: String,
    pub token_count: usize,
    pub embedding: Embedding,
    pub children: BTreeSet<NodeId>,
    pub parents: BTreeSet<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<LeafSource>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SummaryMode {
    #[default]
    Generic,
    QueryFocused { question: String },
}

impl SummaryMode {
    fn question(&self) -> Option<&str> {
        match self {
            SummaryMode::Generic => None,
            SummaryMode::QueryFocused { question } => Some(question),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeConfig {
    pub clustering: ClusteringConfig,
    pub summary_mode: SummaryMode,
    pub summary_tokens: usize,
    pub max_layers: usize,
    /// A new layer is built only while the top layer has more nodes than this.
    pub max_top_nodes: usize,
    pub adaptive: AdaptiveConfig,
    pub seed: u64,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            clustering: ClusteringConfig::default(),
            summary_mode: SummaryMode::Generic,
            summary_tokens: 1000,
            max_layers: 5,
            max_top_nodes: 10,
            adaptive: AdaptiveConfig::default(),
            seed: 0,
        }
    }
}

impl TreeConfig {
    pub fn validate(&self) -> Result<(), TreeError> {
        if self.summary_tokens == 0 || self.max_layers == 0 {
            return Err(TreeError::Invalid("summary_tokens and max_layers must be positive".into()));
        }
        self.adaptive.validate()?;
        Ok(())
    }
}

/// Clustering of one local group at some layer, keyed by node ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalModel {
    pub members: Vec<NodeId>,
    pub reducer: Option<ReducerModel>,
    /// `state.points[i]` is the reduced position of `members[i]`.
    pub state: Option<ClusterState>,
    /// Whether `members[i]` contributed to the mixture statistics.
    pub absorbed: Vec<bool>,
    /// Node on the next layer summarizing each component.
    pub cluster_nodes: Vec<Option<NodeId>>,
}

impl LocalModel {
    /// Member node sets per component (one set when no mixture is fitted).
    pub fn component_members(&self) -> Vec<BTreeSet<NodeId>> {
        match &self.state {
            None => vec![self.members.iter().copied().collect()],
            Some(st) => st
                .members()
                .into_iter()
                .map(|m| m.into_iter().map(|i| self.members[i]).collect())
                .collect(),
        }
    }
}

/// The clustering that turned one layer into the next.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerModel {
    pub global: Option<GlobalClustering>,
    pub locals: Vec<LocalModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaTree {
    pub config: TreeConfig,
    /// Node ids per layer, ascending.
    pub layers: Vec<Vec<NodeId>>,
    pub nodes: BTreeMap<NodeId, TreeNode>,
    /// `layer_models[i]` clusters layer `i` into layer `i + 1`.
    pub layer_models: Vec<LayerModel>,
    pub next_id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieved {
    pub id: NodeId,
    pub layer: usize,
    pub text: String,
    pub token_count: usize,
    pub similarity: f64,
}

impl RaTree {
    pub fn empty(config: TreeConfig) -> Self {
        Self { config, layers: Vec::new(), nodes: BTreeMap::new(), layer_models: Vec::new(), next_id: 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn node(&self, id: NodeId) -> Option<&TreeNode> {
        self.nodes.get(&id)
    }

    pub fn height(&self) -> usize {
        self.layers.len()
    }

    pub fn leaves(&self) -> impl Iterator<Item = &TreeNode> {
        self.layers.first().into_iter().flatten().map(|id| &self.nodes[id])
    }

    pub fn leaf_by_chunk(&self, chunk_id: &str) -> Option<NodeId> {
        self.leaves().find(|n| n.source.as_ref().is_some_and(|s| s.chunk_id == chunk_id)).map(|n| n.id)
    }

    pub fn leaves_of_document(&self, doc_id: &str) -> Vec<NodeId> {
        self.leaves().filter(|n| n.source.as_ref().is_some_and(|s| s.doc_id == doc_id)).map(|n| n.id).collect()
    }

    pub fn embedding_dim(&self) -> Option<usize> {
        self.nodes.values().next().map(|n| n.embedding.dim())
    }

    pub(crate) fn alloc_id(&mut self) -> NodeId {
        let id = NodeId(self.next_id);
        self.next_id += 1;
        id
    }

    /// Inserts leaves for `chunks` (embedded in one batch) and returns their ids.
    pub(crate) fn push_leaves(&mut self, chunks: &[Chunk], embedder: &dyn Embedder) -> Result<Vec<NodeId>, TreeError> {
        let texts: Vec<String> = chunks.iter().map(|c| c.text.clone()).collect();
        let embeddings = embedder.embed_batch(&texts)?;
        if let Some(d) = self.embedding_dim() {
            if let Some(e) = embeddings.iter().find(|e| e.dim() != d) {
                return Err(EmbedError::DimensionMismatch { left: d, right: e.dim() }.into());
            }
        }
        if self.layers.is_empty() {
            self.layers.push(Vec::new());
        }
        let mut ids = Vec::with_capacity(chunks.len());
        for (chunk, embedding) in chunks.iter().zip(embeddings) {
            let id = self.alloc_id();
            self.nodes.insert(
                id,
                TreeNode {
                    id,
                    layer: 0,
                    kind: NodeKind::Leaf,
                    text: chunk.text.clone(),
                    token_count: chunk.token_count,
                    embedding,
                    children: BTreeSet::new(),
                    parents: BTreeSet::new(),
                    source: Some(LeafSource {
                        chunk_id: chunk.id.clone(),
                        doc_id: chunk.doc_id.clone(),
                        position: chunk.position,
                    }),
                },
            );
            self.layers[0].push(id);
            ids.push(id);
        }
        Ok(ids)
    }

    /// Regenerates the text and embedding of summary nodes from their
    /// children. Returns the number of summarizer calls made.
    pub(crate) fn resummarize(
        &mut self,
        ids: &[NodeId],
        embedder: &dyn Embedder,
        summarizer: &dyn Summarizer,
    ) -> Result<usize, TreeError> {
        if ids.is_empty() {
            return Ok(0);
        }
        let budget = self.config.summary_tokens;
        let question = self.config.summary_mode.question().map(str::to_string);
        let requests: Vec<SummaryRequest> = ids
            .iter()
            .map(|id| {
                let context = self.nodes[id]
                    .children
                    .iter()
                    .map(|c| self.nodes[c].text.as_str())
                    .collect::<Vec<_>>()
                    .join("\n\n");
                SummaryRequest { context, question: question.clone(), max_tokens: budget }
            })
            .collect();
        let counter = WordPunctCounter;
        let texts: Vec<String> = requests
            .par_iter()
            .map(|r| summarizer.summarize(r).map(|s| counter.truncate(&s, budget).to_string()))
            .collect::<Result<_, _>>()?;
        let embeddings = embedder.embed_batch(&texts)?;
        for ((id, text), embedding) in ids.iter().zip(texts).zip(embeddings) {
            let node = self.nodes.get_mut(id).expect("summary node exists");
            node.token_count = counter.count(&text);
            node.text = text;
            node.embedding = embedding;
        }
        Ok(ids.len())
    }

    /// Clusters the top layer into a new layer of summary nodes. Returns the
    /// number of summarizer calls made.
    pub(crate) fn grow_layer(&mut self, embedder: &dyn Embedder, summarizer: &dyn Summarizer) -> Result<usize, TreeError> {
        let top = self.layers.len() - 1;
        let ids = self.layers[top].clone();
        let points: Vec<Vec<f64>> = ids.iter().map(|id| self.nodes[id].embedding.0.clone()).collect();
        let result = cluster(&points, &self.config.clustering, mix_seed(self.config.seed, 1000 + top as u64))?;
        let mut locals: Vec<LocalModel> = result
            .locals
            .into_iter()
            .map(|l: LocalClustering| {
                let k = l.state.as_ref().map_or(1, |s| s.model.k);
                LocalModel {
                    absorbed: vec![l.state.is_some(); l.members.len()],
                    members: l.members.iter().map(|&i| ids[i]).collect(),
                    reducer: l.reducer,
                    state: l.state,
                    cluster_nodes: vec![None; k],
                }
            })
            .collect();
        let mut new_ids = Vec::with_capacity(result.clusters.len());
        for (members, (l, c)) in result.clusters.iter().zip(&result.keys) {
            let id = self.alloc_id();
            let children: BTreeSet<NodeId> = members.iter().map(|&i| ids[i]).collect();
            for ch in &children {
                self.nodes.get_mut(ch).expect("child exists").parents.insert(id);
            }
            self.nodes.insert(
                id,
                TreeNode {
                    id,
                    layer: top + 1,
                    kind: NodeKind::Summary,
                    text: String::new(),
                    token_count: 0,
                    embedding: Embedding(Vec::new()),
                    children,
                    parents: BTreeSet::new(),
                    source: None,
                },
            );
            locals[*l].cluster_nodes[*c] = Some(id);
            new_ids.push(id);
        }
        self.layers.push(new_ids.clone());
        self.layer_models.push(LayerModel { global: result.global, locals });
        self.resummarize(&new_ids, embedder, summarizer)
    }

    fn wants_new_layer(&self) -> bool {
        let n = self.layers.len();
        n > 0 && n < self.config.max_layers && self.layers[n - 1].len() > self.config.max_top_nodes
    }

    /// Adds layers while the top layer is too large and the layer cap allows.
    /// Returns `(layers added, summarizer calls)`.
    pub(crate) fn grow_while_needed(
        &mut self,
        embedder: &dyn Embedder,
        summarizer: &dyn Summarizer,
    ) -> Result<(usize, usize), TreeError> {
        let (mut layers, mut calls) = (0, 0);
        while self.wants_new_layer() {
            calls += self.grow_layer(embedder, summarizer)?;
            layers += 1;
        }
        Ok((layers, calls))
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<(), TreeError> {
        let bad = |m: String| Err(TreeError::Invariant(m));
        if self.layers.is_empty() {
            return if self.nodes.is_empty() && self.layer_models.is_empty() { Ok(()) } else { bad("nodes without layers".into()) };
        }
        if self.layers.len() > self.config.max_layers {
            return bad(format!("{} layers exceed the cap of {}", self.layers.len(), self.config.max_layers));
        }
        if self.layers.iter().any(|l| l.is_empty()) {
            return bad("empty layer".into());
        }
        if self.layer_models.len() != self.layers.len() - 1 {
            return bad(format!("{} layer models for {} layers", self.layer_models.len(), self.layers.len()));
        }
        if self.wants_new_layer() {
            return bad("top layer is over the node limit below the layer cap".into());
        }
        let listed: usize = self.layers.iter().map(|l| l.len()).sum();
        if listed != self.nodes.len() {
            return bad("layer lists and node table disagree".into());
        }
        let counter = WordPunctCounter;
        let dim = self.embedding_dim().unwrap_or(0);
        let top = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            if layer.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("layer {li} not strictly ascending"));
            }
            for id in layer {
                let Some(node) = self.nodes.get(id) else {
                    return bad(format!("node {id} listed but missing"));
                };
                if node.id != *id || node.layer != li || id.0 >= self.next_id {
                    return bad(format!("node {id} has inconsistent id or layer"));
                }
                if node.embedding.dim() != dim {
                    return bad(format!("node {id} embedding dimension"));
                }
                let is_leaf = node.kind == NodeKind::Leaf;
                if is_leaf != (li == 0) || is_leaf != node.children.is_empty() {
                    return bad(format!("node {id}: leaf, layer 0 and childless must coincide"));
                }
                if !is_leaf && (node.token_count > self.config.summary_tokens || node.token_count != counter.count(&node.text)) {
                    return bad(format!("summary {id} token count {}", node.token_count));
                }
                if li < top && node.parents.is_empty() {
                    return bad(format!("node {id} below the top layer has no parent"));
                }
                for c in &node.children {
                    match self.nodes.get(c) {
                        Some(ch) if ch.layer + 1 == li && ch.parents.contains(id) => {}
                        _ => return bad(format!("child link {id} -> {c}")),
                    }
                }
                for p in &node.parents {
                    match self.nodes.get(p) {
                        Some(pa) if pa.layer == li + 1 && pa.children.contains(id) => {}
                        _ => return bad(format!("parent link {id} -> {p}")),
                    }
                }
            }
        }
        for (li, lm) in self.layer_models.iter().enumerate() {
            let mut derived: BTreeMap<NodeId, BTreeSet<NodeId>> = BTreeMap::new();
            for local in &lm.locals {
                if local.absorbed.len() != local.members.len() {
                    return bad(format!("layer {li}: absorbed flags"));
                }
                if let Some(st) = &local.state {
                    if st.points.len() != local.members.len() || st.assignments.len() != local.members.len() {
                        return bad(format!("layer {li}: local state size"));
                    }
                    if local.reducer.is_none() {
                        return bad(format!("layer {li}: fitted local without reducer"));
                    }
                }
                let comps = local.component_members();
                if comps.len() != local.cluster_nodes.len() {
                    return bad(format!("layer {li}: cluster node table size"));
                }
                for (members, node) in comps.into_iter().zip(&local.cluster_nodes) {
                    match node {
                        Some(n) if !members.is_empty() => derived.entry(*n).or_default().extend(members),
                        None if members.is_empty() => {}
                        _ => return bad(format!("layer {li}: cluster/node mapping")),
                    }
                }
            }
            let next: BTreeSet<NodeId> = self.layers[li + 1].iter().copied().collect();
            if derived.keys().copied().collect::<BTreeSet<_>>() != next {
                return bad(format!("layer {} nodes do not match the clusters of layer {li}", li + 1));
            }
            for (n, children) in derived {
                if self.nodes[&n].children != children {
                    return bad(format!("node {n} children differ from its cluster"));
                }
            }
        }
        Ok(())
    }

    /// Ranks nodes accepted by `keep` by cosine similarity to the query
    /// (ties by id) and returns them in order, stopping before the node that
    /// would push the cumulative token count past `token_threshold` and after
    /// at most `k` nodes.
    pub fn collapsed_query_filtered(
        &self,
        query: &[f64],
        k: usize,
        token_threshold: usize,
        keep: impl Fn(&TreeNode) -> bool,
    ) -> Result<Vec<Retrieved>, TreeError> {
        if self.nodes.is_empty() {
            return Err(TreeError::Empty);
        }
        if k == 0 || token_threshold == 0 {
            return Err(TreeError::Invalid("k and token_threshold must be at least 1".into()));
        }
        let dim = self.embedding_dim().unwrap_or(0);
        if query.len() != dim {
            return Err(EmbedError::DimensionMismatch { left: dim, right: query.len() }.into());
        }
        if query.iter().all(|v| *v == 0.0) {
            return Err(EmbedError::ZeroVector.into());
        }
        let mut scored: Vec<(f64, &TreeNode)> = self
            .nodes
            .values()
            .filter(|n| keep(n))
            .map(|n| (cosine_similarity(query, &n.embedding.0).unwrap_or(0.0), n))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.id.cmp(&b.1.id)));
        let mut out = Vec::new();
        let mut used = 0usize;
        for (sim, n) in scored {
            if out.len() == k || used + n.token_count > token_threshold {
                break;
            }
            used += n.token_count;
            out.push(Retrieved { id: n.id, layer: n.layer, text: n.text.clone(), token_count: n.token_count, similarity: sim });
        }
        Ok(out)
    }

    /// Collapsed-tree retrieval over all nodes.
    pub fn collapsed_query(&self, query: &[f64], k: usize, token_threshold: usize) -> Result<Vec<Retrieved>, TreeError> {
        self.collapsed_query_filtered(query, k, token_threshold, |_| true)
    }

    pub fn stats(&self) -> TreeStats {
        TreeStats::of(self)
    }
}

/// Builds a tree over `chunks`: leaves first, then clustered summary layers
/// until the top layer is small enough or the layer cap is reached.
pub fn build_tree(
    chunks: &[Chunk],
    embedder: &dyn Embedder,
    summarizer: &dyn Summarizer,
    config: TreeConfig,
) -> Result<RaTree, TreeError> {
    config.validate()?;
    if chunks.is_empty() {
        return Err(TreeError::NoChunks);
    }
    let mut tree = RaTree::empty(config);
    tree.push_leaves(chunks, embedder)?;
    tree.grow_while_needed(embedder, summarizer)?;
    Ok(tree)
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3} ± {:.3}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeStats {
    pub leaf_count: usize,
    pub internal_count: usize,
    pub layer_sizes: Vec<usize>,
    /// Children per summary node.
    pub cluster_size: MeanStd,
    /// Parents per leaf; zero for a single-layer tree.
    pub parents_per_leaf: MeanStd,
}

impl TreeStats {
    pub fn of(tree: &RaTree) -> Self {
        let sizes: Vec<f64> =
            tree.nodes.values().filter(|n| n.kind == NodeKind::Summary).map(|n| n.children.len() as f64).collect();
        let parents: Vec<f64> = tree.leaves().map(|n| n.parents.len() as f64).collect();
        TreeStats {
            leaf_count: parents.len(),
            internal_count: sizes.len(),
            layer_sizes: tree.layers.iter().map(|l| l.len()).collect(),
            cluster_size: MeanStd::of(&sizes),
            parents_per_leaf: MeanStd::of(&parents),
        }
    }
}

impl fmt::Display for TreeStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<28}{}", "Number of leaves", self.leaf_count)?;
        writeln!(f, "{:<28}{}", "Number of internal nodes", self.internal_count)?;
        writeln!(f, "{:<28}{}", "Cluster size", self.cluster_size)?;
        writeln!(f, "{:<28}{}", "Number of parents per leaf", self.parents_per_leaf)?;
        let sizes: Vec<String> = self.layer_sizes.iter().map(|s| s.to_string()).collect();
        write!(f, "{:<28}{} ({})", "Layers", self.layer_sizes.len(), sizes.join(" / "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::MockEmbedder;
    use crate::summarize::MockSummarizer;
    use crate::text::WordPunctCounter;

    fn chunks(n: usize) -> Vec<Chunk> {
        (0..n)
            .map(|i| {
                let topic = ["river delta sediment", "orbital rocket engine", "medieval castle siege"][i % 3];
                let text = format!("Note {i} covers the {topic}. It adds detail number {i} about the {topic}.");
                Chunk::standalone(&format!("doc{}", i / 4), i % 4, &text, &WordPunctCounter)
            })
            .collect()
    }

    #[test]
    fn five_chunks_give_one_layer() {
        let t = build_tree(&chunks(5), &MockEmbedder::default(), &MockSummarizer::new(), TreeConfig::default()).unwrap();
        assert_eq!(t.height(), 1);
        assert_eq!(t.len(), 5);
        t.validate().unwrap();
    }

    #[test]
    fn larger_input_grows_layers() {
        let s = MockSummarizer::new();
        let t = build_tree(&chunks(40), &MockEmbedder::default(), &s, TreeConfig::default()).unwrap();
        t.validate().unwrap();
        assert!(t.height() >= 2);
        assert_eq!(s.calls(), t.stats().internal_count);
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(matches!(
            build_tree(&[], &MockEmbedder::default(), &MockSummarizer::new(), TreeConfig::default()),
            Err(TreeError::NoChunks)
        ));
    }

    #[test]
    fn query_stops_at_threshold() {
        let t = build_tree(&chunks(5), &MockEmbedder::default(), &MockSummarizer::new(), TreeConfig::default()).unwrap();
        let q = t.nodes.values().next().unwrap().embedding.0.clone();
        let one = t.collapsed_query(&q, 1, 10_000).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].id, NodeId(0));
        assert!(t.collapsed_query(&q, 5, 1).unwrap().is_empty());
        let all = t.collapsed_query(&q, 100, 10_000).unwrap();
        assert_eq!(all.len(), 5);
        assert!(all.windows(2).all(|w| w[0].similarity >= w[1].similarity));
    }

    #[test]
    fn stats_display_mirrors_table_layout() {
        let t = build_tree(&chunks(40), &MockEmbedder::default(), &MockSummarizer::new(), TreeConfig::default()).unwrap();
        let s = t.stats().to_string();
        assert!(s.contains("Cluster size") && s.contains("±"));
    }
}
