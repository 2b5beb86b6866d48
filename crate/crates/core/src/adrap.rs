//! Incremental maintenance of a built tree: document insertion and removal.
//!
//! Updates run layer by layer. At each layer, removed nodes are taken out of
//! the retained local mixtures and new nodes are routed to a local group by
//! the global model and inserted there. The links to the next layer are then
//! re-derived from the mixtures: clusters whose member set changed, or that
//! are new, are re-summarized, and re-summarization propagates to their
//! ancestors. New cluster nodes are inserted one layer up in the same way.
//! Each affected node is summarized once per update call.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::clustering::MIN_FIT_SIZE;
use crate::embedding::Embedder;
use crate::gmm::{adaptive_cluster_update, fit_em, refit_smaller, remove_point, ClusterState, UpdateBranch};
use crate::reduction::fit_reducer;
use crate::seed::mix_seed;
use crate::summarize::{CountingSummarizer, Summarizer};
use crate::text::Chunk;
use crate::tree::{build_tree, NodeId, NodeKind, RaTree, TreeConfig, TreeError, TreeNode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    /// Local mixtures are updated with the adaptive insertion rule.
    #[default]
    Adaptive,
    /// New points join their most probable cluster; mixtures stay untouched.
    Greedy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct UpdateOptions {
    pub mode: UpdateMode,
    /// After deletions, refit affected local mixtures with fewer components.
    pub recluster_on_delete: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct LayerChange {
    /// Layer whose nodes were clustered.
    pub layer: usize,
    /// Cluster nodes (on `layer + 1`) whose mixture parameters or member set changed.
    pub changed_clusters: Vec<NodeId>,
    pub created_clusters: Vec<NodeId>,
    pub removed_clusters: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct UpdateReport {
    pub new_node_ids: Vec<NodeId>,
    pub removed_node_ids: Vec<NodeId>,
    pub layer_changes: Vec<LayerChange>,
    /// Every node whose summary was (re)generated, in generation order.
    pub resummarized_node_ids: Vec<NodeId>,
    pub summary_call_count: usize,
    pub new_layers_created: usize,
    /// Insertions that found an oversized cluster and tried to split it.
    pub split_attempts: usize,
    /// Insertions after which the number of components changed.
    pub splits: usize,
    /// Local mixture updates that changed any parameter.
    pub gmm_updates: usize,
}

impl UpdateReport {
    /// Appends the report of a later update.
    pub fn absorb(&mut self, other: UpdateReport) {
        self.new_node_ids.extend(other.new_node_ids);
        self.removed_node_ids.extend(other.removed_node_ids);
        self.layer_changes.extend(other.layer_changes);
        self.resummarized_node_ids.extend(other.resummarized_node_ids);
        self.summary_call_count += other.summary_call_count;
        self.new_layers_created += other.new_layers_created;
        self.split_attempts += other.split_attempts;
        self.splits += other.splits;
        self.gmm_updates += other.gmm_updates;
    }
}

struct Engine<'a> {
    t: RaTree,
    embedder: &'a dyn Embedder,
    summarizer: &'a dyn Summarizer,
    opts: UpdateOptions,
    report: UpdateReport,
    dirty: BTreeSet<NodeId>,
}

impl Engine<'_> {
    fn run(&mut self, mut inserts: Vec<NodeId>, mut removals: Vec<NodeId>) -> Result<(), TreeError> {
        let mut layer = 0;
        while layer < self.t.layers.len() {
            let orphaned = self.delete_nodes(layer, &removals);
            if layer >= self.t.layer_models.len() {
                break;
            }
            let mut change = LayerChange { layer, ..LayerChange::default() };
            let mut param_changed: BTreeSet<(usize, usize)> = BTreeSet::new();
            self.remove_from_models(layer, &removals, &mut param_changed)?;
            self.insert_into_models(layer, &inserts, &mut param_changed)?;
            let (created, deleted, mut membership) = self.relink(layer);
            // parents that lost a child were already detached by delete_nodes
            membership.extend(orphaned.into_iter().filter(|p| self.t.nodes.get(p).is_some_and(|n| !n.children.is_empty())));
            membership.sort();
            membership.dedup();

            let locals = &self.t.layer_models[layer].locals;
            let mut changed: BTreeSet<NodeId> = membership.iter().copied().collect();
            for (l, c) in param_changed {
                if let Some(Some(id)) = locals.get(l).and_then(|lm| lm.cluster_nodes.get(c)) {
                    changed.insert(*id);
                }
            }
            changed.extend(created.iter().copied());
            change.changed_clusters = changed.into_iter().collect();
            change.created_clusters = created.clone();
            change.removed_clusters = deleted.clone();

            self.dirty.extend(membership);
            self.dirty.extend(created.iter().copied());
            self.resummarize_layer(layer + 1)?;

            self.report.new_node_ids.extend(created.iter().copied());
            self.report.layer_changes.push(change);
            inserts = created;
            removals = deleted;
            layer += 1;
        }
        self.trim_empty_layers();
        let before = self.t.next_id;
        let (layers, calls) = self.t.grow_while_needed(self.embedder, self.summarizer)?;
        self.report.new_layers_created += layers;
        self.report.summary_call_count += calls;
        let grown: Vec<NodeId> = (before..self.t.next_id).map(NodeId).collect();
        self.report.resummarized_node_ids.extend(grown.iter().copied());
        self.report.new_node_ids.extend(grown);
        Ok(())
    }

    /// Drops `ids` from the tree and returns their former parents.
    fn delete_nodes(&mut self, layer: usize, ids: &[NodeId]) -> BTreeSet<NodeId> {
        let mut orphaned = BTreeSet::new();
        if ids.is_empty() {
            return orphaned;
        }
        let gone: BTreeSet<NodeId> = ids.iter().copied().collect();
        if let Some(list) = self.t.layers.get_mut(layer) {
            list.retain(|id| !gone.contains(id));
        }
        for id in ids {
            if let Some(node) = self.t.nodes.remove(id) {
                for p in &node.parents {
                    if let Some(pn) = self.t.nodes.get_mut(p) {
                        pn.children.remove(id);
                        orphaned.insert(*p);
                    }
                }
                for c in &node.children {
                    if let Some(cn) = self.t.nodes.get_mut(c) {
                        cn.parents.remove(id);
                    }
                }
                self.report.removed_node_ids.push(*id);
            }
        }
        orphaned.retain(|p| !gone.contains(p));
        orphaned
    }

    fn remove_from_models(
        &mut self,
        layer: usize,
        removals: &[NodeId],
        param_changed: &mut BTreeSet<(usize, usize)>,
    ) -> Result<(), TreeError> {
        if removals.is_empty() {
            return Ok(());
        }
        let gone: BTreeSet<NodeId> = removals.iter().copied().collect();
        let seed = self.t.config.seed;
        let threshold = self.t.config.adaptive.assign_threshold;
        let em = self.t.config.clustering.em;
        let recluster = self.opts.recluster_on_delete;
        for (l, local) in self.t.layer_models[layer].locals.iter_mut().enumerate() {
            let mut touched = false;
            while let Some(idx) = local.members.iter().position(|m| gone.contains(m)) {
                if let Some(st) = &local.state {
                    let before = st.model.clone();
                    let next = remove_point(st, idx, local.absorbed[idx])?;
                    for c in 0..next.model.k {
                        if next.model.means[c] != before.means[c] || next.model.weights[c] != before.weights[c] {
                            param_changed.insert((l, c));
                        }
                    }
                    local.state = Some(next);
                }
                local.members.remove(idx);
                local.absorbed.remove(idx);
                touched = true;
            }
            if !touched {
                continue;
            }
            if local.members.is_empty() {
                local.state = None;
                local.reducer = None;
                local.cluster_nodes = vec![None];
                continue;
            }
            if recluster {
                if let Some(st) = &local.state {
                    let (next, origin) = refit_smaller(st, threshold, &em, mix_seed(seed, 0xde1e_0000 + l as u64))?;
                    local.cluster_nodes = origin.iter().map(|o| o.and_then(|o| local.cluster_nodes[o])).collect();
                    (0..next.model.k).for_each(|c| {
                        param_changed.insert((l, c));
                    });
                    local.absorbed = vec![true; local.members.len()];
                    local.state = Some(next);
                    self.report.gmm_updates += 1;
                }
            }
        }
        Ok(())
    }

    fn insert_into_models(
        &mut self,
        layer: usize,
        inserts: &[NodeId],
        param_changed: &mut BTreeSet<(usize, usize)>,
    ) -> Result<(), TreeError> {
        let cfg = self.t.config.clone();
        for &id in inserts {
            let x = self.t.nodes[&id].embedding.0.clone();
            let lm = &mut self.t.layer_models[layer];
            let l = match &lm.global {
                Some(g) => g.model.argmax(&g.reducer.transform(&x))?,
                None => 0,
            };
            if lm.locals.is_empty() {
                return Err(TreeError::MissingModels(layer));
            }
            let l = l.min(lm.locals.len() - 1);
            let local = &mut lm.locals[l];
            match (&local.state, &local.reducer, self.opts.mode) {
                (Some(st), Some(reducer), UpdateMode::Adaptive) => {
                    let v = reducer.transform(&x);
                    let seed = mix_seed(cfg.seed, (layer as u64) << 48 ^ id.0);
                    let out = adaptive_cluster_update(st, &v, &cfg.adaptive, &cfg.clustering.em, seed)?;
                    match &out.branch {
                        UpdateBranch::FullEm { oversized, .. } => {
                            if *oversized > 0 {
                                self.report.split_attempts += 1;
                            }
                            local.absorbed.iter_mut().for_each(|a| *a = true);
                        }
                        UpdateBranch::Incremental { split_attempts, .. } => {
                            if !split_attempts.is_empty() {
                                self.report.split_attempts += 1;
                            }
                        }
                    }
                    if out.state.model.k != st.model.k {
                        self.report.splits += 1;
                    }
                    if out.state.model != st.model {
                        self.report.gmm_updates += 1;
                    }
                    let old_nodes = std::mem::take(&mut local.cluster_nodes);
                    local.cluster_nodes = out.origin.iter().map(|o| o.and_then(|o| old_nodes[o])).collect();
                    param_changed.extend(out.changed_clusters.iter().map(|&c| (l, c)));
                    local.state = Some(out.state);
                    local.absorbed.push(true);
                }
                (Some(st), Some(reducer), UpdateMode::Greedy) => {
                    let v = reducer.transform(&x);
                    let c = st.model.argmax(&v)?;
                    let st = local.state.as_mut().expect("state checked above");
                    st.points.push(v);
                    st.assignments.push(vec![c]);
                    local.absorbed.push(false);
                }
                _ => {
                    local.absorbed.push(false);
                }
            }
            local.members.push(id);
            if local.state.is_none() && self.opts.mode == UpdateMode::Adaptive && local.members.len() >= MIN_FIT_SIZE {
                let high: Vec<Vec<f64>> = local.members.iter().map(|m| self.t.nodes[m].embedding.0.clone()).collect();
                let reducer = fit_reducer(&high, cfg.clustering.local_neighbors, cfg.clustering.target_dim)?;
                let low = reducer.train_low.clone();
                let model = fit_em(&low, 1, &cfg.clustering.em, mix_seed(cfg.seed, id.0))?.model;
                local.state = Some(ClusterState { model, assignments: vec![vec![0]; low.len()], points: low });
                local.reducer = Some(reducer);
                local.absorbed = vec![true; local.members.len()];
                local.cluster_nodes.truncate(1);
                param_changed.insert((l, 0));
                self.report.gmm_updates += 1;
            }
        }
        Ok(())
    }

    /// Re-derives the nodes of `layer + 1` and their child sets from the
    /// mixtures of `layer`. Returns (created, deleted, member set changed).
    fn relink(&mut self, layer: usize) -> (Vec<NodeId>, Vec<NodeId>, Vec<NodeId>) {
        let mut derived: BTreeMap<NodeId, BTreeSet<NodeId>> = BTreeMap::new();
        let mut created = Vec::new();
        let mut locals = std::mem::take(&mut self.t.layer_models[layer].locals);
        for local in locals.iter_mut() {
            let comps = local.component_members();
            local.cluster_nodes.resize(comps.len(), None);
            for (c, members) in comps.into_iter().enumerate() {
                if members.is_empty() {
                    local.cluster_nodes[c] = None;
                    continue;
                }
                let id = match local.cluster_nodes[c] {
                    Some(id) => id,
                    None => {
                        let id = self.t.alloc_id();
                        self.t.nodes.insert(
                            id,
                            TreeNode {
                                id,
                                layer: layer + 1,
                                kind: NodeKind::Summary,
                                text: String::new(),
                                token_count: 0,
                                embedding: crate::embedding::Embedding(Vec::new()),
                                children: BTreeSet::new(),
                                parents: BTreeSet::new(),
                                source: None,
                            },
                        );
                        self.t.layers[layer + 1].push(id);
                        local.cluster_nodes[c] = Some(id);
                        created.push(id);
                        id
                    }
                };
                derived.entry(id).or_default().extend(members);
            }
        }
        self.t.layer_models[layer].locals = locals;

        let mut deleted = Vec::new();
        let mut membership = Vec::new();
        for id in self.t.layers[layer + 1].clone() {
            match derived.get(&id) {
                None => deleted.push(id),
                Some(children) => {
                    let node = self.t.nodes.get_mut(&id).expect("listed node exists");
                    if &node.children != children && !created.contains(&id) {
                        membership.push(id);
                    }
                    node.children = children.clone();
                }
            }
        }
        for id in self.t.layers[layer].clone() {
            self.t.nodes.get_mut(&id).expect("listed node exists").parents.clear();
        }
        for (p, children) in &derived {
            for c in children {
                self.t.nodes.get_mut(c).expect("member node exists").parents.insert(*p);
            }
        }
        // deleted cluster nodes lose their children here; their own parents are
        // handled when the next layer's mixtures drop them
        let gone: BTreeSet<NodeId> = deleted.iter().copied().collect();
        self.t.layers[layer + 1].retain(|id| !gone.contains(id));
        for id in &deleted {
            if let Some(n) = self.t.nodes.get_mut(id) {
                n.children.clear();
            }
        }
        (created, deleted, membership)
    }

    fn resummarize_layer(&mut self, layer: usize) -> Result<(), TreeError> {
        let todo: Vec<NodeId> = self
            .dirty
            .iter()
            .copied()
            .filter(|id| self.t.nodes.get(id).is_some_and(|n| n.layer == layer && !n.children.is_empty()))
            .collect();
        let calls = self.t.resummarize(&todo, self.embedder, self.summarizer)?;
        self.report.summary_call_count += calls;
        for id in &todo {
            self.dirty.remove(id);
            self.dirty.extend(self.t.nodes[id].parents.iter().copied());
        }
        self.report.resummarized_node_ids.extend(todo);
        Ok(())
    }

    fn trim_empty_layers(&mut self) {
        while self.t.layers.last().is_some_and(|l| l.is_empty()) {
            self.t.layers.pop();
            if self.t.layer_models.len() >= self.t.layers.len() && !self.t.layer_models.is_empty() {
                self.t.layer_models.pop();
            }
        }
        // nodes left on the new top layer have no parents any more
        if let Some(top) = self.t.layers.last().cloned() {
            for id in top {
                self.t.nodes.get_mut(&id).expect("listed node exists").parents.clear();
            }
        }
        self.t.layer_models.truncate(self.t.layers.len().saturating_sub(1));
    }
}

fn run_update(
    tree: &RaTree,
    chunks: &[Chunk],
    removals: Vec<NodeId>,
    embedder: &dyn Embedder,
    summarizer: &dyn Summarizer,
    opts: UpdateOptions,
) -> Result<(RaTree, UpdateReport), TreeError> {
    let mut engine = Engine {
        t: tree.clone(),
        embedder,
        summarizer,
        opts,
        report: UpdateReport::default(),
        dirty: BTreeSet::new(),
    };
    let was_empty = engine.t.is_empty();
    let leaves = if chunks.is_empty() { Vec::new() } else { engine.t.push_leaves(chunks, embedder)? };
    engine.report.new_node_ids.extend(leaves.iter().copied());
    if was_empty {
        engine.t.grow_while_needed(embedder, summarizer).map(|(layers, calls)| {
            engine.report.new_layers_created += layers;
            engine.report.summary_call_count += calls;
        })?;
        let all: Vec<NodeId> = engine.t.nodes.keys().copied().filter(|id| !leaves.contains(id)).collect();
        engine.report.resummarized_node_ids.extend(all.iter().copied());
        engine.report.new_node_ids.extend(all);
    } else {
        engine.run(leaves, removals)?;
    }
    debug_assert_eq!(engine.report.summary_call_count, engine.report.resummarized_node_ids.len());
    Ok((engine.t, engine.report))
}

/// Inserts a batch of chunks (typically one document) and returns the
/// updated tree. Summaries touched by several chunks are regenerated once.
pub fn add_chunks(
    tree: &RaTree,
    chunks: &[Chunk],
    embedder: &dyn Embedder,
    summarizer: &dyn Summarizer,
    opts: UpdateOptions,
) -> Result<(RaTree, UpdateReport), TreeError> {
    if chunks.is_empty() {
        return Err(TreeError::NoChunks);
    }
    if let Some(c) = chunks.iter().find(|c| tree.leaf_by_chunk(&c.id).is_some()) {
        return Err(TreeError::Invalid(format!("chunk {} is already indexed", c.id)));
    }
    run_update(tree, chunks, Vec::new(), embedder, summarizer, opts)
}

/// Inserts a single chunk.
pub fn add_document(
    tree: &RaTree,
    chunk: &Chunk,
    embedder: &dyn Embedder,
    summarizer: &dyn Summarizer,
    opts: UpdateOptions,
) -> Result<(RaTree, UpdateReport), TreeError> {
    add_chunks(tree, std::slice::from_ref(chunk), embedder, summarizer, opts)
}

/// Removes the given leaves and re-summarizes their ancestors.
pub fn remove_leaves(
    tree: &RaTree,
    leaves: &[NodeId],
    embedder: &dyn Embedder,
    summarizer: &dyn Summarizer,
    opts: UpdateOptions,
) -> Result<(RaTree, UpdateReport), TreeError> {
    for id in leaves {
        match tree.node(*id) {
            Some(n) if n.kind == NodeKind::Leaf => {}
            _ => return Err(TreeError::Unknown(id.to_string())),
        }
    }
    if leaves.is_empty() {
        return Err(TreeError::Invalid("nothing to remove".into()));
    }
    run_update(tree, &[], leaves.to_vec(), embedder, summarizer, opts)
}

/// Removes the leaf holding `chunk_id`.
pub fn remove_chunk(
    tree: &RaTree,
    chunk_id: &str,
    embedder: &dyn Embedder,
    summarizer: &dyn Summarizer,
    opts: UpdateOptions,
) -> Result<(RaTree, UpdateReport), TreeError> {
    let id = tree.leaf_by_chunk(chunk_id).ok_or_else(|| TreeError::Unknown(chunk_id.to_string()))?;
    remove_leaves(tree, &[id], embedder, summarizer, opts)
}

/// Removes every leaf of document `doc_id`.
pub fn remove_document(
    tree: &RaTree,
    doc_id: &str,
    embedder: &dyn Embedder,
    summarizer: &dyn Summarizer,
    opts: UpdateOptions,
) -> Result<(RaTree, UpdateReport), TreeError> {
    let ids = tree.leaves_of_document(doc_id);
    if ids.is_empty() {
        return Err(TreeError::Unknown(doc_id.to_string()));
    }
    remove_leaves(tree, &ids, embedder, summarizer, opts)
}

/// Splits consecutive chunks into per-document groups, preserving order.
pub fn group_by_document(chunks: &[Chunk]) -> Vec<&[Chunk]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=chunks.len() {
        if i == chunks.len() || chunks[i].doc_id != chunks[start].doc_id {
            if i > start {
                out.push(&chunks[start..i]);
            }
            start = i;
        }
    }
    out
}

/// How streamed chunks are grouped into update calls. Within one call every
/// chunk is inserted into the mixtures one at a time, and each affected
/// summary is regenerated once.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IngestBatching {
    PerChunk,
    PerDocument,
    #[default]
    All,
}

impl std::str::FromStr for IngestBatching {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "chunk" | "per_chunk" => Ok(Self::PerChunk),
            "document" | "per_document" => Ok(Self::PerDocument),
            "all" => Ok(Self::All),
            other => Err(format!("unknown batching {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitIngest {
    pub total_chunks: usize,
    pub initial_chunks: usize,
    /// Summary calls for the initial tree on the first fraction.
    pub initial_build_calls: usize,
    /// Summary calls for streaming the remaining chunks through adRAP.
    pub adrap_calls: usize,
    /// Summary calls for one full build on the complete corpus.
    pub full_rebuild_calls: usize,
    pub initial_build_secs: f64,
    pub adrap_secs: f64,
    pub full_rebuild_secs: f64,
    pub documents_added: usize,
    pub update_calls: usize,
    pub split_attempts: usize,
    pub stats_adrap: crate::tree::TreeStats,
    pub stats_rebuild: crate::tree::TreeStats,
}

impl SplitIngest {
    /// Calls for "initial build, then adRAP".
    pub fn adrap_total(&self) -> usize {
        self.initial_build_calls + self.adrap_calls
    }

    /// Calls for "initial build, then full rebuild".
    pub fn rebuild_total(&self) -> usize {
        self.initial_build_calls + self.full_rebuild_calls
    }
}

/// Builds on the first `⌈fraction·n⌉` chunks, streams the rest through
/// adRAP, and separately rebuilds on everything.
pub fn simulate_split_ingest(
    chunks: &[Chunk],
    fraction: f64,
    embedder: &dyn Embedder,
    summarizer: &dyn Summarizer,
    config: TreeConfig,
    opts: UpdateOptions,
    batching: IngestBatching,
) -> Result<(RaTree, SplitIngest), TreeError> {
    if !(0.0..=1.0).contains(&fraction) || fraction == 0.0 {
        return Err(TreeError::Invalid(format!("fraction {fraction} must be in (0, 1]")));
    }
    if chunks.is_empty() {
        return Err(TreeError::NoChunks);
    }
    let n0 = ((fraction * chunks.len() as f64).ceil() as usize).clamp(1, chunks.len());
    let counting = CountingSummarizer::new(summarizer);

    let t0 = Instant::now();
    let mut tree = build_tree(&chunks[..n0], embedder, &counting, config.clone())?;
    let initial_build_secs = t0.elapsed().as_secs_f64();
    let initial_build_calls = counting.calls();

    counting.reset();
    let t1 = Instant::now();
    let mut report = UpdateReport::default();
    let rest = &chunks[n0..];
    let documents_added = group_by_document(rest).len();
    let groups: Vec<&[Chunk]> = match batching {
        IngestBatching::PerChunk => rest.chunks(1).collect(),
        IngestBatching::PerDocument => group_by_document(rest),
        IngestBatching::All if rest.is_empty() => Vec::new(),
        IngestBatching::All => vec![rest],
    };
    for group in &groups {
        let (next, r) = add_chunks(&tree, group, embedder, &counting, opts)?;
        tree = next;
        report.absorb(r);
    }
    let adrap_secs = t1.elapsed().as_secs_f64();
    let adrap_calls = counting.calls();
    debug_assert_eq!(adrap_calls, report.summary_call_count);

    counting.reset();
    let t2 = Instant::now();
    let rebuilt = build_tree(chunks, embedder, &counting, config)?;
    let full_rebuild_secs = t2.elapsed().as_secs_f64();
    let full_rebuild_calls = counting.calls();

    let stats_adrap = tree.stats();
    Ok((
        tree,
        SplitIngest {
            total_chunks: chunks.len(),
            initial_chunks: n0,
            initial_build_calls,
            adrap_calls,
            full_rebuild_calls,
            initial_build_secs,
            adrap_secs,
            full_rebuild_secs,
            documents_added,
            update_calls: groups.len(),
            split_attempts: report.split_attempts,
            stats_adrap,
            stats_rebuild: rebuilt.stats(),
        },
    ))
}

/// Shared, snapshot-consistent access to a tree. Readers get an immutable
/// snapshot; writers are serialized and publish a new tree atomically.
#[derive(Debug)]
pub struct IndexHandle {
    current: RwLock<Arc<RaTree>>,
    writer: Mutex<()>,
}

impl IndexHandle {
    pub fn new(tree: RaTree) -> Self {
        Self { current: RwLock::new(Arc::new(tree)), writer: Mutex::new(()) }
    }

    pub fn snapshot(&self) -> Arc<RaTree> {
        self.current.read().expect("index lock poisoned").clone()
    }

    /// Runs `f` on the latest tree and publishes its result on success.
    pub fn update<R>(&self, f: impl FnOnce(&RaTree) -> Result<(RaTree, R), TreeError>) -> Result<R, TreeError> {
        let _guard = self.writer.lock().expect("writer lock poisoned");
        let base = self.snapshot();
        let (next, out) = f(&base)?;
        *self.current.write().expect("index lock poisoned") = Arc::new(next);
        Ok(out)
    }
}
