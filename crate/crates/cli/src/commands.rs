use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ratree::adrap::{add_chunks, group_by_document, remove_chunk, remove_document, simulate_split_ingest, IngestBatching, SplitIngest, UpdateReport};
use ratree::clustering::{ClusteringConfig, ClusteringMode};
use ratree::corpus::{chunk_documents, load_dir, load_file, synthetic_corpus, SyntheticSpec};
use ratree::embedding::Embedder;
use ratree::gmm::AdaptiveConfig;
use ratree::persist::{load_index, save_index, save_index_locked, IndexLock, IndexManifest, IndexMeta, LOCK_FILE, MANIFEST_FILE};
use ratree::postqfrap::{run_postqfrap, NaiveRetriever, PostQfrapConfig, Retriever, TreeRetriever};
use ratree::summarize::{qa_answer, CountingSummarizer};
use ratree::text::{Chunk, WordPunctCounter};
use ratree::tree::{build_tree, NodeKind, RaTree, TreeConfig, TreeStats};
use serde::Serialize;

use crate::settings::{RetrieverKind, Settings};

#[derive(Debug, Clone, Copy)]
pub struct Output {
    pub json: bool,
}

impl Output {
    fn emit<T: Serialize>(&self, value: &T, text: impl FnOnce() -> String) -> Result<()> {
        if self.json {
            println!("{}", serde_json::to_string_pretty(value)?);
        } else {
            println!("{}", text());
        }
        Ok(())
    }
}

fn tree_config(s: &Settings, initial_size: usize) -> TreeConfig {
    let clustering = ClusteringConfig { mode: s.clustering.unwrap_or(ClusteringMode::TwoStep), ..ClusteringConfig::default() };
    TreeConfig {
        clustering,
        summary_tokens: s.summary_tokens,
        adaptive: AdaptiveConfig::for_initial_size(initial_size),
        seed: s.seed,
        ..TreeConfig::default()
    }
}

fn load_chunks(s: &Settings, corpus: &Path) -> Result<Vec<Chunk>> {
    let docs = load_dir(corpus)?;
    Ok(chunk_documents(&docs, &s.chunking, &WordPunctCounter)?)
}

/// Loads an index for reading; refuses while a writer holds the lock.
fn open_for_read(s: &Settings, index: &Path) -> Result<(RaTree, IndexManifest, Box<dyn Embedder>)> {
    if index.join(LOCK_FILE).exists() {
        bail!("index {} is locked by another writer", index.display());
    }
    let (tree, manifest) = load_index(index).with_context(|| format!("loading index {}", index.display()))?;
    let embedder = s.embedder_for(&manifest)?;
    Ok((tree, manifest, embedder))
}

#[derive(Serialize)]
struct BuildSummary {
    documents: usize,
    chunks: usize,
    summary_calls: usize,
    stats: TreeStats,
}

pub fn build(s: &Settings, corpus: &Path, index: &Path, out: Output) -> Result<()> {
    let chunks = load_chunks(s, corpus)?;
    let embedder = s.embedder()?;
    let inner = s.summarizer()?;
    let summarizer = CountingSummarizer::new(inner.as_ref());
    let tree = build_tree(&chunks, embedder.as_ref(), &summarizer, tree_config(s, chunks.len()))?;
    save_index(&tree, index, &IndexMeta::new(embedder.as_ref(), s.chunking))?;
    let summary = BuildSummary {
        documents: group_by_document(&chunks).len(),
        chunks: chunks.len(),
        summary_calls: summarizer.calls(),
        stats: tree.stats(),
    };
    out.emit(&summary, || {
        format!(
            "indexed {} documents ({} chunks) into {} with {} summary calls\n{}",
            summary.documents,
            summary.chunks,
            index.display(),
            summary.summary_calls,
            summary.stats
        )
    })
}

fn ids<T: std::fmt::Display>(v: &[T]) -> String {
    if v.is_empty() {
        return "-".to_string();
    }
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

#[derive(Serialize)]
struct UpdateSummary<'a> {
    new_leaves: Vec<String>,
    removed_leaves: Vec<String>,
    report: &'a UpdateReport,
}

fn render_report(r: &UpdateSummary) -> String {
    let rep = r.report;
    let mut lines = vec![
        format!("new leaves: {} ({})", r.new_leaves.len(), ids(&r.new_leaves)),
        format!("removed leaves: {} ({})", r.removed_leaves.len(), ids(&r.removed_leaves)),
        format!("new nodes: {}", ids(&rep.new_node_ids)),
        format!("removed nodes: {}", ids(&rep.removed_node_ids)),
        format!("resummarized: {}", ids(&rep.resummarized_node_ids)),
        format!("summary calls: {}", rep.summary_call_count),
        format!("gmm updates: {}", rep.gmm_updates),
        format!("split attempts: {} (splits: {})", rep.split_attempts, rep.splits),
        format!("new layers: {}", rep.new_layers_created),
    ];
    for c in &rep.layer_changes {
        lines.push(format!(
            "layer {}: changed {} | created {} | removed {}",
            c.layer,
            ids(&c.changed_clusters),
            ids(&c.created_clusters),
            ids(&c.removed_clusters)
        ));
    }
    lines.join("\n")
}

fn leaf_chunk_ids(tree: &RaTree, nodes: &[ratree::tree::NodeId]) -> Vec<String> {
    nodes
        .iter()
        .filter_map(|id| tree.node(*id))
        .filter(|n| n.kind == NodeKind::Leaf)
        .filter_map(|n| n.source.as_ref().map(|src| src.chunk_id.clone()))
        .collect()
}

fn lock_existing(index: &Path) -> Result<IndexLock> {
    if !index.join(MANIFEST_FILE).is_file() {
        bail!("{} does not contain an index", index.display());
    }
    Ok(IndexLock::acquire(index)?)
}

pub fn add(s: &Settings, index: &Path, files: &[PathBuf], out: Output) -> Result<()> {
    let lock = lock_existing(index)?;
    let (mut tree, manifest) = load_index(index).with_context(|| format!("loading index {}", index.display()))?;
    let embedder = s.embedder_for(&manifest)?;
    let summarizer = s.summarizer()?;
    let mut chunks = Vec::new();
    for f in files {
        let doc = load_file(f)?;
        if !tree.leaves_of_document(&doc.id).is_empty() {
            bail!("document {} is already indexed", doc.id);
        }
        chunks.extend(chunk_documents(std::slice::from_ref(&doc), &manifest.chunking, &WordPunctCounter)?);
    }
    if chunks.is_empty() {
        bail!("no documents: the given files are empty");
    }
    let batches: Vec<&[Chunk]> = match s.batching.unwrap_or_default() {
        IngestBatching::All => vec![&chunks[..]],
        IngestBatching::PerDocument => group_by_document(&chunks),
        IngestBatching::PerChunk => chunks.chunks(1).collect(),
    };
    let mut report = UpdateReport::default();
    for batch in batches {
        let (t, r) = add_chunks(&tree, batch, embedder.as_ref(), summarizer.as_ref(), s.update)?;
        tree = t;
        report.absorb(r);
    }
    save_index_locked(&tree, &lock, &IndexMeta { embedder: manifest.embedder.clone(), chunking: manifest.chunking })?;
    drop(lock);
    let summary = UpdateSummary { new_leaves: leaf_chunk_ids(&tree, &report.new_node_ids), removed_leaves: Vec::new(), report: &report };
    out.emit(&summary, || format!("added {} chunks from {} file(s)\n{}", chunks.len(), files.len(), render_report(&summary)))
}

pub fn remove(s: &Settings, index: &Path, id: &str, chunk: bool, out: Output) -> Result<()> {
    let lock = lock_existing(index)?;
    let (tree, manifest) = load_index(index).with_context(|| format!("loading index {}", index.display()))?;
    let embedder = s.embedder_for(&manifest)?;
    let summarizer = s.summarizer()?;
    let (new_tree, report) = if chunk {
        remove_chunk(&tree, id, embedder.as_ref(), summarizer.as_ref(), s.update)
    } else {
        remove_document(&tree, id, embedder.as_ref(), summarizer.as_ref(), s.update)
    }
    .with_context(|| format!("removing {}", if chunk { "chunk" } else { "document" }))?;
    save_index_locked(&new_tree, &lock, &IndexMeta { embedder: manifest.embedder.clone(), chunking: manifest.chunking })?;
    drop(lock);
    let summary = UpdateSummary { new_leaves: Vec::new(), removed_leaves: leaf_chunk_ids(&tree, &report.removed_node_ids), report: &report };
    out.emit(&summary, || format!("removed {id}\n{}", render_report(&summary)))
}

#[derive(Serialize)]
struct Hit {
    rank: usize,
    node: u64,
    layer: usize,
    similarity: f64,
    tokens: usize,
    chunk_id: Option<String>,
    text: String,
}

pub fn query(s: &Settings, index: &Path, q: &str, out: Output) -> Result<()> {
    let (tree, _, embedder) = open_for_read(s, index)?;
    let qv = embedder.embed(q)?;
    let found = tree.collapsed_query(&qv.0, s.k.unwrap_or(usize::MAX), s.token_limit)?;
    let hits: Vec<Hit> = found
        .into_iter()
        .enumerate()
        .map(|(i, r)| Hit {
            rank: i + 1,
            node: r.id.0,
            layer: r.layer,
            similarity: r.similarity,
            tokens: r.token_count,
            chunk_id: tree.node(r.id).and_then(|n| n.source.as_ref()).map(|src| src.chunk_id.clone()),
            text: r.text,
        })
        .collect();
    out.emit(&hits, || {
        let mut lines = Vec::new();
        for h in &hits {
            let src = h.chunk_id.as_deref().map_or_else(|| "summary".to_string(), |c| format!("chunk {c}"));
            lines.push(format!("[{}] node {} layer {} sim {:.4} tokens {} ({src})", h.rank, h.node, h.layer, h.similarity, h.tokens));
            lines.push(format!("    {}", h.text.replace('\n', " ")));
        }
        lines.push(format!("{} contexts, {} tokens", hits.len(), hits.iter().map(|h| h.tokens).sum::<usize>()));
        lines.join("\n")
    })
}

#[derive(Serialize)]
struct AskSummary {
    query: String,
    retriever: RetrieverKind,
    k0: usize,
    budget: usize,
    retrieval_query: String,
    retrieved: usize,
    tree_layers: usize,
    tree_summary_calls: usize,
    context_tokens: usize,
    context: String,
    answer: Option<String>,
    answered: Option<bool>,
}

pub fn ask(s: &Settings, index: &Path, q: &str, out: Output) -> Result<()> {
    let (tree, _, embedder) = open_for_read(s, index)?;
    let summarizer = s.summarizer()?;
    let naive;
    let tree_retriever;
    let retriever: &dyn Retriever = match s.retriever {
        RetrieverKind::Tree => {
            tree_retriever = TreeRetriever::new(&tree, embedder.as_ref());
            &tree_retriever
        }
        RetrieverKind::Naive => {
            naive = NaiveRetriever::from_tree_leaves(&tree, embedder.as_ref());
            &naive
        }
    };
    let clustering = match s.clustering.unwrap_or(ClusteringMode::OneStep) {
        ClusteringMode::OneStep => ClusteringConfig::one_step(),
        ClusteringMode::TwoStep => ClusteringConfig::default(),
    };
    let cfg = PostQfrapConfig {
        k0: s.k0,
        token_budget: s.budget,
        expand_query: s.expand,
        summary_tokens: s.summary_tokens,
        clustering,
        seed: s.seed,
    };
    let result = run_postqfrap(retriever, q, &cfg, embedder.as_ref(), summarizer.as_ref())?;
    let answer = if s.answer { Some(qa_answer(s.chat()?.as_ref(), &result.summary, q, s.budget)?) } else { None };
    let summary = AskSummary {
        query: q.to_string(),
        retriever: s.retriever,
        k0: s.k0,
        budget: s.budget,
        retrieval_query: result.retrieval_query,
        retrieved: result.documents.len(),
        tree_layers: result.tree_layers,
        tree_summary_calls: result.tree_summary_calls,
        context_tokens: result.token_count,
        context: result.summary,
        answered: answer.as_ref().map(|a| a.answered),
        answer: answer.map(|a| a.text),
    };
    out.emit(&summary, || {
        let mut lines = vec![
            format!("query: {}", summary.query),
            format!("retriever {}, k0 {}, budget {}", summary.retriever.as_str(), summary.k0, summary.budget),
        ];
        if summary.retrieval_query != summary.query {
            lines.push(format!("expanded query: {}", summary.retrieval_query));
        }
        lines.push(format!(
            "retrieved {} documents; per-query tree has {} layers ({} summary calls)",
            summary.retrieved, summary.tree_layers, summary.tree_summary_calls
        ));
        lines.push(format!("context ({} tokens):", summary.context_tokens));
        lines.push(summary.context.clone());
        if let (Some(a), Some(ok)) = (&summary.answer, summary.answered) {
            lines.push(format!("answer ({}): {a}", if ok { "answered" } else { "unanswered" }));
        }
        lines.join("\n")
    })
}

#[derive(Serialize)]
struct StatsSummary {
    embedder: String,
    embedding_dim: usize,
    stats: TreeStats,
}

pub fn stats(index: &Path, out: Output) -> Result<()> {
    if index.join(LOCK_FILE).exists() {
        bail!("index {} is locked by another writer", index.display());
    }
    let (tree, manifest) = load_index(index).with_context(|| format!("loading index {}", index.display()))?;
    let summary = StatsSummary { embedder: manifest.embedder.name, embedding_dim: manifest.embedder.dim, stats: tree.stats() };
    out.emit(&summary, || format!("{:<28}{} ({}d)\n{}", "Embedder", summary.embedder, summary.embedding_dim, summary.stats))
}

#[derive(Serialize)]
struct BenchRow {
    batching: IngestBatching,
    result: SplitIngest,
}

/// Published figures from full-size datasets, printed for context.
const REFERENCE: [(&str, usize, usize, f64, f64); 2] = [("QASPER", 530, 761, 638.0, 1093.0), ("QuALITY", 372, 451, 342.0, 524.0)];

pub fn bench_split(s: &Settings, corpus: &Path, out: Output) -> Result<()> {
    let chunks = load_chunks(s, corpus)?;
    let embedder = s.embedder()?;
    let summarizer = s.summarizer()?;
    let modes = match s.batching {
        Some(b) => vec![b],
        None => vec![IngestBatching::All, IngestBatching::PerDocument, IngestBatching::PerChunk],
    };
    let initial = ((s.fraction * chunks.len() as f64).ceil() as usize).clamp(1, chunks.len());
    let mut rows = Vec::new();
    for batching in modes {
        let (_, result) =
            simulate_split_ingest(&chunks, s.fraction, embedder.as_ref(), summarizer.as_ref(), tree_config(s, initial), s.update, batching)?;
        rows.push(BenchRow { batching, result });
    }
    out.emit(&rows, || {
        let first = &rows[0].result;
        let mut lines = vec![
            format!(
                "corpus: {} chunks; initial build on {} ({:.0}%) took {} summary calls",
                first.total_chunks,
                first.initial_chunks,
                s.fraction * 100.0,
                first.initial_build_calls
            ),
            format!(
                "{:<14}{:>8}{:>10}{:>10}{:>12}{:>14}{:>10}{:>12}",
                "batching", "updates", "adRAP", "rebuild", "adRAP total", "rebuild total", "adRAP s", "rebuild s"
            ),
        ];
        for r in &rows {
            let x = &r.result;
            let name = match r.batching {
                IngestBatching::All => "all",
                IngestBatching::PerDocument => "per-document",
                IngestBatching::PerChunk => "per-chunk",
            };
            lines.push(format!(
                "{:<14}{:>8}{:>10}{:>10}{:>12}{:>14}{:>10.2}{:>12.2}",
                name,
                x.update_calls,
                x.adrap_calls,
                x.full_rebuild_calls,
                x.adrap_total(),
                x.rebuild_total(),
                x.initial_build_secs + x.adrap_secs,
                x.initial_build_secs + x.full_rebuild_secs
            ));
        }
        lines.push("published reference (summary calls / seconds, adRAP vs rebuild):".to_string());
        for (name, a, b, ta, tb) in REFERENCE {
            lines.push(format!("  {name:<10}{a} vs {b} calls, {ta:.0} s vs {tb:.0} s"));
        }
        lines.join("\n")
    })
}

pub fn gen_corpus(s: &Settings, dir: &Path, chunks: usize) -> Result<()> {
    if chunks == 0 {
        bail!("--chunks must be positive");
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut spec = SyntheticSpec::with_chunks(chunks, s.seed);
    let docs = loop {
        let docs = synthetic_corpus(&spec);
        if chunk_documents(&docs, &s.chunking, &WordPunctCounter)?.len() >= chunks {
            break docs;
        }
        spec.documents += 1;
    };
    for d in &docs {
        let path = dir.join(format!("{}.txt", d.id));
        std::fs::write(&path, &d.text).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("wrote {} documents to {}", docs.len(), dir.display());
    Ok(())
}
