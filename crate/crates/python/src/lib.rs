use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyKeyError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyList};
use ratree::adrap::{add_chunks, remove_document, simulate_split_ingest, IngestBatching, UpdateMode, UpdateOptions};
use ratree::clustering::{ClusteringConfig, ClusteringMode};
use ratree::corpus::{chunk_documents, Document};
use ratree::embedding::{mock_embed as mock_embed_impl, CachedEmbedder, Embedder, MockEmbedder, RemoteEmbedder, MOCK_DIM};
use ratree::gmm::AdaptiveConfig;
use ratree::persist::{load_index, save_index, IndexMeta};
use ratree::postqfrap::{run_postqfrap, NaiveRetriever, PostQfrapConfig, Retriever, TreeRetriever};
use ratree::remote::EndpointConfig;
use ratree::summarize::{qa_answer, ChatModel, LlmSummarizer, MockChat, MockSummarizer, RemoteChat, Summarizer};
use ratree::text::{self, ChunkingConfig, WordPunctCounter};
use ratree::tree::{build_tree, RaTree, TreeConfig, TreeError};
use serde_json::Value;

create_exception!(pyratree, RatreeError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    RatreeError::new_err(e.to_string())
}

fn tree_err(e: TreeError) -> PyErr {
    match e {
        TreeError::Unknown(id) => PyKeyError::new_err(id),
        other => err(other),
    }
}

fn to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => PyBool::new(py, *b).to_owned().into_any(),
        Value::Number(n) => match (n.as_i64(), n.as_u64()) {
            (Some(i), _) => i.into_pyobject(py)?.into_any(),
            (_, Some(u)) => u.into_pyobject(py)?.into_any(),
            _ => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(to_py(py, item)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, to_py(py, item)?)?;
            }
            dict.into_any()
        }
    })
}

fn serialize<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &serde_json::to_value(value).map_err(err)?)
}

/// Embedder, summarizer and QA model behind an index.
struct Backend {
    embedder: Box<dyn Embedder>,
    summarizer: Box<dyn Summarizer>,
    chat: Box<dyn ChatModel>,
}

#[derive(Clone, Default)]
struct Remote {
    api_base: Option<String>,
    embed_model: Option<String>,
    chat_model: Option<String>,
}

impl Remote {
    fn endpoint(&self, model: Option<&str>, fallback: &str) -> EndpointConfig {
        let base = self.api_base.clone().unwrap_or_else(|| "https://api.openai.com".into());
        EndpointConfig::new(base, model.unwrap_or(fallback))
    }

    fn backend(&self, mock: bool, embed_dim: Option<usize>, stored_model: Option<&str>) -> PyResult<Backend> {
        if mock {
            return Ok(Backend {
                embedder: Box::new(MockEmbedder { dim: embed_dim.unwrap_or(MOCK_DIM) }),
                summarizer: Box::new(MockSummarizer::new()),
                chat: Box::new(MockChat),
            });
        }
        let model = stored_model.or(self.embed_model.as_deref());
        let embedder = RemoteEmbedder::new(self.endpoint(model, "text-embedding-3-large"), embed_dim.unwrap_or(3072)).map_err(err)?;
        let chat_cfg = self.endpoint(self.chat_model.as_deref(), "gpt-4o-mini-2024-07-18");
        Ok(Backend {
            embedder: Box::new(CachedEmbedder::new(embedder)),
            summarizer: Box::new(LlmSummarizer::new(RemoteChat::new(chat_cfg.clone()).map_err(err)?)),
            chat: Box::new(RemoteChat::new(chat_cfg).map_err(err)?),
        })
    }
}

/// A tree index held in memory.
#[pyclass(module = "pyratree")]
struct Index {
    tree: RaTree,
    backend: Backend,
    chunking: ChunkingConfig,
}

fn parse<T: std::str::FromStr<Err = String>>(s: &str) -> PyResult<T> {
    s.parse().map_err(PyValueError::new_err)
}

#[pymethods]
impl Index {
    /// Builds an index over `(doc_id, text)` pairs.
    #[staticmethod]
    #[pyo3(signature = (documents, *, mock=true, seed=0, clustering="two_step", embed_dim=None, chunk_tokens=250, overlap_tokens=50, summary_tokens=1000, api_base=None, embed_model=None, chat_model=None))]
    #[allow(clippy::too_many_arguments)]
    fn build(
        py: Python<'_>,
        documents: Vec<(String, String)>,
        mock: bool,
        seed: u64,
        clustering: &str,
        embed_dim: Option<usize>,
        chunk_tokens: usize,
        overlap_tokens: usize,
        summary_tokens: usize,
        api_base: Option<String>,
        embed_model: Option<String>,
        chat_model: Option<String>,
    ) -> PyResult<Self> {
        let chunking = ChunkingConfig { max_body_tokens: chunk_tokens, overlap_tokens };
        let docs: Vec<Document> = documents.into_iter().map(|(id, text)| Document { id, text }).collect();
        let chunks = chunk_documents(&docs, &chunking, &WordPunctCounter).map_err(err)?;
        let mode: ClusteringMode = parse(clustering)?;
        let config = TreeConfig {
            clustering: ClusteringConfig { mode, ..ClusteringConfig::default() },
            summary_tokens,
            adaptive: AdaptiveConfig::for_initial_size(chunks.len()),
            seed,
            ..TreeConfig::default()
        };
        let backend = Remote { api_base, embed_model, chat_model }.backend(mock, embed_dim, None)?;
        let tree = py
            .detach(|| build_tree(&chunks, backend.embedder.as_ref(), backend.summarizer.as_ref(), config))
            .map_err(tree_err)?;
        Ok(Index { tree, backend, chunking })
    }

    /// Loads an index saved by [`Index.save`] or the command-line tool.
    #[staticmethod]
    #[pyo3(signature = (path, *, mock=true, api_base=None, chat_model=None))]
    fn load(path: PathBuf, mock: bool, api_base: Option<String>, chat_model: Option<String>) -> PyResult<Self> {
        let (tree, manifest) = load_index(&path).map_err(err)?;
        let stored = &manifest.embedder;
        let mock_index = stored.name == MockEmbedder::default().name();
        let remote = Remote { api_base, embed_model: None, chat_model };
        let mut backend = remote.backend(mock, Some(stored.dim), stored.name.strip_prefix("remote:"))?;
        if mock_index && !mock {
            backend.embedder = Box::new(MockEmbedder { dim: stored.dim });
        }
        manifest.check_embedder(backend.embedder.as_ref()).map_err(err)?;
        Ok(Index { tree, backend, chunking: manifest.chunking })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_index(&self.tree, &path, &IndexMeta::new(self.backend.embedder.as_ref(), self.chunking)).map_err(err)?;
        Ok(())
    }

    /// Adds one document and returns the update report.
    #[pyo3(signature = (doc_id, text, *, greedy=false))]
    fn add<'py>(&mut self, py: Python<'py>, doc_id: &str, text: &str, greedy: bool) -> PyResult<Bound<'py, PyAny>> {
        if !self.tree.leaves_of_document(doc_id).is_empty() {
            return Err(RatreeError::new_err(format!("document {doc_id} is already indexed")));
        }
        let chunks = text::chunk_text(doc_id, text, &self.chunking, &WordPunctCounter).map_err(err)?;
        let opts = UpdateOptions { mode: if greedy { UpdateMode::Greedy } else { UpdateMode::Adaptive }, ..UpdateOptions::default() };
        let b = &self.backend;
        let tree = &self.tree;
        let (next, report) =
            py.detach(|| add_chunks(tree, &chunks, b.embedder.as_ref(), b.summarizer.as_ref(), opts)).map_err(tree_err)?;
        self.tree = next;
        serialize(py, &report)
    }

    /// Removes every chunk of a document. Raises `KeyError` for unknown ids.
    #[pyo3(signature = (doc_id, *, recluster=false))]
    fn remove<'py>(&mut self, py: Python<'py>, doc_id: &str, recluster: bool) -> PyResult<Bound<'py, PyAny>> {
        let opts = UpdateOptions { recluster_on_delete: recluster, ..UpdateOptions::default() };
        let b = &self.backend;
        let tree = &self.tree;
        let (next, report) =
            py.detach(|| remove_document(tree, doc_id, b.embedder.as_ref(), b.summarizer.as_ref(), opts)).map_err(tree_err)?;
        self.tree = next;
        serialize(py, &report)
    }

    /// Ranked contexts from every layer, within `token_limit` tokens.
    #[pyo3(signature = (text, k=None, token_limit=2000))]
    fn query<'py>(&self, py: Python<'py>, text: &str, k: Option<usize>, token_limit: usize) -> PyResult<Bound<'py, PyAny>> {
        let q = self.backend.embedder.embed(text).map_err(err)?;
        let hits = self.tree.collapsed_query(&q.0, k.unwrap_or(usize::MAX), token_limit).map_err(tree_err)?;
        serialize(py, &hits)
    }

    /// Query-focused summary of the top `k0` results, optionally answered.
    #[pyo3(signature = (question, *, k0=20, budget=2000, expand=false, retriever="tree", answer=false, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn ask<'py>(
        &self,
        py: Python<'py>,
        question: &str,
        k0: usize,
        budget: usize,
        expand: bool,
        retriever: &str,
        answer: bool,
        seed: u64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let b = &self.backend;
        let naive;
        let tree_retriever;
        let r: &dyn Retriever = match retriever {
            "tree" => {
                tree_retriever = TreeRetriever::new(&self.tree, b.embedder.as_ref());
                &tree_retriever
            }
            "naive" => {
                naive = NaiveRetriever::from_tree_leaves(&self.tree, b.embedder.as_ref());
                &naive
            }
            other => return Err(PyValueError::new_err(format!("unknown retriever {other:?}"))),
        };
        let cfg = PostQfrapConfig { k0, token_budget: budget, expand_query: expand, seed, ..PostQfrapConfig::default() };
        let out = run_postqfrap(r, question, &cfg, b.embedder.as_ref(), b.summarizer.as_ref()).map_err(err)?;
        let mut value = serde_json::to_value(&out).map_err(err)?;
        if answer {
            let a = qa_answer(b.chat.as_ref(), &out.summary, question, budget).map_err(err)?;
            value["answer"] = serde_json::to_value(a).map_err(err)?;
        }
        to_py(py, &value)
    }

    fn stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        serialize(py, &self.tree.stats())
    }

    /// Ids of the indexed documents, sorted.
    fn documents(&self) -> Vec<String> {
        let ids: std::collections::BTreeSet<String> =
            self.tree.leaves().filter_map(|n| n.source.as_ref().map(|s| s.doc_id.clone())).collect();
        ids.into_iter().collect()
    }

    #[getter]
    fn height(&self) -> usize {
        self.tree.height()
    }

    fn __len__(&self) -> usize {
        self.tree.len()
    }

    fn __repr__(&self) -> String {
        let s = self.tree.stats();
        format!("Index(leaves={}, internal={}, layers={:?})", s.leaf_count, s.internal_count, s.layer_sizes)
    }
}

#[pyfunction]
#[pyo3(signature = (doc_id, text, chunk_tokens=250, overlap_tokens=50))]
fn chunk_text<'py>(py: Python<'py>, doc_id: &str, text: &str, chunk_tokens: usize, overlap_tokens: usize) -> PyResult<Bound<'py, PyAny>> {
    let cfg = ChunkingConfig { max_body_tokens: chunk_tokens, overlap_tokens };
    let chunks = text::chunk_text(doc_id, text, &cfg, &WordPunctCounter).map_err(err)?;
    serialize(py, &chunks)
}

#[pyfunction]
fn count_tokens(text: &str) -> usize {
    text::count_tokens(text)
}

#[pyfunction]
fn split_sentences(text: &str) -> Vec<String> {
    text::split_sentences(text).into_iter().map(str::to_string).collect()
}

#[pyfunction]
#[pyo3(signature = (text, dim=MOCK_DIM))]
fn mock_embed(text: &str, dim: usize) -> Vec<f64> {
    mock_embed_impl(text, dim).0
}

/// Builds on the first `fraction` of the chunks, streams the rest
/// incrementally and compares summary calls against a full rebuild (mock models).
#[pyfunction]
#[pyo3(signature = (documents, fraction=0.7, batching="all", seed=0))]
fn bench_split<'py>(py: Python<'py>, documents: Vec<(String, String)>, fraction: f64, batching: &str, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let docs: Vec<Document> = documents.into_iter().map(|(id, text)| Document { id, text }).collect();
    let chunks = chunk_documents(&docs, &ChunkingConfig::default(), &WordPunctCounter).map_err(err)?;
    let batching: IngestBatching = parse(batching)?;
    let n0 = ((fraction * chunks.len() as f64).ceil() as usize).max(1);
    let config = TreeConfig { adaptive: AdaptiveConfig::for_initial_size(n0), seed, ..TreeConfig::default() };
    let (_, out) = py
        .detach(|| {
            simulate_split_ingest(&chunks, fraction, &MockEmbedder::default(), &MockSummarizer::new(), config, UpdateOptions::default(), batching)
        })
        .map_err(tree_err)?;
    serialize(py, &out)
}

#[pymodule]
fn pyratree(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Index>()?;
    m.add("RatreeError", m.py().get_type::<RatreeError>())?;
    m.add_function(wrap_pyfunction!(chunk_text, m)?)?;
    m.add_function(wrap_pyfunction!(count_tokens, m)?)?;
    m.add_function(wrap_pyfunction!(split_sentences, m)?)?;
    m.add_function(wrap_pyfunction!(mock_embed, m)?)?;
    m.add_function(wrap_pyfunction!(bench_split, m)?)?;
    Ok(())
}
