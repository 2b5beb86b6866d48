//! On-disk index: a directory holding `manifest.json`, `nodes.jsonl` (one
//! node per line), `models.json` (reducers and mixtures with sufficient
//! statistics) and `prompts.json` (the active templates).
//!
//! Saves are written to a staging directory next to the target and swapped
//! in by rename. The manifest records SHA-256 digests of the other files, so
//! a damaged file is reported as corruption instead of loading partially.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embedding::Embedder;
use crate::summarize::{catalog, PromptTemplate};
use crate::text::ChunkingConfig;
use crate::tree::{LayerModel, NodeId, NodeKind, RaTree, TreeConfig, TreeError, TreeNode};

pub const FORMAT_VERSION: u32 = 1;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const NODES_FILE: &str = "nodes.jsonl";
pub const MODELS_FILE: &str = "models.json";
pub const PROMPTS_FILE: &str = "prompts.json";
pub const LOCK_FILE: &str = "write.lock";

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("index format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupted index: {0}")]
    Corrupt(String),
    #[error("{0} is not empty and does not contain an index")]
    Incompatible(PathBuf),
    #[error("index {0} is locked by another writer")]
    Locked(PathBuf),
    #[error("embedder {configured} (dimension {configured_dim}) does not match the index ({stored}, dimension {stored_dim})")]
    EmbedderMismatch { configured: String, configured_dim: usize, stored: String, stored_dim: usize },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> PersistError + '_ {
    move |source| PersistError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderFingerprint {
    pub name: String,
    pub dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexCounts {
    pub leaves: usize,
    pub internal_nodes: usize,
    pub layers: usize,
}

impl IndexCounts {
    pub fn of(tree: &RaTree) -> Self {
        let leaves = tree.nodes.values().filter(|n| n.kind == NodeKind::Leaf).count();
        Self { leaves, internal_nodes: tree.len() - leaves, layers: tree.height() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexManifest {
    pub format_version: u32,
    pub embedder: EmbedderFingerprint,
    pub chunking: ChunkingConfig,
    pub counts: IndexCounts,
    /// Unix seconds.
    pub created_at: u64,
    pub updated_at: u64,
    pub tree_config: TreeConfig,
    pub layers: Vec<Vec<NodeId>>,
    pub next_id: u64,
    /// Hex SHA-256 of each data file, keyed by file name.
    pub checksums: std::collections::BTreeMap<String, String>,
}

impl IndexManifest {
    /// Fails unless `embedder` produces vectors compatible with the index.
    pub fn check_embedder(&self, embedder: &dyn Embedder) -> Result<(), PersistError> {
        if embedder.name() != self.embedder.name || embedder.dim() != self.embedder.dim {
            return Err(PersistError::EmbedderMismatch {
                configured: embedder.name(),
                configured_dim: embedder.dim(),
                stored: self.embedder.name.clone(),
                stored_dim: self.embedder.dim,
            });
        }
        Ok(())
    }
}

/// Metadata the tree itself does not carry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexMeta {
    pub embedder: EmbedderFingerprint,
    pub chunking: ChunkingConfig,
}

impl IndexMeta {
    pub fn new(embedder: &dyn Embedder, chunking: ChunkingConfig) -> Self {
        Self { embedder: EmbedderFingerprint { name: embedder.name(), dim: embedder.dim() }, chunking }
    }
}

/// Exclusive writer lock: a `write.lock` file inside the index directory,
/// removed on drop.
#[derive(Debug)]
pub struct IndexLock {
    dir: PathBuf,
}

impl IndexLock {
    pub fn acquire(dir: &Path) -> Result<Self, PersistError> {
        fs::create_dir_all(dir).map_err(io(dir))?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { dir: dir.to_path_buf() })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(PersistError::Locked(dir.to_path_buf())),
            Err(e) => Err(PersistError::Io { path, source: e }),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

impl Drop for IndexLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.dir.join(LOCK_FILE));
    }
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), PersistError> {
    let mut f = fs::File::create(path).map_err(io(path))?;
    f.write_all(bytes).map_err(io(path))?;
    f.sync_all().map_err(io(path))
}

fn json_err(what: &str) -> impl FnOnce(serde_json::Error) -> PersistError + '_ {
    move |e| PersistError::Corrupt(format!("{what}: {e}"))
}

fn is_empty_dir(dir: &Path) -> Result<bool, PersistError> {
    Ok(fs::read_dir(dir)
        .map_err(io(dir))?
        .filter_map(|e| e.ok())
        .all(|e| e.file_name() == LOCK_FILE))
}

/// Reads only the manifest of an index.
pub fn read_manifest(dir: &Path) -> Result<IndexManifest, PersistError> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(io(&path))?;
    let raw: serde_json::Value = serde_json::from_slice(&bytes).map_err(json_err(MANIFEST_FILE))?;
    let found = raw.get("format_version").and_then(|v| v.as_u64()).ok_or_else(|| PersistError::Corrupt("manifest has no format_version".into()))?;
    if found != FORMAT_VERSION as u64 {
        return Err(PersistError::Version { found: found as u32, expected: FORMAT_VERSION });
    }
    serde_json::from_value(raw).map_err(json_err(MANIFEST_FILE))
}

/// Saves `tree` to `dir`, taking the writer lock for the duration.
pub fn save_index(tree: &RaTree, dir: &Path, meta: &IndexMeta) -> Result<IndexManifest, PersistError> {
    if dir.exists() && !dir.join(MANIFEST_FILE).exists() && !is_empty_dir(dir)? {
        return Err(PersistError::Incompatible(dir.to_path_buf()));
    }
    let lock = IndexLock::acquire(dir)?;
    save_index_locked(tree, &lock, meta)
}

/// Saves under a lock the caller already holds.
pub fn save_index_locked(tree: &RaTree, lock: &IndexLock, meta: &IndexMeta) -> Result<IndexManifest, PersistError> {
    let dir = lock.dir();
    if !dir.join(MANIFEST_FILE).exists() && !is_empty_dir(dir)? {
        return Err(PersistError::Incompatible(dir.to_path_buf()));
    }
    let created_at = read_manifest(dir).map(|m| m.created_at).unwrap_or_else(|_| now());

    let mut nodes = Vec::new();
    for node in tree.nodes.values() {
        serde_json::to_writer(&mut nodes, node).map_err(json_err(NODES_FILE))?;
        nodes.push(b'\n');
    }
    let models = serde_json::to_vec(&tree.layer_models).map_err(json_err(MODELS_FILE))?;
    let prompts = serde_json::to_vec_pretty(&catalog()).map_err(json_err(PROMPTS_FILE))?;
    let checksums = [(NODES_FILE, &nodes), (MODELS_FILE, &models), (PROMPTS_FILE, &prompts)]
        .into_iter()
        .map(|(name, bytes)| (name.to_string(), digest(bytes)))
        .collect();
    let manifest = IndexManifest {
        format_version: FORMAT_VERSION,
        embedder: meta.embedder.clone(),
        chunking: meta.chunking,
        counts: IndexCounts::of(tree),
        created_at,
        updated_at: now(),
        tree_config: tree.config.clone(),
        layers: tree.layers.clone(),
        next_id: tree.next_id,
        checksums,
    };
    let manifest_bytes = serde_json::to_vec_pretty(&manifest).map_err(json_err(MANIFEST_FILE))?;

    let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = dir.file_name().map_or_else(|| "index".into(), |n| n.to_string_lossy().into_owned());
    let nonce = format!("{}-{}", std::process::id(), SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_nanos()));
    let staging = parent.join(format!(".{name}.staging-{nonce}"));
    let retired = parent.join(format!(".{name}.retired-{nonce}"));
    fs::create_dir(&staging).map_err(io(&staging))?;
    let written = (|| {
        write_file(&staging.join(NODES_FILE), &nodes)?;
        write_file(&staging.join(MODELS_FILE), &models)?;
        write_file(&staging.join(PROMPTS_FILE), &prompts)?;
        write_file(&staging.join(MANIFEST_FILE), &manifest_bytes)?;
        // the new directory stays locked until the caller's lock is dropped
        write_file(&staging.join(LOCK_FILE), format!("{}\n", std::process::id()).as_bytes())
    })();
    if let Err(e) = written {
        let _ = fs::remove_dir_all(&staging);
        return Err(e);
    }
    fs::rename(dir, &retired).map_err(io(dir))?;
    if let Err(e) = fs::rename(&staging, dir) {
        let _ = fs::rename(&retired, dir);
        return Err(PersistError::Io { path: dir.to_path_buf(), source: e });
    }
    let _ = fs::remove_dir_all(&retired);
    Ok(manifest)
}

fn read_checked(dir: &Path, name: &str, manifest: &IndexManifest) -> Result<Vec<u8>, PersistError> {
    let path = dir.join(name);
    let bytes = match fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(PersistError::Corrupt(format!("missing {name}"))),
        Err(e) => return Err(PersistError::Io { path, source: e }),
    };
    let expected = manifest.checksums.get(name).ok_or_else(|| PersistError::Corrupt(format!("no checksum for {name}")))?;
    if &digest(&bytes) != expected {
        return Err(PersistError::Corrupt(format!("{name} does not match its checksum")));
    }
    Ok(bytes)
}

/// Loads an index, including the retained clustering models.
pub fn load_index(dir: &Path) -> Result<(RaTree, IndexManifest), PersistError> {
    let manifest = read_manifest(dir)?;
    let nodes_bytes = read_checked(dir, NODES_FILE, &manifest)?;
    let models_bytes = read_checked(dir, MODELS_FILE, &manifest)?;
    read_checked(dir, PROMPTS_FILE, &manifest)?;

    let mut nodes = std::collections::BTreeMap::new();
    for (i, line) in BufReader::new(nodes_bytes.as_slice()).lines().enumerate() {
        let line = line.map_err(|e| PersistError::Corrupt(format!("{NODES_FILE} line {}: {e}", i + 1)))?;
        if line.is_empty() {
            continue;
        }
        let node: TreeNode = serde_json::from_str(&line).map_err(|e| PersistError::Corrupt(format!("{NODES_FILE} line {}: {e}", i + 1)))?;
        if nodes.insert(node.id, node).is_some() {
            return Err(PersistError::Corrupt(format!("duplicate node on line {}", i + 1)));
        }
    }
    let layer_models: Vec<LayerModel> = serde_json::from_slice(&models_bytes).map_err(json_err(MODELS_FILE))?;
    let tree = RaTree { config: manifest.tree_config.clone(), layers: manifest.layers.clone(), nodes, layer_models, next_id: manifest.next_id };
    tree.validate().map_err(|e| match e {
        TreeError::Invariant(m) => PersistError::Corrupt(m),
        other => PersistError::Corrupt(other.to_string()),
    })?;
    if IndexCounts::of(&tree) != manifest.counts {
        return Err(PersistError::Corrupt("manifest counts disagree with the node store".into()));
    }
    if let Some(d) = tree.embedding_dim() {
        if d != manifest.embedder.dim {
            return Err(PersistError::Corrupt(format!("stored vectors have dimension {d}, manifest says {}", manifest.embedder.dim)));
        }
    }
    Ok((tree, manifest))
}

/// Templates stored with an index.
pub fn load_prompts(dir: &Path) -> Result<Vec<PromptTemplate>, PersistError> {
    let manifest = read_manifest(dir)?;
    let bytes = read_checked(dir, PROMPTS_FILE, &manifest)?;
    serde_json::from_slice(&bytes).map_err(json_err(PROMPTS_FILE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adrap::{add_chunks, UpdateOptions};
    use crate::corpus::synthetic_chunks;
    use crate::embedding::MockEmbedder;
    use crate::summarize::MockSummarizer;
    use crate::text::WordPunctCounter;
    use crate::tree::build_tree;

    fn fixture(n: usize) -> (RaTree, IndexMeta) {
        let chunks = synthetic_chunks(n, 3, &ChunkingConfig::default(), &WordPunctCounter);
        let e = MockEmbedder::default();
        let tree = build_tree(&chunks, &e, &MockSummarizer::new(), TreeConfig::default()).unwrap();
        (tree, IndexMeta::new(&e, ChunkingConfig::default()))
    }

    #[test]
    fn round_trip_is_exact() {
        let (tree, meta) = fixture(60);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx");
        let m = save_index(&tree, &path, &meta).unwrap();
        assert!(!path.join(LOCK_FILE).exists());
        let (loaded, m2) = load_index(&path).unwrap();
        assert_eq!(loaded, tree);
        assert_eq!(m, m2);
        assert_eq!(m.counts, IndexCounts::of(&tree));
        assert_eq!(load_prompts(&path).unwrap(), catalog());
    }

    #[test]
    fn resave_keeps_created_at_and_allows_updates() {
        let (tree, meta) = fixture(40);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx");
        let first = save_index(&tree, &path, &meta).unwrap();
        let (loaded, _) = load_index(&path).unwrap();
        let more = synthetic_chunks(45, 3, &ChunkingConfig::default(), &WordPunctCounter);
        let (updated, _) =
            add_chunks(&loaded, &more[40..], &MockEmbedder::default(), &MockSummarizer::new(), UpdateOptions::default()).unwrap();
        let second = save_index(&updated, &path, &meta).unwrap();
        assert_eq!(first.created_at, second.created_at);
        assert_eq!(load_index(&path).unwrap().0, updated);
        let leftovers: Vec<_> = fs::read_dir(dir.path()).unwrap().filter_map(|e| e.ok()).map(|e| e.file_name()).collect();
        assert_eq!(leftovers.len(), 1, "{leftovers:?}");
    }

    #[test]
    fn version_mismatch() {
        let (tree, meta) = fixture(20);
        let dir = tempfile::tempdir().unwrap();
        save_index(&tree, dir.path(), &meta).unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        let mut v: serde_json::Value = serde_json::from_slice(&fs::read(&p).unwrap()).unwrap();
        v["format_version"] = (FORMAT_VERSION + 1).into();
        fs::write(&p, serde_json::to_vec(&v).unwrap()).unwrap();
        assert!(matches!(load_index(dir.path()), Err(PersistError::Version { found: 2, expected: 1 })));
    }

    #[test]
    fn truncated_nodes_are_corrupt() {
        let (tree, meta) = fixture(20);
        let dir = tempfile::tempdir().unwrap();
        save_index(&tree, dir.path(), &meta).unwrap();
        let p = dir.path().join(NODES_FILE);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_index(dir.path()), Err(PersistError::Corrupt(_))));
        fs::remove_file(&p).unwrap();
        assert!(matches!(load_index(dir.path()), Err(PersistError::Corrupt(_))));
    }

    #[test]
    fn foreign_directory_is_rejected() {
        let (tree, meta) = fixture(20);
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("notes.txt"), "mine").unwrap();
        assert!(matches!(save_index(&tree, dir.path(), &meta), Err(PersistError::Incompatible(_))));
    }

    #[test]
    fn lock_excludes_second_writer() {
        let (tree, meta) = fixture(20);
        let dir = tempfile::tempdir().unwrap();
        let lock = IndexLock::acquire(dir.path()).unwrap();
        assert!(matches!(save_index(&tree, dir.path(), &meta), Err(PersistError::Locked(_))));
        save_index_locked(&tree, &lock, &meta).unwrap();
        drop(lock);
        assert!(!dir.path().join(LOCK_FILE).exists());
        save_index(&tree, dir.path(), &meta).unwrap();
    }

    #[test]
    fn embedder_fingerprint_checked() {
        let (tree, meta) = fixture(20);
        let dir = tempfile::tempdir().unwrap();
        let (_, m) = {
            save_index(&tree, dir.path(), &meta).unwrap();
            load_index(dir.path()).unwrap()
        };
        m.check_embedder(&MockEmbedder::default()).unwrap();
        assert!(matches!(m.check_embedder(&MockEmbedder { dim: 32 }), Err(PersistError::EmbedderMismatch { .. })));
    }
}
