//! Embedders and vector similarity.

use std::collections::HashMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::remote::{EndpointConfig, JsonClient, RemoteError};

/// Default dimension of the hashing embedder.
pub const MOCK_DIM: usize = 64;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("embedding contains non-finite values")]
    NonFinite,
    #[error(transparent)]
    Remote(#[from] RemoteError),
}

/// A dense embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbedError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, EmbedError> {
    if a.len() != b.len() {
        return Err(EmbedError::DimensionMismatch { left: a.len(), right: b.len() });
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(EmbedError::ZeroVector);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Produces embeddings for batches of texts. Implementations must tolerate concurrent calls.
pub trait Embedder: Send + Sync {
    /// Identifier stored in index manifests, e.g. `mock-trigram`.
    fn name(&self) -> String;
    fn dim(&self) -> usize;
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Embedding>, EmbedError>;

    fn embed(&self, text: &str) -> Result<Embedding, EmbedError> {
        let mut v = self.embed_batch(&[text.to_string()])?;
        Ok(v.pop().expect("one embedding per input"))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Feature-hashes lowercase character trigrams of `text` (padded with `^`/`$`)
/// into `dim` buckets and L2-normalizes the counts.
pub fn mock_embed(text: &str, dim: usize) -> Embedding {
    assert!(dim >= 2, "mock embedding dimension must be at least 2");
    let mut padded = String::with_capacity(text.len() + 2);
    padded.push('^');
    padded.push_str(&text.to_lowercase());
    padded.push('$');
    let chars: Vec<char> = padded.chars().collect();
    let mut v = vec![0.0; dim];
    let mut buf = [0u8; 12];
    if chars.len() < 3 {
        let i = (fnv1a(padded.as_bytes()) % dim as u64) as usize;
        v[i] = 1.0;
    } else {
        for w in chars.windows(3) {
            let mut n = 0;
            for c in w {
                n += c.encode_utf8(&mut buf[n..]).len();
            }
            let i = (fnv1a(&buf[..n]) % dim as u64) as usize;
            v[i] += 1.0;
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    Embedding(v)
}

/// Deterministic offline embedder backed by [`mock_embed`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MockEmbedder {
    pub dim: usize,
}

impl Default for MockEmbedder {
    fn default() -> Self {
        Self { dim: MOCK_DIM }
    }
}

impl Embedder for MockEmbedder {
    fn name(&self) -> String {
        "mock-trigram".to_string()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Embedding>, EmbedError> {
        Ok(texts.iter().map(|t| mock_embed(t, self.dim)).collect())
    }
}

/// In-memory memoization around another embedder.
pub struct CachedEmbedder<E> {
    inner: E,
    cache: Mutex<HashMap<String, Embedding>>,
}

impl<E: Embedder> CachedEmbedder<E> {
    pub fn new(inner: E) -> Self {
        Self { inner, cache: Mutex::new(HashMap::new()) }
    }

    pub fn len(&self) -> usize {
        self.cache.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<E: Embedder> Embedder for CachedEmbedder<E> {
    fn name(&self) -> String {
        self.inner.name()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Embedding>, EmbedError> {
        let missing: Vec<String> = {
            let cache = self.cache.lock().unwrap();
            let mut seen = std::collections::HashSet::new();
            texts
                .iter()
                .filter(|t| !cache.contains_key(*t) && seen.insert((*t).clone()))
                .cloned()
                .collect()
        };
        if !missing.is_empty() {
            let fresh = self.inner.embed_batch(&missing)?;
            let mut cache = self.cache.lock().unwrap();
            for (t, e) in missing.into_iter().zip(fresh) {
                cache.insert(t, e);
            }
        }
        let cache = self.cache.lock().unwrap();
        Ok(texts.iter().map(|t| cache[t].clone()).collect())
    }
}

/// Client for an OpenAI-compatible `POST /v1/embeddings` endpoint.
pub struct RemoteEmbedder {
    client: JsonClient,
    dim: usize,
    batch_size: usize,
}

impl RemoteEmbedder {
    /// `dim` is the dimension the model is expected to return; responses with
    /// a different dimension are rejected as malformed.
    pub fn new(cfg: EndpointConfig, dim: usize) -> Result<Self, EmbedError> {
        Ok(Self { client: JsonClient::new(cfg)?, dim, batch_size: 64 })
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size.max(1);
        self
    }

    fn embed_one_batch(&self, texts: &[String]) -> Result<Vec<Embedding>, EmbedError> {
        let body = json!({ "model": self.client.config().model, "input": texts });
        let resp = self.client.post_json("/v1/embeddings", &body)?;
        let data = resp
            .get("data")
            .and_then(|d| d.as_array())
            .ok_or_else(|| RemoteError::Malformed("missing `data` array".into()))?;
        if data.len() != texts.len() {
            return Err(RemoteError::Malformed(format!("expected {} embeddings, got {}", texts.len(), data.len())).into());
        }
        // entries may carry an explicit index; honour it when present
        let mut out: Vec<Option<Embedding>> = vec![None; texts.len()];
        for (pos, item) in data.iter().enumerate() {
            let idx = item.get("index").and_then(|i| i.as_u64()).map(|i| i as usize).unwrap_or(pos);
            let values = item
                .get("embedding")
                .and_then(|e| e.as_array())
                .ok_or_else(|| RemoteError::Malformed(format!("data[{pos}].embedding missing")))?
                .iter()
                .map(|v| v.as_f64().ok_or_else(|| RemoteError::Malformed("non-numeric embedding entry".into())))
                .collect::<Result<Vec<f64>, _>>()?;
            if values.len() != self.dim {
                return Err(RemoteError::Malformed(format!("expected dimension {}, got {}", self.dim, values.len())).into());
            }
            let slot = out
                .get_mut(idx)
                .ok_or_else(|| RemoteError::Malformed(format!("index {idx} out of range")))?;
            *slot = Some(Embedding::new(values)?);
        }
        out.into_iter()
            .map(|e| e.ok_or_else(|| RemoteError::Malformed("duplicate embedding index".into()).into()))
            .collect()
    }
}

impl Embedder for RemoteEmbedder {
    fn name(&self) -> String {
        format!("remote:{}", self.client.config().model)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Embedding>, EmbedError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let batches: Vec<&[String]> = texts.chunks(self.batch_size).collect();
        let parallelism = self.client.config().parallelism.max(1);
        let mut out = Vec::with_capacity(texts.len());
        for wave in batches.chunks(parallelism) {
            let results: Vec<Result<Vec<Embedding>, EmbedError>> = std::thread::scope(|s| {
                let handles: Vec<_> = wave.iter().map(|b| s.spawn(move || self.embed_one_batch(b))).collect();
                handles.into_iter().map(|h| h.join().expect("embedding worker panicked")).collect()
            });
            for r in results {
                out.extend(r?);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let v = [0.3, -1.2, 2.5];
        let w: Vec<f64> = v.iter().map(|x| 2.0 * x).collect();
        assert!((cosine_similarity(&v, &w).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(cosine_similarity(&[1.0], &[1.0, 0.0]), Err(EmbedError::DimensionMismatch { .. })));
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(EmbedError::ZeroVector)));
    }

    #[test]
    fn mock_is_deterministic_and_normalized() {
        let a = mock_embed("The quick brown fox", 64);
        assert_eq!(a, mock_embed("The quick brown fox", 64));
        assert!((a.norm() - 1.0).abs() < 1e-9);
        for t in ["", "a", "ab", "x y z"] {
            assert!((mock_embed(t, 16).norm() - 1.0).abs() < 1e-9);
        }
        // case-insensitive
        assert_eq!(mock_embed("ABC", 64), mock_embed("abc", 64));
    }

    #[test]
    fn mock_distinguishes_near_strings() {
        // "^ab","abc","bc$" vs "^ab","abd","bd$": one shared trigram of three
        let a = mock_embed("abc", 64);
        let b = mock_embed("abd", 64);
        let s = cosine_similarity(&a.0, &b.0).unwrap();
        assert!(s < 1.0);
    }

    #[test]
    fn cached_embedder_memoizes() {
        let e = CachedEmbedder::new(MockEmbedder::default());
        let texts = vec!["a".to_string(), "b".to_string(), "a".to_string()];
        let out = e.embed_batch(&texts).unwrap();
        assert_eq!(out[0], out[2]);
        assert_eq!(e.len(), 2);
    }
}
