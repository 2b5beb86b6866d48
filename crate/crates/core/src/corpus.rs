//! Document loading and a seeded synthetic corpus generator.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{chunk_text, Chunk, ChunkError, ChunkingConfig, TokenCounter};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("no documents found in {0}")]
    NoDocuments(String),
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Chunk(#[from] ChunkError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.display().to_string(), source }
}

/// Reads one document; its id is the file stem.
pub fn load_file(path: &Path) -> Result<Document, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let id = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
    Ok(Document { id, text })
}

/// Reads every `.txt` and `.md` file directly inside `dir`, sorted by name.
pub fn load_dir(dir: &Path) -> Result<Vec<Document>, CorpusError> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "txt" || e == "md"))
        .collect();
    paths.sort();
    let docs: Vec<Document> = paths
        .iter()
        .map(|p| load_file(p))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .filter(|d| !d.text.trim().is_empty())
        .collect();
    if docs.is_empty() {
        return Err(CorpusError::NoDocuments(dir.display().to_string()));
    }
    Ok(docs)
}

/// Chunks documents in order.
pub fn chunk_documents(docs: &[Document], cfg: &ChunkingConfig, counter: &dyn TokenCounter) -> Result<Vec<Chunk>, CorpusError> {
    let mut out = Vec::new();
    for d in docs {
        out.extend(chunk_text(&d.id, &d.text, cfg, counter)?);
    }
    Ok(out)
}

/// Shape of a generated corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub documents: usize,
    pub topics: usize,
    /// Sentences per document.
    pub sentences: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// A corpus of roughly `chunks` default-size chunks (about ten per document).
    pub fn with_chunks(chunks: usize, seed: u64) -> Self {
        let documents = chunks.div_ceil(10).max(1);
        Self { documents, topics: (documents / 3).clamp(2, 12), sentences: 150, seed }
    }
}

const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "tr", "st"];
const NUCLEI: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];
const CODAS: [&str; 6] = ["", "n", "r", "s", "l", "x"];
const VERBS: [&str; 12] = [
    "shapes", "follows", "replaces", "supports", "limits", "extends", "reveals", "protects", "measures", "connects",
    "divides", "absorbs",
];
const FILLERS: [&str; 10] = ["the", "a", "every", "this", "each", "one", "some", "that", "any", "its"];

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.random_range(2..=3);
    (0..syllables)
        .map(|_| {
            format!(
                "{}{}{}",
                ONSETS.choose(rng).unwrap(),
                NUCLEI.choose(rng).unwrap(),
                CODAS.choose(rng).unwrap()
            )
        })
        .collect()
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next().map_or_else(String::new, |f| f.to_uppercase().collect::<String>() + c.as_str())
}

/// Generates documents whose sentences draw mostly from a per-topic
/// vocabulary, so documents of one topic are mutually similar.
pub fn synthetic_corpus(spec: &SyntheticSpec) -> Vec<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let topics = spec.topics.max(1);
    let vocab: Vec<Vec<String>> = (0..topics).map(|_| (0..40).map(|_| pseudo_word(&mut rng)).collect()).collect();
    let common: Vec<String> = (0..30).map(|_| pseudo_word(&mut rng)).collect();
    (0..spec.documents)
        .map(|d| {
            let topic = &vocab[rng.random_range(0..topics)];
            // each document leans on its own subset of the topic vocabulary
            let own: Vec<&String> = topic.choose_multiple(&mut rng, 12).collect();
            let mut text = String::new();
            for s in 0..spec.sentences {
                let pick = |rng: &mut ChaCha8Rng| -> String {
                    let r: f64 = rng.random();
                    if r < 0.55 {
                        own.choose(rng).unwrap().to_string()
                    } else if r < 0.85 {
                        topic.choose(rng).unwrap().clone()
                    } else {
                        common.choose(rng).unwrap().clone()
                    }
                };
                let sentence = format!(
                    "{} {} {} {} {} {} {} {} {}.",
                    capitalize(FILLERS.choose(&mut rng).unwrap()),
                    pick(&mut rng),
                    pick(&mut rng),
                    VERBS.choose(&mut rng).unwrap(),
                    FILLERS.choose(&mut rng).unwrap(),
                    pick(&mut rng),
                    pick(&mut rng),
                    pick(&mut rng),
                    pick(&mut rng),
                );
                text.push_str(&sentence);
                text.push_str(if s % 6 == 5 { "\n\n" } else { " " });
            }
            Document { id: format!("doc{d:04}"), text: text.trim_end().to_string() }
        })
        .collect()
}

/// Synthetic corpus chunked with the given settings and truncated to `n` chunks.
pub fn synthetic_chunks(n: usize, seed: u64, cfg: &ChunkingConfig, counter: &dyn TokenCounter) -> Vec<Chunk> {
    let mut spec = SyntheticSpec::with_chunks(n, seed);
    loop {
        let chunks = chunk_documents(&synthetic_corpus(&spec), cfg, counter).expect("valid chunking config");
        if chunks.len() >= n {
            return chunks.into_iter().take(n).collect();
        }
        spec.documents += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::WordPunctCounter;

    #[test]
    fn generator_is_deterministic() {
        let spec = SyntheticSpec::with_chunks(30, 4);
        assert_eq!(synthetic_corpus(&spec), synthetic_corpus(&spec));
        assert_ne!(synthetic_corpus(&spec), synthetic_corpus(&SyntheticSpec { seed: 5, ..spec }));
    }

    #[test]
    fn synthetic_chunk_count() {
        let c = synthetic_chunks(57, 1, &ChunkingConfig::default(), &WordPunctCounter);
        assert_eq!(c.len(), 57);
        assert!(c.iter().all(|c| c.token_count <= 300));
    }

    #[test]
    fn empty_dir_has_no_documents() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("blank.txt"), "  \n").unwrap();
        std::fs::write(dir.path().join("skip.bin"), "data").unwrap();
        assert!(matches!(load_dir(dir.path()), Err(CorpusError::NoDocuments(_))));
        std::fs::write(dir.path().join("b.txt"), "Second.").unwrap();
        std::fs::write(dir.path().join("a.md"), "First.").unwrap();
        let docs = load_dir(dir.path()).unwrap();
        assert_eq!(docs.iter().map(|d| d.id.as_str()).collect::<Vec<_>>(), vec!["a", "b"]);
    }
}
