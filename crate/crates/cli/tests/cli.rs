use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn ratree(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ratree"))
        .args(args)
        .env_remove("RATREE_CONFIG")
        .env_remove("RATREE_API_BASE")
        .env_remove("RATREE_EMBED_MODEL")
        .env_remove("RATREE_CHAT_MODEL")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ratree(args);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(out.status.success(), "{args:?} failed: {stderr}");
    assert!(stderr.is_empty(), "{args:?} printed to stderr: {stderr}");
    String::from_utf8(out.stdout).unwrap()
}

fn json(args: &[&str]) -> Value {
    let mut a = args.to_vec();
    a.push("--json");
    serde_json::from_str(&ok(&a)).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = ratree(args);
    assert!(!out.status.success(), "{args:?} should fail");
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(stderr.starts_with("error: "), "{stderr}");
    stderr
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    corpus: PathBuf,
    index: PathBuf,
    root: PathBuf,
}

fn fixture(chunks: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let corpus = root.join("corpus");
    let index = root.join("index");
    ok(&["gen-corpus", s(&corpus), "--chunks", &chunks.to_string(), "--seed", "3"]);
    ok(&["--mock-llm", "--seed", "7", "build", s(&corpus), s(&index)]);
    Fixture { _dir: dir, corpus, index, root }
}

fn nodes(index: &Path) -> Vec<Value> {
    std::fs::read_to_string(index.join("nodes.jsonl")).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn query_chunks(index: &Path, q: &str) -> Vec<String> {
    let hits = json(&["query", s(index), q, "--k", "1000", "--token-limit", "1000000"]);
    hits.as_array().unwrap().iter().filter_map(|h| h["chunk_id"].as_str().map(str::to_string)).collect()
}

#[test]
fn build_is_deterministic() {
    let f = fixture(40);
    let again = f.root.join("again");
    ok(&["--mock-llm", "--seed", "7", "build", s(&f.corpus), s(&again)]);
    for file in ["nodes.jsonl", "models.json", "prompts.json"] {
        assert_eq!(std::fs::read(f.index.join(file)).unwrap(), std::fs::read(again.join(file)).unwrap(), "{file}");
    }
    let stats = json(&["stats", s(&f.index)]);
    let layers = stats["stats"]["layer_sizes"].as_array().unwrap().len();
    assert!((1..=5).contains(&layers));
    assert!(stats["stats"]["leaf_count"].as_u64().unwrap() >= 40);
}

#[test]
fn empty_corpus_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("empty");
    std::fs::create_dir(&corpus).unwrap();
    let err = fails(&["--mock-llm", "build", s(&corpus), s(&dir.path().join("idx"))]);
    assert!(err.contains("no documents"), "{err}");
    assert!(!dir.path().join("idx").exists());
}

#[test]
fn stats_mirror_tree_statistics_table() {
    let f = fixture(40);
    let text = ok(&["stats", s(&f.index)]);
    for label in ["Number of leaves", "Number of internal nodes", "Cluster size", "Number of parents per leaf"] {
        assert!(text.contains(label), "{text}");
    }
    let line = text.lines().find(|l| l.starts_with("Cluster size")).unwrap();
    assert!(line.contains(" ± "), "{line}");
}

#[test]
fn add_reports_new_leaf_and_resummarized_chain() {
    let f = fixture(40);
    let doc = f.root.join("extra.txt");
    std::fs::write(&doc, "Quokkas hop across the island. Quokkas rarely drink water.").unwrap();
    let report = json(&["--mock-llm", "add", s(&f.index), s(&doc)]);
    let leaves = report["new_leaves"].as_array().unwrap();
    assert_eq!(leaves.len(), 1);
    assert!(report["report"]["summary_call_count"].as_u64().unwrap() >= 1);
    let resummarized: BTreeSet<u64> = report["report"]["resummarized_node_ids"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();

    // every ancestor of the new leaf was regenerated
    let all = nodes(&f.index);
    let by_id = |id: u64| all.iter().find(|n| n["id"] == id).unwrap();
    let leaf = all.iter().find(|n| n["source"]["doc_id"] == "extra").unwrap();
    let mut todo: Vec<u64> = leaf["parents"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    assert!(!todo.is_empty());
    while let Some(p) = todo.pop() {
        assert!(resummarized.contains(&p), "ancestor {p} not resummarized");
        todo.extend(by_id(p)["parents"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()));
    }
    let err = fails(&["--mock-llm", "add", s(&f.index), s(&doc)]);
    assert!(err.contains("already indexed"), "{err}");
}

#[test]
fn removed_document_leaves_query_results() {
    let f = fixture(40);
    let doc = f.root.join("gone.txt");
    let text = "Quokkas hop across the island. Quokkas rarely drink water.";
    std::fs::write(&doc, text).unwrap();
    ok(&["--mock-llm", "add", s(&f.index), s(&doc)]);
    let chunk = nodes(&f.index).into_iter().find(|n| n["source"]["doc_id"] == "gone").unwrap()["source"]["chunk_id"].clone();
    let chunk = chunk.as_str().unwrap().to_string();

    let before = query_chunks(&f.index, text);
    assert_eq!(before.first(), Some(&chunk), "an exact-text query ranks its own leaf first among leaves");

    let report = json(&["--mock-llm", "remove", s(&f.index), "gone"]);
    assert_eq!(report["removed_leaves"], serde_json::json!([chunk]));
    assert!(report["report"]["summary_call_count"].as_u64().unwrap() >= 1);
    let after = query_chunks(&f.index, text);
    assert!(!after.contains(&chunk));
    let mut expected = before.clone();
    expected.retain(|c| c != &chunk);
    assert_eq!(after, expected, "the other leaves keep their order");

    let err = fails(&["--mock-llm", "remove", s(&f.index), "gone"]);
    assert!(err.contains("gone"), "{err}");
}

#[test]
fn greedy_add_changes_no_mixture() {
    let f = fixture(40);
    let doc = f.root.join("g.txt");
    std::fs::write(&doc, "Greedy insertion keeps every mixture fixed. It only links the leaf.").unwrap();
    let report = json(&["--mock-llm", "add", s(&f.index), s(&doc), "--greedy"]);
    assert_eq!(report["report"]["gmm_updates"], 0);
    assert_eq!(report["report"]["split_attempts"], 0);
    assert_eq!(report["new_leaves"].as_array().unwrap().len(), 1);
}

#[test]
fn query_limits_and_determinism() {
    let f = fixture(40);
    let one = json(&["query", s(&f.index), "stosfox baixbain", "--k", "1"]);
    assert_eq!(one.as_array().unwrap().len(), 1);

    let all = json(&["query", s(&f.index), "stosfox baixbain"]);
    let tokens: u64 = all.as_array().unwrap().iter().map(|h| h["tokens"].as_u64().unwrap()).sum();
    assert!(tokens <= 2000 && tokens > 0);
    let sims: Vec<f64> = all.as_array().unwrap().iter().map(|h| h["similarity"].as_f64().unwrap()).collect();
    assert!(sims.windows(2).all(|w| w[0] >= w[1]));

    let a = ok(&["query", s(&f.index), "stosfox baixbain"]);
    let b = ok(&["query", s(&f.index), "stosfox baixbain"]);
    assert_eq!(a, b);
}

#[test]
fn ask_defaults_and_answers() {
    let f = fixture(40);
    let out = json(&["--mock-llm", "ask", s(&f.index), "What does the stosfox limit?"]);
    assert_eq!(out["k0"], 20);
    assert_eq!(out["budget"], 2000);
    assert_eq!(out["retrieved"], 20);
    assert!(out["context_tokens"].as_u64().unwrap() <= 2000);
    assert!(out["answer"].is_null());

    let a = ok(&["--mock-llm", "ask", s(&f.index), "What does the stosfox limit?", "--expand", "--answer"]);
    let b = ok(&["--mock-llm", "ask", s(&f.index), "What does the stosfox limit?", "--expand", "--answer"]);
    assert_eq!(a, b);
    assert!(a.contains("expanded query: "));

    // a question naming a word of the context gets a sentence back
    let context = out["context"].as_str().unwrap();
    let word = context.split_whitespace().map(|w| w.trim_matches('.')).find(|w| w.len() >= 6).unwrap();
    let q = format!("What about {word}?");
    let answered = json(&["--mock-llm", "ask", s(&f.index), &q, "--answer"]);
    assert_eq!(answered["answered"], true, "{answered}");
    assert!(answered["answer"].as_str().unwrap().contains(word));
    assert!(ok(&["--mock-llm", "ask", s(&f.index), &q, "--answer"]).contains("answer (answered): "));

    // no content word of the question occurs anywhere, so the mock model returns the sentinel
    let none = ok(&["--mock-llm", "ask", s(&f.index), "Why quux?", "--answer", "--retriever", "naive", "--k0", "5"]);
    assert!(none.contains("answer (unanswered): "), "{none}");
}

#[test]
fn locked_index_is_refused() {
    let f = fixture(20);
    std::fs::write(f.index.join("write.lock"), "1\n").unwrap();
    assert!(fails(&["query", s(&f.index), "x"]).contains("locked"));
    assert!(fails(&["--mock-llm", "remove", s(&f.index), "doc0000"]).contains("locked"));
    std::fs::remove_file(f.index.join("write.lock")).unwrap();
    ok(&["--mock-llm", "remove", s(&f.index), "doc0000"]);
    assert!(!f.index.join("write.lock").exists());
}

#[test]
fn corrupt_index_is_refused() {
    let f = fixture(20);
    let p = f.index.join("nodes.jsonl");
    let mut bytes = std::fs::read(&p).unwrap();
    bytes[10] ^= 1;
    std::fs::write(&p, bytes).unwrap();
    assert!(fails(&["stats", s(&f.index)]).contains("corrupt"));
}

#[test]
fn bench_split_uses_fewer_summary_calls() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c");
    ok(&["gen-corpus", s(&corpus), "--chunks", "300", "--seed", "1"]);
    let rows = json(&["--mock-llm", "--seed", "1", "bench-split", s(&corpus), "--batching", "all"]);
    let r = &rows[0]["result"];
    assert_eq!(r["total_chunks"], 300);
    assert_eq!(r["initial_chunks"], 210);
    let adrap = r["adrap_calls"].as_u64().unwrap();
    let rebuild = r["full_rebuild_calls"].as_u64().unwrap();
    assert!(adrap < rebuild, "{adrap} vs {rebuild}");
    let text = ok(&["--mock-llm", "bench-split", s(&corpus), "--batching", "all", "--fraction", "0.9"]);
    assert!(text.contains("QASPER    530 vs 761 calls"), "{text}");
}

#[test]
fn settings_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"seed": 5, "k0": 9, "chat_model": "from-file", "embed_model": "file-embed"}"#).unwrap();
    let resolved = |extra: &[&str], env: &[(&str, &str)]| -> Value {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_ratree"));
        cmd.args(["config", "--config", s(&cfg)]).args(extra).env_remove("RATREE_CHAT_MODEL").env_remove("RATREE_EMBED_MODEL");
        for (k, v) in env {
            cmd.env(k, v);
        }
        let out = cmd.output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        serde_json::from_slice(&out.stdout).unwrap()
    };
    let base = resolved(&[], &[]);
    assert_eq!(base["seed"], 5);
    assert_eq!(base["k0"], 9);
    assert_eq!(base["budget"], 2000);
    assert_eq!(base["chat_model"], "from-file");

    let env = resolved(&[], &[("RATREE_CHAT_MODEL", "from-env")]);
    assert_eq!(env["chat_model"], "from-env");
    assert_eq!(env["embed_model"], "file-embed");

    let flags = resolved(&["--seed", "6", "--chat-model", "from-flag"], &[("RATREE_CHAT_MODEL", "from-env")]);
    assert_eq!(flags["seed"], 6);
    assert_eq!(flags["chat_model"], "from-flag");

    std::fs::write(&cfg, r#"{"k": 2}"#).unwrap();
    let f = fixture(20);
    let hits = json(&["query", s(&f.index), "stosfox", "--config", s(&cfg)]);
    assert_eq!(hits.as_array().unwrap().len(), 2);
    let hits = json(&["query", s(&f.index), "stosfox", "--config", s(&cfg), "--k", "3"]);
    assert_eq!(hits.as_array().unwrap().len(), 3);

    std::fs::write(&cfg, r#"{"unknown_key": 1}"#).unwrap();
    fails(&["config", "--config", s(&cfg)]);
}
