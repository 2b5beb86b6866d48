"""Smoke test for the pyratree extension (offline mock models).

    pip install --no-build-isolation -e crates/python
    python python/smoke_test.py
"""

import math
import random
import tempfile

import pyratree


def corpus(n_docs=12, seed=5):
    rng = random.Random(seed)
    topics = [[f"{t}word{i}" for i in range(30)] for t in ("alpha", "beta", "gamma")]
    docs = []
    for d in range(n_docs):
        vocab = topics[d % len(topics)]
        sentences = []
        for _ in range(60):
            words = rng.sample(vocab, 7)
            sentences.append(" ".join(words).capitalize() + ".")
        docs.append((f"doc{d:02}", " ".join(sentences)))
    return docs


def main():
    docs = corpus()
    index = pyratree.Index.build(docs, seed=3)
    stats = index.stats()
    assert stats["leaf_count"] > 0 and 1 <= index.height <= 5, stats
    assert index.documents() == sorted(d for d, _ in docs)
    print(repr(index))

    hits = index.query("alphaword3 alphaword7", k=1)
    assert len(hits) == 1
    hits = index.query("alphaword3 alphaword7")
    assert sum(h["token_count"] for h in hits) <= 2000
    sims = [h["similarity"] for h in hits]
    assert sims == sorted(sims, reverse=True)

    text = "Quokkas hop across the island. Quokkas rarely drink water."
    report = index.add("quokka", text)
    assert report["summary_call_count"] == len(report["resummarized_node_ids"]) >= 1
    top_leaf = next(h for h in index.query(text, token_limit=100000) if h["layer"] == 0)
    assert top_leaf["text"] == text

    with tempfile.TemporaryDirectory() as tmp:
        path = f"{tmp}/index"
        index.save(path)
        again = pyratree.Index.load(path)
        assert again.query("betaword1") == index.query("betaword1")
        assert len(again) == len(index)

    report = index.remove("quokka")
    assert report["removed_node_ids"]
    assert all(h["text"] != text for h in index.query(text, token_limit=100000))
    try:
        index.remove("quokka")
    except KeyError:
        pass
    else:
        raise AssertionError("removing twice should raise KeyError")

    out = index.ask("What is gammaword4 next to?", answer=True)
    assert out["token_count"] <= 2000 and len(out["documents"]) == 20
    assert out["answer"]["answered"] and "gammaword4" in out["answer"]["text"].lower()
    out = index.ask("Why quux?", answer=True, retriever="naive", k0=5)
    assert not out["answer"]["answered"]

    chunks = pyratree.chunk_text("d", docs[0][1], chunk_tokens=40, overlap_tokens=10)
    assert all(c["token_count"] <= 50 for c in chunks)
    assert pyratree.split_sentences("One. Two!") == ["One.", "Two!"]
    assert abs(math.sqrt(sum(x * x for x in pyratree.mock_embed("hello"))) - 1) < 1e-9
    assert pyratree.count_tokens("Hello, world.") == 4

    bench = pyratree.bench_split(corpus(30), fraction=0.7)
    assert 0 < bench["initial_chunks"] < bench["total_chunks"]
    print("bench: adRAP", bench["adrap_calls"], "vs rebuild", bench["full_rebuild_calls"])

    try:
        pyratree.Index.build([])
    except pyratree.RatreeError:
        pass
    else:
        raise AssertionError("empty corpus should fail")
    print("ok")


if __name__ == "__main__":
    main()
