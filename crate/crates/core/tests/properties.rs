use proptest::prelude::*;

use ratree::adrap::{add_chunks, remove_chunk, UpdateOptions};
use ratree::corpus::synthetic_chunks;
use ratree::embedding::{mock_embed, MockEmbedder};
use ratree::gmm::{assign_from_gamma, fit_em, incremental_update, m_step, EmOptions, GmmModel};
use ratree::summarize::MockSummarizer;
use ratree::text::{chunk_text, count_tokens, sentence_spans, ChunkingConfig, WordPunctCounter};
use ratree::tree::{build_tree, TreeConfig};

fn simplex_rows(n: usize, k: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(0.01f64..1.0, k), n)
        .prop_map(|rows| rows.into_iter().map(|r| { let s: f64 = r.iter().sum(); r.into_iter().map(|v| v / s).collect() }).collect())
}

fn points(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-20.0f64..20.0, d), n)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn gamma_threshold_assignment_is_never_empty(row in prop::collection::vec(0.0f64..1.0, 1..8), t in 0.0f64..1.0) {
        let picked = assign_from_gamma(&row, t);
        prop_assert!(!picked.is_empty());
        let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(picked.iter().any(|&c| row[c] == best));
        prop_assert!(picked.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn stats_model_matches_mstep((pts, gamma) in (2usize..4, 1usize..4, 5usize..40)
        .prop_flat_map(|(d, k, n)| (points(n, d), simplex_rows(n, k))))
    {
        let k = gamma[0].len();
        let flat: Vec<f64> = gamma.iter().flatten().copied().collect();
        let model = GmmModel::from_responsibilities(&pts, &flat, k, 1e-6);
        let direct = m_step(&pts, &gamma, 1e-6).unwrap();
        prop_assert!((model.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for c in 0..k {
            prop_assert!((model.weights[c] - direct.weights[c]).abs() < 1e-12);
            for (a, b) in model.means[c].iter().zip(&direct.means[c]) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            for (a, b) in model.covariances[c].iter().zip(&direct.covariances[c]) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
        prop_assert!(model.validate().is_ok());
    }

    #[test]
    fn incremental_update_keeps_a_valid_mixture(pts in points(30, 2), x in prop::collection::vec(-30.0f64..30.0, 2), k in 1usize..4, seed in 0u64..1000) {
        let fit = fit_em(&pts, k, &EmOptions { n_init: 1, ..EmOptions::default() }, seed).unwrap();
        let (m, gamma) = incremental_update(&fit.model, &x).unwrap();
        prop_assert!(m.validate().is_ok());
        prop_assert!((gamma.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert_eq!(m.n, fit.model.n + 1);
        prop_assert!((m.suff_s0.iter().sum::<f64>() - (fit.model.n + 1) as f64).abs() < 1e-6);
    }

    #[test]
    fn em_log_likelihood_never_decreases(pts in points(40, 2), k in 1usize..5, seed in 0u64..1000) {
        let fit = fit_em(&pts, k, &EmOptions { n_init: 1, ..EmOptions::default() }, seed).unwrap();
        prop_assert!(fit.trace.windows(2).all(|w| w[1] >= w[0] - 1e-8), "{:?}", fit.trace);
    }

    #[test]
    fn chunks_respect_budgets_and_cover_text(words in prop::collection::vec("[a-z]{1,9}[.,!?]?", 1..900), max_body in 20usize..300, overlap in 0usize..40) {
        let text = words.join(" ");
        let cfg = ChunkingConfig { max_body_tokens: max_body, overlap_tokens: overlap.min(max_body - 1) };
        let chunks = chunk_text("p", &text, &cfg, &WordPunctCounter).unwrap();
        let joined: Vec<&str> = chunks.iter().flat_map(|c| c.body().split_whitespace()).collect();
        prop_assert_eq!(joined, text.split_whitespace().collect::<Vec<_>>());
        for (i, c) in chunks.iter().enumerate() {
            prop_assert_eq!(c.position, i);
            prop_assert!(count_tokens(c.body()) <= cfg.max_body_tokens);
            prop_assert!(count_tokens(c.overlap()) <= cfg.overlap_tokens);
            prop_assert_eq!(c.token_count, count_tokens(&c.text));
        }
    }

    #[test]
    fn sentence_spans_are_ordered_and_cover_words(text in "[A-Za-z .!?\n]{0,300}") {
        let spans = sentence_spans(&text);
        prop_assert!(spans.windows(2).all(|w| w[0].end <= w[1].start));
        let covered: String = spans.iter().map(|r| &text[r.clone()]).collect::<Vec<_>>().join(" ");
        prop_assert_eq!(covered.split_whitespace().collect::<Vec<_>>(), text.split_whitespace().collect::<Vec<_>>());
    }

    #[test]
    fn mock_embedding_is_unit_length(text in ".{1,200}") {
        let e = mock_embed(&text, 64);
        prop_assert!((e.norm() - 1.0).abs() < 1e-9 || e.norm() == 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn collapsed_query_is_ordered_and_within_budget(n in 5usize..40, seed in 0u64..50, q in ".{1,80}", k in 1usize..30, budget in 50usize..3000) {
        let chunks = synthetic_chunks(n, seed, &ChunkingConfig::default(), &WordPunctCounter);
        let tree = build_tree(&chunks, &MockEmbedder::default(), &MockSummarizer::new(), TreeConfig::default()).unwrap();
        prop_assert!(tree.validate().is_ok());
        let out = tree.collapsed_query(&mock_embed(&q, 64).0, k, budget);
        if let Ok(out) = out {
            prop_assert!(out.len() <= k);
            prop_assert!(out.windows(2).all(|w| w[0].similarity >= w[1].similarity));
            prop_assert!(out.iter().map(|r| r.token_count).sum::<usize>() <= budget);
        }
    }

    #[test]
    fn updates_preserve_invariants(seed in 0u64..100, ops in prop::collection::vec((any::<bool>(), 0usize..1000), 1..8), greedy in any::<bool>(), recluster in any::<bool>()) {
        let pool = synthetic_chunks(60, seed, &ChunkingConfig::default(), &WordPunctCounter);
        let e = MockEmbedder::default();
        let s = MockSummarizer::new();
        let mut tree = build_tree(&pool[..30], &e, &s, TreeConfig::default()).unwrap();
        let mut next_new = 30;
        let opts = UpdateOptions {
            mode: if greedy { ratree::adrap::UpdateMode::Greedy } else { ratree::adrap::UpdateMode::Adaptive },
            recluster_on_delete: recluster,
        };
        for (add, pick) in ops {
            if add && next_new < pool.len() {
                let end = (next_new + 1 + pick % 4).min(pool.len());
                let (t, r) = add_chunks(&tree, &pool[next_new..end], &e, &s, opts).unwrap();
                prop_assert_eq!(r.summary_call_count, r.resummarized_node_ids.len());
                tree = t;
                next_new = end;
            } else if !tree.is_empty() {
                let leaves: Vec<String> = tree.leaves().map(|l| l.source.as_ref().unwrap().chunk_id.clone()).collect();
                let (t, _) = remove_chunk(&tree, &leaves[pick % leaves.len()], &e, &s, opts).unwrap();
                tree = t;
            }
            prop_assert!(tree.validate().is_ok(), "{:?}", tree.validate());
        }
    }
}
