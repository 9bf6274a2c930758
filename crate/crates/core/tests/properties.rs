use proptest::prelude::*;

use urm_core::corpus::{build_episodes, infer_thread_starters, synth_corpus, Post, SynthSpec};
use urm_core::evaluator::{evaluate, rank_by_cosine, EvalOptions};
use urm_core::graph::{build_graph, forum_schemes, generate_walks, walk_is_valid, WalkConfig};
use urm_core::tensor::Mat;
use urm_core::text_encoder::{in_band, valve};

fn matrix(rows: &[Vec<f64>]) -> Mat {
    Mat::from_vec(rows.len(), rows[0].len(), rows.concat())
}

fn labelled_set() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
    (2usize..24, 1usize..8).prop_flat_map(|(n, e)| {
        (
            prop::collection::vec(prop::collection::vec(-3i8..=3, e).prop_map(|v| v.into_iter().map(f64::from).collect()), n),
            prop::collection::vec(0usize..4, n),
        )
    })
}

proptest! {
    #[test]
    fn valve_is_lambda_or_zero(l in 0.0f64..=1.0, eps in 0.0f64..=0.5) {
        let v = valve(l, eps);
        prop_assert!(v == l || v == 0.0);
        prop_assert_eq!(v == l && l != 0.0, in_band(l, eps) && l != 0.0);
        prop_assert_eq!(valve(l, 0.5), l);
    }

    #[test]
    fn ranking_is_a_permutation_without_the_query((rows, _) in labelled_set(), q in 0usize..24) {
        let set = matrix(&rows);
        let q = q % rows.len();
        let mut order = rank_by_cosine(q, &set);
        prop_assert_eq!(order.len(), rows.len() - 1);
        prop_assert!(!order.contains(&q));
        order.sort_unstable();
        order.dedup();
        prop_assert_eq!(order.len(), rows.len() - 1);
    }

    #[test]
    fn metrics_ignore_positive_row_scaling((rows, labels) in labelled_set(), scale in 1u32..8) {
        let set = matrix(&rows);
        // Powers of two keep every cosine bit-identical.
        let factor = f64::from(1u32 << scale);
        let scaled = matrix(&rows.iter().map(|r| r.iter().map(|v| v * factor).collect()).collect::<Vec<_>>());
        let opts = EvalOptions::default();
        match (evaluate(&set, &labels, &opts), evaluate(&scaled, &labels, &opts)) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(&a, &b);
                prop_assert!(a.mrr >= a.recall_at[&1]);
                let r: Vec<f64> = a.recall_at.values().copied().collect();
                prop_assert!(r.windows(2).all(|w| w[0] <= w[1]));
                prop_assert_eq!(a.histogram.iter().sum::<usize>() + a.overflow, a.n_queries);
            }
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "scaling changed validity"),
        }
    }

    #[test]
    fn episodes_partition_each_author_stream(stamps in prop::collection::vec(0i64..1000, 1..40), len in 1usize..6) {
        let posts: Vec<Post> = stamps
            .iter()
            .enumerate()
            .map(|(i, &t)| Post {
                market_id: "m".into(),
                subforum_id: "s".into(),
                thread_id: format!("t{}", i % 3),
                post_id: format!("p{i}"),
                author_id: format!("a{}", i % 2),
                timestamp: t,
                text: "x".into(),
                thread_starter: None,
            })
            .collect();
        let eps = build_episodes(&posts, len, len);
        let mut seen: Vec<&String> = eps.iter().flat_map(|e| &e.post_ids).collect();
        for e in &eps {
            prop_assert_eq!(e.len(), len);
        }
        let n = seen.len();
        seen.sort();
        seen.dedup();
        prop_assert_eq!(seen.len(), n);
        for a in ["a0", "a1"] {
            let count = posts.iter().filter(|p| p.author_id == a).count();
            prop_assert_eq!(eps.iter().filter(|e| e.author_id == a).count(), count / len);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn walks_on_synthetic_forums_are_valid(seed in 0u64..1000, authors in 2usize..6) {
        let spec = SynthSpec { posts_per_author: 12, ..SynthSpec::new(1, authors, 0.0, seed) };
        let posts = infer_thread_starters(synth_corpus(&spec).unwrap().all_posts()).unwrap();
        let graph = build_graph(&posts);
        for scheme in forum_schemes() {
            let walks = generate_walks(&graph, std::slice::from_ref(&scheme), &WalkConfig { walks_per_start: 3, target_len: 17, seed });
            prop_assert!(!walks.is_empty());
            for w in &walks {
                prop_assert!(walk_is_valid(&graph, &scheme, w), "{scheme} {w:?}");
                prop_assert!(w.len() <= 17);
            }
        }
    }
}
