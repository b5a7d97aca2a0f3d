use std::collections::HashSet;

use ctvae::metrics::{distinct_n, matching_ratio, perplexity, unique_ratio};
use ctvae::rerank::{rank_score, rerank_topk, Scored, TcdScore};
use proptest::prelude::*;

fn word() -> impl Strategy<Value = String> {
    prop::sample::select(vec!["a", "b", "c", "d"]).prop_map(String::from)
}

fn responses() -> impl Strategy<Value = Vec<Vec<String>>> {
    prop::collection::vec(prop::collection::vec(word(), 1..5), 1..12)
}

fn scored() -> impl Strategy<Value = Vec<Scored>> {
    prop::collection::vec(
        (prop::collection::vec(word(), 1..3), -20.0f64..0.0, 0.001f64..1.0),
        1..15,
    )
    .prop_map(|v| {
        v.into_iter()
            .map(|(tokens, loglik, p)| Scored {
                tokens,
                loglik,
                tcd: TcdScore { p, log_p: p.ln() },
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn ratios_lie_in_the_unit_interval(rs in responses(), n in 1usize..3) {
        let u = unique_ratio(&rs).unwrap();
        prop_assert!(u > 0.0 && u <= 1.0);
        if let Ok(d) = distinct_n(&rs, n) {
            prop_assert!(d > 0.0 && d <= 1.0);
        }
    }

    #[test]
    fn ratios_ignore_order(rs in responses()) {
        let mut rev = rs.clone();
        rev.reverse();
        prop_assert_eq!(unique_ratio(&rs).unwrap(), unique_ratio(&rev).unwrap());
        prop_assert_eq!(distinct_n(&rs, 1).unwrap(), distinct_n(&rev, 1).unwrap());
    }

    #[test]
    fn duplicating_the_set_halves_the_ratios(rs in responses()) {
        let twice: Vec<_> = rs.iter().chain(&rs).cloned().collect();
        let u = unique_ratio(&rs).unwrap();
        prop_assert!((unique_ratio(&twice).unwrap() - u / 2.0).abs() < 1e-12);
        let d = distinct_n(&rs, 1).unwrap();
        prop_assert!((distinct_n(&twice, 1).unwrap() - d / 2.0).abs() < 1e-12);
    }

    #[test]
    fn matching_counts_training_members(rs in responses(), keep in 0usize..12) {
        let training: HashSet<Vec<String>> = rs.iter().take(keep).cloned().collect();
        let m = matching_ratio(&rs, &training);
        let want = rs.iter().filter(|r| training.contains(*r)).count() as f64 / rs.len() as f64;
        prop_assert_eq!(m, want);
    }

    #[test]
    fn perplexity_is_exp_of_mean_nll(nll in 0.0f64..50.0, tokens in 1usize..100) {
        let p = perplexity(-nll, tokens).unwrap();
        prop_assert!((p.ln() - nll / tokens as f64).abs() < 1e-12);
        prop_assert!(p >= 1.0);
    }

    #[test]
    fn rerank_keeps_distinct_best_scores(cands in scored(), lambda in 0.0f64..10.0, k in 1usize..6) {
        let out = rerank_topk(&cands, lambda, k).unwrap();
        let distinct: HashSet<&Vec<String>> = cands.iter().map(|c| &c.tokens).collect();
        prop_assert_eq!(out.len(), k.min(distinct.len()));
        for (i, r) in out.iter().enumerate() {
            prop_assert_eq!(r.rank, i + 1);
            let best = cands
                .iter()
                .filter(|c| c.tokens == r.tokens)
                .map(|c| rank_score(c.loglik, c.tcd.p, lambda).unwrap())
                .fold(f64::NEG_INFINITY, f64::max);
            prop_assert!((r.score - best).abs() < 1e-9);
        }
        for w in out.windows(2) {
            prop_assert!(w[0].score >= w[1].score);
            prop_assert!(w[0].tokens != w[1].tokens);
        }
        // nothing left out scores above the last kept response
        if let Some(last) = out.last() {
            let kept: HashSet<&Vec<String>> = out.iter().map(|r| &r.tokens).collect();
            for c in cands.iter().filter(|c| !kept.contains(&c.tokens)) {
                prop_assert!(c.loglik + lambda * c.tcd.log_p <= last.score);
            }
        }
    }

    #[test]
    fn rank_score_falls_with_incoherence(ll in -20.0f64..0.0, p in 0.01f64..1.0, q in 0.01f64..1.0, lambda in 0.01f64..10.0) {
        let (a, b) = (rank_score(ll, p, lambda).unwrap(), rank_score(ll, q, lambda).unwrap());
        prop_assert_eq!(p <= q, a <= b);
    }
}

#[test]
fn invalid_metric_inputs_are_errors() {
    let empty: Vec<Vec<String>> = Vec::new();
    assert!(unique_ratio(&empty).is_err());
    assert!(distinct_n(&[vec!["a".to_string()]], 2).is_err());
    assert!(distinct_n(&[vec!["a".to_string()]], 0).is_err());
    assert!(perplexity(-1.0, 0).is_err());
    assert!(rank_score(0.0, 0.0, 1.0).is_err());
    assert!(rerank_topk(&[], 1.0, 3).is_err());
}
