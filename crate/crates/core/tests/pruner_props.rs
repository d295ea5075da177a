use std::collections::BTreeSet;

use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidguard_core::engine::{AttentionWorkspace, HeadQkv, TokenLayout};
use vidguard_core::pruner::{
    allocate_budget, k_total_for_ratio, plan_pruning, relevance, PruningPlan, RelevanceMatrix, Scoring,
};

/// Random last-layer workspace over `v` visual tokens and the given chunks.
fn workspace(seed: u64, v: usize, chunks: &[usize]) -> (AttentionWorkspace, TokenLayout) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = TokenLayout::new(v, chunks, 2).unwrap();
    let n = layout.total_len();
    let mut m = || Array2::from_shape_fn((n, 4), |_| rng.random_range(-2.0..2.0));
    let ws = AttentionWorkspace {
        heads: (0..2).map(|_| HeadQkv { q: m(), k: m(), v: m() }).collect(),
        positions: (0..n).collect(),
    };
    (ws, layout)
}

fn rel_for(seed: u64, v: usize, chunks: &[usize]) -> RelevanceMatrix {
    let (ws, layout) = workspace(seed, v, chunks);
    relevance(&ws, &layout, 0, Scoring::Softmax).unwrap()
}

fn check_plan(plan: &PruningPlan, v: usize, k: usize) -> Result<(), TestCaseError> {
    let kept: BTreeSet<usize> = plan.kept.iter().copied().collect();
    let dropped: BTreeSet<usize> = plan.dropped.iter().copied().collect();
    prop_assert!(kept.is_disjoint(&dropped));
    prop_assert_eq!(
        kept.union(&dropped).copied().collect::<Vec<_>>(),
        (0..v).collect::<Vec<_>>()
    );
    prop_assert_eq!(plan.per_policy_k.iter().sum::<usize>(), k.min(v));
    prop_assert_eq!(plan.kept.len(), k.min(v));
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn relevance_is_column_stochastic(v in 1usize..10, chunks in prop::collection::vec(3usize..6, 1..5), seed in any::<u64>()) {
        let rel = rel_for(seed, v, &chunks);
        for col in rel.per_pair.columns() {
            prop_assert!((col.sum() - 1.0).abs() < 1e-9);
            prop_assert!(col.iter().all(|&x| x > 0.0 && x < 1.0 + 1e-12));
        }
        prop_assert!((rel.per_policy.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for (i, row) in rel.per_pair.rows().into_iter().enumerate() {
            prop_assert!((row.mean().unwrap() - rel.per_policy[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn plans_partition_the_video(v in 1usize..12, chunks in prop::collection::vec(3usize..6, 1..4), seed in any::<u64>(), k in 0usize..16) {
        let rel = rel_for(seed, v, &chunks);
        let plan = plan_pruning(&rel, k).unwrap();
        check_plan(&plan, v, k)?;
        let picks: usize = plan.selected.iter().map(Vec::len).sum();
        prop_assert_eq!(picks, plan.kept.len());
        for (i, s) in plan.selected.iter().enumerate() {
            prop_assert_eq!(s.len(), plan.per_policy_k[i]);
        }
    }

    #[test]
    fn kept_size_is_monotone_in_budget(v in 1usize..12, chunks in prop::collection::vec(3usize..6, 1..4), seed in any::<u64>()) {
        let rel = rel_for(seed, v, &chunks);
        let sizes: Vec<usize> = (0..=v + 2).map(|k| plan_pruning(&rel, k).unwrap().kept.len()).collect();
        prop_assert!(sizes.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn budget_sums_exactly(r in prop::collection::vec(0.0f64..1.0, 1..6), k in 0usize..40, v in 0usize..40) {
        let alloc = allocate_budget(&r, k, v);
        prop_assert_eq!(alloc.iter().sum::<usize>(), k.min(v));
    }

    #[test]
    fn achieved_ratio_tracks_configured(v in 1usize..40, ratio in 0.0f64..0.999, seed in any::<u64>()) {
        let rel = rel_for(seed, v, &[3, 4]);
        let plan = plan_pruning(&rel, k_total_for_ratio(ratio, v).unwrap()).unwrap();
        prop_assert!((plan.ratio() - ratio).abs() <= 1.0 / v as f64 + 1e-12);
    }

    #[test]
    fn relevance_is_permutation_equivariant(v in 1usize..8, seed in any::<u64>(), rot in 1usize..3) {
        let chunks = [3usize, 4, 5];
        let (ws, layout) = workspace(seed, v, &chunks);
        let base = relevance(&ws, &layout, 0, Scoring::Softmax).unwrap();
        // move whole chunk blocks of Q/K/V rows into the rotated order
        let order: Vec<usize> = (0..3).map(|i| (i + rot) % 3).collect();
        let lens: Vec<usize> = order.iter().map(|&i| chunks[i]).collect();
        let permuted_layout = TokenLayout::new(v, &lens, 2).unwrap();
        let mut rows: Vec<usize> = (0..v).collect();
        for &c in &order {
            rows.extend(layout.policies()[c].clone());
        }
        rows.extend(layout.query());
        let pick = |m: &Array2<f64>| m.select(ndarray::Axis(0), &rows);
        let ws_p = AttentionWorkspace {
            heads: ws.heads.iter().map(|h| HeadQkv { q: pick(&h.q), k: pick(&h.k), v: pick(&h.v) }).collect(),
            positions: ws.positions.clone(),
        };
        let perm = relevance(&ws_p, &permuted_layout, 0, Scoring::Softmax).unwrap();
        for (pos, &orig) in order.iter().enumerate() {
            prop_assert!((perm.per_policy[pos] - base.per_policy[orig]).abs() < 1e-12);
            for j in 0..v {
                prop_assert!((perm.per_pair[[pos, j]] - base.per_pair[[orig, j]]).abs() < 1e-12);
            }
        }
        for k in 0..=v {
            let a = plan_pruning(&base, k).unwrap();
            let b = plan_pruning(&perm, k).unwrap();
            prop_assert_eq!(a.kept, b.kept);
        }
    }
}

#[test]
fn apportionment_examples() {
    assert_eq!(allocate_budget(&[0.5, 0.5], 4, 10), vec![2, 2]);
    assert_eq!(allocate_budget(&[1.0], 7, 10), vec![7]);
    assert_eq!(allocate_budget(&[0.6, 0.4], 3, 10), vec![2, 1]);
    assert_eq!(allocate_budget(&[0.6, 0.4], 30, 3), vec![2, 1]);
}
