use indexmap::IndexMap;
use proptest::prelude::*;
use vidguard_core::encoder::ModelConfig;
use vidguard_core::engine::{AttentionMode, TokenLayout};
use vidguard_core::metrics::{
    auprc, count_flops, count_flops_at_ratio, multilabel_f1, pcc, per_category_accuracy, srcc, LabeledPrediction,
};

fn config(n_layers: usize) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 4,
        n_layers,
        ..ModelConfig::default()
    }
}

fn labeled(items: &[(Vec<bool>, Vec<bool>)]) -> Vec<LabeledPrediction> {
    let map =
        |v: &[bool]| -> IndexMap<String, bool> { v.iter().enumerate().map(|(i, &b)| (format!("c{i}"), b)).collect() };
    items
        .iter()
        .enumerate()
        .map(|(i, (t, p))| LabeledPrediction {
            id: i.to_string(),
            true_flags: map(t),
            pred_flags: map(p),
            score: None,
        })
        .collect()
}

fn items() -> impl Strategy<Value = Vec<(Vec<bool>, Vec<bool>)>> {
    (1usize..5).prop_flat_map(|c| {
        prop::collection::vec(
            (
                prop::collection::vec(any::<bool>(), c),
                prop::collection::vec(any::<bool>(), c),
            ),
            1..10,
        )
    })
}

proptest! {
    #[test]
    fn average_precision_bounds(truth in prop::collection::vec(any::<bool>(), 1..12), seed in prop::collection::vec(0.0f64..1.0, 12)) {
        prop_assume!(truth.iter().any(|&t| t));
        let scores = &seed[..truth.len()];
        let ap = auprc(&truth, scores).unwrap();
        let share = truth.iter().filter(|&&t| t).count() as f64 / truth.len() as f64;
        prop_assert!(ap > 0.0 && ap <= 1.0 + 1e-12);
        let perfect: Vec<f64> = truth.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect();
        prop_assert!((auprc(&truth, &perfect).unwrap() - 1.0).abs() < 1e-12);
        let worst: Vec<f64> = perfect.iter().map(|s| 1.0 - s).collect();
        prop_assert!(auprc(&truth, &worst).unwrap() <= ap + 1e-12 || ap >= share);
    }

    #[test]
    fn agreement_gives_perfect_scores(truth in items()) {
        let same: Vec<(Vec<bool>, Vec<bool>)> = truth.iter().map(|(t, _)| (t.clone(), t.clone())).collect();
        let preds = labeled(&same);
        prop_assert_eq!(per_category_accuracy(&preds).unwrap().mean, 1.0);
        prop_assert_eq!(multilabel_f1(&preds).unwrap(), 1.0);
    }

    #[test]
    fn f1_and_accuracy_are_bounded(data in items()) {
        let preds = labeled(&data);
        let f1 = multilabel_f1(&preds).unwrap();
        let acc = per_category_accuracy(&preds).unwrap();
        prop_assert!((0.0..=1.0).contains(&f1));
        prop_assert!(acc.per_category.values().all(|a| (0.0..=1.0).contains(a)));
        let flipped: Vec<(Vec<bool>, Vec<bool>)> = data.iter().map(|(t, _)| (t.clone(), t.iter().map(|b| !b).collect())).collect();
        prop_assert_eq!(per_category_accuracy(&labeled(&flipped)).unwrap().mean, 0.0);
    }

    #[test]
    fn correlation_is_symmetric_and_affine_invariant(x in prop::collection::vec(-10.0f64..10.0, 3..20), a in 0.1f64..5.0, b in -3.0f64..3.0) {
        let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v * v + i as f64).collect();
        if let (Ok(r), Ok(r2)) = (pcc(&x, &y), pcc(&y, &x)) {
            prop_assert!((r - r2).abs() < 1e-12);
            let scaled: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            prop_assert!((pcc(&scaled, &y).unwrap() - r).abs() < 1e-9);
            let cubed: Vec<f64> = x.iter().map(|v| v * v * v).collect();
            prop_assert!((srcc(&cubed, &y).unwrap() - srcc(&x, &y).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn flops_are_additive_and_ordered(v in 1usize..40, chunks in prop::collection::vec(3usize..20, 1..6), q in 1usize..8, layers in 1usize..4) {
        let layout = TokenLayout::new(v, &chunks, q).unwrap();
        let cfg = config(layers);
        let pepe = count_flops(&cfg, &layout, None, AttentionMode::Pepe);
        let seq = count_flops(&cfg, &layout, None, AttentionMode::Sequential);
        for r in [&pepe, &seq] {
            let total: u64 = r.prefill_layers.iter().map(|l| l.projection + l.attention_per_head.iter().sum::<u64>() + l.mlp).sum();
            prop_assert_eq!(r.prefill.total, total);
            prop_assert_eq!(r.prefill.total, r.prefill.projection + r.prefill.attention + r.prefill.mlp);
        }
        if chunks.len() == 1 {
            prop_assert_eq!(pepe.prefill.attention, seq.prefill.attention);
        } else {
            prop_assert!(pepe.prefill.attention < seq.prefill.attention);
        }
        let decode: Vec<u64> = [0.0, 0.25, 0.5, 0.75, 0.99]
            .iter()
            .map(|&r| count_flops_at_ratio(&cfg, &layout, r, AttentionMode::Pepe).unwrap().decode_per_token.total)
            .collect();
        prop_assert!(decode.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(decode[0] > decode[4] || v < 2);
    }
}
