use std::sync::OnceLock;

use proptest::prelude::*;
use vidguard_core::encoder::PatchEncoder;
use vidguard_core::engine::Engine;
use vidguard_core::fixtures::{planted_config, planted_video, PlantedSpec, PlantedVideo};
use vidguard_core::pipeline::{guardrail_with, policy_tokens, GuardrailRequest, GuardrailVerdict, DEFAULT_QUERY};
use vidguard_core::policy::{default_policies, PolicySet};
use vidguard_core::text::tokenize;

struct Fixture {
    engine: Engine,
    encoder: PatchEncoder,
    videos: Vec<PlantedVideo>,
}

fn fixture() -> &'static Fixture {
    static CELL: OnceLock<Fixture> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = planted_config();
        let engine = Engine::new(&cfg);
        let encoder = PatchEncoder::new(&cfg);
        let policies = default_policies();
        let chunks = policy_tokens(&policies, cfg.vocab_size);
        let query = tokenize(DEFAULT_QUERY, cfg.vocab_size);
        let videos = (0..policies.len())
            .map(|p| {
                let spec = PlantedSpec {
                    planted_policy: Some(p),
                    seed: 42 + p as u64,
                    ..PlantedSpec::default()
                };
                planted_video(&engine, &encoder, &chunks, &query, &spec).unwrap()
            })
            .collect();
        Fixture {
            engine,
            encoder,
            videos,
        }
    })
}

fn run(video: &PlantedVideo, policies: PolicySet, ratio: f64) -> GuardrailVerdict {
    let fx = fixture();
    let mut req = GuardrailRequest::new(video.frames.clone(), policies, planted_config());
    req.sampler = video.sampler;
    req.prune_ratio = ratio;
    guardrail_with(&fx.engine, &fx.encoder, &req).unwrap()
}

fn order() -> impl Strategy<Value = Vec<usize>> {
    Just((0..default_policies().len()).collect::<Vec<_>>()).prop_shuffle()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn flags_follow_their_policy(which in 0usize..6, order in order(), ratio in prop::sample::select(vec![0.0, 0.4, 0.9])) {
        let video = &fixture().videos[which];
        let base = run(video, default_policies(), ratio);
        let moved = run(video, default_policies().permute(&order).unwrap(), ratio);
        for (name, flag) in &base.flags {
            prop_assert_eq!(moved.flags[name], *flag);
        }
        for (old, &new) in order.iter().enumerate() {
            prop_assert!((base.per_policy_relevance[old] - moved.per_policy_relevance[new]).abs() < 1e-9);
        }
    }
}

#[test]
fn planted_flags_survive_moderate_pruning() {
    let names: Vec<String> = default_policies().chunks().iter().map(|c| c.name.clone()).collect();
    for (p, video) in fixture().videos.iter().enumerate() {
        for ratio in [0.0, 0.2, 0.4, 0.6, 0.9] {
            let verdict = run(video, default_policies(), ratio);
            let raised: Vec<&String> = verdict.flags.iter().filter(|(_, &f)| f).map(|(k, _)| k).collect();
            assert_eq!(raised, vec![&names[p]], "policy {p} ratio {ratio}");
            assert!(verdict.explanation.contains(&names[p]));
        }
    }
}
