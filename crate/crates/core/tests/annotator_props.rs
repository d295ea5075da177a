use proptest::prelude::*;
use vidguard_core::annotator::{
    run_batch, AgentClient, AnnotatorConfig, Batch, BatchStatus, EventSpec, MockAgent, MockBehavior, ScriptedVerifier,
    VideoItem,
};
use vidguard_core::policy::default_policies;

fn behavior() -> impl Strategy<Value = MockBehavior> {
    prop_oneof![
        Just(MockBehavior::Support),
        Just(MockBehavior::Oppose),
        Just(MockBehavior::EchoMemory)
    ]
}

fn batch(videos: usize, events: usize) -> Batch {
    Batch {
        id: "batch".into(),
        videos: (0..videos)
            .map(|v| VideoItem {
                id: format!("v{v}"),
                events: (0..events)
                    .map(|e| EventSpec {
                        start_frame: 4 * e,
                        end_frame: 4 * e + 4,
                        reference_flags: Some((0..6).map(|c| (c + e + v) % 3 == 0).collect()),
                        note: None,
                    })
                    .collect(),
            })
            .collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn batch_lifecycle_is_well_formed(
        behaviors in prop::collection::vec(behavior(), 2..5),
        decisions in prop::collection::vec(any::<bool>(), 0..4),
        max_iters in 1usize..5,
        videos in 1usize..4,
        events in 1usize..3,
        fraction in 0.05f64..1.0,
        seed in any::<u64>(),
    ) {
        let cfg = AnnotatorConfig { max_iters, ..AnnotatorConfig::new(default_policies()) };
        let agents: Vec<Box<dyn AgentClient>> = behaviors
            .iter()
            .enumerate()
            .map(|(i, &b)| Box::new(MockAgent::new(format!("a{i}"), b)) as Box<dyn AgentClient>)
            .collect();
        let judge = MockAgent::new("judge", MockBehavior::Judge);
        let b = batch(videos, events);
        let verifier = ScriptedVerifier(decisions.clone());
        let run = run_batch(&cfg, &b, &agents, &judge, fraction, &verifier, seed).unwrap();

        prop_assert!(run.state.status.is_terminal());
        prop_assert!(run.state.history.len() <= 2);
        let mut at = BatchStatus::Pending;
        for &(from, to) in &run.state.history {
            prop_assert_eq!(from, at);
            prop_assert!(from.can_transition(to));
            at = to;
        }
        let expected = match (decisions.first().copied().unwrap_or(true), decisions.get(1).copied().unwrap_or(true)) {
            (true, _) => BatchStatus::Accepted,
            (false, true) => BatchStatus::Accepted,
            (false, false) => BatchStatus::Discarded,
        };
        prop_assert_eq!(run.state.status, expected);
        prop_assert_eq!(run.sampled.len(), run.state.history.len());
        for ann in run.annotations.iter().flat_map(|a| &a.events) {
            prop_assert!(ann.iterations >= 1 && ann.iterations <= max_iters);
            prop_assert!(ann.converged || ann.iterations == max_iters);
            prop_assert_eq!(ann.proposal.flags.len(), 6);
        }

        let again = run_batch(&cfg, &b, &agents, &judge, fraction, &verifier, seed).unwrap();
        prop_assert_eq!(
            serde_json::to_vec(&run.transcript).unwrap(),
            serde_json::to_vec(&again.transcript).unwrap()
        );
        prop_assert_eq!(run, again);
    }

    #[test]
    fn review_never_skips_a_state(accepts in prop::collection::vec(any::<bool>(), 1..6)) {
        let mut status = BatchStatus::Pending;
        let mut reviews = 0;
        for accept in accepts {
            if status.is_terminal() {
                break;
            }
            let next = status.after_review(accept);
            prop_assert!(status.can_transition(next));
            status = next;
            reviews += 1;
        }
        prop_assert!(reviews <= 2);
    }
}
