//! Policy-conditioned video guardrail core.

pub mod annotator;
pub mod encoder;
pub mod engine;
pub mod fixtures;
pub mod metrics;
pub mod pipeline;
pub mod policy;
pub mod pruner;
pub mod sampler;
pub mod text;
