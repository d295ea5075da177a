//! End-to-end guardrail inference: segment, sample, encode, prefill with
//! parallel policy chunks, prune, decide and render.
//!
//! Flags come from a surrogate decision head, not a trained language model
//! head: policy `i` is flagged when the mean relevance over the visual tokens
//! it kept during pruning reaches `tau`. The verdict records this in
//! `decision_head`.

pub mod external;
pub mod response;

use image::RgbImage;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{EncoderError, ModelConfig, PatchEncoder, VisualTokenSet};
use crate::engine::{AttentionMode, AttentionPath, Engine, EngineError, FlopsTally};
use crate::policy::PolicySet;
use crate::pruner::{self, PruneError, PruningPlan, RelevanceMatrix, Scoring};
use crate::sampler::{self, EventSegment, FrameSequence, SamplerError, SamplerParams};
use crate::text::{anchored, tokenize};

pub use external::{external_guardrail, guardrail_prompt, EndpointDescriptor};
pub use response::{parse_response, render_flags, ParsedResponse, ResponseError};

pub const VERDICT_SCHEMA: &str = "vidguard.verdict/v1";
pub const DEFAULT_QUERY: &str = "Check this video against every policy category and report which ones it violates.";
pub const DEFAULT_PRUNE_RATIO: f64 = 0.6;
/// Default threshold as a multiple of the uniform share `1/n`.
pub const DEFAULT_TAU_SHARE: f64 = 1.5;
pub const DECISION_HEAD: &str = "relevance-threshold-surrogate";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no policies to check")]
    NoPolicies,
    #[error("no frames left after sampling")]
    NoFrames,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error("endpoint transport failed: {0}")]
    Transport(String),
    #[error("could not parse endpoint reply: {0}")]
    ParseFailure(#[source] ResponseError),
}

#[derive(Debug, Clone)]
pub struct GuardrailRequest {
    pub frames: FrameSequence,
    pub policies: PolicySet,
    pub query: String,
    pub config: ModelConfig,
    pub prune_ratio: f64,
    /// Absolute threshold on relevance; `None` means `1.5 / n`.
    pub tau: Option<f64>,
    pub mode: AttentionMode,
    pub sampler: SamplerParams,
    pub scoring: Scoring,
}

impl GuardrailRequest {
    pub fn new(frames: FrameSequence, policies: PolicySet, config: ModelConfig) -> Self {
        Self {
            frames,
            policies,
            query: DEFAULT_QUERY.to_string(),
            config,
            prune_ratio: DEFAULT_PRUNE_RATIO,
            tau: None,
            mode: AttentionMode::Pepe,
            sampler: SamplerParams::default(),
            scoring: Scoring::Softmax,
        }
    }

    /// `tau`, or `1.5 / n` capped at 1.
    pub fn resolved_tau(&self) -> f64 {
        self.tau
            .unwrap_or((DEFAULT_TAU_SHARE / self.policies.len().max(1) as f64).min(1.0))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.policies.is_empty() {
            return Err(PipelineError::NoPolicies);
        }
        self.config.validate()?;
        if !(0.0..1.0).contains(&self.prune_ratio) {
            return Err(PipelineError::InvalidRequest(format!(
                "prune_ratio {} outside [0, 1)",
                self.prune_ratio
            )));
        }
        let tau = self.resolved_tau();
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(PipelineError::InvalidRequest(format!("tau {tau} outside (0, 1]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningSummary {
    pub prune_ratio: f64,
    pub achieved_ratio: f64,
    pub k_total: usize,
    pub per_policy_k: Vec<usize>,
    pub kept_tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionHead {
    pub kind: String,
    pub tau: f64,
    /// Mean relevance over each policy's own kept tokens, compared to `tau`.
    pub evidence: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsSummary {
    pub prefill: u64,
    pub decode_per_token: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuardrailVerdict {
    pub schema: String,
    pub description: String,
    /// One flag per policy, keyed by category name, in policy order.
    pub flags: IndexMap<String, bool>,
    /// Empty iff no flag is set.
    pub explanation: String,
    /// Mean relevance of each policy over all visual tokens.
    pub per_policy_relevance: Vec<f64>,
    pub events: Vec<EventSegment>,
    pub sampled_frames: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<AttentionMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pruning: Option<PruningSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision_head: Option<DecisionHead>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flops: Option<FlopsSummary>,
}

impl GuardrailVerdict {
    pub fn any_flag(&self) -> bool {
        self.flags.values().any(|&f| f)
    }

    /// Flags in policy order.
    pub fn flag_vector(&self) -> Vec<bool> {
        self.flags.values().copied().collect()
    }
}

/// Renders `verdict` as the three-line response, keyed by the policy labels
/// `C<k>(<name>)`.
pub fn render_response(verdict: &GuardrailVerdict, policies: &PolicySet) -> String {
    let flags: Vec<(String, bool)> = policies
        .chunks()
        .iter()
        .map(|c| (c.label(), verdict.flags.get(&c.name).copied().unwrap_or(false)))
        .collect();
    render_flags(&verdict.description, &flags, &verdict.explanation)
}

/// Anchored token ids of every policy chunk.
pub fn policy_tokens(policies: &PolicySet, vocab_size: usize) -> Vec<Vec<u32>> {
    policies
        .chunks()
        .iter()
        .map(|c| anchored(&c.raw_text, vocab_size))
        .collect()
}

/// Events of the request's frames and the sampled frame of each.
pub fn sample_events(req: &GuardrailRequest) -> Result<(Vec<EventSegment>, Vec<RgbImage>), PipelineError> {
    let events = sampler::segment_events(&req.frames, req.sampler.threshold, req.sampler.min_len)?;
    let frames = events
        .iter()
        .map(|e| req.frames.frames()[e.sampled_frame].clone())
        .collect();
    Ok((events, frames))
}

/// Runs the guardrail with freshly generated weights.
pub fn guardrail(req: &GuardrailRequest) -> Result<GuardrailVerdict, PipelineError> {
    req.validate()?;
    let engine = Engine::new(&req.config);
    let encoder = PatchEncoder::new(&req.config);
    guardrail_with(&engine, &encoder, req)
}

/// Runs the guardrail on prebuilt weights, which must match `req.config`.
pub fn guardrail_with(
    engine: &Engine,
    encoder: &PatchEncoder,
    req: &GuardrailRequest,
) -> Result<GuardrailVerdict, PipelineError> {
    req.validate()?;
    if engine.config() != &req.config {
        return Err(PipelineError::InvalidRequest(
            "engine weights do not match the request config".into(),
        ));
    }
    let vocab = req.config.vocab_size;
    let (events, sampled) = sample_events(req)?;
    if sampled.is_empty() {
        return Err(PipelineError::NoFrames);
    }
    let visual = encoder.encode_video(&sampled)?;
    let chunks = policy_tokens(&req.policies, vocab);
    let query = tokenize(&req.query, vocab);
    let (x, layout) = engine.assemble(&visual.tokens, &chunks, &query)?;

    let prefill = FlopsTally::default();
    let out = engine.forward_with(&x, &layout, req.mode, AttentionPath::Auto, &prefill)?;
    let last = out
        .last_layer()
        .ok_or_else(|| PipelineError::InvalidRequest("model has no layers".into()))?;
    let rel = pruner::relevance(last, &layout, req.config.n_layers - 1, req.scoring)?;
    let k_total = pruner::k_total_for_ratio(req.prune_ratio, visual.len())?;
    let plan = pruner::plan_pruning(&rel, k_total)?;
    let mut cache = out.cache;
    pruner::evict(&mut cache, &plan)?;

    let decode = FlopsTally::default();
    let first = engine.embed_tokens(&tokenize(response::DESCRIPTION_MARKER, vocab)[..1])?;
    engine.decode_step_observed(&mut cache, first.row(0), &decode)?;

    let tau = req.resolved_tau();
    let evidence = rel.evidence(&plan);
    let flags: IndexMap<String, bool> = req
        .policies
        .chunks()
        .iter()
        .zip(&evidence)
        .map(|(c, &e)| (c.name.clone(), e >= tau))
        .collect();
    let description = describe(req, &events, &rel);
    let explanation = explain(req, &events, &visual, &rel, &plan, &evidence, &flags, tau);

    Ok(GuardrailVerdict {
        schema: VERDICT_SCHEMA.to_string(),
        description,
        flags,
        explanation,
        per_policy_relevance: rel.per_policy.clone(),
        sampled_frames: events.iter().map(|e| e.sampled_frame).collect(),
        events,
        mode: Some(req.mode),
        pruning: Some(PruningSummary {
            prune_ratio: req.prune_ratio,
            achieved_ratio: plan.ratio(),
            k_total: plan.k_total,
            per_policy_k: plan.per_policy_k.clone(),
            kept_tokens: plan.kept.clone(),
        }),
        decision_head: Some(DecisionHead {
            kind: DECISION_HEAD.to_string(),
            tau,
            evidence,
        }),
        flops: Some(FlopsSummary {
            prefill: prefill.total(),
            decode_per_token: decode.total(),
        }),
    })
}

fn describe(req: &GuardrailRequest, events: &[EventSegment], rel: &RelevanceMatrix) -> String {
    let top = pruner::policy_order(&rel.per_policy)[0];
    format!(
        "Video of {} frames in {} event(s), sampled at frames {:?}. Most relevant policy: {} (relevance {:.3}).",
        req.frames.len(),
        events.len(),
        events.iter().map(|e| e.sampled_frame).collect::<Vec<_>>(),
        req.policies.chunks()[top].name,
        rel.per_policy[top]
    )
}

#[allow(clippy::too_many_arguments)]
fn explain(
    req: &GuardrailRequest,
    events: &[EventSegment],
    visual: &VisualTokenSet,
    rel: &RelevanceMatrix,
    plan: &PruningPlan,
    evidence: &[f64],
    flags: &IndexMap<String, bool>,
    tau: f64,
) -> String {
    let mut parts = Vec::new();
    for (i, chunk) in req.policies.chunks().iter().enumerate() {
        if !flags[&chunk.name] {
            continue;
        }
        let picks = plan.selected.get(i).filter(|p| !p.is_empty());
        let candidates: Vec<usize> = match picks {
            Some(p) => p.clone(),
            None => rel.visual_tokens.clone(),
        };
        let best = candidates
            .iter()
            .copied()
            .max_by(|&a, &b| rel.per_pair[[i, a]].total_cmp(&rel.per_pair[[i, b]]).then(b.cmp(&a)));
        let location = best
            .map(|t| {
                let src = visual.provenance[t];
                let e = &events[src.frame];
                format!(
                    " Strongest evidence in event {} (frames {}-{}), sampled frame {}, patch {}.",
                    src.frame + 1,
                    e.start,
                    e.end - 1,
                    e.sampled_frame,
                    src.patch
                )
            })
            .unwrap_or_default();
        parts.push(format!(
            "{} flagged: evidence relevance {:.3} reaches threshold {:.3}.{}",
            chunk.label(),
            evidence[i],
            tau,
            location
        ));
    }
    parts.join(" ")
}
