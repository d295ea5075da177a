//! Multi-agent annotation: one agent proposes flags for an event, the others
//! support or oppose, and a judge refines the proposal until a strict
//! majority of the non-proposers supports it. Batches pass through a
//! sampled verifier review and are discarded after a second rejection.

pub mod agents;

use std::collections::BTreeMap;
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::fnv1a;
use crate::pipeline::response::{parse_response, single_line};
use crate::policy::PolicySet;
pub use agents::{
    AgentCall, AgentClient, HttpAgent, MockAgent, MockBehavior, Role, ScriptReply, ScriptStep, ScriptedAgent,
};

pub const DEFAULT_MAX_ITERS: usize = 4;
pub const DEFAULT_SAMPLE_FRACTION: f64 = 0.25;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnnotateError {
    #[error("need at least two agents, got {0}")]
    NotEnoughAgents(usize),
    #[error("max_iters must be at least 1")]
    InvalidMaxIters,
    #[error("sampling fraction {0} outside (0, 1]")]
    InvalidSampling(f64),
    #[error("video {0} has no events")]
    NoEvents(String),
    #[error("agent {agent} failed: {message}")]
    AgentFailure { agent: String, message: String },
    #[error("batch status cannot move from {from:?} to {to:?}")]
    InvalidTransition { from: BatchStatus, to: BatchStatus },
    #[error("verifier failed: {0}")]
    Verifier(String),
}

fn failure(agent: &str, message: impl ToString) -> AnnotateError {
    AnnotateError::AgentFailure {
        agent: agent.to_string(),
        message: message.to_string(),
    }
}

/// One event of a video as presented to the agents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventContext {
    pub video_id: String,
    pub event: usize,
    pub start_frame: usize,
    /// Exclusive.
    pub end_frame: usize,
    /// Flags a mock proposer starts from; real agents ignore them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_flags: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationProposal {
    pub description: String,
    /// Keyed by category name, in policy order.
    pub flags: IndexMap<String, bool>,
    pub explanation: String,
    pub author: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Stance {
    Support,
    Oppose,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscussionRecord {
    pub agent: String,
    pub stance: Stance,
    pub rationale: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counter_flags: Option<IndexMap<String, bool>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventAnnotation {
    pub video_id: String,
    pub event: usize,
    pub proposal: AnnotationProposal,
    pub iterations: usize,
    pub converged: bool,
    /// Discussion of the final round.
    pub discussion: Vec<DiscussionRecord>,
}

/// One agent turn, kept for audit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub batch: String,
    pub attempt: usize,
    pub video: String,
    pub event: usize,
    pub iteration: usize,
    pub role: Role,
    pub agent: String,
    pub prompt: String,
    pub reply: String,
}

#[derive(Debug, Clone)]
pub struct AnnotatorConfig {
    pub policies: PolicySet,
    pub max_iters: usize,
}

impl AnnotatorConfig {
    pub fn new(policies: PolicySet) -> Self {
        Self {
            policies,
            max_iters: DEFAULT_MAX_ITERS,
        }
    }

    fn labels(&self) -> Vec<String> {
        self.policies.chunks().iter().map(|c| c.label()).collect()
    }

    fn keyed(&self, flags: impl Iterator<Item = bool>) -> IndexMap<String, bool> {
        self.policies
            .chunks()
            .iter()
            .map(|c| c.name.clone())
            .zip(flags)
            .collect()
    }
}

/// Prompt text for text-only clients.
pub fn render_prompt(cfg: &AnnotatorConfig, call: &AgentCall) -> String {
    let mut out = String::new();
    out.push_str(match call.role {
        Role::Propose => "Annotate this video event against the policies below.\n",
        Role::Discuss => "Review the proposed annotation of this video event. Reply SUPPORT or OPPOSE.\n",
        Role::Refine => "The reviewers did not agree. Give feedback and a corrected annotation.\n",
    });
    out.push_str(&format!(
        "\nVideo {} event {} (frames {}-{}).\n",
        call.event.video_id,
        call.event.event + 1,
        call.event.start_frame,
        call.event.end_frame.saturating_sub(1)
    ));
    if let Some(note) = &call.event.note {
        out.push_str(&format!("Notes: {}\n", single_line(note)));
    }
    out.push_str("\nPolicies:\n");
    for c in cfg.policies.chunks() {
        out.push_str(&format!("[{}]\n{}\n", c.label(), c.raw_text));
    }
    if !call.memory.is_empty() {
        out.push_str("\nEarlier events:\n");
        for m in &call.memory {
            let flagged: Vec<&str> = m
                .proposal
                .flags
                .iter()
                .filter(|(_, &f)| f)
                .map(|(k, _)| k.as_str())
                .collect();
            out.push_str(&format!(
                "- event {}: {} flagged {:?}\n",
                m.event + 1,
                single_line(&m.proposal.description),
                flagged
            ));
        }
    }
    if let Some(p) = &call.proposal {
        out.push_str(&format!(
            "\nProposal by {}:\nDESCRIPTION: {}\nFLAGS: {}\nEXPLANATION: {}\n",
            p.author,
            single_line(&p.description),
            serde_json::to_string(&p.flags).unwrap_or_default(),
            single_line(&p.explanation)
        ));
    }
    for d in &call.discussion {
        out.push_str(&format!("{} {:?}: {}\n", d.agent, d.stance, single_line(&d.rationale)));
    }
    out.push_str(match call.role {
        Role::Propose => "\nReply with DESCRIPTION:, GUARDRAIL: {<label>: boolean, ...} and EXPLANATION: lines.\n",
        Role::Discuss => "\nReply with STANCE:, RATIONALE: and, when opposing, GUARDRAIL: with your flags.\n",
        Role::Refine => "\nReply with FEEDBACK:, DESCRIPTION:, GUARDRAIL: and EXPLANATION: lines.\n",
    });
    out
}

fn parse_proposal(cfg: &AnnotatorConfig, text: &str, author: &str) -> Result<AnnotationProposal, AnnotateError> {
    let parsed = parse_response(text, cfg.policies.len()).map_err(|e| failure(author, e))?;
    Ok(AnnotationProposal {
        description: parsed.description,
        flags: cfg.keyed(parsed.flags.into_values()),
        explanation: parsed.explanation.unwrap_or_default(),
        author: author.to_string(),
    })
}

/// Text after `marker` up to the next line holding another known marker.
fn field(text: &str, marker: &str) -> Option<String> {
    let start = text.find(marker)? + marker.len();
    let rest = &text[start..];
    let end = rest
        .match_indices('\n')
        .map(|(i, _)| i)
        .find(|&i| {
            let next = rest[i + 1..].trim_start();
            [
                agents::STANCE_MARKER,
                agents::RATIONALE_MARKER,
                agents::FEEDBACK_MARKER,
                "DESCRIPTION:",
                "GUARDRAIL:",
                "EXPLANATION:",
            ]
            .iter()
            .any(|m| next.starts_with(m))
        })
        .unwrap_or(rest.len());
    Some(rest[..end].trim().to_string())
}

fn parse_discussion(cfg: &AnnotatorConfig, text: &str, agent: &str) -> Result<DiscussionRecord, AnnotateError> {
    let stance = match field(text, agents::STANCE_MARKER).map(|s| s.to_ascii_uppercase()) {
        Some(s) if s.starts_with("SUPPORT") => Stance::Support,
        Some(s) if s.starts_with("OPPOSE") => Stance::Oppose,
        _ => return Err(failure(agent, "reply has no SUPPORT/OPPOSE stance")),
    };
    let rationale = field(text, agents::RATIONALE_MARKER).unwrap_or_default();
    let counter_flags = if text.contains("GUARDRAIL:") {
        let parsed = parse_response(text, cfg.policies.len()).map_err(|e| failure(agent, e))?;
        Some(cfg.keyed(parsed.flags.into_values()))
    } else {
        None
    };
    if stance == Stance::Oppose && rationale.is_empty() && counter_flags.is_none() {
        return Err(failure(agent, "opposition without rationale or counter-flags"));
    }
    Ok(DiscussionRecord {
        agent: agent.to_string(),
        stance,
        rationale,
        counter_flags,
    })
}

/// Annotates one event. `agents[0]` proposes; the rest discuss in order.
#[allow(clippy::too_many_arguments)]
pub fn annotate_event(
    cfg: &AnnotatorConfig,
    event: &EventContext,
    memory: &[EventAnnotation],
    agents: &[Box<dyn AgentClient>],
    judge: &dyn AgentClient,
    batch: &str,
    attempt: usize,
    transcript: &mut Vec<TranscriptEntry>,
) -> Result<EventAnnotation, AnnotateError> {
    if agents.len() < 2 {
        return Err(AnnotateError::NotEnoughAgents(agents.len()));
    }
    if cfg.max_iters == 0 {
        return Err(AnnotateError::InvalidMaxIters);
    }
    let labels = cfg.labels();
    let mut turn = |client: &dyn AgentClient,
                    role: Role,
                    iteration: usize,
                    proposal: Option<&AnnotationProposal>,
                    discussion: &[DiscussionRecord]|
     -> Result<String, AnnotateError> {
        let mut call = AgentCall {
            role,
            agent: client.id().to_string(),
            prompt: String::new(),
            categories: labels.clone(),
            event: event.clone(),
            proposal: proposal.cloned(),
            discussion: discussion.to_vec(),
            memory: memory.to_vec(),
            iteration,
            attempt,
        };
        call.prompt = render_prompt(cfg, &call);
        let reply = client.call(&call).map_err(|e| failure(client.id(), e))?;
        transcript.push(TranscriptEntry {
            batch: batch.to_string(),
            attempt,
            video: event.video_id.clone(),
            event: event.event,
            iteration,
            role,
            agent: client.id().to_string(),
            prompt: call.prompt,
            reply: reply.clone(),
        });
        Ok(reply)
    };

    let proposer = agents[0].as_ref();
    let text = turn(proposer, Role::Propose, 1, None, &[])?;
    let mut proposal = parse_proposal(cfg, &text, proposer.id())?;
    let others = &agents[1..];
    let mut discussion = Vec::new();
    for iteration in 1..=cfg.max_iters {
        discussion.clear();
        for agent in others {
            let text = turn(agent.as_ref(), Role::Discuss, iteration, Some(&proposal), &discussion)?;
            discussion.push(parse_discussion(cfg, &text, agent.id())?);
        }
        let support = discussion.iter().filter(|d| d.stance == Stance::Support).count();
        if 2 * support > others.len() {
            return Ok(EventAnnotation {
                video_id: event.video_id.clone(),
                event: event.event,
                proposal,
                iterations: iteration,
                converged: true,
                discussion,
            });
        }
        let text = turn(judge, Role::Refine, iteration, Some(&proposal), &discussion)?;
        proposal = parse_proposal(cfg, &text, judge.id())?;
    }
    Ok(EventAnnotation {
        video_id: event.video_id.clone(),
        event: event.event,
        proposal,
        iterations: cfg.max_iters,
        converged: false,
        discussion,
    })
}

/// Video to annotate: its events in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoItem {
    pub id: String,
    pub events: Vec<EventSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventSpec {
    pub start_frame: usize,
    pub end_frame: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_flags: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoAnnotation {
    pub video_id: String,
    pub events: Vec<EventAnnotation>,
}

/// Annotates the events of `video` in order. Each converged annotation joins
/// the memory handed to later events.
pub fn annotate_video(
    cfg: &AnnotatorConfig,
    video: &VideoItem,
    agents: &[Box<dyn AgentClient>],
    judge: &dyn AgentClient,
    batch: &str,
    attempt: usize,
    transcript: &mut Vec<TranscriptEntry>,
) -> Result<VideoAnnotation, AnnotateError> {
    if video.events.is_empty() {
        return Err(AnnotateError::NoEvents(video.id.clone()));
    }
    let mut memory: Vec<EventAnnotation> = Vec::new();
    let mut events = Vec::with_capacity(video.events.len());
    for (i, e) in video.events.iter().enumerate() {
        let ctx = EventContext {
            video_id: video.id.clone(),
            event: i,
            start_frame: e.start_frame,
            end_frame: e.end_frame,
            reference_flags: e.reference_flags.clone(),
            note: e.note.clone(),
        };
        let ann = annotate_event(cfg, &ctx, &memory, agents, judge, batch, attempt, transcript)?;
        if ann.converged {
            memory.push(ann.clone());
        }
        events.push(ann);
    }
    Ok(VideoAnnotation {
        video_id: video.id.clone(),
        events,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BatchStatus {
    Pending,
    Accepted,
    RejectedOnce,
    Discarded,
}

impl BatchStatus {
    pub fn can_transition(self, to: BatchStatus) -> bool {
        use BatchStatus::*;
        matches!(
            (self, to),
            (Pending, Accepted) | (Pending, RejectedOnce) | (RejectedOnce, Accepted) | (RejectedOnce, Discarded)
        )
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, BatchStatus::Accepted | BatchStatus::Discarded)
    }

    /// Status after a verifier decision.
    pub fn after_review(self, accept: bool) -> BatchStatus {
        use BatchStatus::*;
        match (self, accept) {
            (_, true) => Accepted,
            (Pending, false) => RejectedOnce,
            (_, false) => Discarded,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub id: String,
    pub videos: Vec<VideoItem>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchState {
    pub batch_id: String,
    pub video_ids: Vec<String>,
    pub status: BatchStatus,
    /// Summed event iterations of each video in the latest pass.
    pub iterations: Vec<usize>,
    pub rejections: usize,
    pub history: Vec<(BatchStatus, BatchStatus)>,
}

impl BatchState {
    pub fn new(batch: &Batch) -> Self {
        Self {
            batch_id: batch.id.clone(),
            video_ids: batch.videos.iter().map(|v| v.id.clone()).collect(),
            status: BatchStatus::Pending,
            iterations: vec![0; batch.videos.len()],
            rejections: 0,
            history: Vec::new(),
        }
    }

    pub fn transition(&mut self, to: BatchStatus) -> Result<(), AnnotateError> {
        if !self.status.can_transition(to) {
            return Err(AnnotateError::InvalidTransition { from: self.status, to });
        }
        if to == BatchStatus::RejectedOnce || to == BatchStatus::Discarded {
            self.rejections += 1;
        }
        self.history.push((self.status, to));
        self.status = to;
        Ok(())
    }
}

/// Reviews the sampled videos of a pass; `Ok(true)` accepts the batch.
pub trait Verifier: Send + Sync {
    fn review(&self, batch: &str, attempt: usize, sample: &[VideoAnnotation]) -> Result<bool, String>;
}

pub struct AutoAccept;

impl Verifier for AutoAccept {
    fn review(&self, _: &str, _: usize, _: &[VideoAnnotation]) -> Result<bool, String> {
        Ok(true)
    }
}

/// Decisions per pass, shared by every batch; accepts once exhausted.
pub struct ScriptedVerifier(pub Vec<bool>);

impl Verifier for ScriptedVerifier {
    fn review(&self, _: &str, attempt: usize, _: &[VideoAnnotation]) -> Result<bool, String> {
        Ok(self.0.get(attempt - 1).copied().unwrap_or(true))
    }
}

/// Decisions per batch id and pass, read from a JSON object such as
/// `{"batch-1": ["reject", "accept"]}`. Missing entries are an error.
pub struct FileVerifier {
    decisions: BTreeMap<String, Vec<Decision>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Accept,
    Reject,
}

impl FileVerifier {
    pub fn from_json(text: &str) -> Result<Self, AnnotateError> {
        let decisions = serde_json::from_str(text).map_err(|e| AnnotateError::Verifier(e.to_string()))?;
        Ok(Self { decisions })
    }

    pub fn load(path: &Path) -> Result<Self, AnnotateError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| AnnotateError::Verifier(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

impl Verifier for FileVerifier {
    fn review(&self, batch: &str, attempt: usize, _: &[VideoAnnotation]) -> Result<bool, String> {
        self.decisions
            .get(batch)
            .and_then(|d| d.get(attempt - 1))
            .map(|d| *d == Decision::Accept)
            .ok_or_else(|| format!("no decision for batch {batch} pass {attempt}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRun {
    pub state: BatchState,
    /// Annotations of the last pass.
    pub annotations: Vec<VideoAnnotation>,
    /// Video ids shown to the verifier, per pass.
    pub sampled: Vec<Vec<String>>,
    /// Mean event iterations over every pass.
    pub mean_iterations: f64,
    pub transcript: Vec<TranscriptEntry>,
}

fn sample_ids(batch: &Batch, fraction: f64, seed: u64, attempt: usize) -> Vec<usize> {
    let n = batch.videos.len();
    let k = ((fraction * n as f64).ceil() as usize).clamp(1, n.max(1)).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(batch.id.as_bytes()) ^ attempt as u64);
    let mut idx = sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

/// Annotates a batch, shows a seeded sample to `verifier`, and re-annotates
/// once after a rejection.
pub fn run_batch(
    cfg: &AnnotatorConfig,
    batch: &Batch,
    agents: &[Box<dyn AgentClient>],
    judge: &dyn AgentClient,
    sampling_fraction: f64,
    verifier: &dyn Verifier,
    seed: u64,
) -> Result<BatchRun, AnnotateError> {
    if !(sampling_fraction > 0.0 && sampling_fraction <= 1.0) {
        return Err(AnnotateError::InvalidSampling(sampling_fraction));
    }
    let mut state = BatchState::new(batch);
    let mut transcript = Vec::new();
    let mut sampled = Vec::new();
    let (mut iter_sum, mut iter_count) = (0usize, 0usize);
    let mut attempt = 0;
    loop {
        attempt += 1;
        let passes = batch
            .videos
            .par_iter()
            .map(|v| {
                let mut t = Vec::new();
                annotate_video(cfg, v, agents, judge, &batch.id, attempt, &mut t).map(|a| (a, t))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut annotations = Vec::with_capacity(passes.len());
        for (a, t) in passes {
            transcript.extend(t);
            annotations.push(a);
        }
        for (slot, a) in state.iterations.iter_mut().zip(&annotations) {
            *slot = a.events.iter().map(|e| e.iterations).sum();
            iter_sum += *slot;
            iter_count += a.events.len();
        }
        let picked = sample_ids(batch, sampling_fraction, seed, attempt);
        let shown: Vec<VideoAnnotation> = picked.iter().map(|&i| annotations[i].clone()).collect();
        sampled.push(picked.iter().map(|&i| batch.videos[i].id.clone()).collect());
        let accept = verifier
            .review(&batch.id, attempt, &shown)
            .map_err(AnnotateError::Verifier)?;
        state.transition(state.status.after_review(accept))?;
        if state.status.is_terminal() {
            return Ok(BatchRun {
                state,
                annotations,
                sampled,
                mean_iterations: iter_sum as f64 / iter_count.max(1) as f64,
                transcript,
            });
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub batches: usize,
    pub avg_iterations: f64,
}

/// Batch counts and mean iterations for all, rejected-at-least-once and
/// discarded batches.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CurationStats {
    pub total: StatsRow,
    pub rejected: StatsRow,
    pub discarded: StatsRow,
    pub rejections: usize,
    pub videos: usize,
    pub events: usize,
    pub unconverged_events: usize,
}

pub fn curation_stats(runs: &[BatchRun]) -> CurationStats {
    let row = |filter: &dyn Fn(&BatchRun) -> bool| {
        let picked: Vec<&BatchRun> = runs.iter().filter(|r| filter(r)).collect();
        StatsRow {
            batches: picked.len(),
            avg_iterations: if picked.is_empty() {
                0.0
            } else {
                picked.iter().map(|r| r.mean_iterations).sum::<f64>() / picked.len() as f64
            },
        }
    };
    CurationStats {
        total: row(&|_| true),
        rejected: row(&|r| r.state.rejections > 0),
        discarded: row(&|r| r.state.status == BatchStatus::Discarded),
        rejections: runs.iter().map(|r| r.state.rejections).sum(),
        videos: runs.iter().map(|r| r.annotations.len()).sum(),
        events: runs.iter().flat_map(|r| &r.annotations).map(|a| a.events.len()).sum(),
        unconverged_events: runs
            .iter()
            .flat_map(|r| &r.annotations)
            .flat_map(|a| &a.events)
            .filter(|e| !e.converged)
            .count(),
    }
}
