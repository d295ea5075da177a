//! Agent and judge clients: the text protocol, deterministic mocks and an
//! HTTP client.
//!
//! Every client maps an [`AgentCall`] to reply text. Replies use these
//! line markers:
//!
//! * proposer: `DESCRIPTION:` / `GUARDRAIL:` / `EXPLANATION:`
//! * discussant: `STANCE: SUPPORT|OPPOSE`, `RATIONALE:` and an optional
//!   `GUARDRAIL:` object of counter-flags
//! * judge: `FEEDBACK:` followed by a full proposal

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{AnnotationProposal, DiscussionRecord, EventAnnotation, EventContext};
use crate::pipeline::{render_flags, EndpointDescriptor};

pub const STANCE_MARKER: &str = "STANCE:";
pub const RATIONALE_MARKER: &str = "RATIONALE:";
pub const FEEDBACK_MARKER: &str = "FEEDBACK:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Propose,
    Discuss,
    Refine,
}

/// Everything an agent sees for one turn.
#[derive(Debug, Clone, Serialize)]
pub struct AgentCall {
    pub role: Role,
    pub agent: String,
    /// Rendered prompt for text-only clients.
    pub prompt: String,
    /// `C<k>(<name>)` label of every category, in policy order.
    pub categories: Vec<String>,
    pub event: EventContext,
    pub proposal: Option<AnnotationProposal>,
    /// Earlier opinions of the current round.
    pub discussion: Vec<DiscussionRecord>,
    pub memory: Vec<EventAnnotation>,
    /// 1-based discussion round.
    pub iteration: usize,
    /// 1-based annotation pass of the batch.
    pub attempt: usize,
}

impl AgentCall {
    fn labelled(&self, flags: &[bool]) -> Vec<(String, bool)> {
        self.categories.iter().cloned().zip(flags.iter().copied()).collect()
    }

    /// Reference flags of the event, or all false.
    fn reference(&self) -> Vec<bool> {
        self.event
            .reference_flags
            .clone()
            .unwrap_or_else(|| vec![false; self.categories.len()])
    }
}

pub trait AgentClient: Send + Sync {
    fn id(&self) -> &str;
    fn call(&self, call: &AgentCall) -> Result<String, String>;
}

/// Proposal reply text for `flags`.
pub fn proposal_text(call: &AgentCall, description: &str, flags: &[bool], explanation: &str) -> String {
    render_flags(description, &call.labelled(flags), explanation)
}

/// Discussion reply text.
pub fn stance_text(support: bool, rationale: &str, counter: Option<(&AgentCall, &[bool])>) -> String {
    let stance = if support { "SUPPORT" } else { "OPPOSE" };
    let mut out = format!("{STANCE_MARKER} {stance}\n{RATIONALE_MARKER} {rationale}\n");
    if let Some((call, flags)) = counter {
        let body = render_flags("", &call.labelled(flags), "");
        let guard = body.lines().nth(1).unwrap_or_default();
        out.push_str(guard);
        out.push('\n');
    }
    out
}

fn proposal_flags(call: &AgentCall) -> Vec<bool> {
    call.proposal
        .as_ref()
        .map(|p| p.flags.values().copied().collect())
        .unwrap_or_else(|| call.reference())
}

fn default_proposal(call: &AgentCall, agent: &str) -> String {
    let flags = call.reference();
    proposal_text(
        call,
        &format!("Event {} of video {}.", call.event.event + 1, call.event.video_id),
        &flags,
        &format!("Proposed by {agent}."),
    )
}

/// Deterministic behaviours for mock agents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MockBehavior {
    /// Proposes the reference flags and supports every proposal.
    Support,
    /// Proposes the reference flags and opposes every proposal.
    Oppose,
    /// Supports, writing the memory length into its rationale.
    EchoMemory,
    /// As a judge, adopts the first counter-flags of the round.
    Judge,
}

#[derive(Debug, Clone)]
pub struct MockAgent {
    id: String,
    behavior: MockBehavior,
}

impl MockAgent {
    pub fn new(id: impl Into<String>, behavior: MockBehavior) -> Self {
        Self {
            id: id.into(),
            behavior,
        }
    }
}

fn judge_reply(call: &AgentCall) -> String {
    let counter = call.discussion.iter().find_map(|d| d.counter_flags.as_ref());
    let (flags, feedback) = match counter {
        Some(c) => (
            c.values().copied().collect(),
            "Adopted counter-flags raised in discussion.",
        ),
        None => (proposal_flags(call), "No counter-proposal; proposal kept."),
    };
    let description = call
        .proposal
        .as_ref()
        .map(|p| p.description.clone())
        .unwrap_or_default();
    let explanation = call
        .proposal
        .as_ref()
        .map(|p| p.explanation.clone())
        .unwrap_or_default();
    format!(
        "{FEEDBACK_MARKER} {feedback}\n{}",
        proposal_text(call, &description, &flags, &explanation)
    )
}

impl AgentClient for MockAgent {
    fn id(&self) -> &str {
        &self.id
    }

    fn call(&self, call: &AgentCall) -> Result<String, String> {
        Ok(match (call.role, self.behavior) {
            (Role::Refine, _) => judge_reply(call),
            (Role::Propose, _) => default_proposal(call, &self.id),
            (Role::Discuss, MockBehavior::Support | MockBehavior::Judge) => {
                stance_text(true, "The proposal matches the event.", None)
            }
            (Role::Discuss, MockBehavior::Oppose) => stance_text(false, "The proposal misreads the event.", None),
            (Role::Discuss, MockBehavior::EchoMemory) => {
                stance_text(true, &format!("memory entries: {}", call.memory.len()), None)
            }
        })
    }
}

/// One scripted reply. Unset filters match anything.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptStep {
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iteration: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attempt: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event: Option<usize>,
    pub reply: ScriptReply,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptReply {
    Propose {
        flags: Vec<bool>,
    },
    Support,
    Oppose {
        rationale: String,
        #[serde(default)]
        counter_flags: Option<Vec<bool>>,
    },
    /// Raw reply text.
    Text(String),
    Fail(String),
}

/// Replies from a script, falling back to a mock behaviour.
#[derive(Debug, Clone)]
pub struct ScriptedAgent {
    id: String,
    steps: Vec<ScriptStep>,
    fallback: MockAgent,
}

impl ScriptedAgent {
    pub fn new(id: impl Into<String>, steps: Vec<ScriptStep>, fallback: MockBehavior) -> Self {
        let id = id.into();
        Self {
            fallback: MockAgent::new(id.clone(), fallback),
            id,
            steps,
        }
    }

    fn step(&self, call: &AgentCall) -> Option<&ScriptStep> {
        self.steps.iter().find(|s| {
            s.role == call.role
                && s.iteration.is_none_or(|i| i == call.iteration)
                && s.attempt.is_none_or(|a| a == call.attempt)
                && s.video.as_ref().is_none_or(|v| *v == call.event.video_id)
                && s.event.is_none_or(|e| e == call.event.event)
        })
    }
}

impl AgentClient for ScriptedAgent {
    fn id(&self) -> &str {
        &self.id
    }

    fn call(&self, call: &AgentCall) -> Result<String, String> {
        let Some(step) = self.step(call) else {
            return self.fallback.call(call);
        };
        Ok(match &step.reply {
            ScriptReply::Propose { flags } => proposal_text(
                call,
                &format!("Event {} of video {}.", call.event.event + 1, call.event.video_id),
                flags,
                &format!("Proposed by {}.", self.id),
            ),
            ScriptReply::Support => stance_text(true, "Agreed.", None),
            ScriptReply::Oppose {
                rationale,
                counter_flags,
            } => stance_text(false, rationale, counter_flags.as_deref().map(|f| (call, f))),
            ScriptReply::Text(t) => t.clone(),
            ScriptReply::Fail(msg) => return Err(msg.clone()),
        })
    }
}

/// Client for a text endpoint. Sends `{"prompt": ...}` and accepts either
/// `{"text": ...}` or plain text back.
#[derive(Debug, Clone)]
pub struct HttpAgent {
    id: String,
    endpoint: EndpointDescriptor,
}

impl HttpAgent {
    pub fn new(id: impl Into<String>, endpoint: EndpointDescriptor) -> Self {
        Self {
            id: id.into(),
            endpoint,
        }
    }
}

#[derive(Deserialize)]
struct TextReply {
    text: String,
}

impl AgentClient for HttpAgent {
    fn id(&self) -> &str {
        &self.id
    }

    fn call(&self, call: &AgentCall) -> Result<String, String> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(self.endpoint.timeout_ms)))
            .build()
            .into();
        let body = serde_json::json!({ "prompt": call.prompt, "role": call.role });
        let mut reply = agent
            .post(&self.endpoint.url)
            .send_json(&body)
            .map_err(|e| e.to_string())?;
        let raw = reply.body_mut().read_to_string().map_err(|e| e.to_string())?;
        Ok(serde_json::from_str::<TextReply>(&raw).map(|r| r.text).unwrap_or(raw))
    }
}
