//! Guardrail through an external multimodal model served over HTTP.
//!
//! Request body: `{"frames": [<base64 PPM>, ...], "prompt": "<text>"}`.
//! Reply body: either `{"text": "<response>"}` or the response as plain text.

use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::response::{parse_response, single_line};
use super::{sample_events, GuardrailRequest, GuardrailVerdict, PipelineError, VERDICT_SCHEMA};
use crate::policy::PolicySet;
use crate::sampler::encode_ppm;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointDescriptor {
    pub url: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_timeout_ms() -> u64 {
    30_000
}

#[derive(Serialize)]
struct EndpointRequest<'a> {
    frames: Vec<String>,
    prompt: &'a str,
}

#[derive(Deserialize)]
struct EndpointReply {
    text: String,
}

/// Full prompt for an external model: instructions, every policy definition
/// and the user query.
pub fn guardrail_prompt(policies: &PolicySet, query: &str) -> String {
    let mut out = String::from(
        "You are a video moderation assistant. You receive frames sampled from one video \
         and a numbered list of safety policies. Decide for each policy whether the video violates it.\n\n\
         Policies:\n",
    );
    for chunk in policies.chunks() {
        out.push_str(&format!("\n[{}]\n{}\n", chunk.label(), chunk.raw_text));
    }
    let keys: Vec<String> = policies
        .chunks()
        .iter()
        .map(|c| format!("{}: boolean", serde_json::Value::String(c.label())))
        .collect();
    out.push_str(&format!(
        "\nRequest: {}\n\nReply with these lines and nothing else:\n\
         DESCRIPTION: a short account of what happens in the video.\n\
         GUARDRAIL: {{{}}}\n\
         EXPLANATION: which policies are violated and where. Leave this line out when every value is false.\n",
        single_line(query),
        keys.join(", ")
    ));
    out
}

fn transport(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Transport(e.to_string())
}

/// Sends the sampled frames and the prompt to `endpoint` and parses the reply.
/// Flags are matched to policies by order.
pub fn external_guardrail(
    req: &GuardrailRequest,
    endpoint: &EndpointDescriptor,
) -> Result<GuardrailVerdict, PipelineError> {
    if req.policies.is_empty() {
        return Err(PipelineError::NoPolicies);
    }
    let (events, sampled) = sample_events(req)?;
    if sampled.is_empty() {
        return Err(PipelineError::NoFrames);
    }
    let b64 = base64::engine::general_purpose::STANDARD;
    let prompt = guardrail_prompt(&req.policies, &req.query);
    let body = EndpointRequest {
        frames: sampled.iter().map(|f| b64.encode(encode_ppm(f))).collect(),
        prompt: &prompt,
    };

    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_millis(endpoint.timeout_ms)))
        .build()
        .into();
    let mut reply = agent.post(&endpoint.url).send_json(&body).map_err(transport)?;
    let raw = reply.body_mut().read_to_string().map_err(transport)?;
    let text = serde_json::from_str::<EndpointReply>(&raw)
        .map(|r| r.text)
        .unwrap_or(raw);

    let parsed = parse_response(&text, req.policies.len()).map_err(PipelineError::ParseFailure)?;
    let flags = req
        .policies
        .chunks()
        .iter()
        .zip(parsed.flags.values())
        .map(|(c, &f)| (c.name.clone(), f))
        .collect();
    Ok(GuardrailVerdict {
        schema: VERDICT_SCHEMA.to_string(),
        description: parsed.description,
        flags,
        explanation: parsed.explanation.unwrap_or_default(),
        per_policy_relevance: Vec::new(),
        sampled_frames: events.iter().map(|e| e.sampled_frame).collect(),
        events,
        mode: None,
        pruning: None,
        decision_head: None,
        flops: None,
    })
}
