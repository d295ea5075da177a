//! `annotate`: agent configuration, batch manifests and audit output.

use std::path::PathBuf;

use serde::Deserialize;
use serde_json::json;
use vidguard_core::annotator::{
    curation_stats, run_batch, AgentClient, AnnotatorConfig, AutoAccept, Batch, FileVerifier, HttpAgent, MockAgent,
    MockBehavior, ScriptStep, ScriptedAgent, Verifier,
};
use vidguard_core::pipeline::EndpointDescriptor;

use crate::args::AnnotateArgs;
use crate::artifact::{document, to_value, write_json, RunManifest};
use crate::commands::{load_policies, parse_json, write_log, DEFAULT_SEED};
use crate::error::CliError;

fn support() -> MockBehavior {
    MockBehavior::Support
}

fn judge_behavior() -> MockBehavior {
    MockBehavior::Judge
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum AgentSpec {
    Mock {
        id: String,
        #[serde(default = "support")]
        behavior: MockBehavior,
    },
    Scripted {
        id: String,
        script: Vec<ScriptStep>,
        #[serde(default = "support")]
        behavior: MockBehavior,
    },
    Http {
        id: String,
        endpoint: EndpointDescriptor,
    },
}

impl AgentSpec {
    fn build(self) -> Box<dyn AgentClient> {
        match self {
            AgentSpec::Mock { id, behavior } => Box::new(MockAgent::new(id, behavior)),
            AgentSpec::Scripted { id, script, behavior } => Box::new(ScriptedAgent::new(id, script, behavior)),
            AgentSpec::Http { id, endpoint } => Box::new(HttpAgent::new(id, endpoint)),
        }
    }
}

fn default_judge() -> AgentSpec {
    AgentSpec::Mock {
        id: "judge".into(),
        behavior: judge_behavior(),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentsConfig {
    agents: Vec<AgentSpec>,
    #[serde(default = "default_judge")]
    judge: AgentSpec,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum BatchManifest {
    Many { batches: Vec<Batch> },
    One(Batch),
}

fn verifier(spec: &str) -> Result<(Box<dyn Verifier>, Option<PathBuf>), CliError> {
    if spec == "auto" {
        return Ok((Box::new(AutoAccept), None));
    }
    match spec.strip_prefix("file:") {
        Some(path) if !path.is_empty() => {
            let path = PathBuf::from(path);
            Ok((Box::new(FileVerifier::load(&path)?), Some(path)))
        }
        _ => Err(CliError::Invalid(format!(
            "verifier must be auto or file:PATH, got {spec}"
        ))),
    }
}

pub fn annotate(a: &AnnotateArgs, seed: Option<u64>) -> Result<(), CliError> {
    let seed = seed.unwrap_or(DEFAULT_SEED);
    let batches = match parse_json::<BatchManifest>(&a.batch)? {
        BatchManifest::Many { batches } => batches,
        BatchManifest::One(b) => vec![b],
    };
    if batches.is_empty() {
        return Err(CliError::Invalid("batch manifest lists no batches".into()));
    }
    let agents_cfg: AgentsConfig = parse_json(&a.agents)?;
    let agents: Vec<Box<dyn AgentClient>> = agents_cfg.agents.into_iter().map(AgentSpec::build).collect();
    let judge = agents_cfg.judge.build();
    let (verifier, verifier_path) = verifier(&a.verifier)?;
    let cfg = AnnotatorConfig {
        max_iters: a.max_iters,
        ..AnnotatorConfig::new(load_policies(a.policies.as_deref())?)
    };

    let runs = batches
        .iter()
        .map(|b| run_batch(&cfg, b, &agents, judge.as_ref(), a.sample, verifier.as_ref(), seed))
        .collect::<Result<Vec<_>, _>>()?;

    let options = json!({ "max_iters": a.max_iters, "sample": a.sample, "verifier": a.verifier });
    let mut m = RunManifest::new("annotate", seed, None, options);
    for p in [
        Some(&a.batch),
        Some(&a.agents),
        a.policies.as_ref(),
        verifier_path.as_ref(),
    ]
    .into_iter()
    .flatten()
    {
        m.input(p)?;
    }
    let header = |schema: &str| document(schema, &m, json!({}));

    let mut annotations = Vec::new();
    let mut transcripts = Vec::new();
    for run in &runs {
        for video in &run.annotations {
            for event in &video.events {
                annotations.push(json!({
                    "batch": run.state.batch_id,
                    "batch_status": run.state.status,
                    "annotation": to_value(event)?,
                }));
            }
        }
        for entry in &run.transcript {
            transcripts.push(to_value(entry)?);
        }
    }
    write_log(
        &a.out.join("annotations.jsonl"),
        header("vidguard.annotations/v1")?,
        annotations,
    )?;
    write_log(
        &a.out.join("transcripts.jsonl"),
        header("vidguard.transcripts/v1")?,
        transcripts,
    )?;

    let batches: Vec<_> = runs
        .iter()
        .map(|r| json!({ "state": r.state, "sampled": r.sampled, "mean_iterations": r.mean_iterations }))
        .collect();
    let body = json!({ "stats": curation_stats(&runs), "batches": batches });
    write_json(
        document("vidguard.curation-stats/v1", &m, body)?,
        Some(&a.out.join("stats.json")),
    )
}
