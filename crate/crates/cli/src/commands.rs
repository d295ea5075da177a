//! Subcommand implementations. Each returns after writing its artifacts.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::Deserialize;
use serde_json::{json, Value};
use vidguard_core::encoder::{ModelConfig, PatchEncoder};
use vidguard_core::engine::{AttentionMode, Engine, LayoutSpec, TokenLayout};
use vidguard_core::fixtures::{planted_config, planted_suite, planted_video, PlantedSpec, PlantedVideo};
use vidguard_core::metrics::{
    attention_correlation_study, count_flops_at_ratio, evaluate, study_instances, sweep, CorrelationRow,
    LabeledPrediction, SweepRow,
};
use vidguard_core::pipeline::{
    external_guardrail, guardrail, policy_tokens, render_response, EndpointDescriptor, GuardrailRequest, DEFAULT_QUERY,
};
use vidguard_core::policy::{default_policies, PolicySet};
use vidguard_core::pruner::Scoring;
use vidguard_core::sampler::{read_frame_dir, segment_events, two_tone_sequence, write_frame_dir};
use vidguard_core::text::tokenize;

use crate::args::{
    CorrelationArgs, Emit, EvalArgs, FixtureArgs, FixtureKind, FlopsArgs, GuardrailArgs, SegmentArgs, SuiteArgs,
    SweepArgs,
};
use crate::artifact::{document, to_value, write_json, write_jsonl, write_plain, RunManifest};
use crate::error::CliError;

pub const DEFAULT_SEED: u64 = 42;

pub fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(CliError::io(path))
}

pub fn parse_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    serde_json::from_str(&read(path)?).map_err(|e| CliError::parse(path, e))
}

/// Config from `path` or `default`, with `seed` taking precedence over the
/// file's seed.
pub fn load_config(path: Option<&Path>, seed: Option<u64>, default: ModelConfig) -> Result<ModelConfig, CliError> {
    let mut cfg = match path {
        Some(p) => ModelConfig::from_json(&read(p)?).map_err(|e| CliError::parse(p, e))?,
        None => default,
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn load_policies(path: Option<&Path>) -> Result<PolicySet, CliError> {
    match path {
        Some(p) => PolicySet::load(&read(p)?).map_err(|e| CliError::parse(p, e)),
        None => Ok(default_policies()),
    }
}

pub fn segment(a: &SegmentArgs, seed: Option<u64>) -> Result<(), CliError> {
    let seq = read_frame_dir(&a.frames)?;
    let params = a.sampler.params();
    let events = segment_events(&seq, params.threshold, params.min_len)?;
    let mut m = RunManifest::new("segment", seed.unwrap_or(DEFAULT_SEED), None, to_value(&params)?);
    m.input(&a.frames)?;
    let body = json!({ "frame_count": seq.len(), "fps": seq.fps, "events": events });
    write_json(document("vidguard.events/v1", &m, body)?, a.out.as_deref())
}

pub fn guardrail_cmd(a: &GuardrailArgs, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = load_config(a.config.config.as_deref(), seed, ModelConfig::default())?;
    let policies = load_policies(Some(&a.policies))?;
    let frames = read_frame_dir(&a.frames)?;
    let mut req = GuardrailRequest::new(frames, policies.clone(), cfg.clone());
    req.prune_ratio = a.prune_ratio;
    req.tau = a.tau;
    req.mode = a.mode.into();
    req.sampler = a.sampler.params();
    req.scoring = if a.pap_raw_scores {
        Scoring::RawRatio
    } else {
        Scoring::Softmax
    };
    if let Some(q) = &a.query {
        req.query = q.clone();
    }
    let verdict = match &a.endpoint {
        Some(path) => external_guardrail(&req, &parse_json::<EndpointDescriptor>(path)?)?,
        None => guardrail(&req)?,
    };
    if a.emit == Emit::Text {
        return write_plain(&render_response(&verdict, &policies), a.out.as_deref());
    }
    let options = json!({
        "prune_ratio": req.prune_ratio,
        "tau": req.resolved_tau(),
        "mode": req.mode,
        "scoring": req.scoring,
        "query": req.query,
        "sampler": req.sampler,
        "endpoint": a.endpoint.is_some(),
    });
    let mut m = RunManifest::new("guardrail", cfg.seed, Some(cfg), options);
    m.input(&a.frames)?;
    m.input(&a.policies)?;
    for p in [a.config.config.as_deref(), a.endpoint.as_deref()]
        .into_iter()
        .flatten()
    {
        m.input(p)?;
    }
    let mut out = match to_value(&verdict)? {
        Value::Object(o) => o,
        _ => return Err(CliError::Serialize("verdict is not an object".into())),
    };
    out.insert("manifest".into(), to_value(&m)?);
    write_json(Value::Object(out), a.out.as_deref())
}

#[derive(Deserialize)]
struct PredictionLine {
    id: String,
    #[serde(alias = "pred_flags")]
    flags: IndexMap<String, bool>,
    #[serde(default)]
    score: Option<f64>,
}

#[derive(Deserialize)]
struct LabelLine {
    id: String,
    #[serde(alias = "true_flags")]
    flags: IndexMap<String, bool>,
}

fn jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    read(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CliError::parse(path, format!("line {}: {e}", i + 1))))
        .collect()
}

/// Joins predictions with labels by id, in prediction order.
fn join_labels(preds: Vec<PredictionLine>, labels: Vec<LabelLine>) -> Result<Vec<LabeledPrediction>, CliError> {
    let n_labels = labels.len();
    let mut by_id: HashMap<String, IndexMap<String, bool>> = HashMap::with_capacity(n_labels);
    for l in labels {
        if by_id.insert(l.id.clone(), l.flags).is_some() {
            return Err(CliError::Invalid(format!("duplicate label id {}", l.id)));
        }
    }
    if preds.len() != n_labels {
        return Err(CliError::Invalid(format!(
            "{} predictions for {n_labels} labels",
            preds.len()
        )));
    }
    preds
        .into_iter()
        .map(|p| {
            let true_flags = by_id
                .remove(&p.id)
                .ok_or_else(|| CliError::Invalid(format!("no label for id {}", p.id)))?;
            Ok(LabeledPrediction {
                id: p.id,
                true_flags,
                pred_flags: p.flags,
                score: p.score,
            })
        })
        .collect()
}

pub fn eval(a: &EvalArgs, seed: Option<u64>) -> Result<(), CliError> {
    let items = match &a.labels {
        Some(labels) => join_labels(jsonl(&a.predictions)?, jsonl(labels)?)?,
        None => jsonl(&a.predictions)?,
    };
    let report = evaluate(&items)?;
    let mut m = RunManifest::new("eval", seed.unwrap_or(DEFAULT_SEED), None, json!({}));
    m.input(&a.predictions)?;
    if let Some(l) = &a.labels {
        m.input(l)?;
    }
    write_json(document("vidguard.eval/v1", &m, to_value(&report)?)?, a.out.as_deref())
}

pub fn flops(a: &FlopsArgs, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = load_config(a.config.config.as_deref(), seed, ModelConfig::default())?;
    let spec: LayoutSpec = parse_json(&a.layout)?;
    let layout = TokenLayout::from_spec(&spec)?;
    let mode: AttentionMode = a.mode.into();
    let report = count_flops_at_ratio(&cfg, &layout, a.prune_ratio, mode)?;
    let options = json!({ "prune_ratio": a.prune_ratio, "mode": mode, "layout": spec });
    let mut m = RunManifest::new("flops", cfg.seed, Some(cfg), options);
    m.input(&a.layout)?;
    if let Some(p) = &a.config.config {
        m.input(p)?;
    }
    write_json(document("vidguard.flops/v1", &m, to_value(&report)?)?, a.out.as_deref())
}

struct Suite {
    config: ModelConfig,
    engine: Engine,
    encoder: PatchEncoder,
    policies: PolicySet,
    chunks: Vec<Vec<u32>>,
    query: Vec<u32>,
    videos: Vec<PlantedVideo>,
}

fn build_suite(a: &SuiteArgs, seed: Option<u64>, count: usize, frame_size: u32) -> Result<Suite, CliError> {
    let config = load_config(a.config.as_deref(), seed, planted_config())?;
    let policies = load_policies(a.policies.as_deref())?;
    let engine = Engine::new(&config);
    let encoder = PatchEncoder::new(&config);
    let chunks = policy_tokens(&policies, config.vocab_size);
    let query = tokenize(DEFAULT_QUERY, config.vocab_size);
    let base = PlantedSpec {
        n_events: a.events.unwrap_or(3),
        frame_size: a.frame_size.unwrap_or(frame_size),
        seed: config.seed,
        ..PlantedSpec::default()
    };
    let videos = planted_suite(&engine, &encoder, &chunks, &query, &base, count)?;
    Ok(Suite {
        config,
        engine,
        encoder,
        policies,
        chunks,
        query,
        videos,
    })
}

fn suite_manifest(command: &str, a: &SuiteArgs, suite: &Suite, mut options: Value) -> Result<RunManifest, CliError> {
    options["events"] = json!(a.events.unwrap_or(3));
    options["frame_size"] = json!(suite.videos.first().map(|v| v.frames.dimensions().0));
    options["instances"] = json!(suite.videos.len());
    let mut m = RunManifest::new(command, suite.config.seed, Some(suite.config.clone()), options);
    for p in [a.config.as_deref(), a.policies.as_deref()].into_iter().flatten() {
        m.input(p)?;
    }
    Ok(m)
}

fn sweep_table(rows: &[SweepRow]) -> String {
    let mut out = format!(
        "{:<8} {:>6} {:>7} {:>14} {:>12} {:>9} {:>9}\n",
        "label", "ratio", "k_total", "prefill_flops", "decode_flops", "accuracy", "micro_f1"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<8} {:>6.2} {:>7} {:>14} {:>12} {:>9.4} {:>9.4}\n",
            r.label, r.prune_ratio, r.k_total, r.prefill_flops, r.decode_flops_per_token, r.flag_accuracy, r.micro_f1
        ));
    }
    out
}

pub fn sweep_cmd(a: &SweepArgs, seed: Option<u64>) -> Result<(), CliError> {
    if a.prune_ratios.is_empty() {
        return Err(CliError::Invalid("no prune ratios".into()));
    }
    let suite = build_suite(&a.suite, seed, a.instances, 64)?;
    let mode: AttentionMode = a.mode.into();
    let rows = sweep(
        &suite.engine,
        &suite.encoder,
        &suite.policies,
        DEFAULT_QUERY,
        &suite.videos,
        &a.prune_ratios,
        a.tau,
        mode,
    )?;
    if a.emit == Emit::Text {
        return write_plain(&sweep_table(&rows), a.out.as_deref());
    }
    let options = json!({ "prune_ratios": a.prune_ratios, "tau": a.tau, "mode": mode });
    let m = suite_manifest("sweep", &a.suite, &suite, options)?;
    write_json(
        document("vidguard.sweep/v1", &m, json!({ "rows": rows }))?,
        a.out.as_deref(),
    )
}

fn correlation_table(rows: &[CorrelationRow]) -> String {
    let mut out = format!(
        "{:<11} {:>9} {:>13} {:>14} {:>13} {:>14}\n",
        "mode", "instances", "position_pcc", "position_srcc", "category_pcc", "category_srcc"
    );
    for r in rows {
        let mode = serde_json::to_value(r.mode).ok();
        out.push_str(&format!(
            "{:<11} {:>9} {:>13.4} {:>14.4} {:>13.4} {:>14.4}\n",
            mode.as_ref().and_then(Value::as_str).unwrap_or("?"),
            r.instances,
            r.position_pcc,
            r.position_srcc,
            r.category_pcc,
            r.category_srcc
        ));
    }
    out
}

pub fn correlation(a: &CorrelationArgs, seed: Option<u64>) -> Result<(), CliError> {
    let suite = build_suite(&a.suite, seed, a.instances, 32)?;
    let instances = study_instances(&suite.encoder, &suite.videos, suite.policies.len(), suite.config.seed)?;
    let rows = attention_correlation_study(
        &suite.engine,
        &suite.chunks,
        &suite.query,
        &instances,
        &[AttentionMode::Pepe, AttentionMode::Sequential],
    )?;
    if a.emit == Emit::Text {
        return write_plain(&correlation_table(&rows), a.out.as_deref());
    }
    let m = suite_manifest("correlation-study", &a.suite, &suite, json!({}))?;
    write_json(
        document("vidguard.correlation/v1", &m, json!({ "rows": rows }))?,
        a.out.as_deref(),
    )
}

pub fn fixture(a: &FixtureArgs, seed: Option<u64>) -> Result<(), CliError> {
    let frames_dir = a.out.join("frames");
    let options = json!({
        "policy": a.policy,
        "events": a.events,
        "frames_per_event": a.frames_per_event,
        "frame_size": a.frame_size,
    });
    let body = match a.kind {
        FixtureKind::TwoTone => {
            write_frame_dir(&frames_dir, &two_tone_sequence(10, 10, a.frame_size))?;
            let m = RunManifest::new("fixture", seed.unwrap_or(DEFAULT_SEED), None, options);
            let body = json!({ "kind": "two-tone", "frames": "frames", "boundaries": [10] });
            document("vidguard.fixture/v1", &m, body)?
        }
        FixtureKind::Planted => {
            let cfg = load_config(None, seed, planted_config())?;
            let policies = default_policies();
            let engine = Engine::new(&cfg);
            let encoder = PatchEncoder::new(&cfg);
            let chunks = policy_tokens(&policies, cfg.vocab_size);
            let query = tokenize(DEFAULT_QUERY, cfg.vocab_size);
            let spec = PlantedSpec {
                n_events: a.events,
                frames_per_event: a.frames_per_event,
                frame_size: a.frame_size,
                planted_policy: Some(a.policy),
                seed: cfg.seed,
            };
            let video = planted_video(&engine, &encoder, &chunks, &query, &spec)?;
            write_frame_dir(&frames_dir, &video.frames)?;
            let config_path = a.out.join("config.json");
            let text = serde_json::to_string_pretty(&cfg).map_err(|e| CliError::Serialize(e.to_string()))?;
            fs::write(&config_path, text + "\n").map_err(CliError::io(&config_path))?;
            let policies_path = a.out.join("policies.txt");
            fs::write(&policies_path, policies.to_guideline_text()).map_err(CliError::io(&policies_path))?;
            let m = RunManifest::new("fixture", cfg.seed, Some(cfg), options);
            let body = json!({
                "kind": "planted",
                "frames": "frames",
                "config": "config.json",
                "policies": "policies.txt",
                "sampler": video.sampler,
                "planted_policy": a.policy,
                "planted_name": policies.chunks()[a.policy].name,
                "event_starts": video.event_starts,
                "margin": video.margin,
            });
            document("vidguard.fixture/v1", &m, body)?
        }
    };
    write_json(body, Some(&a.out.join("fixture.json")))
}

pub use crate::annotate::annotate;

/// Writes `header` then one line per record.
pub fn write_log(path: &Path, header: Value, records: Vec<Value>) -> Result<(), CliError> {
    write_jsonl(std::iter::once(header).chain(records), path)
}
