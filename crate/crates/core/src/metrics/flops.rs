//! Analytic FLOPs of prefill and decode, and the prune-ratio sweep.
//!
//! A product of an `m x k` and a `k x n` matrix costs `2mkn`. Attention
//! costs `4 * head_dim` per permitted (query, key) pair and head, covering
//! both `QK^T` and `AV`. Softmax, normalisation, activations and residual
//! additions count as zero.

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{multilabel_f1, per_category_accuracy, LabeledPrediction, MetricsError};
use crate::encoder::{ModelConfig, PatchEncoder};
use crate::engine::layout::permitted_pairs;
pub use crate::engine::linear_flops;
use crate::engine::{AttentionMode, Engine, TokenLayout};
use crate::fixtures::PlantedVideo;
use crate::pipeline::{guardrail_with, GuardrailRequest};
use crate::policy::PolicySet;
use crate::pruner::{k_total_for_ratio, PruningPlan};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub layer: usize,
    /// Q, K, V and output projections.
    pub projection: u64,
    pub attention_per_head: Vec<u64>,
    pub mlp: u64,
}

impl LayerFlops {
    pub fn attention(&self) -> u64 {
        self.attention_per_head.iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.projection + self.attention() + self.mlp
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseFlops {
    pub projection: u64,
    pub attention: u64,
    pub mlp: u64,
    pub total: u64,
}

impl PhaseFlops {
    fn from_layers(layers: &[LayerFlops]) -> Self {
        let mut p = PhaseFlops::default();
        for l in layers {
            p.projection += l.projection;
            p.attention += l.attention();
            p.mlp += l.mlp;
        }
        p.total = p.projection + p.attention + p.mlp;
        p
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub mode: AttentionMode,
    pub prefill_tokens: usize,
    /// Cache rows the first decoded token attends to, itself excluded.
    pub decode_cache_len: usize,
    pub prefill: PhaseFlops,
    pub decode_per_token: PhaseFlops,
    pub prefill_layers: Vec<LayerFlops>,
    pub decode_layers: Vec<LayerFlops>,
}

fn layers(cfg: &ModelConfig, rows: usize, pairs: u64) -> Vec<LayerFlops> {
    let (d, hd) = (cfg.d_model, cfg.head_dim() as u64);
    (0..cfg.n_layers)
        .map(|layer| LayerFlops {
            layer,
            projection: 4 * linear_flops(rows, d, d),
            attention_per_head: vec![4 * hd * pairs; cfg.n_heads],
            mlp: 2 * linear_flops(rows, d, cfg.mlp_hidden()),
        })
        .collect()
}

/// Prefill cost of `layout` under `mode`, and the cost of decoding the first
/// token against the cache left by `plan`.
pub fn count_flops(
    config: &ModelConfig,
    layout: &TokenLayout,
    plan: Option<&PruningPlan>,
    mode: AttentionMode,
) -> FlopsReport {
    report(config, layout, plan.map_or(0, |p| p.dropped.len()), mode)
}

/// As [`count_flops`] for a plan keeping `k_total_for_ratio(prune_ratio, V)`
/// visual tokens. Only the number of evicted tokens matters for the count.
pub fn count_flops_at_ratio(
    config: &ModelConfig,
    layout: &TokenLayout,
    prune_ratio: f64,
    mode: AttentionMode,
) -> Result<FlopsReport, MetricsError> {
    let n_visual = layout.video().len();
    let k = k_total_for_ratio(prune_ratio, n_visual)?;
    Ok(report(config, layout, n_visual - k.min(n_visual), mode))
}

fn report(config: &ModelConfig, layout: &TokenLayout, dropped: usize, mode: AttentionMode) -> FlopsReport {
    let t = layout.total_len();
    let prefill_layers = layers(config, t, permitted_pairs(layout, mode));
    let cache = t - dropped;
    let decode_layers = layers(config, 1, cache as u64 + 1);
    FlopsReport {
        mode,
        prefill_tokens: t,
        decode_cache_len: cache,
        prefill: PhaseFlops::from_layers(&prefill_layers),
        decode_per_token: PhaseFlops::from_layers(&decode_layers),
        prefill_layers,
        decode_layers,
    }
}

/// `PR-20%` style label.
pub fn sweep_label(ratio: f64) -> String {
    format!("PR-{}%", (ratio * 100.0).round())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub prune_ratio: f64,
    pub k_total: usize,
    pub prefill_flops: u64,
    pub decode_flops_per_token: u64,
    /// Mean per-category flag accuracy over the planted suite.
    pub flag_accuracy: f64,
    pub micro_f1: f64,
}

/// Runs the guardrail on every planted video at every ratio. FLOPs columns
/// come from the first video.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    engine: &Engine,
    encoder: &PatchEncoder,
    policies: &PolicySet,
    query: &str,
    suite: &[PlantedVideo],
    ratios: &[f64],
    tau: Option<f64>,
    mode: AttentionMode,
) -> Result<Vec<SweepRow>, MetricsError> {
    if suite.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let names: Vec<String> = policies.chunks().iter().map(|c| c.name.clone()).collect();
    ratios
        .iter()
        .map(|&ratio| {
            let runs = suite
                .par_iter()
                .enumerate()
                .map(|(k, video)| {
                    let mut req =
                        GuardrailRequest::new(video.frames.clone(), policies.clone(), engine.config().clone());
                    req.query = query.to_string();
                    req.sampler = video.sampler;
                    req.prune_ratio = ratio;
                    req.tau = tau;
                    req.mode = mode;
                    let verdict = guardrail_with(engine, encoder, &req)?;
                    let true_flags: IndexMap<String, bool> = names
                        .iter()
                        .enumerate()
                        .map(|(i, n)| (n.clone(), video.planted_policy == Some(i)))
                        .collect();
                    let pred = LabeledPrediction {
                        id: format!("planted-{k}"),
                        true_flags,
                        pred_flags: verdict.flags.clone(),
                        score: None,
                    };
                    Ok((pred, verdict))
                })
                .collect::<Result<Vec<_>, MetricsError>>()?;
            let preds: Vec<LabeledPrediction> = runs.iter().map(|(p, _)| p.clone()).collect();
            let first = &runs[0].1;
            let flops = first.flops.unwrap_or_default();
            Ok(SweepRow {
                label: sweep_label(ratio),
                prune_ratio: ratio,
                k_total: first.pruning.as_ref().map_or(0, |p| p.k_total),
                prefill_flops: flops.prefill,
                decode_flops_per_token: flops.decode_per_token,
                flag_accuracy: per_category_accuracy(&preds)?.mean,
                micro_f1: multilabel_f1(&preds)?,
            })
        })
        .collect()
}
