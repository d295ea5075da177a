//! Pearson and Spearman correlation, and a study of how policy relevance
//! tracks policy position versus policy category.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::encoder::PatchEncoder;
use crate::engine::{AttentionMode, Engine};
use crate::fixtures::PlantedVideo;
use crate::pruner::{self, Scoring};
use crate::sampler;

fn degenerate(msg: &str) -> MetricsError {
    MetricsError::DegenerateInput(msg.to_string())
}

/// Pearson correlation coefficient.
pub fn pcc(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(degenerate("need at least two points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    // variance lost to rounding counts as zero
    let flat = |s: f64, v: &[f64]| s <= 1e-24 * v.iter().map(|a| a * a).sum::<f64>();
    if flat(sxx, x) || flat(syy, y) {
        return Err(degenerate("zero variance"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their mean rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = mean;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson of average ranks.
pub fn srcc(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    pcc(&average_ranks(x), &average_ranks(y))
}

/// Relevance of every chunk of one run, in chunk order, and the chunk index
/// of the true category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationObservation {
    pub relevance: Vec<f64>,
    pub category: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub mode: AttentionMode,
    pub instances: usize,
    /// Correlation of relevance with chunk index.
    pub position_pcc: f64,
    pub position_srcc: f64,
    /// Correlation of relevance with the one-hot true category.
    pub category_pcc: f64,
    pub category_srcc: f64,
}

/// Correlates each instance's relevance vector with the chunk positions and
/// with the one-hot true category, then averages over instances.
pub fn correlation_row(mode: AttentionMode, obs: &[CorrelationObservation]) -> Result<CorrelationRow, MetricsError> {
    if obs.len() < 2 {
        return Err(degenerate("need at least two instances"));
    }
    let mut sums = [0.0; 4];
    for o in obs {
        let pos: Vec<f64> = (0..o.relevance.len()).map(|i| i as f64).collect();
        let cat: Vec<f64> = pos
            .iter()
            .map(|&i| if i as usize == o.category { 1.0 } else { 0.0 })
            .collect();
        sums[0] += pcc(&o.relevance, &pos)?;
        sums[1] += srcc(&o.relevance, &pos)?;
        sums[2] += pcc(&o.relevance, &cat)?;
        sums[3] += srcc(&o.relevance, &cat)?;
    }
    let n = obs.len() as f64;
    Ok(CorrelationRow {
        mode,
        instances: obs.len(),
        position_pcc: sums[0] / n,
        position_srcc: sums[1] / n,
        category_pcc: sums[2] / n,
        category_srcc: sums[3] / n,
    })
}

/// Encoded video of one planted instance and the chunk order it is run with.
#[derive(Debug, Clone)]
pub struct StudyInstance {
    pub visual: Array2<f64>,
    /// Canonical index of the planted policy.
    pub category: usize,
    /// `order[i]` is the canonical chunk placed at position `i`.
    pub order: Vec<usize>,
}

/// Encodes the sampled frames of every planted video and draws a random
/// chunk order for each.
pub fn study_instances(
    encoder: &PatchEncoder,
    suite: &[PlantedVideo],
    n_policies: usize,
    seed: u64,
) -> Result<Vec<StudyInstance>, MetricsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    suite
        .iter()
        .map(|video| {
            let category = video
                .planted_policy
                .ok_or_else(|| degenerate("study instances need a planted policy"))?;
            let events = sampler::segment_events(&video.frames, video.sampler.threshold, video.sampler.min_len)?;
            let frames: Vec<_> = events
                .iter()
                .map(|e| video.frames.frames()[e.sampled_frame].clone())
                .collect();
            let visual = encoder.encode_video(&frames)?.tokens;
            let mut order: Vec<usize> = (0..n_policies).collect();
            order.shuffle(&mut rng);
            Ok(StudyInstance {
                visual,
                category,
                order,
            })
        })
        .collect()
}

fn observe(
    engine: &Engine,
    chunks: &[Vec<u32>],
    query: &[u32],
    inst: &StudyInstance,
    mode: AttentionMode,
) -> Result<CorrelationObservation, MetricsError> {
    let permuted: Vec<Vec<u32>> = inst.order.iter().map(|&c| chunks[c].clone()).collect();
    let (x, layout) = engine.assemble(&inst.visual, &permuted, query)?;
    let out = engine.forward(&x, &layout, mode)?;
    let layer = engine
        .config()
        .n_layers
        .checked_sub(1)
        .ok_or_else(|| degenerate("model has no layers"))?;
    let last = out.last_layer().ok_or_else(|| degenerate("model has no layers"))?;
    let rel = pruner::relevance(last, &layout, layer, Scoring::Softmax)?;
    let category = inst
        .order
        .iter()
        .position(|&c| c == inst.category)
        .ok_or_else(|| degenerate("planted policy missing from chunk order"))?;
    Ok(CorrelationObservation {
        relevance: rel.per_policy,
        category,
    })
}

/// Runs every instance in every mode and returns one table row per mode.
pub fn attention_correlation_study(
    engine: &Engine,
    chunks: &[Vec<u32>],
    query: &[u32],
    instances: &[StudyInstance],
    modes: &[AttentionMode],
) -> Result<Vec<CorrelationRow>, MetricsError> {
    if instances.len() < 2 {
        return Err(degenerate("need at least two instances"));
    }
    modes
        .iter()
        .map(|&mode| {
            let obs = instances
                .par_iter()
                .map(|inst| observe(engine, chunks, query, inst, mode))
                .collect::<Result<Vec<_>, _>>()?;
            correlation_row(mode, &obs)
        })
        .collect()
}
