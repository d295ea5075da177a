//! Guardrail evaluation metrics, attention correlation analysis and analytic
//! FLOPs accounting.

pub mod correlation;
pub mod flops;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::EncoderError;
use crate::engine::EngineError;
use crate::fixtures::FixtureError;
use crate::pipeline::PipelineError;
use crate::pruner::PruneError;
use crate::sampler::SamplerError;

pub use correlation::{
    attention_correlation_study, average_ranks, correlation_row, pcc, srcc, study_instances, CorrelationObservation,
    CorrelationRow, StudyInstance,
};
pub use flops::{
    count_flops, count_flops_at_ratio, linear_flops, sweep, sweep_label, FlopsReport, LayerFlops, PhaseFlops, SweepRow,
};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no predictions")]
    EmptyInput,
    #[error("no positive labels")]
    NoPositives,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("item {id}: true and predicted categories differ")]
    CategoryMismatch { id: String },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error(transparent)]
    Fixture(#[from] FixtureError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
}

/// One item's ground truth and prediction, keyed by category name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPrediction {
    pub id: String,
    pub true_flags: IndexMap<String, bool>,
    pub pred_flags: IndexMap<String, bool>,
    /// Ranking score for the binary unsafe decision.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl LabeledPrediction {
    pub fn validate(&self) -> Result<(), MetricsError> {
        let same = self.true_flags.len() == self.pred_flags.len()
            && self.true_flags.keys().all(|k| self.pred_flags.contains_key(k));
        if same {
            Ok(())
        } else {
            Err(MetricsError::CategoryMismatch { id: self.id.clone() })
        }
    }

    /// Whether any true flag is set.
    pub fn is_unsafe(&self) -> bool {
        self.true_flags.values().any(|&f| f)
    }
}

fn checked(preds: &[LabeledPrediction]) -> Result<(), MetricsError> {
    if preds.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    for p in preds {
        p.validate()?;
        let first = &preds[0].true_flags;
        if p.true_flags.len() != first.len() || !first.keys().all(|k| p.true_flags.contains_key(k)) {
            return Err(MetricsError::CategoryMismatch { id: p.id.clone() });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryAccuracy {
    pub per_category: IndexMap<String, f64>,
    pub mean: f64,
}

/// Fraction of items whose predicted flag equals the true flag, per category
/// of the first item, and their mean.
pub fn per_category_accuracy(preds: &[LabeledPrediction]) -> Result<CategoryAccuracy, MetricsError> {
    checked(preds)?;
    let mut per_category = IndexMap::new();
    for cat in preds[0].true_flags.keys() {
        let mut correct = 0usize;
        for p in preds {
            let t = p.true_flags.get(cat);
            let q = p.pred_flags.get(cat);
            match (t, q) {
                (Some(t), Some(q)) if t == q => correct += 1,
                (Some(_), Some(_)) => {}
                _ => return Err(MetricsError::CategoryMismatch { id: p.id.clone() }),
            }
        }
        per_category.insert(cat.clone(), correct as f64 / preds.len() as f64);
    }
    let mean = per_category.values().sum::<f64>() / per_category.len().max(1) as f64;
    Ok(CategoryAccuracy { per_category, mean })
}

/// Micro-averaged F1 over every (item, category) pair; 1 when neither truth
/// nor prediction has a positive.
pub fn multilabel_f1(preds: &[LabeledPrediction]) -> Result<f64, MetricsError> {
    checked(preds)?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for p in preds {
        for (cat, &t) in &p.true_flags {
            match (t, p.pred_flags[cat]) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    if tp + fp + fn_ == 0 {
        return Ok(1.0);
    }
    Ok(tp as f64 / (tp as f64 + (fp + fn_) as f64 / 2.0))
}

/// Average precision: mean precision at the rank of each positive, with
/// scores sorted descending and ties broken by original index.
pub fn auprc(truth: &[bool], scores: &[f64]) -> Result<f64, MetricsError> {
    if truth.len() != scores.len() {
        return Err(MetricsError::LengthMismatch {
            left: truth.len(),
            right: scores.len(),
        });
    }
    let positives = truth.iter().filter(|&&t| t).count();
    if positives == 0 {
        return Err(MetricsError::NoPositives);
    }
    let mut order: Vec<usize> = (0..truth.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if truth[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// Item-level average precision: an item is positive when any true flag is
/// set and is ranked by its `score`.
pub fn unsafe_auprc(preds: &[LabeledPrediction]) -> Result<f64, MetricsError> {
    checked(preds)?;
    let truth: Vec<bool> = preds.iter().map(LabeledPrediction::is_unsafe).collect();
    let scores: Vec<f64> = preds
        .iter()
        .map(|p| {
            p.score
                .unwrap_or(if p.pred_flags.values().any(|&f| f) { 1.0 } else { 0.0 })
        })
        .collect();
    auprc(&truth, &scores)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub items: usize,
    pub accuracy: CategoryAccuracy,
    pub micro_f1: f64,
    /// Absent when no item is unsafe.
    pub auprc: Option<f64>,
}

pub fn evaluate(preds: &[LabeledPrediction]) -> Result<EvalReport, MetricsError> {
    let accuracy = per_category_accuracy(preds)?;
    let micro_f1 = multilabel_f1(preds)?;
    let auprc = match unsafe_auprc(preds) {
        Ok(v) => Some(v),
        Err(MetricsError::NoPositives) => None,
        Err(e) => return Err(e),
    };
    Ok(EvalReport {
        items: preds.len(),
        accuracy,
        micro_f1,
        auprc,
    })
}
