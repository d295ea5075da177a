//! Policy-aware pruning of visual tokens.
//!
//! Each policy chunk is pooled into one query per head and scored against
//! every visual key of the last prefill layer. Scores are normalised across
//! policies per token, a global token budget is split between policies in
//! proportion to their relevance, and each policy keeps its most relevant
//! tokens. Everything not kept is evicted from the KV cache.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{AttentionWorkspace, KvCache, TokenLayout};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PruneError {
    #[error("no visual tokens to score")]
    NoVisualTokens,
    #[error("no policy chunks to score")]
    NoPolicies,
    #[error("workspace has {got} rows, layout expects {expected}")]
    LayoutMismatch { expected: usize, got: usize },
    #[error("budget has {got} entries for {expected} policies")]
    BudgetMismatch { expected: usize, got: usize },
    #[error("plan covers visual tokens {plan:?}, cache holds {cache:?}")]
    PlanMismatch { plan: Vec<usize>, cache: Vec<usize> },
    #[error("prune ratio {0} outside [0, 1)")]
    InvalidRatio(f64),
}

/// How per-pair scores become relevance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scoring {
    /// Softmax of scaled scores over the policy axis.
    #[default]
    Softmax,
    /// Raw score divided by the column sum. Entries may leave `[0, 1]`.
    RawRatio,
}

/// Where a relevance matrix was read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevanceSource {
    pub layer: usize,
    pub heads: usize,
    pub scoring: Scoring,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMatrix {
    /// `n_policies x n_visual`; entry `(i, j)` is the relevance of visual
    /// token `visual_tokens[j]` to policy `i`.
    pub per_pair: Array2<f64>,
    /// Column mean of each row.
    pub per_policy: Vec<f64>,
    /// Sequence index of each column.
    pub visual_tokens: Vec<usize>,
    pub layer_source: RelevanceSource,
}

impl RelevanceMatrix {
    /// Builds the matrix from pre-normalised pair relevances.
    pub fn from_pairs(per_pair: Array2<f64>, visual_tokens: Vec<usize>, layer_source: RelevanceSource) -> Self {
        let per_policy = row_means(&per_pair);
        Self {
            per_pair,
            per_policy,
            visual_tokens,
            layer_source,
        }
    }

    pub fn n_policies(&self) -> usize {
        self.per_pair.nrows()
    }

    pub fn n_visual(&self) -> usize {
        self.per_pair.ncols()
    }

    /// Mean relevance of each policy over the tokens it selected itself in
    /// `plan`; the uniform share `1/n` for a policy that selected nothing.
    pub fn evidence(&self, plan: &PruningPlan) -> Vec<f64> {
        let n = self.n_policies();
        (0..n)
            .map(|i| {
                let picks = plan.selected.get(i).map_or(&[][..], Vec::as_slice);
                let cols: Vec<usize> = picks
                    .iter()
                    .filter_map(|t| self.visual_tokens.iter().position(|v| v == t))
                    .collect();
                if cols.is_empty() {
                    1.0 / n as f64
                } else {
                    cols.iter().map(|&j| self.per_pair[[i, j]]).sum::<f64>() / cols.len() as f64
                }
            })
            .collect()
    }
}

fn row_means(m: &Array2<f64>) -> Vec<f64> {
    m.rows().into_iter().map(|row| row.sum() / row.len() as f64).collect()
}

/// Raw scaled scores `s_ij`, head-averaged, `n_policies x n_visual`.
pub fn pair_scores(ws: &AttentionWorkspace, layout: &TokenLayout) -> Result<Array2<f64>, PruneError> {
    if ws.rows() != layout.total_len() {
        return Err(PruneError::LayoutMismatch {
            expected: layout.total_len(),
            got: ws.rows(),
        });
    }
    if layout.n_policies() == 0 {
        return Err(PruneError::NoPolicies);
    }
    if layout.video().is_empty() {
        return Err(PruneError::NoVisualTokens);
    }
    let n = layout.n_policies();
    let v = layout.video().len();
    let scale = 1.0 / (ws.head_dim() as f64).sqrt();
    let mut scores = Array2::zeros((n, v));
    for head in &ws.heads {
        let keys = head.k.slice(ndarray::s![layout.video(), ..]);
        for (i, chunk) in layout.policies().iter().enumerate() {
            let pooled: Array1<f64> = head
                .q
                .slice(ndarray::s![chunk.clone(), ..])
                .mean_axis(ndarray::Axis(0))
                .expect("chunks are non-empty");
            let dots = keys.dot(&pooled);
            scores.row_mut(i).scaled_add(scale, &dots);
        }
    }
    scores.mapv_inplace(|s| s / ws.heads.len() as f64);
    Ok(scores)
}

/// Normalises scores over the policy axis of every column.
pub fn normalize_scores(scores: &Array2<f64>, scoring: Scoring) -> Array2<f64> {
    let mut out = scores.clone();
    for mut col in out.columns_mut() {
        match scoring {
            Scoring::Softmax => {
                let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                col.mapv_inplace(|s| (s - max).exp());
                let sum = col.sum();
                col.mapv_inplace(|e| e / sum);
            }
            Scoring::RawRatio => {
                let sum = col.sum();
                let n = col.len() as f64;
                if sum.abs() < 1e-12 {
                    col.fill(1.0 / n);
                } else {
                    col.mapv_inplace(|s| s / sum);
                }
            }
        }
    }
    out
}

/// Policy-video relevance from one layer's attention workspace.
pub fn relevance(
    ws: &AttentionWorkspace,
    layout: &TokenLayout,
    layer: usize,
    scoring: Scoring,
) -> Result<RelevanceMatrix, PruneError> {
    let scores = pair_scores(ws, layout)?;
    Ok(RelevanceMatrix::from_pairs(
        normalize_scores(&scores, scoring),
        layout.video().collect(),
        RelevanceSource {
            layer,
            heads: ws.heads.len(),
            scoring,
        },
    ))
}

/// Token budget kept at pruning ratio `ratio`: `round((1 - ratio) * n_visual)`.
pub fn k_total_for_ratio(ratio: f64, n_visual: usize) -> Result<usize, PruneError> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(PruneError::InvalidRatio(ratio));
    }
    Ok(((1.0 - ratio) * n_visual as f64).round() as usize)
}

/// Splits `min(k_total, n_visual)` tokens between policies by largest
/// remainder on `relevance`. Negative entries count as zero; an all-zero
/// vector is treated as uniform.
pub fn allocate_budget(relevance: &[f64], k_total: usize, n_visual: usize) -> Vec<usize> {
    let n = relevance.len();
    if n == 0 {
        return Vec::new();
    }
    let budget = k_total.min(n_visual);
    let clamped: Vec<f64> = relevance
        .iter()
        .map(|&r| if r.is_finite() { r.max(0.0) } else { 0.0 })
        .collect();
    let total: f64 = clamped.iter().sum();
    let weights: Vec<f64> = if total > 0.0 {
        clamped.iter().map(|r| r / total).collect()
    } else {
        vec![1.0 / n as f64; n]
    };
    let exact: Vec<f64> = weights.iter().map(|w| w * budget as f64).collect();
    let mut alloc: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = alloc.iter().sum();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(budget.saturating_sub(assigned)) {
        alloc[i] += 1;
    }
    alloc
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub k_total: usize,
    pub per_policy_k: Vec<usize>,
    /// Sorted sequence indices of kept visual tokens.
    pub kept: Vec<usize>,
    /// Sorted sequence indices of evicted visual tokens.
    pub dropped: Vec<usize>,
    /// Tokens picked by each policy, in pick order. Empty when the plan was
    /// not produced by [`select_tokens`].
    #[serde(default)]
    pub selected: Vec<Vec<usize>>,
}

impl PruningPlan {
    /// Plan that keeps every token of `visual`.
    pub fn keep_all(visual: &[usize]) -> Self {
        let mut kept = visual.to_vec();
        kept.sort_unstable();
        Self {
            k_total: kept.len(),
            per_policy_k: Vec::new(),
            kept,
            dropped: Vec::new(),
            selected: Vec::new(),
        }
    }

    /// Achieved pruning ratio `1 - |kept| / |V|`.
    pub fn ratio(&self) -> f64 {
        let total = self.kept.len() + self.dropped.len();
        if total == 0 {
            0.0
        } else {
            1.0 - self.kept.len() as f64 / total as f64
        }
    }
}

/// Order in which policies pick tokens: descending relevance, ties to the
/// lower id.
pub fn policy_order(relevance: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..relevance.len()).collect();
    order.sort_by(|&a, &b| relevance[b].total_cmp(&relevance[a]).then(a.cmp(&b)));
    order
}

/// Each policy, in [`policy_order`], takes its `per_policy_k[i]` most
/// relevant tokens not already taken (ties to the lower token index).
pub fn select_tokens(rel: &RelevanceMatrix, per_policy_k: &[usize]) -> Result<PruningPlan, PruneError> {
    let n = rel.n_policies();
    if per_policy_k.len() != n {
        return Err(PruneError::BudgetMismatch {
            expected: n,
            got: per_policy_k.len(),
        });
    }
    let v = rel.n_visual();
    let mut taken = vec![false; v];
    let mut selected = vec![Vec::new(); n];
    for i in policy_order(&rel.per_policy) {
        let row = rel.per_pair.row(i);
        let mut ranked: Vec<usize> = (0..v).filter(|&j| !taken[j]).collect();
        ranked.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        for &j in ranked.iter().take(per_policy_k[i]) {
            taken[j] = true;
            selected[i].push(rel.visual_tokens[j]);
        }
    }
    let (mut kept, mut dropped) = (Vec::new(), Vec::new());
    for (j, &t) in rel.visual_tokens.iter().enumerate() {
        if taken[j] {
            kept.push(t);
        } else {
            dropped.push(t);
        }
    }
    kept.sort_unstable();
    dropped.sort_unstable();
    Ok(PruningPlan {
        k_total: per_policy_k.iter().sum(),
        per_policy_k: per_policy_k.to_vec(),
        kept,
        dropped,
        selected,
    })
}

/// Budget allocation and token selection for a global budget `k_total`.
pub fn plan_pruning(rel: &RelevanceMatrix, k_total: usize) -> Result<PruningPlan, PruneError> {
    let budget = allocate_budget(&rel.per_policy, k_total, rel.n_visual());
    let mut plan = select_tokens(rel, &budget)?;
    plan.k_total = k_total;
    Ok(plan)
}

/// Removes the dropped visual rows from every layer of `cache`.
pub fn evict(cache: &mut KvCache, plan: &PruningPlan) -> Result<(), PruneError> {
    let universe: BTreeSet<usize> = plan.kept.iter().chain(&plan.dropped).copied().collect();
    let cached: BTreeSet<usize> = cache.visual_tokens().into_iter().collect();
    if universe != cached || universe.len() != plan.kept.len() + plan.dropped.len() {
        return Err(PruneError::PlanMismatch {
            plan: universe.into_iter().collect(),
            cache: cached.into_iter().collect(),
        });
    }
    let dropped: BTreeSet<usize> = plan.dropped.iter().copied().collect();
    cache.retain_tokens(|t| !dropped.contains(&t));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ModelConfig;
    use crate::engine::{AttentionMode, Engine, HeadQkv};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn source() -> RelevanceSource {
        RelevanceSource {
            layer: 0,
            heads: 1,
            scoring: Scoring::Softmax,
        }
    }

    fn matrix(rows: &[&[f64]]) -> RelevanceMatrix {
        let n = rows.len();
        let v = rows[0].len();
        let m = Array2::from_shape_fn((n, v), |(i, j)| rows[i][j]);
        RelevanceMatrix::from_pairs(m, (0..v).collect(), source())
    }

    #[test]
    fn equal_scores_give_uniform_relevance() {
        let r = normalize_scores(&Array2::from_elem((4, 5), 0.7), Scoring::Softmax);
        assert!(r.iter().all(|&x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn single_policy_is_fully_relevant() {
        let r = normalize_scores(&array![[0.3, -2.0, 5.0]], Scoring::Softmax);
        assert!(r.iter().all(|&x| (x - 1.0).abs() < 1e-15));
    }

    #[test]
    fn raw_ratio_divides_by_column_sum() {
        let r = normalize_scores(&array![[1.0, 0.0], [3.0, 0.0]], Scoring::RawRatio);
        assert_eq!(r, array![[0.25, 0.5], [0.75, 0.5]]);
    }

    #[test]
    fn budgets() {
        assert_eq!(allocate_budget(&[0.5, 0.5], 4, 10), vec![2, 2]);
        assert_eq!(allocate_budget(&[1.0], 7, 10), vec![7]);
        assert_eq!(allocate_budget(&[1.0], 17, 10), vec![10]);
        assert_eq!(allocate_budget(&[0.6, 0.4], 3, 10), vec![2, 1]);
        // ties in the fractional part go to the lower id
        assert_eq!(allocate_budget(&[0.5, 0.5], 3, 10), vec![2, 1]);
        assert_eq!(allocate_budget(&[-1.0, 0.0], 3, 10), vec![2, 1]);
        assert_eq!(allocate_budget(&[-0.5, 1.5], 2, 10), vec![0, 2]);
    }

    #[test]
    fn full_budget_keeps_everything() {
        let rel = matrix(&[&[0.9, 0.2, 0.5, 0.1], &[0.1, 0.8, 0.5, 0.9]]);
        let plan = plan_pruning(&rel, 4).unwrap();
        assert_eq!(plan.kept, vec![0, 1, 2, 3]);
        assert!(plan.dropped.is_empty());
    }

    #[test]
    fn single_token_budget_takes_argmax() {
        let rel = matrix(&[&[1.0, 1.0, 1.0]]);
        assert_eq!(plan_pruning(&rel, 1).unwrap().kept, vec![0]);
        let mut rel = matrix(&[&[0.2, 0.9, 0.4]]);
        rel.per_policy = vec![1.0];
        assert_eq!(plan_pruning(&rel, 1).unwrap().kept, vec![1]);
    }

    #[test]
    fn overlapping_preferences_backfill() {
        // both policies rank token 0 first; policy 0 is more relevant and
        // takes it, policy 1 falls back to its next choice
        let rel = matrix(&[&[0.9, 0.6, 0.3, 0.2], &[0.1, 0.4, 0.7, 0.8]]);
        let plan = select_tokens(&rel, &[1, 2]).unwrap();
        assert_eq!(plan.kept, vec![0, 2, 3]);
        let rel = matrix(&[&[0.6, 0.5, 0.5, 0.1], &[0.4, 0.5, 0.5, 0.9]]);
        // r = [0.425, 0.575]: policy 1 first takes 3 and 1, policy 0 takes 0
        let plan = select_tokens(&rel, &[1, 2]).unwrap();
        assert_eq!(plan.kept, vec![0, 1, 3]);
        assert_eq!(plan.dropped, vec![2]);
    }

    #[test]
    fn budget_length_checked() {
        let rel = matrix(&[&[1.0, 1.0]]);
        assert!(matches!(
            select_tokens(&rel, &[1, 1]),
            Err(PruneError::BudgetMismatch { .. })
        ));
    }

    #[test]
    fn ratio_budget() {
        assert_eq!(k_total_for_ratio(0.0, 16).unwrap(), 16);
        assert_eq!(k_total_for_ratio(0.9, 16).unwrap(), 2);
        assert_eq!(k_total_for_ratio(0.99, 16).unwrap(), 0);
        assert!(k_total_for_ratio(1.0, 16).is_err());
        assert!(k_total_for_ratio(-0.1, 16).is_err());
    }

    #[test]
    fn evidence_uses_own_picks() {
        let rel = matrix(&[&[0.8, 0.2, 0.6], &[0.2, 0.8, 0.4]]);
        let plan = select_tokens(&rel, &[2, 1]).unwrap();
        assert_eq!(plan.selected, vec![vec![0, 2], vec![1]]);
        let e = rel.evidence(&plan);
        assert!((e[0] - 0.7).abs() < 1e-12 && (e[1] - 0.8).abs() < 1e-12);
        let none = select_tokens(&rel, &[0, 0]).unwrap();
        assert_eq!(rel.evidence(&none), vec![0.5, 0.5]);
    }

    #[test]
    fn scores_need_video_and_policies() {
        let ws = AttentionWorkspace {
            heads: vec![HeadQkv {
                q: Array2::zeros((3, 2)),
                k: Array2::zeros((3, 2)),
                v: Array2::zeros((3, 2)),
            }],
            positions: vec![0, 1, 2],
        };
        let layout = TokenLayout::new(0, &[3], 0).unwrap();
        assert_eq!(pair_scores(&ws, &layout), Err(PruneError::NoVisualTokens));
        let layout = TokenLayout::new(3, &[], 0).unwrap();
        assert_eq!(pair_scores(&ws, &layout), Err(PruneError::NoPolicies));
    }

    fn forward(seed: u64) -> (Engine, crate::engine::ForwardOutput, TokenLayout) {
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            patch_size: 4,
            vocab_size: 64,
            seed: 3,
            max_positions: 256,
        };
        let engine = Engine::new(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = TokenLayout::new(6, &[3, 5], 2).unwrap();
        let x = Array2::from_shape_fn((layout.total_len(), 16), |_| rng.random_range(-1.0..1.0));
        let out = engine.forward(&x, &layout, AttentionMode::Pepe).unwrap();
        (engine, out, layout)
    }

    #[test]
    fn relevance_from_engine_is_normalised() {
        let (_, out, layout) = forward(1);
        let rel = relevance(out.last_layer().unwrap(), &layout, 1, Scoring::Softmax).unwrap();
        for col in rel.per_pair.columns() {
            assert!((col.sum() - 1.0).abs() < 1e-12);
        }
        assert!((rel.per_policy.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(rel.visual_tokens, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn evict_matches_masked_decode() {
        let (engine, out, layout) = forward(2);
        let rel = relevance(out.last_layer().unwrap(), &layout, 1, Scoring::Softmax).unwrap();
        let plan = plan_pruning(&rel, 2).unwrap();
        assert_eq!(plan.kept.len(), 2);
        let visible: Vec<bool> = (0..layout.total_len())
            .map(|t| plan.dropped.binary_search(&t).is_err())
            .collect();
        let token = Array1::from_elem(16, 0.3);
        let masked = engine.decode_step_masked(&out.cache, token.view(), &visible).unwrap();
        let mut cache = out.cache.clone();
        evict(&mut cache, &plan).unwrap();
        assert_eq!(cache.visual_tokens(), plan.kept);
        assert_eq!(cache.len(), layout.total_len() - 4);
        let decoded = engine.decode_step(&mut cache, token.view()).unwrap();
        let diff = (&masked - &decoded).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(diff < 1e-12);
    }

    #[test]
    fn evict_edge_cases() {
        let (_, out, _) = forward(3);
        let mut cache = out.cache.clone();
        evict(&mut cache, &PruningPlan::keep_all(&(0..6).collect::<Vec<_>>())).unwrap();
        assert_eq!(cache, out.cache);
        let plan = PruningPlan {
            k_total: 1,
            per_policy_k: vec![1, 0],
            kept: vec![4],
            dropped: vec![0, 1, 2, 3, 5],
            selected: vec![vec![4], vec![]],
        };
        evict(&mut cache, &plan).unwrap();
        assert!(cache.rows_per_layer().iter().all(|&r| r == out.cache.len() - 5));
        assert_eq!(cache.visual_tokens(), vec![4]);
        let bad = PruningPlan {
            kept: vec![0],
            dropped: vec![1],
            ..plan
        };
        assert!(matches!(
            evict(&mut out.cache.clone(), &bad),
            Err(PruneError::PlanMismatch { .. })
        ));
    }
}
