//! Minimal pre-norm decoder stack with rotary positions and two policy
//! encodings: sequential (baseline) and block-parallel with equivalent
//! positions.
//!
//! Everything is computed in `f64`. Weights are generated from the config
//! seed and never change after construction, so one [`Engine`] can serve any
//! number of concurrent requests; each request owns its [`KvCache`].

pub mod attention;
pub mod layout;
pub mod rope;

use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use thiserror::Error;

use crate::encoder::{glorot_matrix, ModelConfig};
pub use attention::{attention_probs, dense_attention, pepe_attention, AttentionWorkspace, HeadQkv};
pub use layout::{assign_positions, attention_mask, AttentionMode, LayoutSpec, PositionMode, Region, TokenLayout};
pub use rope::rope_rotate;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("workspace has {got} rows, layout expects {expected}")]
    LayoutMismatch { expected: usize, got: usize },
    #[error("attention row {row} has no permitted key")]
    EmptyRow { row: usize },
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("position {needed} exceeds max_positions {max}")]
    PositionOverflow { needed: usize, max: usize },
    #[error("embedding width {got} does not match d_model {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("token id {id} outside vocabulary of {vocab}")]
    UnknownToken { id: u32, vocab: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlopKind {
    Projection,
    Attention,
    Mlp,
}

/// Receives the floating-point operation count of every matrix product the
/// engine performs.
pub trait FlopsObserver: Sync {
    fn record(&self, layer: usize, kind: FlopKind, flops: u64);
}

pub struct NoopObserver;

impl FlopsObserver for NoopObserver {
    fn record(&self, _: usize, _: FlopKind, _: u64) {}
}

/// Thread-safe running totals per [`FlopKind`].
#[derive(Debug, Default)]
pub struct FlopsTally {
    projection: AtomicU64,
    attention: AtomicU64,
    mlp: AtomicU64,
}

impl FlopsTally {
    pub fn projection(&self) -> u64 {
        self.projection.load(Ordering::Relaxed)
    }

    pub fn attention(&self) -> u64 {
        self.attention.load(Ordering::Relaxed)
    }

    pub fn mlp(&self) -> u64 {
        self.mlp.load(Ordering::Relaxed)
    }

    pub fn total(&self) -> u64 {
        self.projection() + self.attention() + self.mlp()
    }
}

impl FlopsObserver for FlopsTally {
    fn record(&self, _: usize, kind: FlopKind, flops: u64) {
        let slot = match kind {
            FlopKind::Projection => &self.projection,
            FlopKind::Attention => &self.attention,
            FlopKind::Mlp => &self.mlp,
        };
        slot.fetch_add(flops, Ordering::Relaxed);
    }
}

#[derive(Debug, Clone)]
struct LayerWeights {
    wq: Array2<f64>,
    wk: Array2<f64>,
    wv: Array2<f64>,
    wo: Array2<f64>,
    w_up: Array2<f64>,
    w_down: Array2<f64>,
}

impl LayerWeights {
    fn new(cfg: &ModelConfig, layer: usize) -> Self {
        let d = cfg.d_model;
        let h = cfg.mlp_hidden();
        let m = |name: &str, r, c| glorot_matrix(cfg.seed, &format!("layer{layer}.{name}"), r, c);
        Self {
            wq: m("wq", d, d),
            wk: m("wk", d, d),
            wv: m("wv", d, d),
            wo: m("wo", d, d),
            w_up: m("w_up", h, d),
            w_down: m("w_down", d, h),
        }
    }
}

/// Per-layer, per-head rotated keys and values plus the original token index
/// of every row.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    /// `layers[l][h] = (K, V)`, each `rows x head_dim`.
    layers: Vec<Vec<(Array2<f64>, Array2<f64>)>>,
    token_index: Vec<usize>,
    video: Range<usize>,
    next_position: usize,
    next_token: usize,
}

impl KvCache {
    /// Assembles a cache from its parts. `token_index` names the original
    /// token of each row.
    pub fn from_parts(
        layers: Vec<Vec<(Array2<f64>, Array2<f64>)>>,
        token_index: Vec<usize>,
        video: Range<usize>,
        next_position: usize,
        next_token: usize,
    ) -> Self {
        Self {
            layers,
            token_index,
            video,
            next_position,
            next_token,
        }
    }

    pub fn len(&self) -> usize {
        self.token_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_index.is_empty()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn token_index(&self) -> &[usize] {
        &self.token_index
    }

    pub fn video_span(&self) -> Range<usize> {
        self.video.clone()
    }

    pub fn next_position(&self) -> usize {
        self.next_position
    }

    pub fn next_token(&self) -> usize {
        self.next_token
    }

    /// Keys and values of one head of one layer.
    pub fn head(&self, layer: usize, head: usize) -> (&Array2<f64>, &Array2<f64>) {
        let (k, v) = &self.layers[layer][head];
        (k, v)
    }

    /// Original token indices of the cached visual rows, in row order.
    pub fn visual_tokens(&self) -> Vec<usize> {
        self.token_index
            .iter()
            .copied()
            .filter(|t| self.video.contains(t))
            .collect()
    }

    /// Rows per layer; every layer holds the same rows.
    pub fn rows_per_layer(&self) -> Vec<usize> {
        self.layers
            .iter()
            .map(|l| l.first().map_or(0, |(k, _)| k.nrows()))
            .collect()
    }

    /// Keeps the rows for which `keep(token_index)` is true, in order.
    pub fn retain_tokens(&mut self, keep: impl Fn(usize) -> bool) {
        let rows: Vec<usize> = (0..self.len()).filter(|&r| keep(self.token_index[r])).collect();
        for layer in &mut self.layers {
            for (k, v) in layer.iter_mut() {
                *k = k.select(Axis(0), &rows);
                *v = v.select(Axis(0), &rows);
            }
        }
        self.token_index = rows.iter().map(|&r| self.token_index[r]).collect();
    }
}

/// Result of a prefill pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub hidden: Array2<f64>,
    /// Q/K/V of every layer, first to last.
    pub workspaces: Vec<AttentionWorkspace>,
    pub cache: KvCache,
    pub positions: Vec<usize>,
}

impl ForwardOutput {
    /// Q/K/V of the last layer; `None` for a zero-layer model.
    pub fn last_layer(&self) -> Option<&AttentionWorkspace> {
        self.workspaces.last()
    }
}

/// Which kernel computes attention in a prefill pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionPath {
    /// Block decomposition for policy-parallel mode, dense masked otherwise.
    Auto,
    /// Dense masked attention with the mode's explicit mask.
    Dense,
}

#[derive(Debug, Clone)]
pub struct Engine {
    config: ModelConfig,
    token_embedding: Array2<f64>,
    layers: Vec<LayerWeights>,
}

fn layer_norm(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        normalize_row(row.view_mut());
    }
    out
}

fn normalize_row(mut row: ndarray::ArrayViewMut1<f64>) {
    let n = row.len() as f64;
    let mean = row.sum() / n;
    let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    row.mapv_inplace(|x| (x - mean) * inv);
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Cost of an `m x k` by `k x n` product.
pub fn linear_flops(m: usize, k: usize, n: usize) -> u64 {
    2 * (m as u64) * (k as u64) * (n as u64)
}

impl Engine {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            config: config.clone(),
            token_embedding: glorot_matrix(config.seed, "token_embed", config.vocab_size, config.d_model),
            layers: (0..config.n_layers).map(|l| LayerWeights::new(config, l)).collect(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// `d_model x d_model` key projection of `layer`.
    pub fn key_projection(&self, layer: usize) -> &Array2<f64> {
        &self.layers[layer].wk
    }

    pub fn embed_tokens(&self, ids: &[u32]) -> Result<Array2<f64>, EngineError> {
        let vocab = self.config.vocab_size;
        let rows: Vec<usize> = ids
            .iter()
            .map(|&id| {
                if (id as usize) < vocab {
                    Ok(id as usize)
                } else {
                    Err(EngineError::UnknownToken { id, vocab })
                }
            })
            .collect::<Result<_, _>>()?;
        Ok(self.token_embedding.select(Axis(0), &rows))
    }

    /// Concatenates visual embeddings, anchored policy chunks and query
    /// tokens into one input matrix.
    pub fn assemble(
        &self,
        visual: &Array2<f64>,
        chunks: &[Vec<u32>],
        query: &[u32],
    ) -> Result<(Array2<f64>, TokenLayout), EngineError> {
        let d = self.config.d_model;
        if visual.ncols() != d && visual.nrows() > 0 {
            return Err(EngineError::WidthMismatch {
                expected: d,
                got: visual.ncols(),
            });
        }
        let lens: Vec<usize> = chunks.iter().map(Vec::len).collect();
        let layout = TokenLayout::new(visual.nrows(), &lens, query.len())?;
        let mut x = Array2::zeros((layout.total_len(), d));
        x.slice_mut(s![layout.video(), ..]).assign(visual);
        for (chunk, span) in chunks.iter().zip(layout.policies()) {
            x.slice_mut(s![span.clone(), ..]).assign(&self.embed_tokens(chunk)?);
        }
        x.slice_mut(s![layout.query(), ..]).assign(&self.embed_tokens(query)?);
        Ok((x, layout))
    }

    pub fn forward(
        &self,
        x: &Array2<f64>,
        layout: &TokenLayout,
        mode: AttentionMode,
    ) -> Result<ForwardOutput, EngineError> {
        self.forward_with(x, layout, mode, AttentionPath::Auto, &NoopObserver)
    }

    /// Prefill pass choosing the attention kernel and reporting every matrix
    /// product to `observer`.
    pub fn forward_with(
        &self,
        x: &Array2<f64>,
        layout: &TokenLayout,
        mode: AttentionMode,
        path: AttentionPath,
        observer: &dyn FlopsObserver,
    ) -> Result<ForwardOutput, EngineError> {
        let cfg = &self.config;
        let (t, d) = x.dim();
        if t != layout.total_len() {
            return Err(EngineError::LayoutMismatch {
                expected: layout.total_len(),
                got: t,
            });
        }
        if d != cfg.d_model {
            return Err(EngineError::WidthMismatch {
                expected: cfg.d_model,
                got: d,
            });
        }
        let positions = assign_positions(layout, mode.positions());
        let next_position = layout.next_position(mode.positions());
        if next_position >= cfg.max_positions {
            return Err(EngineError::PositionOverflow {
                needed: next_position,
                max: cfg.max_positions,
            });
        }
        let hd = cfg.head_dim();
        let mask = match (mode, path) {
            (AttentionMode::Pepe, AttentionPath::Auto) => None,
            _ => Some(attention_mask(layout, mode)),
        };
        let pairs = layout::permitted_pairs(layout, mode);

        let mut h = x.clone();
        let mut workspaces = Vec::with_capacity(self.layers.len());
        let mut cache_layers = Vec::with_capacity(self.layers.len());
        for (l, w) in self.layers.iter().enumerate() {
            let xn = layer_norm(&h);
            let q = xn.dot(&w.wq.t());
            let k = xn.dot(&w.wk.t());
            let v = xn.dot(&w.wv.t());
            observer.record(l, FlopKind::Projection, 3 * linear_flops(t, d, d));
            let heads: Vec<HeadQkv> = (0..cfg.n_heads)
                .map(|hi| {
                    let cols = s![.., hi * hd..(hi + 1) * hd];
                    let mut hq = q.slice(cols).to_owned();
                    let mut hk = k.slice(cols).to_owned();
                    for (row, &p) in positions.iter().enumerate() {
                        rope_rotate(hq.row_mut(row), p);
                        rope_rotate(hk.row_mut(row), p);
                    }
                    HeadQkv {
                        q: hq,
                        k: hk,
                        v: v.slice(cols).to_owned(),
                    }
                })
                .collect();
            let ws = AttentionWorkspace {
                heads,
                positions: positions.clone(),
            };
            let attn = match &mask {
                Some(m) => dense_attention(&ws, m)?,
                None => pepe_attention(&ws, layout)?,
            };
            for _ in 0..cfg.n_heads {
                // QK^T and AV over permitted pairs
                observer.record(l, FlopKind::Attention, 4 * pairs * hd as u64);
            }
            h += &attn.dot(&w.wo.t());
            observer.record(l, FlopKind::Projection, linear_flops(t, d, d));
            let up = layer_norm(&h).dot(&w.w_up.t()).mapv(gelu);
            h += &up.dot(&w.w_down.t());
            observer.record(l, FlopKind::Mlp, 2 * linear_flops(t, d, cfg.mlp_hidden()));
            cache_layers.push(ws.heads.iter().map(|hq| (hq.k.clone(), hq.v.clone())).collect());
            workspaces.push(ws);
        }
        Ok(ForwardOutput {
            hidden: h,
            workspaces,
            cache: KvCache {
                layers: cache_layers,
                token_index: (0..t).collect(),
                video: layout.video(),
                next_position,
                next_token: t,
            },
            positions,
        })
    }

    /// Decodes one token against the cache and appends its keys/values.
    pub fn decode_step(&self, cache: &mut KvCache, x: ArrayView1<f64>) -> Result<Array1<f64>, EngineError> {
        self.decode_step_observed(cache, x, &NoopObserver)
    }

    pub fn decode_step_observed(
        &self,
        cache: &mut KvCache,
        x: ArrayView1<f64>,
        observer: &dyn FlopsObserver,
    ) -> Result<Array1<f64>, EngineError> {
        let pos = cache.next_position;
        if pos >= self.config.max_positions {
            return Err(EngineError::PositionOverflow {
                needed: pos,
                max: self.config.max_positions,
            });
        }
        let out = self.decode_inner(cache, x, None, observer)?;
        cache.token_index.push(cache.next_token);
        cache.next_token += 1;
        cache.next_position += 1;
        Ok(out)
    }

    /// Decodes one token against the rows of `cache` whose flag in `visible`
    /// is set, leaving the cache untouched.
    pub fn decode_step_masked(
        &self,
        cache: &KvCache,
        x: ArrayView1<f64>,
        visible: &[bool],
    ) -> Result<Array1<f64>, EngineError> {
        let mut scratch = cache.clone();
        self.decode_inner(&mut scratch, x, Some(visible), &NoopObserver)
    }

    fn decode_inner(
        &self,
        cache: &mut KvCache,
        x: ArrayView1<f64>,
        visible: Option<&[bool]>,
        observer: &dyn FlopsObserver,
    ) -> Result<Array1<f64>, EngineError> {
        let cfg = &self.config;
        let d = cfg.d_model;
        if x.len() != d {
            return Err(EngineError::WidthMismatch {
                expected: d,
                got: x.len(),
            });
        }
        if cache.layers.len() != self.layers.len() {
            return Err(EngineError::LayoutMismatch {
                expected: self.layers.len(),
                got: cache.layers.len(),
            });
        }
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let pos = cache.next_position;
        let mut h = x.to_owned();
        for (l, w) in self.layers.iter().enumerate() {
            let mut xn = h.clone();
            normalize_row(xn.view_mut());
            let q = w.wq.dot(&xn);
            let k = w.wk.dot(&xn);
            let v = w.wv.dot(&xn);
            observer.record(l, FlopKind::Projection, 3 * linear_flops(1, d, d));
            let mut attn = Array1::zeros(d);
            for hi in 0..cfg.n_heads {
                let cols = hi * hd..(hi + 1) * hd;
                let mut hq = q.slice(s![cols.clone()]).to_owned();
                let mut hk = k.slice(s![cols.clone()]).to_owned();
                rope_rotate(hq.view_mut(), pos);
                rope_rotate(hk.view_mut(), pos);
                let (ck, cv) = &mut cache.layers[l][hi];
                ck.push_row(hk.view()).expect("head width");
                cv.push_row(v.slice(s![cols.clone()])).expect("head width");
                let rows = ck.nrows();
                let mut scores: Vec<f64> = (0..rows)
                    .map(|r| {
                        let seen = r + 1 == rows || visible.is_none_or(|vis| vis.get(r).copied().unwrap_or(false));
                        if seen {
                            ck.row(r).dot(&hq) * scale
                        } else {
                            f64::NEG_INFINITY
                        }
                    })
                    .collect();
                let seen_rows = scores.iter().filter(|s| s.is_finite()).count() as u64;
                observer.record(l, FlopKind::Attention, 4 * seen_rows * hd as u64);
                attention::softmax_slice(&mut scores);
                let mut o = Array1::zeros(hd);
                for (r, p) in scores.iter().enumerate() {
                    if *p != 0.0 {
                        o.scaled_add(*p, &cv.row(r));
                    }
                }
                attn.slice_mut(s![cols]).assign(&o);
            }
            h += &w.wo.dot(&attn);
            observer.record(l, FlopKind::Projection, linear_flops(1, d, d));
            let mut xn2 = h.clone();
            normalize_row(xn2.view_mut());
            let up = w.w_up.dot(&xn2).mapv(gelu);
            h += &w.w_down.dot(&up);
            observer.record(l, FlopKind::Mlp, 2 * linear_flops(1, d, cfg.mlp_hidden()));
        }
        Ok(h)
    }
}
