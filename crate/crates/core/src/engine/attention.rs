//! Scaled dot-product attention: a dense masked path and the block-parallel
//! policy path.

use ndarray::{s, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use super::layout::TokenLayout;
use super::EngineError;

/// Rotated queries/keys and values of one head, `total_len x head_dim` each.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadQkv {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
}

/// Q, K, V of every head of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWorkspace {
    pub heads: Vec<HeadQkv>,
    pub positions: Vec<usize>,
}

impl AttentionWorkspace {
    pub fn rows(&self) -> usize {
        self.heads.first().map_or(0, |h| h.q.nrows())
    }

    pub fn head_dim(&self) -> usize {
        self.heads.first().map_or(0, |h| h.q.ncols())
    }

    fn width(&self) -> usize {
        self.heads.len() * self.head_dim()
    }
}

pub(crate) fn softmax_slice(scores: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = if s.is_finite() { (*s - max).exp() } else { 0.0 };
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

/// Attention probabilities of one head under `mask` (`0` where masked).
pub fn attention_probs(head: &HeadQkv, mask: &Array2<bool>) -> Result<Array2<f64>, EngineError> {
    let n = head.q.nrows();
    let scale = 1.0 / (head.q.ncols() as f64).sqrt();
    let logits = head.q.dot(&head.k.t());
    let mut probs = Array2::zeros((n, n));
    for i in 0..n {
        if !mask.row(i).iter().any(|&m| m) {
            return Err(EngineError::EmptyRow { row: i });
        }
        let mut row: Vec<f64> = (0..n)
            .map(|j| {
                if mask[[i, j]] {
                    logits[[i, j]] * scale
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        softmax_slice(&mut row);
        probs.row_mut(i).assign(&ndarray::Array1::from(row));
    }
    Ok(probs)
}

/// Standard masked attention over the full sequence. Output is the
/// concatenation of head outputs, `total_len x (n_heads * head_dim)`.
pub fn dense_attention(ws: &AttentionWorkspace, mask: &Array2<bool>) -> Result<Array2<f64>, EngineError> {
    let n = ws.rows();
    if mask.dim() != (n, n) {
        return Err(EngineError::LayoutMismatch {
            expected: mask.nrows(),
            got: n,
        });
    }
    let hd = ws.head_dim();
    let mut out = Array2::zeros((n, ws.width()));
    for (h, head) in ws.heads.iter().enumerate() {
        let probs = attention_probs(head, mask)?;
        out.slice_mut(s![.., h * hd..(h + 1) * hd]).assign(&probs.dot(&head.v));
    }
    Ok(out)
}

/// One independently computable attention block: a run of query rows and
/// the keys they may see.
struct Block {
    rows: std::ops::Range<usize>,
    keys: Vec<usize>,
    /// Keys inside this range are visible causally (key <= row).
    causal: std::ops::Range<usize>,
}

fn blocks(layout: &TokenLayout) -> Vec<Block> {
    let video: Vec<usize> = layout.video().collect();
    let query: Vec<usize> = layout.query().collect();
    let mut out = vec![Block {
        rows: layout.video(),
        keys: video.clone(),
        causal: layout.video(),
    }];
    for chunk in layout.policies() {
        let keys = video
            .iter()
            .copied()
            .chain(chunk.clone())
            .chain(query.iter().copied())
            .collect();
        out.push(Block {
            rows: chunk.clone(),
            keys,
            causal: chunk.clone(),
        });
    }
    out.push(Block {
        rows: layout.query(),
        keys: (0..layout.total_len()).collect(),
        causal: layout.query(),
    });
    out
}

fn attend_block(q: ArrayView2<f64>, k: ArrayView2<f64>, v: ArrayView2<f64>, block: &Block) -> Array2<f64> {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let qb = q.slice(s![block.rows.clone(), ..]);
    let kb = k.select(Axis(0), &block.keys);
    let vb = v.select(Axis(0), &block.keys);
    let mut scores = qb.dot(&kb.t());
    for (r, mut row) in scores.rows_mut().into_iter().enumerate() {
        let i = block.rows.start + r;
        let mut vals: Vec<f64> = row
            .iter()
            .zip(&block.keys)
            .map(|(&s, &j)| {
                if block.causal.contains(&j) && j > i {
                    f64::NEG_INFINITY
                } else {
                    s * scale
                }
            })
            .collect();
        softmax_slice(&mut vals);
        row.assign(&ndarray::Array1::from(vals));
    }
    scores.dot(&vb)
}

/// Block-decomposed attention under the policy-parallel mask.
///
/// Video rows attend causally within the video. Each policy chunk attends to
/// the whole video, causally to itself and to the whole query, never to
/// another chunk, so chunks are computed as independent blocks. Query rows
/// attend to everything before them and causally within the query.
pub fn pepe_attention(ws: &AttentionWorkspace, layout: &TokenLayout) -> Result<Array2<f64>, EngineError> {
    let n = ws.rows();
    if n != layout.total_len() {
        return Err(EngineError::LayoutMismatch {
            expected: layout.total_len(),
            got: n,
        });
    }
    let hd = ws.head_dim();
    let blocks = blocks(layout);
    let mut out = Array2::zeros((n, ws.width()));
    for (h, head) in ws.heads.iter().enumerate() {
        let parts: Vec<Array2<f64>> = blocks
            .par_iter()
            .map(|b| attend_block(head.q.view(), head.k.view(), head.v.view(), b))
            .collect();
        for (block, part) in blocks.iter().zip(parts) {
            if block.rows.is_empty() {
                continue;
            }
            out.slice_mut(s![block.rows.clone(), h * hd..(h + 1) * hd])
                .assign(&part);
        }
    }
    Ok(out)
}
