//! Token layout, position assignment and attention masks.

use std::ops::Range;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::EngineError;

/// How the policy region is encoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// Block-parallel chunks with restarted (equivalent) positions.
    Pepe,
    /// One causal policy region with sequential positions.
    Sequential,
}

impl AttentionMode {
    pub fn positions(self) -> PositionMode {
        match self {
            AttentionMode::Pepe => PositionMode::Equivalent,
            AttentionMode::Sequential => PositionMode::Sequential,
        }
    }
}

impl std::str::FromStr for AttentionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pepe" | "equivalent" => Ok(Self::Pepe),
            "sequential" => Ok(Self::Sequential),
            other => Err(format!("unknown mode {other:?} (expected pepe or sequential)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionMode {
    Sequential,
    Equivalent,
}

/// Which region a token belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Video(usize),
    /// `(chunk, offset within chunk)`
    Policy(usize, usize),
    Query(usize),
}

/// Index ranges of the video, policy chunks and query, in that order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    video: Range<usize>,
    policies: Vec<Range<usize>>,
    query: Range<usize>,
}

/// Shape-only description used by config files: token counts per region.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutSpec {
    pub video_tokens: usize,
    pub policy_chunk_lengths: Vec<usize>,
    pub query_tokens: usize,
}

impl TokenLayout {
    /// Contiguous layout from region sizes. Chunk lengths include both anchors.
    pub fn new(n_video: usize, chunk_lens: &[usize], n_query: usize) -> Result<Self, EngineError> {
        let mut at = n_video;
        let mut policies = Vec::with_capacity(chunk_lens.len());
        for (c, &len) in chunk_lens.iter().enumerate() {
            if len < 3 {
                return Err(EngineError::InvalidLayout(format!(
                    "policy chunk {c} has {len} tokens; needs two anchors and content"
                )));
            }
            policies.push(at..at + len);
            at += len;
        }
        Ok(Self {
            video: 0..n_video,
            policies,
            query: at..at + n_query,
        })
    }

    pub fn from_spec(spec: &LayoutSpec) -> Result<Self, EngineError> {
        Self::new(spec.video_tokens, &spec.policy_chunk_lengths, spec.query_tokens)
    }

    pub fn spec(&self) -> LayoutSpec {
        LayoutSpec {
            video_tokens: self.video.len(),
            policy_chunk_lengths: self.chunk_lengths(),
            query_tokens: self.query.len(),
        }
    }

    pub fn video(&self) -> Range<usize> {
        self.video.clone()
    }

    pub fn policies(&self) -> &[Range<usize>] {
        &self.policies
    }

    pub fn query(&self) -> Range<usize> {
        self.query.clone()
    }

    pub fn total_len(&self) -> usize {
        self.query.end
    }

    pub fn n_policies(&self) -> usize {
        self.policies.len()
    }

    pub fn chunk_lengths(&self) -> Vec<usize> {
        self.policies.iter().map(|r| r.len()).collect()
    }

    pub fn max_chunk_len(&self) -> usize {
        self.policies.iter().map(|r| r.len()).max().unwrap_or(0)
    }

    pub fn region(&self, idx: usize) -> Region {
        if self.video.contains(&idx) {
            return Region::Video(idx);
        }
        for (c, r) in self.policies.iter().enumerate() {
            if r.contains(&idx) {
                return Region::Policy(c, idx - r.start);
            }
        }
        debug_assert!(self.query.contains(&idx));
        Region::Query(idx - self.query.start)
    }

    /// Position the next decoded token takes.
    pub fn next_position(&self, mode: PositionMode) -> usize {
        match mode {
            PositionMode::Sequential => self.total_len(),
            PositionMode::Equivalent => self.video.len() + self.max_chunk_len() + self.query.len(),
        }
    }

    /// Whether token `i` may attend to token `j` under `mode`.
    pub fn allowed(&self, mode: AttentionMode, i: usize, j: usize) -> bool {
        match (self.region(i), self.region(j)) {
            (Region::Video(a), Region::Video(b)) => b <= a,
            (Region::Video(_), _) => false,
            (Region::Policy(..), Region::Video(_)) => true,
            (Region::Policy(..), Region::Query(_)) => true,
            (Region::Policy(ci, oi), Region::Policy(cj, oj)) => match mode {
                AttentionMode::Pepe => ci == cj && oj <= oi,
                AttentionMode::Sequential => j <= i,
            },
            (Region::Query(a), Region::Query(b)) => b <= a,
            (Region::Query(_), _) => true,
        }
    }
}

/// Per-token RoPE positions.
///
/// Sequential: `0..total_len`. Equivalent: video `0..V`; token `t` of every
/// chunk gets `V + t`; query token `t` gets `V + L_max + t`.
pub fn assign_positions(layout: &TokenLayout, mode: PositionMode) -> Vec<usize> {
    match mode {
        PositionMode::Sequential => (0..layout.total_len()).collect(),
        PositionMode::Equivalent => {
            let base = layout.video.len();
            let query_base = base + layout.max_chunk_len();
            let mut pos = Vec::with_capacity(layout.total_len());
            pos.extend(layout.video.clone());
            for chunk in &layout.policies {
                pos.extend(base..base + chunk.len());
            }
            pos.extend(query_base..query_base + layout.query.len());
            pos
        }
    }
}

/// Explicit `total_len x total_len` mask for `mode`.
pub fn attention_mask(layout: &TokenLayout, mode: AttentionMode) -> Array2<bool> {
    let n = layout.total_len();
    Array2::from_shape_fn((n, n), |(i, j)| layout.allowed(mode, i, j))
}

pub fn pepe_mask(layout: &TokenLayout) -> Array2<bool> {
    attention_mask(layout, AttentionMode::Pepe)
}

pub fn causal_mask(n: usize) -> Array2<bool> {
    Array2::from_shape_fn((n, n), |(i, j)| j <= i)
}

/// Number of permitted (query, key) pairs under `mode`.
pub fn permitted_pairs(layout: &TokenLayout, mode: AttentionMode) -> u64 {
    let v = layout.video.len() as u64;
    let q = layout.query.len() as u64;
    let p: u64 = layout.policies.iter().map(|r| r.len() as u64).sum();
    let tri = |n: u64| n * (n + 1) / 2;
    let video_rows = tri(v);
    let policy_rows = match mode {
        AttentionMode::Pepe => layout
            .policies
            .iter()
            .map(|r| {
                let l = r.len() as u64;
                l * (v + q) + tri(l)
            })
            .sum::<u64>(),
        AttentionMode::Sequential => p * (v + q) + tri(p),
    };
    let query_rows = q * (v + p) + tri(q);
    video_rows + policy_rows + query_rows
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_chunk_positions_match_sequential() {
        let l = TokenLayout::new(5, &[7], 3).unwrap();
        assert_eq!(
            assign_positions(&l, PositionMode::Equivalent),
            assign_positions(&l, PositionMode::Sequential)
        );
    }

    #[test]
    fn two_chunks_restart_at_video_length() {
        let l = TokenLayout::new(8, &[4, 6], 2).unwrap();
        let pos = assign_positions(&l, PositionMode::Equivalent);
        assert_eq!(pos[8], 8);
        assert_eq!(pos[12], 8);
        assert_eq!(&pos[8..12], &[8, 9, 10, 11]);
        assert_eq!(&pos[12..18], &[8, 9, 10, 11, 12, 13]);
        assert_eq!(pos[18], 14);
        assert_eq!(l.next_position(PositionMode::Equivalent), 16);
    }

    #[test]
    fn swapping_chunks_keeps_within_chunk_positions() {
        let a = TokenLayout::new(8, &[4, 6], 2).unwrap();
        let b = TokenLayout::new(8, &[6, 4], 2).unwrap();
        let pa = assign_positions(&a, PositionMode::Equivalent);
        let pb = assign_positions(&b, PositionMode::Equivalent);
        assert_eq!(&pa[8..12], &pb[14..18]);
        assert_eq!(&pa[12..18], &pb[8..14]);
        assert_eq!(&pa[18..], &pb[18..]);
    }

    #[test]
    fn short_chunks_rejected() {
        assert!(TokenLayout::new(2, &[2], 1).is_err());
    }

    #[test]
    fn mask_structure() {
        let l = TokenLayout::new(2, &[3, 3], 2).unwrap();
        let m = pepe_mask(&l);
        // video causal, blind to everything else
        assert!(m[[1, 0]] && !m[[0, 1]] && !m[[1, 2]]);
        // chunk 0 token sees video, own prefix, query; not chunk 1
        assert!(m[[3, 0]] && m[[3, 2]] && m[[3, 3]] && !m[[3, 4]]);
        assert!(!m[[3, 5]] && m[[3, 8]] && m[[3, 9]]);
        // chunk 1 does not see chunk 0 in pepe mode, does in sequential mode
        assert!(!m[[5, 2]]);
        assert!(attention_mask(&l, AttentionMode::Sequential)[[5, 2]]);
        // query sees everything before it, causal among itself
        assert!(m[[8, 0]] && m[[8, 7]] && !m[[8, 9]] && m[[9, 8]]);
    }

    #[test]
    fn pair_counts_match_masks() {
        for (v, chunks, q) in [
            (0, vec![3], 0),
            (4, vec![3, 5], 2),
            (7, vec![4, 4, 6], 3),
            (1, vec![3], 5),
        ] {
            let l = TokenLayout::new(v, &chunks, q).unwrap();
            for mode in [AttentionMode::Pepe, AttentionMode::Sequential] {
                let brute = attention_mask(&l, mode).iter().filter(|&&b| b).count() as u64;
                assert_eq!(permitted_pairs(&l, mode), brute);
            }
        }
    }
}
