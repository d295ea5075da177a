//! Synthetic videos with a known answer.
//!
//! A planted video is a run of events, each a block of identical frames. The
//! patches of the first event are solved so that one chosen policy has the
//! highest relevance by a fixed margin; all other patches score equally for
//! every policy. This only works for single-layer models: the last layer's
//! policy queries then depend on nothing but the policy tokens, and each
//! relevance score is a linear function of the visual token's normalised
//! embedding.

use image::RgbImage;
use nalgebra::{DMatrix, DVector};
use ndarray::{s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{EncoderError, ModelConfig, PatchEncoder};
use crate::engine::rope::rope_rotated;
use crate::engine::{AttentionMode, Engine, EngineError};
use crate::sampler::{FrameSequence, SamplerError, SamplerParams};

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("planted fixtures need a single-layer model, config has {0} layers")]
    UnsupportedDepth(usize),
    #[error("patch dimension {patch_dim} must exceed d_model {d_model}")]
    PatchTooSmall { patch_dim: usize, d_model: usize },
    #[error("patch projection has no strictly positive null-space direction")]
    NoPositiveNullVector,
    #[error("planted policy {policy} out of range for {n} policies")]
    PolicyOutOfRange { policy: usize, n: usize },
    #[error("invalid fixture spec: {0}")]
    InvalidSpec(String),
    #[error("singular constraint system")]
    Singular,
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub n_events: usize,
    pub frames_per_event: usize,
    /// Square frame side in pixels; must be a multiple of the patch size.
    pub frame_size: u32,
    /// Policy whose relevance is raised on the first event; `None` plants
    /// nothing.
    pub planted_policy: Option<usize>,
    pub seed: u64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        Self {
            n_events: 3,
            frames_per_event: 3,
            frame_size: 32,
            planted_policy: Some(0),
            seed: 0,
        }
    }
}

/// Single-layer model wide enough for a clear planted margin on the bundled
/// guideline.
pub fn planted_config() -> ModelConfig {
    ModelConfig {
        d_model: 128,
        n_heads: 2,
        n_layers: 1,
        ..ModelConfig::default()
    }
}

/// Segmentation parameters that recover planted events exactly.
pub fn planted_sampler_params() -> SamplerParams {
    SamplerParams {
        threshold: 1e-3,
        min_len: 1,
    }
}

#[derive(Debug, Clone)]
pub struct PlantedVideo {
    pub frames: FrameSequence,
    pub planted_policy: Option<usize>,
    /// First frame of every event.
    pub event_starts: Vec<usize>,
    /// Smallest score gap between the planted policy and any other policy
    /// over the planted tokens, measured after pixel quantisation.
    pub margin: f64,
    pub sampler: SamplerParams,
}

/// `d_model`-wide score gradients: `g[i][j] · u` is the head-averaged scaled
/// score of policy `i` against a visual token at position `j` whose
/// normalised embedding is `u`.
pub fn score_gradients(
    engine: &Engine,
    chunks: &[Vec<u32>],
    query: &[u32],
    n_visual: usize,
) -> Result<Vec<Vec<Array1<f64>>>, FixtureError> {
    let cfg = engine.config();
    if cfg.n_layers != 1 {
        return Err(FixtureError::UnsupportedDepth(cfg.n_layers));
    }
    let d = cfg.d_model;
    let hd = cfg.head_dim();
    let (x, layout) = engine.assemble(&Array2::zeros((n_visual, d)), chunks, query)?;
    let out = engine.forward(&x, &layout, AttentionMode::Pepe)?;
    let ws = out.last_layer().expect("one layer");
    let wk = engine.key_projection(0);
    let scale = 1.0 / (cfg.n_heads as f64 * (hd as f64).sqrt());
    let pooled: Vec<Vec<Array1<f64>>> = layout
        .policies()
        .iter()
        .map(|span| {
            ws.heads
                .iter()
                .map(|h| {
                    h.q.slice(s![span.clone(), ..])
                        .mean_axis(ndarray::Axis(0))
                        .expect("non-empty")
                })
                .collect()
        })
        .collect();
    let mut grads = Vec::with_capacity(pooled.len());
    for per_head in &pooled {
        let mut row = Vec::with_capacity(n_visual);
        for pos in 0..n_visual {
            let mut g = Array1::zeros(d);
            for m in 0..d {
                let mut acc = 0.0;
                for (h, q) in per_head.iter().enumerate() {
                    let col: Vec<f64> = wk.slice(s![h * hd..(h + 1) * hd, m]).to_vec();
                    let k = rope_rotated(&col, ws.positions[pos]);
                    acc += q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>();
                }
                g[m] = acc * scale;
            }
            row.push(g);
        }
        grads.push(row);
    }
    Ok(grads)
}

fn to_dvector(a: &Array1<f64>) -> DVector<f64> {
    DVector::from_iterator(a.len(), a.iter().copied())
}

/// Minimum-norm solution of `A u = b` for a full-row-rank `A`.
fn min_norm(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>, FixtureError> {
    let gram = a * a.transpose();
    let y = gram.lu().solve(b).ok_or(FixtureError::Singular)?;
    Ok(a.transpose() * y)
}

fn standardize(u: &DVector<f64>) -> DVector<f64> {
    let n = u.len() as f64;
    let mean = u.sum() / n;
    let centred = u.map(|x| x - mean);
    let std = (centred.norm_squared() / n).sqrt();
    centred / std
}

/// Constraint rows: all-ones, then `g_p - g_i` for every `i != p` (or
/// `g_i - g_0` for `i >= 1` when `p` is `None`).
fn constraints(grads: &[Array1<f64>], planted: Option<usize>) -> DMatrix<f64> {
    let d = grads[0].len();
    let mut rows = vec![DVector::from_element(d, 1.0)];
    match planted {
        Some(p) => rows.extend(
            (0..grads.len())
                .filter(|&i| i != p)
                .map(|i| to_dvector(&(&grads[p] - &grads[i]))),
        ),
        None => rows.extend((1..grads.len()).map(|i| to_dvector(&(&grads[i] - &grads[0])))),
    }
    let cols: Vec<DVector<f64>> = rows;
    DMatrix::from_rows(&cols.iter().map(|r| r.transpose()).collect::<Vec<_>>())
}

/// Normalised embedding that raises policy `p` above all others by the
/// largest equal margin.
fn planted_direction(grads: &[Array1<f64>], p: usize) -> Result<DVector<f64>, FixtureError> {
    let a = constraints(grads, Some(p));
    let mut b = DVector::from_element(a.nrows(), 1.0);
    b[0] = 0.0;
    Ok(standardize(&min_norm(&a, &b)?))
}

/// Random normalised embedding on which every policy scores the same.
fn neutral_direction(grads: &[Array1<f64>], rng: &mut ChaCha8Rng) -> Result<DVector<f64>, FixtureError> {
    let d = grads[0].len();
    let a = constraints(grads, None);
    let u = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
    let proj = min_norm(&a, &(&a * &u))?;
    Ok(standardize(&(u - proj)))
}

/// Pixel-space lifting of target embeddings through the patch projection.
struct Lifter {
    pinv: DMatrix<f64>,
    null: DVector<f64>,
}

impl Lifter {
    fn new(projection: &Array2<f64>) -> Result<Self, FixtureError> {
        let (d, m) = projection.dim();
        if m <= d {
            return Err(FixtureError::PatchTooSmall {
                patch_dim: m,
                d_model: d,
            });
        }
        let w = DMatrix::from_fn(d, m, |i, j| projection[[i, j]]);
        let gram_inv = (&w * w.transpose()).try_inverse().ok_or(FixtureError::Singular)?;
        let pinv = w.transpose() * gram_inv;
        // alternate between the null space and the orthant {x >= 1}
        let project = |x: &DVector<f64>| x - &pinv * (&w * x);
        let mut null = project(&DVector::from_element(m, 1.0));
        for _ in 0..500 {
            if null.iter().all(|&x| x > 0.05) {
                break;
            }
            null = project(&null.map(|x| x.max(1.0)));
        }
        if null.iter().any(|&x| x <= 1e-6) {
            return Err(FixtureError::NoPositiveNullVector);
        }
        Ok(Self { pinv, null })
    }

    /// Pixels in `[0, 1]` whose projection is a positive multiple of `u`.
    fn lift(&self, u: &DVector<f64>) -> Vec<f64> {
        let a = &self.pinv * u;
        let t = a
            .iter()
            .zip(self.null.iter())
            .map(|(&x, &n)| -x / n)
            .fold(f64::NEG_INFINITY, f64::max)
            .max(0.0);
        let w = a + self.null.scale(t * 1.05);
        let max = w.max();
        w.iter().map(|x| x / max).collect()
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn layer_norm(x: &Array1<f64>) -> Array1<f64> {
    let n = x.len() as f64;
    let mean = x.sum() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.mapv(|v| (v - mean) / (var + 1e-5).sqrt())
}

/// Builds a planted video for the given policy chunk and query tokens.
pub fn planted_video(
    engine: &Engine,
    encoder: &PatchEncoder,
    chunks: &[Vec<u32>],
    query: &[u32],
    spec: &PlantedSpec,
) -> Result<PlantedVideo, FixtureError> {
    let cfg = engine.config();
    if spec.n_events == 0 || spec.frames_per_event == 0 {
        return Err(FixtureError::InvalidSpec("need at least one event of one frame".into()));
    }
    if let Some(p) = spec.planted_policy {
        if p >= chunks.len() {
            return Err(FixtureError::PolicyOutOfRange {
                policy: p,
                n: chunks.len(),
            });
        }
    }
    let patch = cfg.patch_size;
    let side = spec.frame_size;
    let n_patches = encoder.patches_per_frame(side, side)?;
    let per_row = side as usize / patch;
    let n_visual = spec.n_events * n_patches;
    let grads = score_gradients(engine, chunks, query, n_visual)?;
    let lifter = Lifter::new(encoder.projection())?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut frames = Vec::with_capacity(spec.n_events * spec.frames_per_event);
    let mut event_starts = Vec::with_capacity(spec.n_events);
    let mut margin = f64::INFINITY;
    for event in 0..spec.n_events {
        let mut img = RgbImage::new(side, side);
        for k in 0..n_patches {
            let pos = event * n_patches + k;
            let at_pos: Vec<Array1<f64>> = grads.iter().map(|g| g[pos].clone()).collect();
            let planted = spec.planted_policy.filter(|_| event == 0);
            let u = match planted {
                Some(p) => planted_direction(&at_pos, p)?,
                None => neutral_direction(&at_pos, &mut rng)?,
            };
            let pixels = lifter.lift(&u);
            let (ox, oy) = ((k % per_row) * patch, (k / per_row) * patch);
            let mut quantized = Vec::with_capacity(pixels.len());
            for (idx, px) in pixels.chunks(3).enumerate() {
                let rgb = [quantize(px[0]), quantize(px[1]), quantize(px[2])];
                quantized.extend(rgb.iter().map(|&c| f64::from(c) / 255.0));
                img.put_pixel((ox + idx % patch) as u32, (oy + idx / patch) as u32, image::Rgb(rgb));
            }
            if let Some(p) = planted {
                let u = layer_norm(&encoder.embed_patch(Array1::from(quantized).view()));
                let sp = at_pos[p].dot(&u);
                for (i, g) in at_pos.iter().enumerate() {
                    if i != p {
                        margin = margin.min(sp - g.dot(&u));
                    }
                }
            }
        }
        event_starts.push(frames.len());
        frames.extend(std::iter::repeat_n(img, spec.frames_per_event));
    }
    if spec.planted_policy.is_none() || chunks.len() < 2 {
        margin = 0.0;
    }
    Ok(PlantedVideo {
        frames: FrameSequence::new(frames, 1.0)?,
        planted_policy: spec.planted_policy,
        event_starts,
        margin,
        sampler: planted_sampler_params(),
    })
}

/// `count` planted videos cycling the planted policy through `0..n`, with
/// seeds `base.seed + k`.
pub fn planted_suite(
    engine: &Engine,
    encoder: &PatchEncoder,
    chunks: &[Vec<u32>],
    query: &[u32],
    base: &PlantedSpec,
    count: usize,
) -> Result<Vec<PlantedVideo>, FixtureError> {
    (0..count)
        .into_par_iter()
        .map(|k| {
            let spec = PlantedSpec {
                planted_policy: Some(k % chunks.len().max(1)),
                seed: base.seed.wrapping_add(k as u64),
                ..base.clone()
            };
            planted_video(engine, encoder, chunks, query, &spec)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pruner::{relevance, Scoring};
    use crate::sampler::{boundaries, sample_frames, segment_events};
    use crate::text::anchored;

    fn chunks(vocab: usize) -> Vec<Vec<u32>> {
        [
            "violence and weapons",
            "adult content",
            "self harm and risky stunts",
            "hate speech",
        ]
        .iter()
        .map(|t| anchored(t, vocab))
        .collect()
    }

    #[test]
    fn planted_policy_dominates_first_event() {
        let cfg = planted_config();
        let engine = Engine::new(&cfg);
        let encoder = PatchEncoder::new(&cfg);
        let chunks = chunks(cfg.vocab_size);
        let query = crate::text::tokenize("check the video", cfg.vocab_size);
        let spec = PlantedSpec {
            planted_policy: Some(2),
            ..PlantedSpec::default()
        };
        let video = planted_video(&engine, &encoder, &chunks, &query, &spec).unwrap();
        assert!(video.margin > 0.5, "margin {}", video.margin);

        let seq = &video.frames;
        let events = segment_events(seq, video.sampler.threshold, video.sampler.min_len).unwrap();
        assert_eq!(boundaries(&events), video.event_starts[1..].to_vec());
        let sampled: Vec<RgbImage> = sample_frames(&events)
            .iter()
            .map(|&i| seq.frames()[i].clone())
            .collect();
        let tokens = encoder.encode_video(&sampled).unwrap();
        let (x, layout) = engine.assemble(&tokens.tokens, &chunks, &query).unwrap();
        let out = engine.forward(&x, &layout, AttentionMode::Pepe).unwrap();
        let rel = relevance(out.last_layer().unwrap(), &layout, 0, Scoring::Softmax).unwrap();
        let n_patches = tokens.n_patches;
        for j in 0..rel.n_visual() {
            let col = rel.per_pair.column(j);
            if j < n_patches {
                let best = (0..4).max_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap();
                assert_eq!(best, 2);
            } else {
                for &r in col.iter() {
                    assert!((r - 0.25).abs() < 0.02, "neutral column {j}: {col:?}");
                }
            }
        }
    }

    #[test]
    fn deeper_models_rejected() {
        let cfg = ModelConfig {
            n_layers: 2,
            ..ModelConfig::default()
        };
        let engine = Engine::new(&cfg);
        let encoder = PatchEncoder::new(&cfg);
        let err = planted_video(
            &engine,
            &encoder,
            &chunks(cfg.vocab_size),
            &[5],
            &PlantedSpec::default(),
        );
        assert!(matches!(err, Err(FixtureError::UnsupportedDepth(2))));
    }
}
