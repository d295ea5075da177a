//! Model configuration, seeded weight generation and patch embedding.

use image::RgbImage;
use ndarray::{Array1, Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("frame {width}x{height} is not divisible by patch size {patch_size}")]
    DimensionMismatch { width: u32, height: u32, patch_size: usize },
    #[error("frames have different sizes")]
    MixedFrameSizes,
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
}

/// Architecture hyper-parameters. Read from a config file with exactly these
/// fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub patch_size: usize,
    pub vocab_size: usize,
    pub seed: u64,
    pub max_positions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            n_layers: 1,
            patch_size: 16,
            vocab_size: 4096,
            seed: 42,
            max_positions: 8192,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: &str| Err(EncoderError::InvalidConfig(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || self.patch_size == 0 || self.max_positions == 0 {
            return bad("d_model, n_heads, patch_size and max_positions must be >= 1");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be divisible by n_heads");
        }
        if !self.head_dim().is_multiple_of(2) {
            return bad("head_dim must be even");
        }
        if self.vocab_size < 4 {
            return bad("vocab_size must leave room for reserved ids 0..=2");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        4 * self.d_model
    }

    pub fn from_json(text: &str) -> Result<Self, EncoderError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| EncoderError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// SplitMix64 generator.
///
/// `state += 0x9E3779B97F4A7C15`, then the output is mixed with the
/// multipliers `0xBF58476D1CE4E5B9` and `0x94D049BB133111EB`.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` from the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Seeded `rows x cols` matrix with entries uniform in `(-a, a)`,
/// `a = sqrt(6 / (rows + cols))`.
///
/// The stream seed mixes the global seed with the matrix label and shape, so
/// the result depends only on `(seed, label, rows, cols)`.
pub fn glorot_matrix(seed: u64, label: &str, rows: usize, cols: usize) -> Array2<f64> {
    let shape_tag = ((rows as u64) << 32) ^ cols as u64;
    let mut mixer = SplitMix64::new(seed ^ fnv1a(label.as_bytes()).rotate_left(17) ^ shape_tag);
    let mut rng = SplitMix64::new(mixer.next_u64());
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || (2.0 * rng.next_f64() - 1.0) * bound)
}

/// Frame and patch a visual token came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSource {
    pub frame: usize,
    pub patch: usize,
}

/// Visual tokens, frame-major then patch order.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualTokenSet {
    pub tokens: Array2<f64>,
    pub provenance: Vec<TokenSource>,
    pub n_frames: usize,
    pub n_patches: usize,
}

impl VisualTokenSet {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }
}

/// Linear patch projection (no bias) standing in for a pretrained vision
/// tower.
#[derive(Debug, Clone)]
pub struct PatchEncoder {
    config: ModelConfig,
    projection: Array2<f64>,
}

impl PatchEncoder {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            config: config.clone(),
            projection: glorot_matrix(config.seed, "patch_embed", config.d_model, config.patch_dim()),
        }
    }

    /// `d_model x 3·patch²` projection matrix.
    pub fn projection(&self) -> &Array2<f64> {
        &self.projection
    }

    pub fn patches_per_frame(&self, width: u32, height: u32) -> Result<usize, EncoderError> {
        let p = self.config.patch_size;
        if !(width as usize).is_multiple_of(p) || !(height as usize).is_multiple_of(p) {
            return Err(EncoderError::DimensionMismatch {
                width,
                height,
                patch_size: p,
            });
        }
        Ok((width as usize / p) * (height as usize / p))
    }

    /// Flattened patches of a frame, row-major over patches, each patch
    /// row-major over pixels with interleaved RGB scaled to `[0, 1]`.
    pub fn patch_vectors(&self, frame: &RgbImage) -> Result<Vec<Array1<f64>>, EncoderError> {
        let (w, h) = frame.dimensions();
        self.patches_per_frame(w, h)?;
        let p = self.config.patch_size;
        let mut out = Vec::new();
        for py in 0..h as usize / p {
            for px in 0..w as usize / p {
                let mut v = Vec::with_capacity(self.config.patch_dim());
                for y in 0..p {
                    for x in 0..p {
                        let pixel = frame.get_pixel((px * p + x) as u32, (py * p + y) as u32);
                        v.extend(pixel.0.iter().map(|&c| f64::from(c) / 255.0));
                    }
                }
                out.push(Array1::from(v));
            }
        }
        Ok(out)
    }

    pub fn embed_patch(&self, patch: ArrayView1<f64>) -> Array1<f64> {
        self.projection.dot(&patch)
    }

    /// `N_p x d_model` embeddings of one frame.
    pub fn patch_embed(&self, frame: &RgbImage) -> Result<Array2<f64>, EncoderError> {
        let patches = self.patch_vectors(frame)?;
        let mut out = Array2::zeros((patches.len(), self.config.d_model));
        for (row, patch) in out.rows_mut().into_iter().zip(&patches) {
            let e = self.embed_patch(patch.view());
            let mut row = row;
            row.assign(&e);
        }
        Ok(out)
    }

    /// Embeds frames in parallel and concatenates them in frame order.
    pub fn encode_video(&self, frames: &[RgbImage]) -> Result<VisualTokenSet, EncoderError> {
        let d = self.config.d_model;
        if frames.is_empty() {
            return Ok(VisualTokenSet {
                tokens: Array2::zeros((0, d)),
                provenance: Vec::new(),
                n_frames: 0,
                n_patches: 0,
            });
        }
        let dims = frames[0].dimensions();
        if frames.iter().any(|f| f.dimensions() != dims) {
            return Err(EncoderError::MixedFrameSizes);
        }
        let n_patches = self.patches_per_frame(dims.0, dims.1)?;
        let per_frame: Vec<Array2<f64>> = frames
            .par_iter()
            .map(|f| self.patch_embed(f))
            .collect::<Result<_, _>>()?;
        let mut tokens = Array2::zeros((frames.len() * n_patches, d));
        let mut provenance = Vec::with_capacity(frames.len() * n_patches);
        for (frame, emb) in per_frame.iter().enumerate() {
            for (patch, row) in emb.rows().into_iter().enumerate() {
                tokens.row_mut(frame * n_patches + patch).assign(&row);
                provenance.push(TokenSource { frame, patch });
            }
        }
        Ok(VisualTokenSet {
            tokens,
            provenance,
            n_frames: frames.len(),
            n_patches,
        })
    }
}
