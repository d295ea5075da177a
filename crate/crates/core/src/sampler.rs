//! Safety-aware event segmentation and per-event frame sampling.
//!
//! Boundaries come from a mean-absolute-difference detector over consecutive
//! frames. Events shorter than `min_len` are folded into their left
//! neighbour (the first event, having none, is folded into the right).

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_THRESHOLD: f64 = 0.3;
pub const DEFAULT_MIN_LEN: usize = 3;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("frame sequence is empty")]
    EmptySequence,
    #[error("frame {index} is {got:?}, expected {expected:?}")]
    FrameSize {
        index: usize,
        got: (u32, u32),
        expected: (u32, u32),
    },
    #[error("min_len must be at least 1")]
    InvalidMinLen,
    #[error("threshold {0} is outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("frame directory: {0}")]
    FrameDir(String),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot decode {path}: {source}")]
    Decode { path: PathBuf, source: image::ImageError },
}

/// Ordered RGB frames sharing one size.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    frames: Vec<RgbImage>,
    pub fps: f64,
}

impl FrameSequence {
    pub fn new(frames: Vec<RgbImage>, fps: f64) -> Result<Self, SamplerError> {
        let first = frames.first().ok_or(SamplerError::EmptySequence)?;
        let expected = first.dimensions();
        for (index, f) in frames.iter().enumerate() {
            if f.dimensions() != expected {
                return Err(SamplerError::FrameSize {
                    index,
                    got: f.dimensions(),
                    expected,
                });
            }
        }
        Ok(Self { frames, fps })
    }

    pub fn frames(&self) -> &[RgbImage] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dimensions(&self) -> (u32, u32) {
        self.frames[0].dimensions()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventSegment {
    pub start: usize,
    pub end: usize,
    pub sampled_frame: usize,
}

impl EventSegment {
    fn new(start: usize, end: usize) -> Self {
        Self {
            start,
            end,
            sampled_frame: midpoint(start, end),
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

fn midpoint(start: usize, end: usize) -> usize {
    (start + end) / 2
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerParams {
    pub threshold: f64,
    pub min_len: usize,
}

impl Default for SamplerParams {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            min_len: DEFAULT_MIN_LEN,
        }
    }
}

/// Mean absolute per-channel difference of two equally sized frames, in `[0, 1]`.
pub fn frame_dissimilarity(a: &RgbImage, b: &RgbImage) -> f64 {
    debug_assert_eq!(a.dimensions(), b.dimensions());
    let total: u64 = a
        .as_raw()
        .iter()
        .zip(b.as_raw())
        .map(|(&x, &y)| u64::from(x.abs_diff(y)))
        .sum();
    let n = a.as_raw().len().max(1) as f64;
    total as f64 / (n * 255.0)
}

/// Splits `seq` into contiguous events covering every frame exactly once.
pub fn segment_events(seq: &FrameSequence, threshold: f64, min_len: usize) -> Result<Vec<EventSegment>, SamplerError> {
    if min_len == 0 {
        return Err(SamplerError::InvalidMinLen);
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(SamplerError::InvalidThreshold(threshold));
    }
    let n = seq.len();
    if n == 0 {
        return Err(SamplerError::EmptySequence);
    }
    let candidates: Vec<usize> = (1..n)
        .filter(|&i| frame_dissimilarity(&seq.frames[i - 1], &seq.frames[i]) > threshold)
        .collect();
    let boundaries = merge_short(&candidates, n, min_len);
    Ok(segments_from_boundaries(&boundaries, n))
}

/// Keeps the boundaries whose following segment is at least `min_len` long.
///
/// Walking right to left, a candidate survives if it leaves `min_len` frames
/// before the next kept boundary (or the end) and `min_len` frames after the
/// start. This greedy choice keeps the largest possible number of boundaries,
/// so fewer candidates can never yield more segments.
fn merge_short(candidates: &[usize], n: usize, min_len: usize) -> Vec<usize> {
    let mut kept = Vec::new();
    let mut next = n;
    for &b in candidates.iter().rev() {
        if b >= min_len && next - b >= min_len {
            kept.push(b);
            next = b;
        }
    }
    kept.reverse();
    kept
}

pub fn segments_from_boundaries(boundaries: &[usize], n: usize) -> Vec<EventSegment> {
    let mut out = Vec::with_capacity(boundaries.len() + 1);
    let mut start = 0;
    for &b in boundaries {
        out.push(EventSegment::new(start, b));
        start = b;
    }
    out.push(EventSegment::new(start, n));
    out
}

/// Interior boundaries (segment starts other than 0).
pub fn boundaries(segments: &[EventSegment]) -> Vec<usize> {
    segments.iter().skip(1).map(|s| s.start).collect()
}

/// One frame index per event: the middle frame.
pub fn sample_frames(segments: &[EventSegment]) -> Vec<usize> {
    segments.iter().map(|s| midpoint(s.start, s.end)).collect()
}

/// Boundary-detection F1 with a ± `tolerance` frame window.
///
/// Predicted boundaries are matched greedily left to right, each against the
/// first still-unmatched reference boundary in range.
pub fn segmentation_f1(predicted: &[usize], reference: &[usize], tolerance: usize) -> f64 {
    if predicted.is_empty() && reference.is_empty() {
        return 1.0;
    }
    if predicted.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut used = vec![false; reference.len()];
    let mut tp = 0usize;
    for &p in predicted {
        if let Some(k) = (0..reference.len()).find(|&k| !used[k] && p.abs_diff(reference[k]) <= tolerance) {
            used[k] = true;
            tp += 1;
        }
    }
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / predicted.len() as f64;
    let recall = tp as f64 / reference.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameManifest {
    pub fps: f64,
    pub frame_count: usize,
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index}.ppm")
}

/// Reads `frame_<i>.ppm` for `i in 0..frame_count` as listed in `manifest.json`.
pub fn read_frame_dir(dir: &Path) -> Result<FrameSequence, SamplerError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|source| SamplerError::Io {
        path: manifest_path.clone(),
        source,
    })?;
    let manifest: FrameManifest =
        serde_json::from_str(&text).map_err(|e| SamplerError::FrameDir(format!("{}: {e}", manifest_path.display())))?;
    if manifest.frame_count == 0 {
        return Err(SamplerError::EmptySequence);
    }
    let mut frames = Vec::with_capacity(manifest.frame_count);
    for i in 0..manifest.frame_count {
        let path = dir.join(frame_file_name(i));
        let bytes = fs::read(&path).map_err(|source| SamplerError::Io {
            path: path.clone(),
            source,
        })?;
        let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Pnm)
            .map_err(|source| SamplerError::Decode { path, source })?;
        frames.push(img.to_rgb8());
    }
    FrameSequence::new(frames, manifest.fps)
}

pub fn write_frame_dir(dir: &Path, seq: &FrameSequence) -> Result<(), SamplerError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| SamplerError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    for (i, frame) in seq.frames().iter().enumerate() {
        let path = dir.join(frame_file_name(i));
        fs::write(&path, encode_ppm(frame)).map_err(io(&path))?;
    }
    let manifest = FrameManifest {
        fps: seq.fps,
        frame_count: seq.len(),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(io(&path))
}

/// Binary PPM (P6) bytes of a frame.
pub fn encode_ppm(frame: &RgbImage) -> Vec<u8> {
    use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
    use image::ImageEncoder;
    let mut buf = Vec::new();
    PnmEncoder::new(&mut buf)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(
            frame.as_raw(),
            frame.width(),
            frame.height(),
            image::ExtendedColorType::Rgb8,
        )
        .expect("in-memory PPM encoding");
    buf
}

/// Solid-colour frame.
pub fn solid_frame(width: u32, height: u32, rgb: [u8; 3]) -> RgbImage {
    RgbImage::from_pixel(width, height, image::Rgb(rgb))
}

/// `n_dark` black frames followed by `n_light` white frames.
pub fn two_tone_sequence(n_dark: usize, n_light: usize, size: u32) -> FrameSequence {
    let frames = std::iter::repeat_n(solid_frame(size, size, [0, 0, 0]), n_dark)
        .chain(std::iter::repeat_n(solid_frame(size, size, [255, 255, 255]), n_light))
        .collect();
    FrameSequence::new(frames, 25.0).expect("non-empty")
}
