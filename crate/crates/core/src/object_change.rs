//! Flip and object-change detection from crop embeddings.

use std::collections::VecDeque;

use image::imageops::FilterType;
use image::DynamicImage;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EmbeddingError {
    #[error("embedding dimensions differ ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("embedding has zero norm")]
    ZeroNorm,
    #[error("embedding contains non-finite values")]
    NonFinite,
    #[error("embedding is empty")]
    Empty,
    #[error("cannot decode image: {0}")]
    Image(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f64>,
    pub frame_id: u64,
}

impl Embedding {
    pub fn new(values: Vec<f64>, frame_id: u64) -> Result<Self, EmbeddingError> {
        if values.is_empty() {
            return Err(EmbeddingError::Empty);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        if norm(&values) == 0.0 {
            return Err(EmbeddingError::ZeroNorm);
        }
        Ok(Self { values, frame_id })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, EmbeddingError> {
    if a.len() != b.len() {
        return Err(EmbeddingError::DimensionMismatch(a.len(), b.len()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(EmbeddingError::ZeroNorm);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlipParams {
    /// Number of prior samples compared against.
    pub s: usize,
    /// Similarity threshold.
    pub u: f64,
    /// Sampling cadence in frames.
    pub cadence: u64,
}

impl Default for FlipParams {
    fn default() -> Self {
        Self {
            s: 4,
            u: 0.85,
            cadence: 6,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("invalid flip parameters {0:?}: need s >= 1, 0 < u < 1, cadence >= 1")]
pub struct InvalidFlipParams(pub FlipParams);

impl FlipParams {
    pub fn validate(&self) -> Result<(), InvalidFlipParams> {
        if self.s == 0 || !(self.u > 0.0 && self.u < 1.0) || self.cadence == 0 {
            return Err(InvalidFlipParams(*self));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CropHistory {
    samples: VecDeque<Embedding>,
    s: usize,
    u: f64,
}

impl CropHistory {
    pub fn new(s: usize, u: f64) -> Self {
        Self {
            samples: VecDeque::with_capacity(s),
            s: s.max(1),
            u,
        }
    }

    pub fn from_params(p: &FlipParams) -> Self {
        Self::new(p.s, p.u)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn clear(&mut self) {
        self.samples.clear();
    }

    /// Reports a change when every stored sample is less similar than `u`,
    /// then stores `e`.
    pub fn observe(&mut self, e: Embedding) -> Result<bool, EmbeddingError> {
        let mut changed = !self.samples.is_empty();
        for h in &self.samples {
            if cosine(e.values(), h.values())? >= self.u {
                changed = false;
            }
        }
        if self.samples.len() == self.s {
            self.samples.pop_front();
        }
        self.samples.push_back(e);
        Ok(changed)
    }
}

pub fn observe_crop(mut history: CropHistory, e: Embedding) -> Result<(CropHistory, bool), EmbeddingError> {
    let changed = history.observe(e)?;
    Ok((history, changed))
}

/// Per-hand sampling schedule: a baseline when the grasp starts, then one
/// sample every `cadence` frames while it lasts.
#[derive(Debug, Clone)]
pub struct GraspSampler {
    history: CropHistory,
    cadence: u64,
    frames_in_grasp: Option<u64>,
}

impl GraspSampler {
    pub fn new(p: &FlipParams) -> Self {
        Self {
            history: CropHistory::from_params(p),
            cadence: p.cadence,
            frames_in_grasp: None,
        }
    }

    /// Advances one frame. Returns whether a crop should be sampled now.
    pub fn step(&mut self, in_grasp: bool, new_grasp: bool) -> bool {
        if !in_grasp {
            self.frames_in_grasp = None;
            self.history.clear();
            return false;
        }
        if new_grasp || self.frames_in_grasp.is_none() {
            self.history.clear();
            self.frames_in_grasp = Some(0);
            return true;
        }
        let n = self.frames_in_grasp.as_mut().expect("set above");
        *n += 1;
        n.is_multiple_of(self.cadence)
    }

    pub fn observe(&mut self, e: Embedding) -> Result<bool, EmbeddingError> {
        self.history.observe(e)
    }

    pub fn history(&self) -> &CropHistory {
        &self.history
    }
}

/// 16x16 luminance thumbnail, flattened and L2-normalized.
pub fn builtin_embed(image: &DynamicImage, frame_id: u64) -> Result<Embedding, EmbeddingError> {
    let small = image.resize_exact(16, 16, FilterType::Triangle).to_luma32f();
    let values: Vec<f64> = small.pixels().map(|p| f64::from(p.0[0])).collect();
    let n = norm(&values);
    if n == 0.0 {
        return Err(EmbeddingError::ZeroNorm);
    }
    Embedding::new(values.iter().map(|v| v / n).collect(), frame_id)
}

pub fn builtin_embed_bytes(bytes: &[u8], frame_id: u64) -> Result<Embedding, EmbeddingError> {
    let img = image::load_from_memory(bytes).map_err(|e| EmbeddingError::Image(e.to_string()))?;
    builtin_embed(&img, frame_id)
}
