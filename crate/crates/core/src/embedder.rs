//! Deterministic stand-in for a pretrained self-supervised patch encoder.
//!
//! One unit-norm embedding per sub-patch, arranged as a spatial grid of
//! condition tokens. The encoder is frozen and fully determined by its
//! seed, so a real pretrained model can be slotted in behind the same
//! interface later.

use crate::error::{Error, Result};
use crate::imagebuf::ImageTensor;
use crate::rng::derive_rng;
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct EmbedderConfig {
    pub dim: usize,
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self { dim: 32, seed: 17 }
    }
}

/// Spatial grid of unit-norm condition tokens, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionGrid {
    rows: usize,
    cols: usize,
    dim: usize,
    tokens: Vec<f32>,
}

impl ConditionGrid {
    pub fn new(rows: usize, cols: usize, dim: usize, tokens: Vec<f32>) -> Result<Self> {
        if tokens.len() != rows * cols * dim {
            return Err(Error::InvalidDims(format!(
                "{rows}x{cols} grid of dim {dim} needs {} values, got {}",
                rows * cols * dim,
                tokens.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            dim,
            tokens,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn token_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn token(&self, row: usize, col: usize) -> &[f32] {
        let i = (row * self.cols + col) * self.dim;
        &self.tokens[i..i + self.dim]
    }

    /// Tokens as a [rows*cols, dim] tensor.
    pub fn as_tensor(&self) -> Tensor {
        Tensor::new(&[self.rows * self.cols, self.dim], self.tokens.clone())
            .expect("grid buffer is consistent")
    }

    pub fn from_single(token: Vec<f32>) -> Self {
        let dim = token.len();
        Self {
            rows: 1,
            cols: 1,
            dim,
            tokens: token,
        }
    }

    /// Rectangular sub-block of tokens.
    pub fn block(&self, row0: usize, col0: usize, rows: usize, cols: usize) -> Result<Self> {
        if row0 + rows > self.rows || col0 + cols > self.cols {
            return Err(Error::InvalidDims(format!(
                "token block {rows}x{cols}@({row0},{col0}) exceeds grid {}x{}",
                self.rows, self.cols
            )));
        }
        let mut tokens = Vec::with_capacity(rows * cols * self.dim);
        for r in 0..rows {
            for c in 0..cols {
                tokens.extend_from_slice(self.token(row0 + r, col0 + c));
            }
        }
        ConditionGrid::new(rows, cols, self.dim, tokens)
    }

    pub fn max_norm_deviation(&self) -> f64 {
        let mut worst = 0.0f64;
        for r in 0..self.rows {
            for c in 0..self.cols {
                let n: f64 = self
                    .token(r, c)
                    .iter()
                    .map(|&v| (v as f64) * (v as f64))
                    .sum::<f64>()
                    .sqrt();
                worst = worst.max((n - 1.0).abs());
            }
        }
        worst
    }
}

pub struct Embedder {
    cfg: EmbedderConfig,
    /// Per-pixel projection: dim x 3 weights plus dim bias.
    proj: Vec<f32>,
    bias: Vec<f32>,
}

impl Embedder {
    pub fn new(cfg: EmbedderConfig) -> Self {
        let mut rng = derive_rng(cfg.seed, &["embedder-proj"]);
        let proj = (0..cfg.dim * 3).map(|_| rng.sample(StandardNormal)).collect();
        let bias = (0..cfg.dim)
            .map(|_| rng.sample::<f32, _>(StandardNormal) * 0.5)
            .collect();
        Self { cfg, proj, bias }
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim
    }

    /// Single unit-norm embedding: random-project each pixel's RGB, tanh,
    /// mean-pool over pixels, L2-normalize. Each feature is centered by its
    /// response to mid-gray, so embeddings of distinct patches spread out
    /// angularly instead of clustering around a shared bias direction.
    pub fn embed_patch(&self, img: &ImageTensor) -> Vec<f32> {
        let d = self.cfg.dim;
        let n_px = img.height() * img.width();
        let gray: Vec<f64> = (0..d)
            .map(|i| {
                let acc = self.bias[i] as f64
                    + 0.5
                        * (0..3)
                            .map(|k| self.proj[i * 3 + k] as f64)
                            .sum::<f64>();
                acc.tanh()
            })
            .collect();
        let mut pooled = vec![0.0f64; d];
        for px in 0..n_px {
            let rgb = &img.data()[px * 3..px * 3 + 3];
            for i in 0..d {
                let mut acc = self.bias[i] as f64;
                for (k, &v) in rgb.iter().enumerate() {
                    acc += (self.proj[i * 3 + k] as f64) * (v as f64);
                }
                pooled[i] += acc.tanh() - gray[i];
            }
        }
        for v in pooled.iter_mut() {
            *v /= n_px as f64;
        }
        let norm = pooled.iter().map(|&v| v * v).sum::<f64>().sqrt().max(1e-12);
        pooled.iter_mut().for_each(|v| *v /= norm);
        pooled.into_iter().map(|v| v as f32).collect()
    }

    /// Tile the image into rows x cols equal tiles and embed each; tile
    /// (i,j) maps to token (i,j) row-major.
    pub fn embed_grid(&self, img: &ImageTensor, rows: usize, cols: usize) -> Result<ConditionGrid> {
        if rows == 0 || cols == 0 || img.height() % rows != 0 || img.width() % cols != 0 {
            return Err(Error::InvalidDims(format!(
                "image {}x{} not divisible into {rows}x{cols} tiles",
                img.height(),
                img.width()
            )));
        }
        let (th, tw) = (img.height() / rows, img.width() / cols);
        let mut tokens = Vec::with_capacity(rows * cols * self.cfg.dim);
        for r in 0..rows {
            for c in 0..cols {
                let tile = img.crop(r * th, c * tw, th, tw)?;
                tokens.extend_from_slice(&self.embed_patch(&tile));
            }
        }
        ConditionGrid::new(rows, cols, self.cfg.dim, tokens)
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64) * (y as f64)).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}
