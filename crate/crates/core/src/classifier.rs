//! Cosine-similarity classification head.
//!
//! The head holds one raw weight row per foreground class plus a final
//! background row, and no bias. Logits are `alpha * <w_c / |w_c|, z>` for a
//! unit embedding `z`, so each lies in `[-alpha, alpha]`.

use std::collections::BTreeMap;

use log::{info, warn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms below this are treated as zero.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub vector: Vec<f64>,
    pub degenerate: bool,
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `f / |f|`, or the zero vector flagged as degenerate when `|f| < 1e-12`.
pub fn normalize_embedding(f: &[f64]) -> Normalized {
    let n = l2_norm(f);
    if n < NORM_EPS || !n.is_finite() {
        Normalized { vector: vec![0.0; f.len()], degenerate: true }
    } else {
        Normalized { vector: f.iter().map(|v| v / n).collect(), degenerate: false }
    }
}

/// Backpropagates through `z = f / |f|`: `df = (dz - z (z . dz)) / |f|`.
pub fn normalize_backward(f: &[f64], dz: &[f64]) -> Vec<f64> {
    let n = l2_norm(f);
    if n < NORM_EPS {
        return vec![0.0; f.len()];
    }
    let z: Vec<f64> = f.iter().map(|v| v / n).collect();
    let proj = dot(&z, dz);
    dz.iter().zip(&z).map(|(d, zi)| (d - zi * proj) / n).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineHead {
    num_foreground: usize,
    dim: usize,
    /// `(K + 1) x d`, row `K` is background.
    weights: Vec<f64>,
    logit_scale: f64,
}

impl CosineHead {
    pub fn new(num_foreground: usize, dim: usize, logit_scale: f64, weights: Vec<f64>) -> Result<Self> {
        if !(logit_scale > 0.0 && logit_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("logit scale must be positive, got {logit_scale}")));
        }
        if weights.len() != (num_foreground + 1) * dim {
            return Err(Error::DimensionMismatch(format!(
                "head expects {} weights for {} classes x {dim}, got {}",
                (num_foreground + 1) * dim,
                num_foreground + 1,
                weights.len()
            )));
        }
        Ok(CosineHead { num_foreground, dim, weights, logit_scale })
    }

    pub fn random<R: Rng>(num_foreground: usize, dim: usize, logit_scale: f64, rng: &mut R) -> Result<Self> {
        let weights = (0..(num_foreground + 1) * dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Self::new(num_foreground, dim, logit_scale, weights)
    }

    pub fn num_foreground(&self) -> usize {
        self.num_foreground
    }

    pub fn num_rows(&self) -> usize {
        self.num_foreground + 1
    }

    pub fn background_index(&self) -> usize {
        self.num_foreground
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn logit_scale(&self) -> f64 {
        self.logit_scale
    }

    pub fn set_logit_scale(&mut self, alpha: f64) -> Result<()> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("logit scale must be positive, got {alpha}")));
        }
        self.logit_scale = alpha;
        Ok(())
    }

    pub fn row(&self, class: usize) -> &[f64] {
        &self.weights[class * self.dim..(class + 1) * self.dim]
    }

    pub fn raw_weights(&self) -> &[f64] {
        &self.weights
    }

    pub(crate) fn raw_weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    /// Unit rows `w_c / |w_c|`; zero rows stay zero.
    pub fn normalized_rows(&self) -> Vec<Vec<f64>> {
        self.weights.chunks_exact(self.dim).map(|r| normalize_embedding(r).vector).collect()
    }

    fn with_row(&self, class: usize, row: &[f64]) -> Self {
        let mut next = self.clone();
        next.weights[class * self.dim..(class + 1) * self.dim].copy_from_slice(row);
        next
    }
}

/// `logit[b][c] = alpha * <w_c / |w_c|, z_b>` for every row of the head.
pub fn cosine_logits(z: &[Vec<f64>], head: &CosineHead) -> Result<Vec<Vec<f64>>> {
    let rows = head.normalized_rows();
    z.iter()
        .map(|zb| {
            if zb.len() != head.dim {
                return Err(Error::DimensionMismatch(format!(
                    "embedding has dimension {}, head expects {}",
                    zb.len(),
                    head.dim
                )));
            }
            Ok(rows.iter().map(|w| head.logit_scale * dot(w, zb)).collect())
        })
        .collect()
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn normalized_mean(class_id: usize, embeddings: &[Vec<f64>], dim: usize) -> Result<Vec<f64>> {
    if embeddings.is_empty() {
        return Err(Error::InvalidArgument(format!("class {class_id} has no embeddings")));
    }
    let mut mean = vec![0.0; dim];
    for e in embeddings {
        if e.len() != dim {
            return Err(Error::DimensionMismatch(format!("embedding of dimension {} for head of {dim}", e.len())));
        }
        for (m, v) in mean.iter_mut().zip(e) {
            *m += v;
        }
    }
    if let [single] = embeddings {
        if (l2_norm(single) - 1.0).abs() < 1e-12 {
            return Ok(single.clone());
        }
    }
    let n = embeddings.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let normalized = normalize_embedding(&mean);
    if normalized.degenerate {
        return Err(Error::DegenerateMean { class_id });
    }
    Ok(normalized.vector)
}

/// Sets each novel row to the normalized mean of its (normalized) shot
/// embeddings. A single unit-norm shot is copied verbatim. Other rows are
/// copied unchanged.
pub fn imprint_novel_weights(head: &CosineHead, shots: &BTreeMap<usize, Vec<Vec<f64>>>) -> Result<CosineHead> {
    let mut next = head.clone();
    for (&class_id, embeddings) in shots {
        if class_id >= head.num_foreground {
            return Err(Error::InvalidArgument(format!("class {class_id} is not a foreground class")));
        }
        let row = normalized_mean(class_id, embeddings, head.dim)?;
        next = next.with_row(class_id, &row);
    }
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSource {
    Base,
    Novel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundSample {
    pub source: SampleSource,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackgroundPoolStats {
    pub from_base: usize,
    pub from_novel: usize,
}

/// Re-infers the background row from background proposals pooled over base
/// and novel images, with the same mean-then-normalize rule as imprinting.
pub fn infer_background_weight(
    head: &CosineHead,
    pool: &[BackgroundSample],
) -> Result<(CosineHead, BackgroundPoolStats)> {
    let stats = BackgroundPoolStats {
        from_base: pool.iter().filter(|s| s.source == SampleSource::Base).count(),
        from_novel: pool.iter().filter(|s| s.source == SampleSource::Novel).count(),
    };
    if stats.from_base == 0 || stats.from_novel == 0 {
        warn!("background pool is not drawn from both splits (base {}, novel {})", stats.from_base, stats.from_novel);
    } else {
        info!("background pool: {} base, {} novel", stats.from_base, stats.from_novel);
    }
    let embeddings: Vec<Vec<f64>> = pool.iter().map(|s| s.embedding.clone()).collect();
    let bg = head.background_index();
    let row = normalized_mean(bg, &embeddings, head.dim)?;
    Ok((head.with_row(bg, &row), stats))
}
