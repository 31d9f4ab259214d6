//! Training objectives over normalized embeddings and normalized class rows.
//!
//! Every loss is a function of the similarity matrix `S[b][c] = z_b . w_c`
//! (unit `z_b`, unit `w_c`), so the analytic gradient is assembled as
//! `dS`, then pushed to `z` and to the raw head rows.
//!
//! * `L_cls`: mean softmax cross-entropy of `alpha * S` over active classes.
//! * `L_bg`: background samples keep the background row above the most
//!   responsive foreground row by `m`; foreground samples keep their own row
//!   above the background row by `m`.
//! * `L_sp`: foreground samples keep their own row above the most responsive
//!   row of the other pool (base vs novel) by `m`.
//!
//! Hinges are active only for strictly positive arguments, so the
//! subgradient at the kink is zero.

use serde::{Deserialize, Serialize};

use crate::classifier::{dot, normalize_backward, CosineHead};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassRole {
    Base,
    Novel,
    Background,
}

/// Normalized embeddings with labels in `0..=K` (`K` is background) and the
/// active class pools. Classes outside both pools take no part in any loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    embeddings: Vec<Vec<f64>>,
    labels: Vec<usize>,
    roles: Vec<ClassRole>,
    base_classes: Vec<usize>,
    novel_classes: Vec<usize>,
    num_foreground: usize,
}

impl LabeledBatch {
    pub fn new(
        embeddings: Vec<Vec<f64>>,
        labels: Vec<usize>,
        base_classes: Vec<usize>,
        novel_classes: Vec<usize>,
        num_foreground: usize,
    ) -> Result<Self> {
        if embeddings.len() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} embeddings but {} labels",
                embeddings.len(),
                labels.len()
            )));
        }
        if let Some(first) = embeddings.first() {
            if embeddings.iter().any(|e| e.len() != first.len()) {
                return Err(Error::DimensionMismatch("embeddings have mixed dimensions".into()));
            }
        }
        if let Some(c) = base_classes.iter().find(|c| novel_classes.contains(c)) {
            return Err(Error::InvalidArgument(format!("class {c} is both base and novel")));
        }
        if let Some(c) = base_classes.iter().chain(&novel_classes).find(|&&c| c >= num_foreground) {
            return Err(Error::InvalidArgument(format!("class {c} is not a foreground class")));
        }
        let roles = labels
            .iter()
            .map(|&y| {
                if y == num_foreground {
                    Ok(ClassRole::Background)
                } else if base_classes.contains(&y) {
                    Ok(ClassRole::Base)
                } else if novel_classes.contains(&y) {
                    Ok(ClassRole::Novel)
                } else {
                    Err(Error::InvalidArgument(format!("label {y} is not an active class")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LabeledBatch { embeddings, labels, roles, base_classes, novel_classes, num_foreground })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn embeddings(&self) -> &[Vec<f64>] {
        &self.embeddings
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn roles(&self) -> &[ClassRole] {
        &self.roles
    }

    pub fn base_classes(&self) -> &[usize] {
        &self.base_classes
    }

    pub fn novel_classes(&self) -> &[usize] {
        &self.novel_classes
    }

    fn active_rows(&self) -> Vec<usize> {
        let mut rows: Vec<usize> = self.base_classes.iter().chain(&self.novel_classes).copied().collect();
        rows.sort_unstable();
        rows.push(self.num_foreground);
        rows
    }
}

/// Which template is positive in the background-suppression hinge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BgLossForm {
    /// Background samples favor the background row, foreground samples
    /// favor their own row.
    #[default]
    Semantic,
    /// Templates swapped: background samples favor the most responsive
    /// foreground row, foreground samples favor the background row.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub margin: f64,
    pub bg_form: BgLossForm,
    /// Divide each hinge sum by the number of samples it ranges over.
    pub mean_hinges: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { margin: 0.2, bg_form: BgLossForm::Semantic, mean_hinges: false }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::InvalidArgument(format!("margin must be positive, got {}", self.margin)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub bg: f64,
    pub sp: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.cls + self.bg + self.sp
    }
}

/// `dL/dz` per sample and `dL/dW` for the raw head rows (`(K + 1) x d`).
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    pub embeddings: Vec<Vec<f64>>,
    pub head: Vec<f64>,
}

/// `max(m - pos + neg, 0)`.
pub fn hinge(margin: f64, pos: f64, neg: f64) -> f64 {
    (margin - pos + neg).max(0.0)
}

type Sims = Vec<Vec<f64>>;

fn similarities(batch: &LabeledBatch, head: &CosineHead) -> Result<(Sims, Vec<Vec<f64>>)> {
    if head.num_foreground() != batch.num_foreground {
        return Err(Error::DimensionMismatch(format!(
            "batch has {} foreground classes, head has {}",
            batch.num_foreground,
            head.num_foreground()
        )));
    }
    if let Some(e) = batch.embeddings.first() {
        if e.len() != head.dim() {
            return Err(Error::DimensionMismatch(format!(
                "embedding has dimension {}, head expects {}",
                e.len(),
                head.dim()
            )));
        }
    }
    let rows = head.normalized_rows();
    let s = batch.embeddings.iter().map(|z| rows.iter().map(|w| dot(w, z)).collect()).collect();
    Ok((s, rows))
}

/// Highest-responding class among `pool`; ties go to the first listed.
fn best_of(s: &[f64], pool: &[usize]) -> Option<usize> {
    pool.iter().copied().fold(None, |best, c| match best {
        Some(b) if s[b] >= s[c] => Some(b),
        _ => Some(c),
    })
}

fn cls_term(batch: &LabeledBatch, s: &Sims, alpha: f64, mut ds: Option<&mut Sims>) -> f64 {
    let active = batch.active_rows();
    let n = batch.len() as f64;
    let mut total = 0.0;
    for (b, &y) in batch.labels.iter().enumerate() {
        let logits: Vec<f64> = active.iter().map(|&c| alpha * s[b][c]).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - alpha * s[b][y];
        if let Some(ds) = ds.as_deref_mut() {
            for (&c, l) in active.iter().zip(&logits) {
                let p = (l - lse).exp();
                let target = if c == y { 1.0 } else { 0.0 };
                ds[b][c] += alpha * (p - target) / n;
            }
        }
    }
    total / n
}

fn add_hinge(margin: f64, s: &[f64], pos: usize, neg: usize, weight: f64, ds: Option<&mut Vec<f64>>) -> f64 {
    let arg = margin - s[pos] + s[neg];
    if arg > 0.0 {
        if let Some(ds) = ds {
            ds[pos] -= weight;
            ds[neg] += weight;
        }
        arg * weight
    } else {
        0.0
    }
}

fn bg_term(batch: &LabeledBatch, s: &Sims, cfg: &LossConfig, mut ds: Option<&mut Sims>) -> f64 {
    let fg: Vec<usize> = {
        let mut v: Vec<usize> = batch.base_classes.iter().chain(&batch.novel_classes).copied().collect();
        v.sort_unstable();
        v
    };
    if fg.is_empty() || batch.is_empty() {
        return 0.0;
    }
    let k = batch.num_foreground;
    let weight = if cfg.mean_hinges { 1.0 / batch.len() as f64 } else { 1.0 };
    let mut total = 0.0;
    for (b, (&y, role)) in batch.labels.iter().zip(&batch.roles).enumerate() {
        let (own, other) =
            if *role == ClassRole::Background { (k, best_of(&s[b], &fg).expect("nonempty")) } else { (y, k) };
        let (pos, neg) = match cfg.bg_form {
            BgLossForm::Semantic => (own, other),
            BgLossForm::Literal => (other, own),
        };
        total += add_hinge(cfg.margin, &s[b], pos, neg, weight, ds.as_deref_mut().map(|d| &mut d[b]));
    }
    total
}

fn sp_term(batch: &LabeledBatch, s: &Sims, cfg: &LossConfig, mut ds: Option<&mut Sims>) -> f64 {
    if batch.base_classes.is_empty() || batch.novel_classes.is_empty() {
        return 0.0;
    }
    let foreground = batch.roles.iter().filter(|r| **r != ClassRole::Background).count();
    if foreground == 0 {
        return 0.0;
    }
    let weight = if cfg.mean_hinges { 1.0 / foreground as f64 } else { 1.0 };
    let mut total = 0.0;
    for (b, (&y, role)) in batch.labels.iter().zip(&batch.roles).enumerate() {
        let competitors = match role {
            ClassRole::Base => &batch.novel_classes,
            ClassRole::Novel => &batch.base_classes,
            ClassRole::Background => continue,
        };
        let neg = best_of(&s[b], competitors).expect("nonempty");
        total += add_hinge(cfg.margin, &s[b], y, neg, weight, ds.as_deref_mut().map(|d| &mut d[b]));
    }
    total
}

/// Mean cross-entropy of `softmax(alpha * S)` over the active classes.
pub fn loss_cls(batch: &LabeledBatch, head: &CosineHead) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("cross-entropy over an empty batch".into()));
    }
    let (s, _) = similarities(batch, head)?;
    Ok(cls_term(batch, &s, head.logit_scale(), None))
}

pub fn loss_bg(batch: &LabeledBatch, head: &CosineHead, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    let (s, _) = similarities(batch, head)?;
    Ok(bg_term(batch, &s, cfg, None))
}

pub fn loss_sp(batch: &LabeledBatch, head: &CosineHead, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    let (s, _) = similarities(batch, head)?;
    Ok(sp_term(batch, &s, cfg, None))
}

pub fn loss_total(batch: &LabeledBatch, head: &CosineHead, cfg: &LossConfig) -> Result<LossBreakdown> {
    Ok(LossBreakdown { cls: loss_cls(batch, head)?, bg: loss_bg(batch, head, cfg)?, sp: loss_sp(batch, head, cfg)? })
}

/// Loss components and the gradient of their sum.
pub fn loss_total_with_grad(
    batch: &LabeledBatch,
    head: &CosineHead,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, LossGradient)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("cross-entropy over an empty batch".into()));
    }
    cfg.validate()?;
    let (s, rows) = similarities(batch, head)?;
    let mut ds: Sims = vec![vec![0.0; head.num_rows()]; batch.len()];
    let parts = LossBreakdown {
        cls: cls_term(batch, &s, head.logit_scale(), Some(&mut ds)),
        bg: bg_term(batch, &s, cfg, Some(&mut ds)),
        sp: sp_term(batch, &s, cfg, Some(&mut ds)),
    };
    let d = head.dim();
    let d_z: Vec<Vec<f64>> = ds
        .iter()
        .map(|row| {
            let mut g = vec![0.0; d];
            for (c, &w) in row.iter().enumerate() {
                if w != 0.0 {
                    g.iter_mut().zip(&rows[c]).for_each(|(a, r)| *a += w * r);
                }
            }
            g
        })
        .collect();
    let mut d_head = Vec::with_capacity(head.num_rows() * d);
    for (c, _) in rows.iter().enumerate() {
        let mut d_row = vec![0.0; d];
        for (b, z) in batch.embeddings.iter().enumerate() {
            let w = ds[b][c];
            if w != 0.0 {
                d_row.iter_mut().zip(z).for_each(|(a, v)| *a += w * v);
            }
        }
        d_head.extend(normalize_backward(head.row(c), &d_row));
    }
    Ok((parts, LossGradient { embeddings: d_z, head: d_head }))
}
