//! Training-data construction from base-detector output: IoU grouping of the
//! top-scoring boxes, per-image group-balanced sampling, jitter and
//! ROI-Align-style cropping from the original image.

use log::debug;
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Annotation, Detection};
use crate::error::{Error, Result};
use crate::geometry::{iou_unchecked, jitter_box, BoundingBox};
use crate::image::Image;
use crate::rng::substream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalGroup {
    Foreground,
    FalsePositive,
    Background,
}

impl ProposalGroup {
    pub const ALL: [ProposalGroup; 3] =
        [ProposalGroup::Foreground, ProposalGroup::FalsePositive, ProposalGroup::Background];

    pub fn index(self) -> usize {
        match self {
            ProposalGroup::Foreground => 0,
            ProposalGroup::FalsePositive => 1,
            ProposalGroup::Background => 2,
        }
    }
}

/// Training label for well-localized boxes whose top class is wrong.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MisclassifiedLabel {
    /// Label with the overlapped ground-truth class.
    #[default]
    GroundTruth,
    /// Label as background, like every other false positive.
    Background,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub fg_iou: f64,
    /// Boxes below this IoU with every ground truth are pure background.
    pub bg_iou: f64,
    /// Boxes kept per image, by descending max score.
    pub top_t: usize,
    pub boxes_per_image: usize,
    /// `None` disables jitter.
    pub jitter_scale: Option<f64>,
    pub crop_size: usize,
    pub misclassified_label: MisclassifiedLabel,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            fg_iou: 0.5,
            bg_iou: 0.1,
            top_t: 300,
            boxes_per_image: 32,
            jitter_scale: Some(10.0),
            crop_size: 64,
            misclassified_label: MisclassifiedLabel::GroundTruth,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.bg_iou && self.bg_iou <= self.fg_iou && self.fg_iou <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "IoU thresholds must satisfy 0 <= bg ({}) <= fg ({}) <= 1",
                self.bg_iou, self.fg_iou
            )));
        }
        if self.top_t == 0 || self.boxes_per_image == 0 || self.crop_size == 0 {
            return Err(Error::InvalidArgument("top_t, boxes_per_image and crop_size must be positive".into()));
        }
        if let Some(s) = self.jitter_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidArgument(format!("jitter_scale must be positive, got {s}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupedProposal {
    /// Position in the detection list passed to [`group_proposals`].
    pub index: usize,
    pub bbox: BoundingBox,
    pub predicted_class: usize,
    pub max_iou: f64,
    pub matched_class: Option<usize>,
    pub group: ProposalGroup,
    pub label: usize,
}

/// Max IoU over ground truth and the class of the best match (first wins ties).
pub fn best_match(bbox: &BoundingBox, gt: &[&Annotation]) -> (f64, Option<usize>) {
    let mut best = (0.0, None);
    for a in gt {
        let v = iou_unchecked(bbox, &a.bbox);
        if best.1.is_none() || v > best.0 {
            best = (v, Some(a.class_id));
        }
    }
    best
}

/// Keeps the top-T detections by max score (stable) and assigns each to a
/// group and a training label (`num_classes` is background).
pub fn group_proposals(
    dets: &[&Detection],
    gt: &[&Annotation],
    num_classes: usize,
    cfg: &SamplerConfig,
) -> Vec<GroupedProposal> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].max_score().total_cmp(&dets[a].max_score()));
    order.truncate(cfg.top_t);
    order
        .into_iter()
        .map(|index| {
            let d = dets[index];
            let (max_iou, matched_class) = best_match(&d.bbox, gt);
            let predicted_class = d.top_class().0;
            let (group, label) = if max_iou >= cfg.fg_iou {
                let m = matched_class.expect("positive IoU implies a match");
                if m == predicted_class {
                    (ProposalGroup::Foreground, m)
                } else {
                    let label = match cfg.misclassified_label {
                        MisclassifiedLabel::GroundTruth => m,
                        MisclassifiedLabel::Background => num_classes,
                    };
                    (ProposalGroup::FalsePositive, label)
                }
            } else if max_iou >= cfg.bg_iou {
                (ProposalGroup::FalsePositive, num_classes)
            } else {
                (ProposalGroup::Background, num_classes)
            };
            GroupedProposal { index, bbox: d.bbox, predicted_class, max_iou, matched_class, group, label }
        })
        .collect()
}

/// Per-group box counts for one image: `floor(M / g)` for each of the `g`
/// nonempty groups, remainder handed out in the order false positive,
/// foreground, background. Indexed by [`ProposalGroup::index`].
pub fn group_quotas(m: usize, sizes: [usize; 3]) -> [usize; 3] {
    let nonempty = sizes.iter().filter(|&&s| s > 0).count();
    let mut quotas = [0; 3];
    if nonempty == 0 {
        return quotas;
    }
    let base = m / nonempty;
    let mut rem = m % nonempty;
    for g in 0..3 {
        if sizes[g] > 0 {
            quotas[g] = base;
        }
    }
    for g in [1, 0, 2] {
        if rem > 0 && sizes[g] > 0 {
            quotas[g] += 1;
            rem -= 1;
        }
    }
    quotas
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalCrop {
    pub image_id: String,
    /// Box after jitter.
    pub bbox: BoundingBox,
    pub group: ProposalGroup,
    pub label: usize,
    /// Planar `3 x S x S`.
    pub crop: Vec<f64>,
}

/// ROI-Align-style bilinear crop: output cell `(i, j)` samples the box at
/// `x1 + (j + 0.5) * w / S`, `y1 + (i + 0.5) * h / S`, with pixel `k`
/// centered at `k + 0.5` and borders clamped.
pub fn crop_and_resize(image: &Image, bbox: &BoundingBox, out_size: usize) -> Result<Vec<f64>> {
    bbox.validate()?;
    if bbox.area() < 1.0 {
        return Err(Error::InvalidArgument(format!("box area {} is below one pixel", bbox.area())));
    }
    if out_size == 0 || image.width == 0 || image.height == 0 {
        return Err(Error::InvalidArgument("empty crop or image".into()));
    }
    let s = out_size;
    let axis = |start: f64, extent: f64, len: usize| -> Vec<(usize, usize, f64)> {
        (0..s)
            .map(|j| {
                let u = start + (j as f64 + 0.5) * extent / s as f64 - 0.5;
                let f = u.floor();
                let t = u - f;
                let clamp = |v: f64| v.clamp(0.0, (len - 1) as f64) as usize;
                (clamp(f), clamp(f + 1.0), t)
            })
            .collect()
    };
    let xs = axis(bbox.x1, bbox.width(), image.width);
    let ys = axis(bbox.y1, bbox.height(), image.height);
    let mut out = vec![0.0; 3 * s * s];
    for c in 0..3 {
        for (i, &(y0, y1, ty)) in ys.iter().enumerate() {
            for (j, &(x0, x1, tx)) in xs.iter().enumerate() {
                let p = |y, x| f64::from(image.get(c, y, x));
                let top = p(y0, x0) * (1.0 - tx) + p(y0, x1) * tx;
                let bottom = p(y1, x0) * (1.0 - tx) + p(y1, x1) * tx;
                out[(c * s + i) * s + j] = top * (1.0 - ty) + bottom * ty;
            }
        }
    }
    Ok(out)
}

/// One image of a batch with its pre-grouped proposals.
#[derive(Debug, Clone, Copy)]
pub struct BatchImage<'a> {
    pub image_id: &'a str,
    pub image: &'a Image,
    pub proposals: &'a [GroupedProposal],
}

/// Indices into `proposals` chosen for one image.
pub fn sample_image<R: Rng>(proposals: &[GroupedProposal], m: usize, rng: &mut R) -> Vec<usize> {
    let mut by_group: [Vec<usize>; 3] = Default::default();
    for (i, p) in proposals.iter().enumerate() {
        by_group[p.group.index()].push(i);
    }
    let quotas = group_quotas(m, [by_group[0].len(), by_group[1].len(), by_group[2].len()]);
    let mut chosen = Vec::with_capacity(m);
    for (members, &q) in by_group.iter().zip(&quotas) {
        if q == 0 {
            continue;
        }
        if members.len() >= q {
            chosen.extend(sample(rng, members.len(), q).into_iter().map(|i| members[i]));
        } else {
            chosen.extend((0..q).map(|_| members[rng.random_range(0..members.len())]));
        }
    }
    chosen
}

/// Samples `M` boxes per image, jitters and crops them. Each batch position
/// draws from its own substream of `seed`, so the result does not depend on
/// scheduling.
pub fn build_batch(images: &[BatchImage<'_>], cfg: &SamplerConfig, seed: u64) -> Result<Vec<ProposalCrop>> {
    cfg.validate()?;
    let per_image: Vec<Result<Vec<ProposalCrop>>> = images
        .par_iter()
        .enumerate()
        .map(|(slot, item)| {
            if item.proposals.is_empty() {
                debug!("image {} has no proposals", item.image_id);
                return Ok(Vec::new());
            }
            let mut rng = substream(seed, &format!("batch/{slot}/{}", item.image_id));
            let size = (item.image.width as f64, item.image.height as f64);
            sample_image(item.proposals, cfg.boxes_per_image, &mut rng)
                .into_iter()
                .map(|i| {
                    let p = &item.proposals[i];
                    let bbox = match cfg.jitter_scale {
                        Some(scale) => jitter_box(&p.bbox, scale, size, &mut rng)?,
                        None => p.bbox,
                    };
                    let bbox = if bbox.area() < 1.0 { p.bbox } else { bbox };
                    Ok(ProposalCrop {
                        image_id: item.image_id.to_string(),
                        bbox,
                        group: p.group,
                        label: p.label,
                        crop: crop_and_resize(item.image, &bbox, cfg.crop_size)?,
                    })
                })
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    for r in per_image {
        out.extend(r?);
    }
    Ok(out)
}
