//! Two-phase optimization of the correction network.
//!
//! Phase 1 trains the trunk and the base rows of the head on images free of
//! novel objects. Imprinting then writes the novel rows from the k shots
//! and re-infers the background row. Phase 2 fine-tunes everything on base
//! images plus the shot images, the latter oversampled.
//!
//! Gradients are reduced over fixed chunks of the batch in a fixed order,
//! so results do not depend on the number of worker threads.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use log::{info, warn};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{
    cosine_logits, imprint_novel_weights, infer_background_weight, normalize_backward, normalize_embedding,
    BackgroundPoolStats, BackgroundSample, SampleSource,
};
use crate::datamodel::{Annotation, DatasetManifest, Detection, KShotSplit};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{loss_cls, loss_total_with_grad, LabeledBatch, LossBreakdown, LossConfig};
use crate::netcore::{extract_features, CorrectionModel, FeatureExtractorConfig, ModelStage, Trunk};
use crate::rng::{derive_seed, substream};
use crate::sampler::{
    build_batch, crop_and_resize, group_proposals, BatchImage, GroupedProposal, ProposalGroup, SamplerConfig,
};

/// Samples per gradient-reduction chunk.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Images per batch (N); boxes per image (M) live in `sampler`.
    pub images_per_batch: usize,
    pub sampler: SamplerConfig,
    pub extractor: FeatureExtractorConfig,
    pub logit_scale: f64,
    pub loss: LossConfig,
    pub phase1_iterations: usize,
    pub phase2_iterations: usize,
    pub phase1_lr: f64,
    pub phase2_lr: f64,
    /// Phase-1 learning rate is multiplied by `lr_decay_factor` from this
    /// fraction of the iterations on.
    pub lr_decay_at: f64,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global L2 norm clip on the gradient.
    pub grad_clip: Option<f64>,
    /// Draw weight of a shot image relative to a base image in phase 2.
    pub novel_oversampling: f64,
    /// Share of novel-free images held out for evaluation snapshots.
    pub holdout_fraction: f64,
    pub eval_every: usize,
    /// Crops drawn from each source for background-row inference.
    pub background_pool_per_source: usize,
    pub reinfer_background: bool,
    /// Keep imprinted novel rows fixed in phase 2.
    pub freeze_imprinted: bool,
    /// Add each selected shot's ground-truth box to its image's proposals.
    pub include_shot_boxes: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            images_per_batch: 4,
            sampler: SamplerConfig::default(),
            extractor: FeatureExtractorConfig::default(),
            logit_scale: 16.0,
            loss: LossConfig { mean_hinges: true, ..Default::default() },
            phase1_iterations: 2000,
            phase2_iterations: 500,
            phase1_lr: 0.01,
            phase2_lr: 0.001,
            lr_decay_at: 2.0 / 3.0,
            lr_decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            grad_clip: None,
            novel_oversampling: 4.0,
            holdout_fraction: 0.1,
            eval_every: 250,
            background_pool_per_source: 64,
            reinfer_background: true,
            freeze_imprinted: false,
            include_shot_boxes: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        self.extractor.validate()?;
        self.loss.validate()?;
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.sampler.crop_size != self.extractor.input_size {
            return bad(format!(
                "sampler crop_size {} differs from extractor input_size {}",
                self.sampler.crop_size, self.extractor.input_size
            ));
        }
        if self.images_per_batch == 0 || self.eval_every == 0 {
            return bad("images_per_batch and eval_every must be positive".into());
        }
        let positive = [self.logit_scale, self.phase1_lr, self.phase2_lr, self.novel_oversampling];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return bad("logit_scale, learning rates and novel_oversampling must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("momentum must lie in [0, 1) and weight_decay be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) || !(0.0..=1.0).contains(&self.lr_decay_at) {
            return bad("holdout_fraction and lr_decay_at must lie in [0, 1)".into());
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return bad("grad_clip must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub lr: f64,
    pub samples: usize,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    /// Iterations completed when the snapshot was taken.
    pub iteration: usize,
    pub base_loss_cls: Option<f64>,
    pub base_accuracy: Option<f64>,
    /// Held-out novel objects cropped at their ground-truth boxes.
    pub novel_accuracy: Option<f64>,
    /// Detector boxes matched to held-out novel objects.
    #[serde(default)]
    pub novel_proposal_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub phase: ModelStage,
    pub iterations: Vec<IterationRecord>,
    pub snapshots: Vec<EvalSnapshot>,
    pub training_images: usize,
    pub holdout_images: usize,
    pub wall_time_secs: f64,
    pub checkpoint_path: Option<String>,
}

impl TrainReport {
    pub fn first_snapshot(&self) -> Option<&EvalSnapshot> {
        self.snapshots.first()
    }

    pub fn last_snapshot(&self) -> Option<&EvalSnapshot> {
        self.snapshots.last()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprintReport {
    pub shots_per_class: BTreeMap<usize, usize>,
    pub background: Option<BackgroundPoolStats>,
}

/// Training images with their rasters (in manifest order) and the base
/// detector's output on them.
#[derive(Debug, Clone, Copy)]
pub struct TrainingSet<'a> {
    pub manifest: &'a DatasetManifest,
    pub images: &'a [Image],
    pub detections: &'a [Detection],
}

impl<'a> TrainingSet<'a> {
    pub fn new(manifest: &'a DatasetManifest, images: &'a [Image], detections: &'a [Detection]) -> Result<Self> {
        if images.len() != manifest.images().len() {
            return Err(Error::DimensionMismatch(format!(
                "{} rasters for {} manifest images",
                images.len(),
                manifest.images().len()
            )));
        }
        for (rec, img) in manifest.images().iter().zip(images) {
            if img.width != rec.width as usize || img.height != rec.height as usize {
                return Err(Error::validation(format!("image {}", rec.id), "raster size differs from manifest"));
            }
        }
        for d in detections {
            if manifest.image(&d.image_id).is_none() {
                return Err(Error::validation(format!("detection on {}", d.image_id), "unknown image_id"));
            }
            d.validate(manifest.num_classes())?;
        }
        Ok(TrainingSet { manifest, images, detections })
    }
}

/// How the training images are used.
#[derive(Debug, Clone)]
struct Partition {
    /// Novel-free images used for training.
    base_train: Vec<usize>,
    /// Novel-free images held out for snapshots.
    holdout: Vec<usize>,
    /// Images containing at least one selected shot.
    shot_images: Vec<usize>,
    /// Novel annotations that are neither shots nor on shot images.
    novel_eval: Vec<Annotation>,
}

fn partition(data: &TrainingSet<'_>, split: &KShotSplit, cfg: &TrainConfig) -> Partition {
    let novel: BTreeSet<usize> = split.novel_class_ids.iter().copied().collect();
    let selected: BTreeSet<u64> = split.selected_novel_annotation_ids.iter().copied().collect();
    let by_image = data.manifest.annotations_by_image();
    let mut clean = Vec::new();
    let mut shot_images = Vec::new();
    for (i, rec) in data.manifest.images().iter().enumerate() {
        let anns = by_image.get(rec.id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        if anns.iter().any(|a| selected.contains(&a.id)) {
            shot_images.push(i);
        } else if !anns.iter().any(|a| novel.contains(&a.class_id)) {
            clean.push(i);
        }
    }
    let mut shuffled = clean.clone();
    shuffled.shuffle(&mut substream(cfg.seed, "holdout"));
    let n_hold = if clean.len() >= 2 {
        ((clean.len() as f64 * cfg.holdout_fraction).ceil() as usize).min(clean.len() - 1)
    } else {
        0
    };
    let mut holdout: Vec<usize> = shuffled[..n_hold].to_vec();
    holdout.sort_unstable();
    let base_train: Vec<usize> = clean.iter().copied().filter(|i| !holdout.contains(i)).collect();
    let shot_ids: BTreeSet<&str> = shot_images.iter().map(|&i| data.manifest.images()[i].id.as_str()).collect();
    let novel_eval = data
        .manifest
        .annotations()
        .iter()
        .filter(|a| novel.contains(&a.class_id) && !selected.contains(&a.id) && !shot_ids.contains(a.image_id.as_str()))
        .cloned()
        .collect();
    Partition { base_train, holdout, shot_images, novel_eval }
}

/// Grouped proposals for each listed image. On shot images only base
/// annotations and the selected shots count as ground truth.
fn proposals_for(
    data: &TrainingSet<'_>,
    split: &KShotSplit,
    images: &[usize],
    cfg: &TrainConfig,
    with_shot_boxes: bool,
) -> BTreeMap<usize, Vec<GroupedProposal>> {
    let k = data.manifest.num_classes();
    let selected: BTreeSet<u64> = split.selected_novel_annotation_ids.iter().copied().collect();
    let by_image = data.manifest.annotations_by_image();
    let dets = crate::datamodel::group_by_image(data.detections);
    images
        .iter()
        .map(|&i| {
            let id = data.manifest.images()[i].id.as_str();
            let gt: Vec<&Annotation> = by_image
                .get(id)
                .map(Vec::as_slice)
                .unwrap_or(&[])
                .iter()
                .copied()
                .filter(|a| !split.is_novel(a.class_id) || selected.contains(&a.id))
                .collect();
            let ds = dets.get(id).map(Vec::as_slice).unwrap_or(&[]);
            let mut props = group_proposals(ds, &gt, k, &cfg.sampler);
            if with_shot_boxes {
                for a in gt.iter().filter(|a| selected.contains(&a.id)) {
                    props.push(GroupedProposal {
                        index: usize::MAX,
                        bbox: a.bbox,
                        predicted_class: a.class_id,
                        max_iou: 1.0,
                        matched_class: Some(a.class_id),
                        group: ProposalGroup::Foreground,
                        label: a.class_id,
                    });
                }
            }
            (i, props)
        })
        .collect()
}

fn check_model(model: &CorrectionModel, data: &TrainingSet<'_>, split: &KShotSplit, cfg: &TrainConfig) -> Result<()> {
    if model.num_classes() != data.manifest.num_classes() {
        return Err(Error::DimensionMismatch(format!(
            "model has {} classes, manifest {}",
            model.num_classes(),
            data.manifest.num_classes()
        )));
    }
    if model.config.input_size != cfg.sampler.crop_size {
        return Err(Error::InvalidArgument(format!(
            "model input size {} differs from crop size {}",
            model.config.input_size, cfg.sampler.crop_size
        )));
    }
    let k = data.manifest.num_classes();
    let mut all: Vec<usize> = split.base_class_ids.iter().chain(&split.novel_class_ids).copied().collect();
    all.sort_unstable();
    if all != (0..k).collect::<Vec<_>>() {
        return Err(Error::InvalidArgument("split must partition the manifest classes".into()));
    }
    Ok(())
}

/// Fixed evaluation crops, computed once per phase.
struct HoldoutSet {
    base_crops: Vec<Vec<f64>>,
    base_labels: Vec<usize>,
    novel_crops: Vec<Vec<f64>>,
    novel_labels: Vec<usize>,
    proposal_crops: Vec<Vec<f64>>,
    proposal_labels: Vec<usize>,
}

fn holdout_set(data: &TrainingSet<'_>, split: &KShotSplit, part: &Partition, cfg: &TrainConfig) -> Result<HoldoutSet> {
    let props = proposals_for(data, split, &part.holdout, cfg, false);
    let items: Vec<BatchImage<'_>> = part
        .holdout
        .iter()
        .map(|&i| BatchImage { image_id: &data.manifest.images()[i].id, image: &data.images[i], proposals: &props[&i] })
        .collect();
    let sampler = SamplerConfig { jitter_scale: None, ..cfg.sampler.clone() };
    let crops = build_batch(&items, &sampler, derive_seed(cfg.seed, "holdout/batch"))?;
    let index: BTreeMap<&str, usize> =
        data.manifest.images().iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
    let mut novel_crops = Vec::new();
    let mut novel_labels = Vec::new();
    for a in &part.novel_eval {
        novel_crops.push(crop_and_resize(&data.images[index[a.image_id.as_str()]], &a.bbox, cfg.sampler.crop_size)?);
        novel_labels.push(a.class_id);
    }
    let eval_ids: BTreeSet<u64> = part.novel_eval.iter().map(|a| a.id).collect();
    let eval_images: BTreeSet<&str> = part.novel_eval.iter().map(|a| a.image_id.as_str()).collect();
    let by_image = data.manifest.annotations_by_image();
    let dets = crate::datamodel::group_by_image(data.detections);
    let mut proposal_crops = Vec::new();
    let mut proposal_labels = Vec::new();
    for id in eval_images {
        let gt = by_image.get(id).map(Vec::as_slice).unwrap_or(&[]);
        let ds = dets.get(id).map(Vec::as_slice).unwrap_or(&[]);
        for p in group_proposals(ds, gt, data.manifest.num_classes(), &cfg.sampler) {
            let Some(c) = p.matched_class.filter(|&c| p.max_iou >= cfg.sampler.fg_iou && split.is_novel(c)) else {
                continue;
            };
            if gt.iter().any(|a| eval_ids.contains(&a.id) && a.class_id == c) {
                proposal_crops.push(crop_and_resize(&data.images[index[id]], &p.bbox, cfg.sampler.crop_size)?);
                proposal_labels.push(c);
            }
        }
    }
    Ok(HoldoutSet {
        base_labels: crops.iter().map(|c| c.label).collect(),
        base_crops: crops.into_iter().map(|c| c.crop).collect(),
        novel_crops,
        novel_labels,
        proposal_crops,
        proposal_labels,
    })
}

fn normalized_embeddings(crops: &[Vec<f64>], model: &CorrectionModel) -> Result<Vec<Vec<f64>>> {
    Ok(extract_features(crops, model)?.iter().map(|f| normalize_embedding(f).vector).collect())
}

fn accuracy(z: &[Vec<f64>], labels: &[usize], model: &CorrectionModel) -> Result<Option<f64>> {
    if z.is_empty() {
        return Ok(None);
    }
    let logits = cosine_logits(z, &model.head)?;
    let hits = logits
        .iter()
        .zip(labels)
        .filter(|(l, &y)| {
            let best = l.iter().enumerate().fold(0, |b, (c, v)| if *v > l[b] { c } else { b });
            best == y
        })
        .count();
    Ok(Some(hits as f64 / z.len() as f64))
}

fn snapshot(
    model: &CorrectionModel,
    hold: &HoldoutSet,
    split: &KShotSplit,
    iteration: usize,
    with_novel: bool,
) -> Result<EvalSnapshot> {
    let k = model.num_classes();
    let (base_loss_cls, base_accuracy) = if hold.base_crops.is_empty() {
        (None, None)
    } else {
        let z = normalized_embeddings(&hold.base_crops, model)?;
        let novel = if with_novel { split.novel_class_ids.clone() } else { Vec::new() };
        let batch = LabeledBatch::new(z.clone(), hold.base_labels.clone(), split.base_class_ids.clone(), novel, k)?;
        (Some(loss_cls(&batch, &model.head)?), accuracy(&z, &hold.base_labels, model)?)
    };
    let (novel_accuracy, novel_proposal_accuracy) = if with_novel {
        (
            accuracy(&normalized_embeddings(&hold.novel_crops, model)?, &hold.novel_labels, model)?,
            accuracy(&normalized_embeddings(&hold.proposal_crops, model)?, &hold.proposal_labels, model)?,
        )
    } else {
        (None, None)
    };
    Ok(EvalSnapshot { iteration, base_loss_cls, base_accuracy, novel_accuracy, novel_proposal_accuracy })
}

/// SGD with momentum over the trunk parameters followed by the head.
struct Optimizer {
    velocity: Vec<f64>,
    momentum: f64,
    weight_decay: f64,
}

impl Optimizer {
    fn new(len: usize, cfg: &TrainConfig) -> Self {
        Optimizer { velocity: vec![0.0; len], momentum: cfg.momentum, weight_decay: cfg.weight_decay }
    }

    fn step(&mut self, model: &mut CorrectionModel, grad: &[f64], lr: f64) {
        let n_trunk = model.params.len();
        let (vt, vh) = self.velocity.split_at_mut(n_trunk);
        let (gt, gh) = grad.split_at(n_trunk);
        let (mu, wd) = (self.momentum, self.weight_decay);
        let update = |w: &mut [f64], v: &mut [f64], g: &[f64]| {
            for ((w, v), g) in w.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = mu * *v + g + wd * *w;
                *w -= lr * *v;
            }
        };
        update(&mut model.params, vt, gt);
        update(model.head.raw_weights_mut(), vh, gh);
    }
}

/// Loss and gradient (trunk parameters, then head rows) for one batch.
fn batch_gradient(
    model: &CorrectionModel,
    trunk: &Trunk<'_>,
    crops: &[Vec<f64>],
    labels: Vec<usize>,
    base: &[usize],
    novel: &[usize],
    loss_cfg: &LossConfig,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let forward: Vec<_> = crops.par_iter().map(|c| trunk.forward(c)).collect();
    let z: Vec<Vec<f64>> = forward.iter().map(|(f, _)| normalize_embedding(f).vector).collect();
    let batch = LabeledBatch::new(z, labels, base.to_vec(), novel.to_vec(), model.num_classes())?;
    let (parts, g) = loss_total_with_grad(&batch, &model.head, loss_cfg)?;
    let n_trunk = model.params.len();
    let chunk_grads: Vec<Vec<f64>> = forward
        .par_chunks(GRAD_CHUNK)
        .zip(g.embeddings.par_chunks(GRAD_CHUNK))
        .map(|(fw, dz)| {
            let mut acc = vec![0.0; n_trunk];
            for ((f, cache), dz) in fw.iter().zip(dz) {
                let df = normalize_backward(f, dz);
                trunk.backward(cache, &df, &mut acc, false);
            }
            acc
        })
        .collect();
    let mut grad = vec![0.0; n_trunk + g.head.len()];
    for cg in &chunk_grads {
        for (a, b) in grad.iter_mut().zip(cg) {
            *a += b;
        }
    }
    grad[n_trunk..].copy_from_slice(&g.head);
    Ok((parts, grad))
}

fn clip(grad: &mut [f64], max_norm: Option<f64>) {
    if let Some(m) = max_norm {
        let n = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if n > m {
            grad.iter_mut().for_each(|g| *g *= m / n);
        }
    }
}

struct PhasePlan<'a> {
    name: &'a str,
    stage: ModelStage,
    iterations: usize,
    lr: Box<dyn Fn(usize) -> f64 + 'a>,
    /// Candidate images with draw weights.
    pool: Vec<usize>,
    weights: Vec<f64>,
    proposals: BTreeMap<usize, Vec<GroupedProposal>>,
    novel_active: bool,
    frozen_rows: Vec<usize>,
}

fn run_phase(
    mut model: CorrectionModel,
    data: &TrainingSet<'_>,
    split: &KShotSplit,
    part: &Partition,
    plan: PhasePlan<'_>,
    cfg: &TrainConfig,
) -> Result<(CorrectionModel, TrainReport)> {
    let start = Instant::now();
    let hold = holdout_set(data, split, part, cfg)?;
    let novel: Vec<usize> = if plan.novel_active { split.novel_class_ids.clone() } else { Vec::new() };
    let mut report = TrainReport {
        phase: plan.stage,
        iterations: Vec::with_capacity(plan.iterations),
        snapshots: vec![snapshot(&model, &hold, split, 0, plan.novel_active)?],
        training_images: plan.pool.len(),
        holdout_images: part.holdout.len(),
        wall_time_secs: 0.0,
        checkpoint_path: None,
    };
    if plan.iterations > 0 && plan.pool.is_empty() {
        return Err(Error::InvalidArgument(format!("{}: no training images", plan.name)));
    }
    let picker = if plan.pool.is_empty() {
        None
    } else {
        Some(WeightedIndex::new(&plan.weights).map_err(|e| Error::InvalidArgument(e.to_string()))?)
    };
    let mut opt = Optimizer::new(model.params.len() + model.head.raw_weights().len(), cfg);
    let d = model.head.dim();
    let n_trunk = model.params.len();
    for it in 0..plan.iterations {
        let batch_seed = derive_seed(cfg.seed, &format!("{}/batch/{it}", plan.name));
        let mut pick_rng = substream(batch_seed, "images");
        let chosen: Vec<usize> = (0..cfg.images_per_batch)
            .map(|_| plan.pool[picker.as_ref().expect("nonempty pool").sample(&mut pick_rng)])
            .collect();
        let items: Vec<BatchImage<'_>> = chosen
            .iter()
            .map(|&i| BatchImage {
                image_id: &data.manifest.images()[i].id,
                image: &data.images[i],
                proposals: &plan.proposals[&i],
            })
            .collect();
        let crops = build_batch(&items, &cfg.sampler, batch_seed)?;
        let lr = (plan.lr)(it);
        if crops.is_empty() {
            warn!("{} iteration {it}: empty batch", plan.name);
            report.iterations.push(IterationRecord { iteration: it, lr, samples: 0, loss: LossBreakdown::default() });
            continue;
        }
        let labels: Vec<usize> = crops.iter().map(|c| c.label).collect();
        let inputs: Vec<Vec<f64>> = crops.into_iter().map(|c| c.crop).collect();
        let trunk = model.trunk()?;
        let (parts, mut grad) =
            batch_gradient(&model, &trunk, &inputs, labels, &split.base_class_ids, &novel, &cfg.loss)?;
        drop(trunk);
        for &r in &plan.frozen_rows {
            grad[n_trunk + r * d..n_trunk + (r + 1) * d].fill(0.0);
        }
        if !parts.total().is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                iteration: it,
                batch_seed,
                detail: format!("loss cls {} bg {} sp {}", parts.cls, parts.bg, parts.sp),
            });
        }
        clip(&mut grad, cfg.grad_clip);
        opt.step(&mut model, &grad, lr);
        report.iterations.push(IterationRecord { iteration: it, lr, samples: inputs.len(), loss: parts });
        if (it + 1) % cfg.eval_every == 0 || it + 1 == plan.iterations {
            let snap = snapshot(&model, &hold, split, it + 1, plan.novel_active)?;
            info!(
                "{} {}/{}: loss {:.4} (cls {:.4} bg {:.4} sp {:.4}) holdout cls {:?} acc {:?} novel acc {:?} (proposals {:?})",
                plan.name,
                it + 1,
                plan.iterations,
                parts.total(),
                parts.cls,
                parts.bg,
                parts.sp,
                snap.base_loss_cls,
                snap.base_accuracy,
                snap.novel_accuracy,
                snap.novel_proposal_accuracy
            );
            report.snapshots.push(snap);
        }
    }
    model.stage = plan.stage;
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok((model, report))
}

/// Phase 1: trunk and base rows on novel-free images.
pub fn train_phase1(
    data: &TrainingSet<'_>,
    split: &KShotSplit,
    cfg: &TrainConfig,
) -> Result<(CorrectionModel, TrainReport)> {
    cfg.validate()?;
    let model = CorrectionModel::initialize(
        cfg.extractor.clone(),
        data.manifest.classes().to_vec(),
        split.base_class_ids.clone(),
        split.novel_class_ids.clone(),
        cfg.logit_scale,
        derive_seed(cfg.seed, "init"),
    )?;
    train_phase1_from(model, data, split, cfg)
}

/// Phase 1 starting from a given initialization.
pub fn train_phase1_from(
    model: CorrectionModel,
    data: &TrainingSet<'_>,
    split: &KShotSplit,
    cfg: &TrainConfig,
) -> Result<(CorrectionModel, TrainReport)> {
    cfg.validate()?;
    check_model(&model, data, split, cfg)?;
    let part = partition(data, split, cfg);
    info!("phase1: {} training images, {} held out", part.base_train.len(), part.holdout.len());
    let proposals = proposals_for(data, split, &part.base_train, cfg, false);
    let iterations = cfg.phase1_iterations;
    let decay_from = (iterations as f64 * cfg.lr_decay_at).floor() as usize;
    let (lr0, factor) = (cfg.phase1_lr, cfg.lr_decay_factor);
    let plan = PhasePlan {
        name: "phase1",
        stage: ModelStage::Phase1,
        iterations,
        lr: Box::new(move |it| if it >= decay_from { lr0 * factor } else { lr0 }),
        weights: vec![1.0; part.base_train.len()],
        pool: part.base_train.clone(),
        proposals,
        novel_active: false,
        frozen_rows: Vec::new(),
    };
    run_phase(model, data, split, &part, plan, cfg)
}

/// Writes novel rows from the shot crops and, if configured, re-infers the
/// background row from background proposals of base and shot images.
pub fn imprint_and_infer(
    model: &CorrectionModel,
    data: &TrainingSet<'_>,
    split: &KShotSplit,
    cfg: &TrainConfig,
) -> Result<(CorrectionModel, ImprintReport)> {
    cfg.validate()?;
    if model.stage != ModelStage::Phase1 {
        return Err(Error::Stage(format!("imprinting needs a phase-1 checkpoint, got {:?}", model.stage)));
    }
    check_model(model, data, split, cfg)?;
    let s = model.config.input_size;
    let index: BTreeMap<&str, usize> =
        data.manifest.images().iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
    let selected: BTreeSet<u64> = split.selected_novel_annotation_ids.iter().copied().collect();
    let mut shots: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for a in data.manifest.annotations().iter().filter(|a| selected.contains(&a.id)) {
        let crop = crop_and_resize(&data.images[index[a.image_id.as_str()]], &a.bbox, s)?;
        shots.entry(a.class_id).or_default().push(crop);
    }
    if let Some(c) = split.novel_class_ids.iter().find(|c| !shots.contains_key(c)) {
        return Err(Error::InvalidArgument(format!("novel class {c} has no shots")));
    }
    let mut embedded = BTreeMap::new();
    for (c, crops) in &shots {
        embedded.insert(*c, normalized_embeddings(crops, model)?);
    }
    let mut head = imprint_novel_weights(&model.head, &embedded)?;
    let mut background = None;
    if cfg.reinfer_background {
        let part = partition(data, split, cfg);
        let mut pool = Vec::new();
        for (source, images) in [(SampleSource::Base, &part.base_train), (SampleSource::Novel, &part.shot_images)] {
            let props = proposals_for(data, split, images, cfg, false);
            let mut candidates: Vec<(usize, usize)> = Vec::new();
            for (&i, ps) in &props {
                for (j, p) in ps.iter().enumerate() {
                    if p.group == ProposalGroup::Background && p.bbox.area() >= 1.0 {
                        candidates.push((i, j));
                    }
                }
            }
            pool.push((source, props, candidates));
        }
        let available = pool.iter().map(|(_, _, c)| c.len()).filter(|&n| n > 0).min().unwrap_or(0);
        let per_source = cfg.background_pool_per_source.min(available);
        let mut samples = Vec::new();
        for (source, props, mut candidates) in pool {
            let mut rng = substream(cfg.seed, &format!("bg-pool/{source:?}"));
            candidates.shuffle(&mut rng);
            let crops: Vec<Vec<f64>> = candidates
                .iter()
                .take(per_source)
                .map(|&(i, j)| crop_and_resize(&data.images[i], &props[&i][j].bbox, s))
                .collect::<Result<_>>()?;
            for e in normalized_embeddings(&crops, model)? {
                samples.push(BackgroundSample { source, embedding: e });
            }
        }
        if samples.is_empty() {
            warn!("no background proposals; keeping the trained background row");
        } else {
            let (h, stats) = infer_background_weight(&head, &samples)?;
            head = h;
            background = Some(stats);
        }
    }
    let mut next = model.clone();
    next.head = head;
    next.stage = ModelStage::Imprinted;
    let report = ImprintReport { shots_per_class: shots.iter().map(|(c, v)| (*c, v.len())).collect(), background };
    Ok((next, report))
}

/// Phase 2: all rows active, shot images drawn `novel_oversampling` times
/// as often as base images.
pub fn train_phase2(
    model: &CorrectionModel,
    data: &TrainingSet<'_>,
    split: &KShotSplit,
    cfg: &TrainConfig,
) -> Result<(CorrectionModel, TrainReport)> {
    cfg.validate()?;
    if model.stage != ModelStage::Imprinted {
        return Err(Error::Stage(format!("phase 2 needs an imprinted checkpoint, got {:?}", model.stage)));
    }
    check_model(model, data, split, cfg)?;
    let part = partition(data, split, cfg);
    let mut pool = part.base_train.clone();
    let mut weights = vec![1.0; pool.len()];
    pool.extend(&part.shot_images);
    weights.extend(std::iter::repeat_n(cfg.novel_oversampling, part.shot_images.len()));
    let mut proposals = proposals_for(data, split, &part.base_train, cfg, false);
    proposals.extend(proposals_for(data, split, &part.shot_images, cfg, cfg.include_shot_boxes));
    info!("phase2: {} base images, {} shot images", part.base_train.len(), part.shot_images.len());
    let lr = cfg.phase2_lr;
    let plan = PhasePlan {
        name: "phase2",
        stage: ModelStage::Phase2,
        iterations: cfg.phase2_iterations,
        lr: Box::new(move |_| lr),
        pool,
        weights,
        proposals,
        novel_active: true,
        frozen_rows: if cfg.freeze_imprinted { split.novel_class_ids.clone() } else { Vec::new() },
    };
    let mut start = model.clone();
    start.stage = ModelStage::Imprinted;
    run_phase(start, data, split, &part, plan, cfg)
}

/// Natural share of shot images among phase-2 draws for a given ratio.
pub fn shot_image_share(base_images: usize, shot_images: usize, oversampling: f64) -> f64 {
    let s = shot_images as f64 * oversampling;
    s / (s + base_images as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::make_kshot_split;
    use crate::detsim::{generate_dataset, simulate_detections, DetectorNoise, SceneSpec};
    use crate::netcore::CgnlScale;

    pub(crate) fn tiny_config() -> TrainConfig {
        let extractor = FeatureExtractorConfig {
            input_size: 16,
            channels: vec![4, 8],
            embedding_dim: 8,
            cgnl_after_stage: Some(2),
            cgnl_scale: CgnlScale::InversePositions,
        };
        TrainConfig {
            seed: 3,
            images_per_batch: 2,
            sampler: SamplerConfig { crop_size: 16, boxes_per_image: 6, ..Default::default() },
            extractor,
            phase1_iterations: 6,
            phase2_iterations: 4,
            eval_every: 3,
            background_pool_per_source: 8,
            ..Default::default()
        }
    }

    struct Fixture {
        manifest: DatasetManifest,
        images: Vec<Image>,
        dets: Vec<Detection>,
        split: KShotSplit,
    }

    fn fixture() -> Fixture {
        let mut spec = SceneSpec::shapes(4);
        spec.width = 48;
        spec.height = 48;
        spec.min_size = 10;
        spec.max_size = 18;
        spec.max_objects = 2;
        let ds = generate_dataset(&spec, 24, 1).unwrap();
        let novel = [3usize];
        let dets = simulate_detections(&ds.manifest, &DetectorNoise::degraded_novel(4, &novel), &novel, 2).unwrap();
        let split = make_kshot_split(&ds.manifest, &novel, 2, 5).unwrap();
        Fixture { manifest: ds.manifest, images: ds.images, dets, split }
    }

    #[test]
    fn zero_iterations_return_initialization() {
        let f = fixture();
        let data = TrainingSet::new(&f.manifest, &f.images, &f.dets).unwrap();
        let cfg = TrainConfig { phase1_iterations: 0, ..tiny_config() };
        let init = CorrectionModel::initialize(
            cfg.extractor.clone(),
            f.manifest.classes().to_vec(),
            f.split.base_class_ids.clone(),
            f.split.novel_class_ids.clone(),
            cfg.logit_scale,
            derive_seed(cfg.seed, "init"),
        )
        .unwrap();
        let (m, report) = train_phase1(&data, &f.split, &cfg).unwrap();
        assert_eq!(m.params, init.params);
        assert_eq!(m.head, init.head);
        assert!(report.iterations.is_empty());
    }

    #[test]
    fn pipeline_is_deterministic_and_respects_stages() {
        let f = fixture();
        let data = TrainingSet::new(&f.manifest, &f.images, &f.dets).unwrap();
        let cfg = tiny_config();
        let (m1, r1) = train_phase1(&data, &f.split, &cfg).unwrap();
        let (m1b, r1b) = train_phase1(&data, &f.split, &cfg).unwrap();
        assert_eq!(r1.iterations, r1b.iterations);
        assert_eq!(m1.params, m1b.params);
        assert!(r1.iterations.iter().all(|r| r.loss.total().is_finite()));
        assert_eq!(r1.snapshots.len(), 3);

        assert!(matches!(train_phase2(&m1, &data, &f.split, &cfg), Err(Error::Stage(_))));
        let (imp, rep) = imprint_and_infer(&m1, &data, &f.split, &cfg).unwrap();
        let (imp2, _) = imprint_and_infer(&m1, &data, &f.split, &cfg).unwrap();
        assert_eq!(imp.head, imp2.head);
        assert_eq!(rep.shots_per_class[&3], 2);
        for &c in &f.split.base_class_ids {
            assert_eq!(imp.head.row(c), m1.head.row(c));
        }
        let norm: f64 = imp.head.row(3).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
        assert!(matches!(imprint_and_infer(&imp, &data, &f.split, &cfg), Err(Error::Stage(_))));

        let zero = TrainConfig { phase2_iterations: 0, ..cfg.clone() };
        let (same, _) = train_phase2(&imp, &data, &f.split, &zero).unwrap();
        assert_eq!(same.params, imp.params);
        assert_eq!(same.head, imp.head);

        let (m2, r2) = train_phase2(&imp, &data, &f.split, &cfg).unwrap();
        assert_eq!(m2.stage, ModelStage::Phase2);
        assert_eq!(r2.iterations.len(), 4);
        let frozen = TrainConfig { freeze_imprinted: true, ..cfg };
        let (m3, _) = train_phase2(&imp, &data, &f.split, &frozen).unwrap();
        assert_eq!(m3.head.row(3), imp.head.row(3));
    }

    #[test]
    fn single_shot_imprint_equals_shot_embedding() {
        let f = fixture();
        let split = make_kshot_split(&f.manifest, &[3], 1, 9).unwrap();
        let data = TrainingSet::new(&f.manifest, &f.images, &f.dets).unwrap();
        let cfg = TrainConfig { phase1_iterations: 2, reinfer_background: false, ..tiny_config() };
        let (m1, _) = train_phase1(&data, &split, &cfg).unwrap();
        let (imp, _) = imprint_and_infer(&m1, &data, &split, &cfg).unwrap();
        let a = f.manifest.annotations().iter().find(|a| a.id == split.selected_novel_annotation_ids[0]).unwrap();
        let idx = f.manifest.images().iter().position(|r| r.id == a.image_id).unwrap();
        let crop = crop_and_resize(&f.images[idx], &a.bbox, 16).unwrap();
        let z = normalized_embeddings(&[crop], &m1).unwrap();
        assert_eq!(imp.head.row(3), z[0].as_slice());
        assert_eq!(imp.head.row(4), m1.head.row(4));
    }

    #[test]
    fn oversampling_ratio_semantics() {
        assert!((shot_image_share(90, 10, 1.0) - 0.1).abs() < 1e-12);
        assert!((shot_image_share(90, 10, 4.0) - 40.0 / 130.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let f = fixture();
        let data = TrainingSet::new(&f.manifest, &f.images, &f.dets).unwrap();
        let cfg = tiny_config();
        let (mut model, _) =
            train_phase1(&data, &f.split, &TrainConfig { phase1_iterations: 2, ..cfg.clone() }).unwrap();
        let r = model.layout().get("cgnl.z").unwrap().range();
        for (i, v) in model.params[r].iter_mut().enumerate() {
            *v = 0.05 * ((i * 7 % 5) as f64 - 2.0);
        }
        let part = partition(&data, &f.split, &cfg);
        let props = proposals_for(&data, &f.split, &part.base_train[..2], &cfg, false);
        let items: Vec<BatchImage<'_>> = part.base_train[..2]
            .iter()
            .map(|&i| BatchImage { image_id: &f.manifest.images()[i].id, image: &f.images[i], proposals: &props[&i] })
            .collect();
        let crops = build_batch(&items, &cfg.sampler, 1).unwrap();
        let labels: Vec<usize> = crops.iter().map(|c| c.label).collect();
        let inputs: Vec<Vec<f64>> = crops.into_iter().map(|c| c.crop).collect();
        let loss_at = |m: &CorrectionModel| {
            let trunk = m.trunk().unwrap();
            batch_gradient(m, &trunk, &inputs, labels.clone(), &f.split.base_class_ids, &[], &cfg.loss)
                .unwrap()
                .0
                .total()
        };
        let trunk = model.trunk().unwrap();
        let (_, grad) =
            batch_gradient(&model, &trunk, &inputs, labels.clone(), &f.split.base_class_ids, &[], &cfg.loss).unwrap();
        drop(trunk);
        let eps = 1e-6;
        let n = model.params.len();
        let mut checked = 0;
        for i in (0..n).step_by(n / 40 + 1) {
            let mut plus = model.clone();
            plus.params[i] += eps;
            let mut minus = model.clone();
            minus.params[i] -= eps;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * eps);
            let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-3);
            if err > 1e-4 {
                // a hinge or ReLU kink inside the step; skip it
                let f0 = loss_at(&model);
                let right = (loss_at(&plus) - f0) / eps;
                let left = (f0 - loss_at(&minus)) / eps;
                assert!((right - left).abs() > 1e-4 * right.abs().max(1e-3), "param {i}: fd {fd} analytic {}", grad[i]);
                continue;
            }
            checked += 1;
        }
        assert!(checked > 20);
    }
}
