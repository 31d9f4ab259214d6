//! Average precision, IoU histograms and the oracle false-positive
//! correction curve.
//!
//! AP ranks a class's detections by their score for that class (entries
//! equal to zero are not detections of the class), matches greedily to the
//! highest-IoU unmatched ground truth at or above the threshold, and
//! integrates the precision envelope over recall. Score ties keep input
//! order.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::datamodel::{group_by_image, Annotation, DatasetManifest, Detection};
use crate::error::{Error, Result};
use crate::geometry::iou_unchecked;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMethod {
    /// Area under the precision envelope.
    #[default]
    AllPoint,
    /// Mean of the envelope at recall 0, 0.1, ..., 1.
    ElevenPoint,
}

/// Ground truth indexed by `(image_id, class_id)`.
pub struct GtIndex<'a> {
    boxes: HashMap<&'a str, HashMap<usize, Vec<&'a Annotation>>>,
    counts: HashMap<usize, usize>,
}

impl<'a> GtIndex<'a> {
    pub fn new(gt: &'a [Annotation]) -> Self {
        let mut boxes: HashMap<&str, HashMap<usize, Vec<&Annotation>>> = HashMap::new();
        let mut counts = HashMap::new();
        for a in gt {
            boxes.entry(a.image_id.as_str()).or_default().entry(a.class_id).or_default().push(a);
            *counts.entry(a.class_id).or_insert(0) += 1;
        }
        GtIndex { boxes, counts }
    }

    pub fn count(&self, class_id: usize) -> usize {
        self.counts.get(&class_id).copied().unwrap_or(0)
    }

    fn of(&self, image_id: &str, class_id: usize) -> &[&'a Annotation] {
        self.boxes.get(image_id).and_then(|m| m.get(&class_id)).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// True-positive flags of the class's detections in ranked order.
pub fn match_detections(dets: &[Detection], gt: &GtIndex<'_>, class_id: usize, iou_threshold: f64) -> Vec<bool> {
    let mut ranked: Vec<usize> =
        (0..dets.len()).filter(|&i| dets[i].scores.get(class_id).is_some_and(|s| *s > 0.0)).collect();
    ranked.sort_by(|&a, &b| dets[b].scores[class_id].total_cmp(&dets[a].scores[class_id]));
    let mut taken: HashMap<&str, Vec<bool>> = HashMap::new();
    ranked
        .into_iter()
        .map(|i| {
            let d = &dets[i];
            let cands = gt.of(&d.image_id, class_id);
            let used = taken.entry(d.image_id.as_str()).or_insert_with(|| vec![false; cands.len()]);
            let mut best: Option<(usize, f64)> = None;
            for (j, a) in cands.iter().enumerate() {
                if used[j] {
                    continue;
                }
                let v = iou_unchecked(&d.bbox, &a.bbox);
                if v >= iou_threshold && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, _)) => {
                    used[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// AP from ranked true-positive flags and the ground-truth count.
pub fn ap_from_matches(tp: &[bool], num_gt: usize, method: ApMethod) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / num_gt as f64);
    }
    // precision envelope, right to left
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    Some(match method {
        ApMethod::AllPoint => {
            let mut sum = 0.0;
            for (i, &t) in tp.iter().enumerate() {
                if t {
                    sum += precision[i];
                }
            }
            sum / num_gt as f64
        }
        ApMethod::ElevenPoint => {
            (0..=10)
                .map(|k| {
                    let r = k as f64 / 10.0;
                    recall.iter().position(|&x| x >= r - 1e-12).map_or(0.0, |i| precision[i])
                })
                .sum::<f64>()
                / 11.0
        }
    })
}

/// AP for one class; `None` when the class has no ground truth.
pub fn average_precision(dets: &[Detection], gt: &[Annotation], class_id: usize, iou_threshold: f64) -> Option<f64> {
    average_precision_with(dets, gt, class_id, iou_threshold, ApMethod::AllPoint)
}

pub fn average_precision_with(
    dets: &[Detection],
    gt: &[Annotation],
    class_id: usize,
    iou_threshold: f64,
    method: ApMethod,
) -> Option<f64> {
    let index = GtIndex::new(gt);
    let tp = match_detections(dets, &index, class_id, iou_threshold);
    ap_from_matches(&tp, index.count(class_id), method)
}

/// Mean over the defined entries; `None` if there are none.
pub fn mean_defined(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.into_iter().flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassSplit {
    Base,
    Novel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouHistogram {
    /// Bin edges, `bins + 1` values from 0 to 1; the last bin includes 1.
    pub edges: Vec<f64>,
    pub base: Vec<usize>,
    pub novel: Vec<usize>,
}

impl IouHistogram {
    pub fn total(&self) -> usize {
        self.base.iter().chain(&self.novel).sum()
    }
}

/// Even bin edges over `[0, 1]`.
pub fn uniform_edges(bins: usize) -> Vec<f64> {
    (0..=bins).map(|i| i as f64 / bins as f64).collect()
}

fn bin_of(edges: &[f64], v: f64) -> usize {
    let last = edges.len() - 2;
    edges[1..].iter().position(|&e| v < e).unwrap_or(last).min(last)
}

/// For each detection, its max IoU against ground truth of its top class,
/// binned separately by whether that class is novel.
pub fn iou_histogram(
    dets: &[Detection],
    gt: &[Annotation],
    novel: &BTreeSet<usize>,
    edges: &[f64],
) -> Result<IouHistogram> {
    let valid = edges.len() >= 2
        && edges[0] == 0.0
        && *edges.last().expect("nonempty") == 1.0
        && edges.windows(2).all(|w| w[0] < w[1]);
    if !valid {
        return Err(Error::InvalidArgument("histogram edges must increase from 0 to 1".into()));
    }
    let index = GtIndex::new(gt);
    let mut h = IouHistogram { edges: edges.to_vec(), base: vec![0; edges.len() - 1], novel: vec![0; edges.len() - 1] };
    for d in dets {
        let (c, _) = d.top_class();
        let best = index.of(&d.image_id, c).iter().map(|a| iou_unchecked(&d.bbox, &a.bbox)).fold(0.0, f64::max);
        let b = bin_of(edges, best);
        if novel.contains(&c) {
            h.novel[b] += 1;
        } else {
            h.base[b] += 1;
        }
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    /// Zero `score[c]` when the box overlaps every class-`c` ground truth
    /// by less than `t`.
    Suppress,
    /// Move the top-class score onto the best-matching ground-truth class
    /// when that match has IoU at least `1 - t` (for `t > 0`). Only the
    /// best-localized misclassified box of an otherwise missed object moves.
    Reassign,
    /// Reassign, then suppress.
    #[default]
    Combined,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OraclePoint {
    pub threshold: f64,
    pub ap_base: Option<f64>,
    pub ap_novel: Option<f64>,
    pub ap_all: Option<f64>,
}

/// IoU at which the oracle curve is scored and an object counts as found.
const ORACLE_EVAL_IOU: f64 = 0.5;

/// For each detection, the index (into `anns`) of the ground truth it should
/// be reassigned to once the correction threshold admits its IoU. Only the
/// best-localized misclassified box of an object that no correctly
/// classified box finds at IoU 0.5 is eligible, so corrections never create
/// duplicates.
fn correction_targets(dets: &[&Detection], anns: &[&Annotation]) -> Vec<Option<(usize, f64)>> {
    let best: Vec<Option<(usize, f64)>> = dets
        .iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, a) in anns.iter().enumerate() {
                let v = iou_unchecked(&d.bbox, &a.bbox);
                if v > 0.0 && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((j, v));
                }
            }
            best
        })
        .collect();
    let found: Vec<bool> = anns
        .iter()
        .map(|a| {
            dets.iter().any(|d| d.top_class().0 == a.class_id && iou_unchecked(&d.bbox, &a.bbox) >= ORACLE_EVAL_IOU)
        })
        .collect();
    let mut rep: Vec<Option<usize>> = vec![None; anns.len()];
    for (i, d) in dets.iter().enumerate() {
        let Some((j, v)) = best[i] else { continue };
        if found[j] || d.top_class().0 == anns[j].class_id {
            continue;
        }
        let better = match rep[j] {
            None => true,
            Some(r) => {
                let (rv, rs) = (best[r].expect("rep has a match").1, dets[r].max_score());
                v > rv || (v == rv && d.max_score() > rs)
            }
        };
        if better {
            rep[j] = Some(i);
        }
    }
    let mut out = vec![None; dets.len()];
    for (j, r) in rep.iter().enumerate() {
        if let Some(i) = *r {
            out[i] = Some((j, best[i].expect("rep has a match").1));
        }
    }
    out
}

/// Applies the oracle at threshold `t` to one detection list.
pub fn oracle_correct(dets: &[Detection], gt: &[Annotation], t: f64, mode: OracleMode) -> Vec<Detection> {
    let mut by_image: HashMap<&str, Vec<&Annotation>> = HashMap::new();
    for a in gt {
        by_image.entry(a.image_id.as_str()).or_default().push(a);
    }
    let reassign = matches!(mode, OracleMode::Reassign | OracleMode::Combined) && t > 0.0;
    let suppress = matches!(mode, OracleMode::Suppress | OracleMode::Combined);
    let mut out: Vec<Detection> = dets.to_vec();
    let mut det_groups: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, d) in dets.iter().enumerate() {
        det_groups.entry(d.image_id.as_str()).or_default().push(i);
    }
    for (image_id, idx) in det_groups {
        let anns = by_image.get(image_id).map(Vec::as_slice).unwrap_or(&[]);
        let group: Vec<&Detection> = idx.iter().map(|&i| &dets[i]).collect();
        let targets = if reassign { correction_targets(&group, anns) } else { vec![None; group.len()] };
        for (pos, &i) in idx.iter().enumerate() {
            let d = &dets[i];
            let k = d.scores.len();
            let scores = &mut out[i].scores;
            if let Some((j, v)) = targets[pos] {
                let (pred, m) = (d.top_class().0, anns[j].class_id);
                if m < k && v >= 1.0 - t {
                    scores[m] = (scores[m] + scores[pred]).min(1.0);
                    scores[pred] = 0.0;
                }
            }
            if suppress {
                let mut per_class = vec![0.0f64; k];
                for a in anns.iter().filter(|a| a.class_id < k) {
                    per_class[a.class_id] = per_class[a.class_id].max(iou_unchecked(&d.bbox, &a.bbox));
                }
                for (s, &v) in scores.iter_mut().zip(&per_class) {
                    if v < t {
                        *s = 0.0;
                    }
                }
            }
        }
    }
    out
}

/// Per-image top-T by max score, input order kept among the survivors.
pub fn top_t_per_image(dets: &[Detection], t: usize) -> Vec<Detection> {
    let mut keep = vec![false; dets.len()];
    let position: HashMap<*const Detection, usize> = dets.iter().enumerate().map(|(i, d)| (d as *const _, i)).collect();
    for (_, mut group) in group_by_image(dets) {
        group.sort_by(|a, b| b.max_score().total_cmp(&a.max_score()));
        for d in group.into_iter().take(t) {
            keep[position[&(d as *const _)]] = true;
        }
    }
    dets.iter().zip(keep).filter(|(_, k)| *k).map(|(d, _)| d.clone()).collect()
}

fn mean_ap(dets: &[Detection], index: &GtIndex<'_>, classes: &[usize], iou: f64, method: ApMethod) -> Option<f64> {
    mean_defined(
        classes.iter().map(|&c| ap_from_matches(&match_detections(dets, index, c, iou), index.count(c), method)),
    )
}

/// AP50 after oracle correction at each threshold `t` in `[0, iou]`.
pub fn oracle_fp_curve(
    dets: &[Detection],
    gt: &[Annotation],
    base: &[usize],
    novel: &[usize],
    thresholds: &[f64],
    mode: OracleMode,
) -> Result<Vec<OraclePoint>> {
    const EVAL_IOU: f64 = ORACLE_EVAL_IOU;
    if let Some(t) = thresholds.iter().find(|t| !(0.0..=EVAL_IOU).contains(*t)) {
        return Err(Error::InvalidArgument(format!("oracle threshold {t} outside [0, {EVAL_IOU}]")));
    }
    let index = GtIndex::new(gt);
    let all: Vec<usize> = base.iter().chain(novel).copied().collect();
    Ok(thresholds
        .iter()
        .map(|&t| {
            let fixed = oracle_correct(dets, gt, t, mode);
            OraclePoint {
                threshold: t,
                ap_base: mean_ap(&fixed, &index, base, EVAL_IOU, ApMethod::AllPoint),
                ap_novel: mean_ap(&fixed, &index, novel, EVAL_IOU, ApMethod::AllPoint),
                ap_all: mean_ap(&fixed, &index, &all, EVAL_IOU, ApMethod::AllPoint),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub ap_method: ApMethod,
    pub histogram_bins: usize,
    pub oracle_thresholds: Vec<f64>,
    pub oracle_mode: OracleMode,
    pub top_t: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresholds: vec![0.5, 0.75],
            ap_method: ApMethod::AllPoint,
            histogram_bins: 10,
            oracle_thresholds: (0..=10).map(|i| i as f64 * 0.05).collect(),
            oracle_mode: OracleMode::Combined,
            top_t: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub name: String,
    pub split: ClassSplit,
    pub num_gt: usize,
    /// One entry per IoU threshold; `None` without ground truth.
    pub ap: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_thresholds: Vec<f64>,
    pub ap_method: ApMethod,
    pub per_class: Vec<ClassAp>,
    pub mean_base: Vec<Option<f64>>,
    pub mean_novel: Vec<Option<f64>>,
    pub mean_all: Vec<Option<f64>>,
    pub num_detections: usize,
    pub histogram: IouHistogram,
    pub oracle_mode: OracleMode,
    pub oracle_curve: Vec<OraclePoint>,
}

impl EvalReport {
    fn at(values: &[Option<f64>], thresholds: &[f64], iou: f64) -> Option<f64> {
        thresholds.iter().position(|t| (t - iou).abs() < 1e-12).and_then(|i| values[i])
    }

    pub fn base_ap(&self, iou: f64) -> Option<f64> {
        Self::at(&self.mean_base, &self.iou_thresholds, iou)
    }

    pub fn novel_ap(&self, iou: f64) -> Option<f64> {
        Self::at(&self.mean_novel, &self.iou_thresholds, iou)
    }

    pub fn all_ap(&self, iou: f64) -> Option<f64> {
        Self::at(&self.mean_all, &self.iou_thresholds, iou)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Full report over the manifest's ground truth. `dets` are used as given
/// for AP; the histogram and the oracle curve use the per-image top-T.
pub fn evaluate(
    dets: &[Detection],
    manifest: &DatasetManifest,
    novel: &[usize],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let k = manifest.num_classes();
    if let Some(c) = novel.iter().find(|&&c| c >= k) {
        return Err(Error::InvalidArgument(format!("novel class {c} out of range")));
    }
    for d in dets {
        d.validate(k)?;
    }
    if cfg.iou_thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) || cfg.histogram_bins == 0 {
        return Err(Error::InvalidArgument("IoU thresholds must lie in [0, 1] and bins be positive".into()));
    }
    let gt = manifest.annotations();
    let index = GtIndex::new(gt);
    let novel_set: BTreeSet<usize> = novel.iter().copied().collect();
    let base: Vec<usize> = (0..k).filter(|c| !novel_set.contains(c)).collect();
    let per_class: Vec<ClassAp> = (0..k)
        .map(|c| ClassAp {
            class_id: c,
            name: manifest.classes()[c].clone(),
            split: if novel_set.contains(&c) { ClassSplit::Novel } else { ClassSplit::Base },
            num_gt: index.count(c),
            ap: cfg
                .iou_thresholds
                .iter()
                .map(|&t| ap_from_matches(&match_detections(dets, &index, c, t), index.count(c), cfg.ap_method))
                .collect(),
        })
        .collect();
    let mean_over = |pick: &dyn Fn(&ClassAp) -> bool| -> Vec<Option<f64>> {
        (0..cfg.iou_thresholds.len())
            .map(|i| mean_defined(per_class.iter().filter(|c| pick(c)).map(|c| c.ap[i])))
            .collect()
    };
    let mean_base = mean_over(&|c| c.split == ClassSplit::Base);
    let mean_novel = mean_over(&|c| c.split == ClassSplit::Novel);
    let mean_all = mean_over(&|_| true);
    let top = top_t_per_image(dets, cfg.top_t);
    let histogram = iou_histogram(&top, gt, &novel_set, &uniform_edges(cfg.histogram_bins))?;
    let novel_list: Vec<usize> = novel_set.iter().copied().collect();
    let oracle_curve = oracle_fp_curve(&top, gt, &base, &novel_list, &cfg.oracle_thresholds, cfg.oracle_mode)?;
    Ok(EvalReport {
        iou_thresholds: cfg.iou_thresholds.clone(),
        ap_method: cfg.ap_method,
        per_class,
        mean_base,
        mean_novel,
        mean_all,
        num_detections: dets.len(),
        histogram,
        oracle_mode: cfg.oracle_mode,
        oracle_curve,
    })
}
