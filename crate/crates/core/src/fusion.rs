//! Inference-time refinement: crop each final detection box, classify it
//! with the correction network and multiply the foreground probabilities
//! into the detector scores. Boxes and detection order never change.

use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{cosine_logits, normalize_embedding, softmax};
use crate::datamodel::{group_by_image, DatasetManifest, Detection, ImageRecord};
use crate::error::{Error, Result};
use crate::geometry::{iou_unchecked, BoundingBox};
use crate::image::Image;
use crate::netcore::{extract_features, CorrectionModel};
use crate::sampler::crop_and_resize;

/// `fused[c] = base[c] * probs[c]` for the `K` foreground classes; the
/// background probability only enters through the softmax normalization.
pub fn fuse_scores(base_scores: &[f64], lscn_probs: &[f64]) -> Result<Vec<f64>> {
    if lscn_probs.len() != base_scores.len() + 1 {
        return Err(Error::DimensionMismatch(format!(
            "{} base scores need {} probabilities, got {}",
            base_scores.len(),
            base_scores.len() + 1,
            lscn_probs.len()
        )));
    }
    Ok(base_scores.iter().zip(lscn_probs).map(|(s, p)| s * p).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinedDetection {
    pub detection: Detection,
    /// `K + 1` probabilities, or `None` when the box could not be cropped.
    pub lscn_probs: Option<Vec<f64>>,
    pub fused_scores: Vec<f64>,
}

impl RefinedDetection {
    pub fn refined(&self) -> bool {
        self.lscn_probs.is_some()
    }

    /// The detection with its scores replaced by the fused ones.
    pub fn to_detection(&self) -> Detection {
        Detection { scores: self.fused_scores.clone(), ..self.detection.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub batch_size: usize,
    /// Per-class greedy NMS on the fused scores at this IoU.
    pub nms_iou: Option<f64>,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig { batch_size: 64, nms_iou: None }
    }
}

/// Refines the detections of one image.
pub fn refine_detections(
    image: &Image,
    dets: &[Detection],
    model: &CorrectionModel,
    batch_size: usize,
) -> Result<Vec<RefinedDetection>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let k = model.num_classes();
    let s = model.config.input_size;
    let mut crops = Vec::new();
    let mut crop_of = Vec::with_capacity(dets.len());
    for d in dets {
        d.validate(k)?;
        match crop_and_resize(image, &d.bbox, s) {
            Ok(c) => {
                crop_of.push(Some(crops.len()));
                crops.push(c);
            }
            Err(e) => {
                warn!("detection on {} passed through unrefined: {e}", d.image_id);
                crop_of.push(None);
            }
        }
    }
    let mut probs = Vec::with_capacity(crops.len());
    for chunk in crops.chunks(batch_size) {
        let z: Vec<Vec<f64>> = extract_features(chunk, model)?.iter().map(|f| normalize_embedding(f).vector).collect();
        probs.extend(cosine_logits(&z, &model.head)?.iter().map(|l| softmax(l)));
    }
    dets.iter()
        .zip(crop_of)
        .map(|(d, slot)| {
            Ok(match slot {
                Some(i) => RefinedDetection {
                    detection: d.clone(),
                    fused_scores: fuse_scores(&d.scores, &probs[i])?,
                    lscn_probs: Some(probs[i].clone()),
                },
                None => RefinedDetection { detection: d.clone(), lscn_probs: None, fused_scores: d.scores.clone() },
            })
        })
        .collect()
}

/// Greedy NMS per class on the fused scores: suppressed entries are zeroed,
/// the detection list itself is unchanged.
pub fn nms_per_class(refined: &mut [RefinedDetection], iou: f64) {
    let Some(k) = refined.first().map(|r| r.fused_scores.len()) else {
        return;
    };
    for c in 0..k {
        let mut order: Vec<usize> = (0..refined.len()).filter(|&i| refined[i].fused_scores[c] > 0.0).collect();
        order.sort_by(|&a, &b| refined[b].fused_scores[c].total_cmp(&refined[a].fused_scores[c]));
        let mut kept: Vec<BoundingBox> = Vec::new();
        for i in order {
            let b = refined[i].detection.bbox;
            if kept.iter().any(|k| iou_unchecked(k, &b) >= iou) {
                refined[i].fused_scores[c] = 0.0;
            } else {
                kept.push(b);
            }
        }
    }
}

/// Refines every image's detections in parallel; `load` supplies the
/// pixels for an image record. Output keeps the input order.
pub fn refine_dataset<F>(
    manifest: &DatasetManifest,
    dets: &[Detection],
    model: &CorrectionModel,
    cfg: &RefineConfig,
    load: F,
) -> Result<Vec<RefinedDetection>>
where
    F: Fn(&ImageRecord) -> Result<Image> + Sync,
{
    if model.num_classes() != manifest.num_classes() {
        return Err(Error::DimensionMismatch(format!(
            "model has {} classes, manifest {}",
            model.num_classes(),
            manifest.num_classes()
        )));
    }
    let groups: Vec<(&str, Vec<&Detection>)> = group_by_image(dets).into_iter().collect();
    let per_image: Vec<Result<Vec<RefinedDetection>>> = groups
        .par_iter()
        .map(|(id, ds)| {
            let record = manifest
                .image(id)
                .ok_or_else(|| Error::validation(format!("detection on {id}"), "unknown image_id"))?;
            let image = load(record)?;
            let owned: Vec<Detection> = ds.iter().map(|d| (*d).clone()).collect();
            let mut r = refine_detections(&image, &owned, model, cfg.batch_size)?;
            if let Some(t) = cfg.nms_iou {
                nms_per_class(&mut r, t);
            }
            Ok(r)
        })
        .collect();
    // restore the input order
    let mut by_image = std::collections::HashMap::new();
    for ((id, _), r) in groups.iter().zip(per_image) {
        by_image.insert(*id, r?.into_iter());
    }
    Ok(dets
        .iter()
        .map(|d| by_image.get_mut(d.image_id.as_str()).and_then(Iterator::next).expect("one result per detection"))
        .collect())
}

#[derive(Serialize, Deserialize)]
struct RefinedWire {
    image_id: String,
    bbox: [f64; 4],
    scores: Vec<f64>,
    lscn_probs: Option<Vec<f64>>,
    base_scores: Vec<f64>,
    refined: bool,
}

/// Detection-schema records (`scores` holds the fused scores) extended with
/// `lscn_probs`, `base_scores` and a `refined` flag.
pub fn refined_to_json(refined: &[RefinedDetection]) -> String {
    let wire: Vec<RefinedWire> = refined
        .iter()
        .map(|r| RefinedWire {
            image_id: r.detection.image_id.clone(),
            bbox: r.detection.bbox.to_xywh(),
            scores: r.fused_scores.clone(),
            lscn_probs: r.lscn_probs.clone(),
            base_scores: r.detection.scores.clone(),
            refined: r.refined(),
        })
        .collect();
    serde_json::to_string_pretty(&wire).expect("refined detections serialize")
}

pub fn save_refined(path: &Path, refined: &[RefinedDetection]) -> Result<()> {
    std::fs::write(path, refined_to_json(refined)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::FeatureExtractorConfig;

    #[test]
    fn fusion_examples() {
        let base = [0.6, 0.8, 0.3];
        assert_eq!(fuse_scores(&base, &[0.0, 1.0, 0.0, 0.0]).unwrap(), vec![0.0, 0.8, 0.0]);
        assert_eq!(fuse_scores(&base, &[0.0, 0.0, 0.0, 1.0]).unwrap(), vec![0.0; 3]);
        assert!((fuse_scores(&[0.6], &[0.5, 0.5]).unwrap()[0] - 0.3).abs() < 1e-15);
        assert!(fuse_scores(&base, &[0.5, 0.5]).is_err());
    }

    fn toy_model() -> CorrectionModel {
        let cfg = FeatureExtractorConfig {
            input_size: 8,
            channels: vec![4, 6],
            embedding_dim: 5,
            cgnl_after_stage: Some(1),
            ..Default::default()
        };
        CorrectionModel::initialize(cfg, vec!["a".into(), "b".into(), "c".into()], vec![0, 1], vec![2], 16.0, 4)
            .unwrap()
    }

    fn toy_image() -> Image {
        let mut img = Image::new(40, 30);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = ((i * 37) % 101) as f32 / 100.0;
        }
        img
    }

    fn dets() -> Vec<Detection> {
        let b = |x1, y1, x2, y2| BoundingBox::new(x1, y1, x2, y2).unwrap();
        vec![
            Detection { image_id: "img".into(), bbox: b(2.0, 3.0, 20.0, 25.0), scores: vec![0.7, 0.1, 0.1] },
            Detection { image_id: "img".into(), bbox: b(10.0, 0.0, 39.0, 12.5), scores: vec![0.2, 0.5, 0.2] },
            Detection { image_id: "img".into(), bbox: b(2.0, 3.0, 20.0, 25.0), scores: vec![0.1, 0.1, 0.6] },
            Detection { image_id: "img".into(), bbox: b(5.0, 5.0, 5.5, 6.0), scores: vec![0.3, 0.3, 0.3] },
        ]
    }

    #[test]
    fn refinement_contract() {
        let m = toy_model();
        let img = toy_image();
        let d = dets();
        assert!(refine_detections(&img, &[], &m, 4).unwrap().is_empty());
        let r = refine_detections(&img, &d, &m, 4).unwrap();
        assert_eq!(r.len(), d.len());
        for (ri, di) in r.iter().zip(&d) {
            assert_eq!(ri.detection, *di);
            for (f, b) in ri.fused_scores.iter().zip(&di.scores) {
                assert!(f <= b);
            }
            if let Some(p) = &ri.lscn_probs {
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                for (c, f) in ri.fused_scores.iter().enumerate() {
                    assert_eq!(*f, di.scores[c] * p[c]);
                }
            }
        }
        assert_eq!(r[0].lscn_probs, r[2].lscn_probs);
        assert!(!r[3].refined());
        assert_eq!(r[3].fused_scores, d[3].scores);
    }

    #[test]
    fn batching_does_not_change_results() {
        let m = toy_model();
        let img = toy_image();
        let d = dets();
        let all = refine_detections(&img, &d, &m, 64).unwrap();
        let one: Vec<RefinedDetection> =
            d.iter().flat_map(|x| refine_detections(&img, std::slice::from_ref(x), &m, 1).unwrap()).collect();
        for (a, b) in all.iter().zip(&one) {
            for (x, y) in a.fused_scores.iter().zip(&b.fused_scores) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn nms_zeroes_overlapping_entries() {
        let m = toy_model();
        let mut r = refine_detections(&toy_image(), &dets(), &m, 8).unwrap();
        r[0].fused_scores = vec![0.5, 0.0, 0.0];
        r[2].fused_scores = vec![0.4, 0.0, 0.3];
        nms_per_class(&mut r, 0.5);
        assert_eq!(r[0].fused_scores[0], 0.5);
        assert_eq!(r[2].fused_scores, vec![0.0, 0.0, 0.3]);
    }

    #[test]
    fn refined_json_loads_as_detections() {
        let m = toy_model();
        let r = refine_detections(&toy_image(), &dets(), &m, 8).unwrap();
        let text = refined_to_json(&r);
        let manifest = DatasetManifest::new(
            vec![ImageRecord { id: "img".into(), width: 40, height: 30, source: "x.png".into() }],
            vec![],
            vec!["a".into(), "b".into(), "c".into()],
        )
        .unwrap();
        let back = crate::datamodel::parse_detections(&text, Path::new("r.json"), &manifest).unwrap();
        let expected: Vec<Detection> = r.iter().map(RefinedDetection::to_detection).collect();
        assert_eq!(back, expected);
    }
}
