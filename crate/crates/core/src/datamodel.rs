//! Dataset manifests, k-shot splits and detection files.
//!
//! On disk, boxes use the `[x, y, width, height]` convention common to
//! detection JSON; in memory they are [`BoundingBox`] corner form.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::rng::substream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub width: u32,
    pub height: u32,
    /// File path relative to the manifest, or a synthetic descriptor.
    pub source: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub id: u64,
    pub image_id: String,
    pub bbox: BoundingBox,
    pub class_id: usize,
}

#[derive(Serialize, Deserialize)]
struct AnnotationWire {
    id: u64,
    image_id: String,
    bbox: [f64; 4],
    class_id: usize,
}

#[derive(Serialize, Deserialize)]
struct ManifestWire {
    images: Vec<ImageRecord>,
    annotations: Vec<AnnotationWire>,
    classes: Vec<String>,
}

/// Validated dataset description. Construct with [`DatasetManifest::new`] or
/// [`load_manifest`]; both enforce unique ids and resolvable references.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    images: Vec<ImageRecord>,
    annotations: Vec<Annotation>,
    classes: Vec<String>,
    image_index: HashMap<String, usize>,
}

impl DatasetManifest {
    pub fn new(images: Vec<ImageRecord>, annotations: Vec<Annotation>, classes: Vec<String>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::validation("classes", "at least one class is required"));
        }
        let mut image_index = HashMap::with_capacity(images.len());
        for (i, img) in images.iter().enumerate() {
            if img.width == 0 || img.height == 0 {
                return Err(Error::validation(format!("image {}", img.id), "zero extent"));
            }
            if image_index.insert(img.id.clone(), i).is_some() {
                return Err(Error::validation(format!("image {}", img.id), "duplicate image id"));
            }
        }
        let mut seen = HashSet::with_capacity(annotations.len());
        for a in &annotations {
            let record = format!("annotation {}", a.id);
            if !seen.insert(a.id) {
                return Err(Error::validation(record, "duplicate annotation id"));
            }
            let Some(&idx) = image_index.get(&a.image_id) else {
                return Err(Error::validation(record, format!("unknown image_id {:?}", a.image_id)));
            };
            if a.class_id >= classes.len() {
                return Err(Error::validation(record, format!("class_id {} out of range", a.class_id)));
            }
            if !a.bbox.is_valid() {
                return Err(Error::validation(record, "invalid box"));
            }
            let img = &images[idx];
            if !a.bbox.lies_within(f64::from(img.width), f64::from(img.height)) {
                return Err(Error::validation(record, "box outside image extent"));
            }
        }
        Ok(DatasetManifest { images, annotations, classes, image_index })
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.images
    }

    pub fn annotations(&self) -> &[Annotation] {
        &self.annotations
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn image(&self, id: &str) -> Option<&ImageRecord> {
        self.image_index.get(id).map(|&i| &self.images[i])
    }

    /// Annotations grouped by image id, in manifest order.
    pub fn annotations_by_image(&self) -> HashMap<&str, Vec<&Annotation>> {
        let mut map: HashMap<&str, Vec<&Annotation>> = HashMap::new();
        for a in &self.annotations {
            map.entry(a.image_id.as_str()).or_default().push(a);
        }
        map
    }

    /// Keeps only annotations accepted by `keep`; images are unchanged.
    pub fn filter_annotations(&self, mut keep: impl FnMut(&Annotation) -> bool) -> Self {
        DatasetManifest {
            images: self.images.clone(),
            annotations: self.annotations.iter().filter(|a| keep(a)).cloned().collect(),
            classes: self.classes.clone(),
            image_index: self.image_index.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        let wire = ManifestWire {
            images: self.images.clone(),
            annotations: self
                .annotations
                .iter()
                .map(|a| AnnotationWire {
                    id: a.id,
                    image_id: a.image_id.clone(),
                    bbox: a.bbox.to_xywh(),
                    class_id: a.class_id,
                })
                .collect(),
            classes: self.classes.clone(),
        };
        serde_json::to_string_pretty(&wire).expect("manifest serialization cannot fail")
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let wire: ManifestWire = serde_json::from_str(text).map_err(|e| Error::json(origin, e))?;
        let mut annotations = Vec::with_capacity(wire.annotations.len());
        for a in wire.annotations {
            let bbox = BoundingBox::from_xywh(a.bbox)
                .map_err(|_| Error::validation(format!("annotation {}", a.id), "invalid bbox"))?;
            annotations.push(Annotation { id: a.id, image_id: a.image_id, bbox, class_id: a.class_id });
        }
        Self::new(wire.images, annotations, wire.classes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    DatasetManifest::from_json(&text, path)
}

/// Partition of foreground classes into base and novel, with the novel
/// annotation instances that may be used for training.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KShotSplit {
    pub base_class_ids: Vec<usize>,
    pub novel_class_ids: Vec<usize>,
    pub k: usize,
    pub seed: u64,
    pub selected_novel_annotation_ids: Vec<u64>,
}

impl KShotSplit {
    pub fn is_novel(&self, class_id: usize) -> bool {
        self.novel_class_ids.contains(&class_id)
    }

    pub fn is_base(&self, class_id: usize) -> bool {
        self.base_class_ids.contains(&class_id)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("split serialization cannot fail");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// Selects up to `k` annotation instances per novel class, uniformly without
/// replacement. Every other class becomes a base class.
pub fn make_kshot_split(
    manifest: &DatasetManifest,
    novel_class_ids: &[usize],
    k: usize,
    seed: u64,
) -> Result<KShotSplit> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let num_classes = manifest.num_classes();
    let mut novel: Vec<usize> = novel_class_ids.to_vec();
    novel.sort_unstable();
    novel.dedup();
    if let Some(bad) = novel.iter().find(|&&c| c >= num_classes) {
        return Err(Error::InvalidArgument(format!("unknown novel class id {bad}")));
    }
    let base: Vec<usize> = (0..num_classes).filter(|c| !novel.contains(c)).collect();

    let mut selected = Vec::new();
    for &class_id in &novel {
        let mut pool: Vec<u64> = manifest.annotations.iter().filter(|a| a.class_id == class_id).map(|a| a.id).collect();
        pool.sort_unstable();
        if pool.len() <= k {
            if pool.len() < k {
                warn!("class {class_id}: only {} annotations available for k={k}", pool.len());
            }
            selected.extend(pool);
            continue;
        }
        let mut rng = substream(seed, &format!("kshot/{class_id}"));
        let mut picked: Vec<u64> = sample(&mut rng, pool.len(), k).into_iter().map(|i| pool[i]).collect();
        picked.sort_unstable();
        selected.extend(picked);
    }
    Ok(KShotSplit { base_class_ids: base, novel_class_ids: novel, k, seed, selected_novel_annotation_ids: selected })
}

/// One box emitted by a detector, with a confidence per foreground class.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: String,
    pub bbox: BoundingBox,
    pub scores: Vec<f64>,
}

impl Detection {
    /// Highest-scoring class and its score; ties go to the lowest index.
    pub fn top_class(&self) -> (usize, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        for (c, &s) in self.scores.iter().enumerate() {
            if s > best.1 {
                best = (c, s);
            }
        }
        best
    }

    pub fn max_score(&self) -> f64 {
        self.top_class().1
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let record = format!("detection on {}", self.image_id);
        if self.scores.len() != num_classes {
            return Err(Error::validation(record, format!("expected {num_classes} scores, got {}", self.scores.len())));
        }
        if let Some(s) = self.scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::validation(record, format!("score {s} outside [0, 1]")));
        }
        if !self.bbox.is_valid() {
            return Err(Error::validation(record, "invalid box"));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
pub(crate) struct DetectionWire {
    pub image_id: String,
    pub bbox: [f64; 4],
    pub scores: Vec<f64>,
}

impl From<&Detection> for DetectionWire {
    fn from(d: &Detection) -> Self {
        DetectionWire { image_id: d.image_id.clone(), bbox: d.bbox.to_xywh(), scores: d.scores.clone() }
    }
}

pub fn detections_to_json(dets: &[Detection]) -> String {
    let wire: Vec<DetectionWire> = dets.iter().map(DetectionWire::from).collect();
    serde_json::to_string_pretty(&wire).expect("detection serialization cannot fail")
}

pub fn save_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    fs::write(path, detections_to_json(dets)).map_err(|e| Error::io(path, e))
}

pub fn parse_detections(text: &str, origin: &Path, manifest: &DatasetManifest) -> Result<Vec<Detection>> {
    let wire: Vec<DetectionWire> = serde_json::from_str(text).map_err(|e| Error::json(origin, e))?;
    let k = manifest.num_classes();
    let mut out = Vec::with_capacity(wire.len());
    for (i, w) in wire.into_iter().enumerate() {
        if manifest.image(&w.image_id).is_none() {
            return Err(Error::validation(format!("detection #{i}"), format!("unknown image_id {:?}", w.image_id)));
        }
        let bbox =
            BoundingBox::from_xywh(w.bbox).map_err(|_| Error::validation(format!("detection #{i}"), "invalid bbox"))?;
        let det = Detection { image_id: w.image_id, bbox, scores: w.scores };
        det.validate(k).map_err(|e| match e {
            Error::Validation { reason, .. } => Error::validation(format!("detection #{i}"), reason),
            other => other,
        })?;
        out.push(det);
    }
    Ok(out)
}

pub fn load_detections(path: &Path, manifest: &DatasetManifest) -> Result<Vec<Detection>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detections(&text, path, manifest)
}

/// Detections grouped by image id; within an image, input order is kept.
pub fn group_by_image(dets: &[Detection]) -> BTreeMap<&str, Vec<&Detection>> {
    let mut map: BTreeMap<&str, Vec<&Detection>> = BTreeMap::new();
    for d in dets {
        map.entry(d.image_id.as_str()).or_default().push(d);
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(id: &str) -> ImageRecord {
        ImageRecord { id: id.into(), width: 100, height: 80, source: format!("{id}.png") }
    }

    fn ann(id: u64, image_id: &str, class_id: usize) -> Annotation {
        Annotation { id, image_id: image_id.into(), bbox: BoundingBox::new(10.0, 10.0, 30.0, 40.0).unwrap(), class_id }
    }

    fn toy_manifest() -> DatasetManifest {
        let mut anns = Vec::new();
        for i in 0..10 {
            anns.push(ann(i, "a", 1));
        }
        anns.push(ann(10, "b", 0));
        anns.push(ann(11, "b", 2));
        anns.push(ann(12, "b", 2));
        DatasetManifest::new(vec![img("a"), img("b")], anns, vec!["x".into(), "y".into(), "z".into()]).unwrap()
    }

    #[test]
    fn minimal_manifest_loads() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        fs::write(
            &p,
            r#"{"images":[{"id":"i0","width":4,"height":4,"source":"synthetic"}],"annotations":[],"classes":["c"]}"#,
        )
        .unwrap();
        let m = load_manifest(&p).unwrap();
        assert!(m.annotations().is_empty());
        assert_eq!(m.num_classes(), 1);
    }

    #[test]
    fn dangling_image_reference_names_annotation() {
        let err = DatasetManifest::new(vec![img("a")], vec![ann(42, "ghost", 0)], vec!["c".into()]).unwrap_err();
        match err {
            Error::Validation { record, .. } => assert_eq!(record, "annotation 42"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_duplicates_and_out_of_extent_boxes() {
        assert!(DatasetManifest::new(vec![img("a"), img("a")], vec![], vec!["c".into()]).is_err());
        let mut far = ann(1, "a", 0);
        far.bbox = BoundingBox::new(90.0, 10.0, 120.0, 20.0).unwrap();
        assert!(DatasetManifest::new(vec![img("a")], vec![far], vec!["c".into()]).is_err());
        assert!(DatasetManifest::new(vec![img("a")], vec![ann(1, "a", 3)], vec!["c".into()]).is_err());
    }

    #[test]
    fn json_round_trip_is_a_fixed_point() {
        let m = toy_manifest();
        let text = m.to_json();
        let back = DatasetManifest::from_json(&text, Path::new("mem")).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_json(), text);
    }

    #[test]
    fn kshot_caps_at_available() {
        let m = toy_manifest();
        let s = make_kshot_split(&m, &[2], 5, 0).unwrap();
        assert_eq!(s.selected_novel_annotation_ids, vec![11, 12]);
        assert_eq!(s.base_class_ids, vec![0, 1]);
    }

    #[test]
    fn kshot_is_deterministic_and_disjoint() {
        let m = toy_manifest();
        let a = make_kshot_split(&m, &[1], 3, 9).unwrap();
        let b = make_kshot_split(&m, &[1], 3, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.selected_novel_annotation_ids.len(), 3);
        for id in &a.selected_novel_annotation_ids {
            let class_id = m.annotations().iter().find(|x| x.id == *id).unwrap().class_id;
            assert!(a.is_novel(class_id) && !a.is_base(class_id));
        }
    }

    #[test]
    fn kshot_rejects_bad_args() {
        let m = toy_manifest();
        assert!(make_kshot_split(&m, &[7], 1, 0).is_err());
        assert!(make_kshot_split(&m, &[1], 0, 0).is_err());
    }

    #[test]
    fn one_shot_selection_is_uniform() {
        let m = toy_manifest();
        let mut counts = [0usize; 10];
        let seeds = 1000;
        for seed in 0..seeds {
            let s = make_kshot_split(&m, &[1], 1, seed).unwrap();
            counts[s.selected_novel_annotation_ids[0] as usize] += 1;
        }
        for c in counts {
            let f = c as f64 / seeds as f64;
            assert!((f - 0.1).abs() <= 0.03, "frequency {f}");
        }
    }

    #[test]
    fn detection_file_validation() {
        let m = toy_manifest();
        let p = Path::new("mem");
        assert!(parse_detections("[]", p, &m).unwrap().is_empty());
        let bad = r#"[{"image_id":"a","bbox":[0,0,5,5],"scores":[1.2,0,0]}]"#;
        assert!(matches!(parse_detections(bad, p, &m), Err(Error::Validation { .. })));
        let ghost = r#"[{"image_id":"q","bbox":[0,0,5,5],"scores":[0.2,0,0]}]"#;
        assert!(parse_detections(ghost, p, &m).is_err());
        let short = r#"[{"image_id":"a","bbox":[0,0,5,5],"scores":[0.2]}]"#;
        assert!(parse_detections(short, p, &m).is_err());
    }

    #[test]
    fn top_class_prefers_lowest_index_on_ties() {
        let d = Detection {
            image_id: "a".into(),
            bbox: BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
            scores: vec![0.2, 0.5, 0.5],
        };
        assert_eq!(d.top_class(), (1, 0.5));
    }
}
