//! Synthetic shapes dataset and a base-detector simulator.
//!
//! Classes are combinations of a shape and a hue, so related classes share
//! visual parts. The simulator replays the output statistics of a two-stage
//! detector: jittered boxes around ground truth, class confusion, misses,
//! poorly localized duplicates and spurious boxes on background.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::{Gamma, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Annotation, DatasetManifest, Detection, ImageRecord};
use crate::error::{Error, Result};
use crate::geometry::{iou_unchecked, jitter_box, BoundingBox};
use crate::image::Image;
use crate::rng::{substream, StreamRng};

/// Simulated boxes are snapped to a `1/256` px grid so the xywh wire form
/// round-trips exactly.
const BOX_GRID_BITS: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Ellipse,
    Rectangle,
    Triangle,
    Cross,
}

const SHAPES: [Shape; 4] = [Shape::Ellipse, Shape::Rectangle, Shape::Triangle, Shape::Cross];

impl Shape {
    /// Whether the point `(u, v)` in box-normalized `[0, 1]^2` lies inside.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Ellipse => {
                let (du, dv) = (u - 0.5, v - 0.5);
                du * du + dv * dv <= 0.25
            }
            Shape::Rectangle => (0.08..=0.92).contains(&u) && (0.08..=0.92).contains(&v),
            Shape::Triangle => v >= 1.0 - 2.0 * u.min(1.0 - u) * 1.0 && v <= 1.0,
            Shape::Cross => (0.33..=0.67).contains(&u) || (0.33..=0.67).contains(&v),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAppearance {
    pub name: String,
    pub shape: Shape,
    pub color: [f32; 3],
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f32; 3] {
    let c = v * s;
    let hp = (h.rem_euclid(360.0)) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) as f32, (g + m) as f32, (b + m) as f32]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: u32,
    pub height: u32,
    /// Inclusive range of objects per image.
    pub min_objects: usize,
    pub max_objects: usize,
    /// Inclusive range of object side lengths, in pixels.
    pub min_size: u32,
    pub max_size: u32,
    pub classes: Vec<ClassAppearance>,
    /// Relative sampling weight per class; uniform when absent.
    pub class_weights: Option<Vec<f64>>,
    /// Expected distractor blobs per 10,000 px^2.
    pub clutter_density: f64,
    /// Amplitude of per-pixel texture noise on objects and background.
    pub texture_noise: f32,
    /// Per-instance color perturbation amplitude.
    pub color_jitter: f32,
    /// Objects are placed with pairwise IoU at most this value.
    pub max_overlap: f64,
}

impl SceneSpec {
    /// `num_classes` classes on a 128 px canvas: class `c` has shape
    /// `c mod 4` and one of `ceil(K/4)` evenly spaced hues.
    pub fn shapes(num_classes: usize) -> Self {
        let n_hues = num_classes.div_ceil(SHAPES.len()).max(1);
        let classes = (0..num_classes)
            .map(|c| {
                let shape = SHAPES[c % SHAPES.len()];
                let hue = 360.0 * (c / SHAPES.len()) as f64 / n_hues as f64;
                ClassAppearance {
                    name: format!("{}_{}", format!("{shape:?}").to_lowercase(), (hue.round() as u32)),
                    shape,
                    color: hsv_to_rgb(hue, 0.85, 0.9),
                }
            })
            .collect();
        SceneSpec {
            width: 128,
            height: 128,
            min_objects: 1,
            max_objects: 4,
            min_size: 18,
            max_size: 44,
            classes,
            class_weights: None,
            clutter_density: 3.0,
            texture_noise: 0.08,
            color_jitter: 0.06,
            max_overlap: 0.1,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::InvalidArgument("a scene needs at least 2 classes".into()));
        }
        if self.min_objects > self.max_objects || self.min_size == 0 || self.min_size > self.max_size {
            return Err(Error::InvalidArgument("inverted object count or size range".into()));
        }
        if let Some(w) = &self.class_weights {
            if w.len() != self.classes.len() || w.iter().any(|v| !(*v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::InvalidArgument("class_weights must be K non-negative values".into()));
            }
        }
        if self.max_objects > 0 && (self.min_size > self.width || self.min_size > self.height) {
            return Err(Error::CanvasTooSmall { requested: self.max_objects, width: self.width, height: self.height });
        }
        Ok(())
    }
}

/// Manifest plus the rendered rasters, in manifest image order.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    pub images: Vec<Image>,
}

struct RenderedScene {
    image: Image,
    objects: Vec<(BoundingBox, usize)>,
}

const PLACEMENT_ATTEMPTS: usize = 200;

fn render_scene(spec: &SceneSpec, rng: &mut StreamRng, class_dist: &WeightedIndex<f64>) -> Result<RenderedScene> {
    let (w, h) = (spec.width as usize, spec.height as usize);
    let n_objects = rng.random_range(spec.min_objects..=spec.max_objects);

    // Placement first, so failures are cheap.
    let mut objects: Vec<(BoundingBox, usize)> = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let class_id = class_dist.sample(rng);
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let side = rng.random_range(spec.min_size..=spec.max_size) as f64;
            let aspect: f64 = rng.random_range(0.75..1.33);
            let bw = (side * aspect.sqrt()).round().clamp(spec.min_size as f64, w as f64);
            let bh = (side / aspect.sqrt()).round().clamp(spec.min_size as f64, h as f64);
            let x = rng.random_range(0..=(w - bw as usize)) as f64;
            let y = rng.random_range(0..=(h - bh as usize)) as f64;
            let b = BoundingBox { x1: x, y1: y, x2: x + bw, y2: y + bh };
            if objects.iter().all(|(o, _)| iou_unchecked(o, &b) <= spec.max_overlap) {
                objects.push((b, class_id));
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::CanvasTooSmall { requested: n_objects, width: spec.width, height: spec.height });
        }
    }

    let mut image = Image::new(w, h);
    let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.25f32..0.55));
    let gx: f32 = rng.random_range(-0.15..0.15);
    let gy: f32 = rng.random_range(-0.15..0.15);
    for y in 0..h {
        for x in 0..w {
            let ramp = gx * (x as f32 / w as f32 - 0.5) + gy * (y as f32 / h as f32 - 0.5);
            for (c, b) in base.iter().enumerate() {
                let n = rng.random_range(-1.0f32..1.0) * spec.texture_noise;
                image.set(c, y, x, b + ramp + n);
            }
        }
    }

    let area = (w * h) as f64;
    let n_clutter =
        Poisson::new((spec.clutter_density * area / 10_000.0).max(1e-9)).map(|p| p.sample(rng) as usize).unwrap_or(0);
    for _ in 0..n_clutter {
        // Muted, low-saturation blobs and bars.
        let gray: f32 = rng.random_range(0.1..0.9);
        let tint: [f32; 3] = std::array::from_fn(|_| (gray + rng.random_range(-0.12f32..0.12)).clamp(0.0, 1.0));
        let cw = rng.random_range(3..=(w / 6).max(4));
        let ch = rng.random_range(3..=(h / 6).max(4));
        let cx = rng.random_range(0..w.saturating_sub(cw).max(1));
        let cy = rng.random_range(0..h.saturating_sub(ch).max(1));
        let round = rng.random_bool(0.5);
        for y in cy..(cy + ch).min(h) {
            for x in cx..(cx + cw).min(w) {
                let u = (x - cx) as f64 / cw as f64 + 0.5 / cw as f64;
                let v = (y - cy) as f64 / ch as f64 + 0.5 / ch as f64;
                if !round || Shape::Ellipse.contains(u, v) {
                    for (c, t) in tint.iter().enumerate() {
                        image.set(c, y, x, *t);
                    }
                }
            }
        }
    }

    for (b, class_id) in &objects {
        let app = &spec.classes[*class_id];
        let color: [f32; 3] =
            std::array::from_fn(|c| app.color[c] + rng.random_range(-1.0f32..1.0) * spec.color_jitter);
        let (x0, y0) = (b.x1 as usize, b.y1 as usize);
        let (bw, bh) = (b.width() as usize, b.height() as usize);
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                let u = (x - x0) as f64 / bw as f64 + 0.5 / bw as f64;
                let v = (y - y0) as f64 / bh as f64 + 0.5 / bh as f64;
                if app.shape.contains(u, v) {
                    for (c, col) in color.iter().enumerate() {
                        let n = rng.random_range(-1.0f32..1.0) * spec.texture_noise;
                        image.set(c, y, x, col + n);
                    }
                }
            }
        }
    }

    Ok(RenderedScene { image: image.quantized(), objects })
}

pub fn image_id(index: usize) -> String {
    format!("img_{index:05}")
}

/// Renders `n_images` scenes. Each image draws from its own stream keyed by
/// `(seed, image_id)`, so rendering order does not affect the output.
pub fn generate_dataset(spec: &SceneSpec, n_images: usize, seed: u64) -> Result<SyntheticDataset> {
    if n_images == 0 {
        return Err(Error::InvalidArgument("n_images must be at least 1".into()));
    }
    spec.validate()?;
    let weights = spec.class_weights.clone().unwrap_or_else(|| vec![1.0; spec.num_classes()]);
    let class_dist = WeightedIndex::new(&weights).map_err(|e| Error::InvalidArgument(e.to_string()))?;

    let scenes: Vec<RenderedScene> = (0..n_images)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, &format!("scene/{}", image_id(i)));
            render_scene(spec, &mut rng, &class_dist)
        })
        .collect::<Result<_>>()?;

    let mut images = Vec::with_capacity(n_images);
    let mut records = Vec::with_capacity(n_images);
    let mut annotations = Vec::new();
    for (i, scene) in scenes.into_iter().enumerate() {
        let id = image_id(i);
        for (bbox, class_id) in scene.objects {
            annotations.push(Annotation { id: annotations.len() as u64, image_id: id.clone(), bbox, class_id });
        }
        records.push(ImageRecord {
            id: id.clone(),
            width: spec.width,
            height: spec.height,
            source: format!("images/{id}.png"),
        });
        images.push(scene.image);
    }
    let classes = spec.classes.iter().map(|c| c.name.clone()).collect();
    let manifest = DatasetManifest::new(records, annotations, classes)?;
    Ok(SyntheticDataset { manifest, images })
}

/// Failure modes of the simulated base detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorNoise {
    /// Box jitter applied to detected objects; `None` keeps GT boxes exact.
    pub jitter_scale: Option<f64>,
    /// Row-stochastic `K x K`: row `g` is the distribution of the predicted
    /// (argmax) class for a ground-truth object of class `g`.
    pub confusion: Vec<Vec<f64>>,
    pub miss_rate: f64,
    pub novel_miss_rate: f64,
    /// Expected spurious boxes per image.
    pub fp_rate: f64,
    /// Fraction of spurious boxes whose predicted class is novel.
    pub fp_novel_share: f64,
    /// Expected extra poorly localized boxes per detected object.
    pub near_miss_rate: f64,
    pub near_miss_jitter_scale: f64,
    /// Dirichlet concentration of score vectors; `None` uses the mean.
    pub concentration: Option<f64>,
    /// Share of foreground mass on the predicted class.
    pub peak_mass: f64,
    pub background_mass: f64,
    pub novel_background_mass: f64,
    pub fp_background_mass: f64,
}

impl DetectorNoise {
    /// Exact boxes, correct classes, nothing missed or added.
    pub fn noiseless(num_classes: usize) -> Self {
        DetectorNoise {
            jitter_scale: None,
            confusion: identity_confusion(num_classes),
            miss_rate: 0.0,
            novel_miss_rate: 0.0,
            fp_rate: 0.0,
            fp_novel_share: 0.0,
            near_miss_rate: 0.0,
            near_miss_jitter_scale: 3.0,
            concentration: None,
            peak_mass: 0.9,
            background_mass: 0.05,
            novel_background_mass: 0.05,
            fp_background_mass: 0.05,
        }
    }

    /// Localization stays good for every class, but novel objects are often
    /// assigned a base class and spurious boxes favor novel classes.
    pub fn degraded_novel(num_classes: usize, novel: &[usize]) -> Self {
        let mut confusion = identity_confusion(num_classes);
        let base: Vec<usize> = (0..num_classes).filter(|c| !novel.contains(c)).collect();
        for (g, row) in confusion.iter_mut().enumerate() {
            let (keep, pool) = if novel.contains(&g) { (0.35, &base) } else { (0.95, &base) };
            let others: Vec<usize> = pool.iter().copied().filter(|&c| c != g).collect();
            if others.is_empty() {
                continue;
            }
            row.iter_mut().for_each(|v| *v = 0.0);
            row[g] = keep;
            for &c in &others {
                row[c] = (1.0 - keep) / others.len() as f64;
            }
        }
        DetectorNoise {
            jitter_scale: Some(12.0),
            confusion,
            miss_rate: 0.05,
            novel_miss_rate: 0.1,
            fp_rate: 2.0,
            fp_novel_share: 0.5,
            near_miss_rate: 0.5,
            near_miss_jitter_scale: 3.0,
            concentration: Some(8.0),
            peak_mass: 0.8,
            background_mass: 0.1,
            novel_background_mass: 0.3,
            fp_background_mass: 0.3,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(format!("detector noise: {msg}")));
        if self.confusion.len() != num_classes || self.confusion.iter().any(|r| r.len() != num_classes) {
            return bad("confusion matrix must be K x K");
        }
        for row in &self.confusion {
            if row.iter().any(|v| !(*v >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return bad("confusion rows must be non-negative and sum to 1");
            }
        }
        let unit = [
            self.miss_rate,
            self.novel_miss_rate,
            self.fp_novel_share,
            self.peak_mass,
            self.background_mass,
            self.novel_background_mass,
            self.fp_background_mass,
        ];
        if unit.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return bad("rates and masses must lie in [0, 1]");
        }
        if !(self.fp_rate >= 0.0) || !(self.near_miss_rate >= 0.0) || !(self.near_miss_jitter_scale > 0.0) {
            return bad("fp_rate and near_miss_rate must be non-negative");
        }
        if matches!(self.jitter_scale, Some(s) if !(s > 0.0)) || matches!(self.concentration, Some(c) if !(c > 0.0)) {
            return bad("jitter_scale and concentration must be positive");
        }
        Ok(())
    }
}

pub fn identity_confusion(num_classes: usize) -> Vec<Vec<f64>> {
    (0..num_classes).map(|g| (0..num_classes).map(|c| f64::from(u8::from(c == g))).collect()).collect()
}

/// Draws a K-vector of foreground scores whose argmax is `predicted`.
///
/// The K foreground entries plus a background remainder follow a Dirichlet
/// centered on `(peak, spread..., background)`; the largest foreground draw
/// is swapped into `predicted`.
pub fn draw_scores<R: Rng>(
    rng: &mut R,
    num_classes: usize,
    predicted: usize,
    peak_mass: f64,
    background_mass: f64,
    concentration: Option<f64>,
) -> Vec<f64> {
    let fg = 1.0 - background_mass;
    let spread = if num_classes > 1 { fg * (1.0 - peak_mass) / (num_classes - 1) as f64 } else { 0.0 };
    let mut mean: Vec<f64> = (0..num_classes).map(|c| if c == predicted { fg * peak_mass } else { spread }).collect();
    mean.push(background_mass);
    let mut scores = match concentration {
        None => mean,
        Some(conc) => {
            let mut draws: Vec<f64> = mean
                .iter()
                .map(|&m| if m <= 0.0 { 0.0 } else { Gamma::new(conc * m, 1.0).map(|g| g.sample(rng)).unwrap_or(0.0) })
                .collect();
            let total: f64 = draws.iter().sum();
            if total > 0.0 {
                draws.iter_mut().for_each(|v| *v /= total);
            }
            draws
        }
    };
    scores.truncate(num_classes);
    let (top, _) =
        scores.iter().enumerate().fold(
            (predicted, scores[predicted]),
            |best, (c, &s)| {
                if s > best.1 {
                    (c, s)
                } else {
                    best
                }
            },
        );
    scores.swap(top, predicted);
    scores.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    scores
}

fn random_box<R: Rng>(rng: &mut R, w: f64, h: f64) -> BoundingBox {
    let bw = rng.random_range(0.1..0.35) * w;
    let bh = rng.random_range(0.1..0.35) * h;
    let x = rng.random_range(0.0..(w - bw));
    let y = rng.random_range(0.0..(h - bh));
    BoundingBox { x1: x, y1: y, x2: x + bw, y2: y + bh }
}

/// Replays base-detector output on every manifest image.
pub fn simulate_detections(
    manifest: &DatasetManifest,
    noise: &DetectorNoise,
    novel_class_ids: &[usize],
    seed: u64,
) -> Result<Vec<Detection>> {
    let k = manifest.num_classes();
    noise.validate(k)?;
    let rows: Vec<WeightedIndex<f64>> = noise
        .confusion
        .iter()
        .map(|r| WeightedIndex::new(r).map_err(|e| Error::InvalidArgument(e.to_string())))
        .collect::<Result<_>>()?;
    let novel: Vec<usize> = novel_class_ids.iter().copied().filter(|&c| c < k).collect();
    let base: Vec<usize> = (0..k).filter(|c| !novel.contains(c)).collect();
    let by_image = manifest.annotations_by_image();

    let per_image: Vec<Vec<Detection>> = manifest
        .images()
        .par_iter()
        .map(|img| {
            let mut rng = substream(seed, &format!("sim/{}", img.id));
            let (w, h) = (f64::from(img.width), f64::from(img.height));
            let mut out = Vec::new();
            let mut emit = |bbox: BoundingBox, scores: Vec<f64>| {
                out.push(Detection { image_id: img.id.clone(), bbox: bbox.snapped(BOX_GRID_BITS), scores });
            };
            for gt in by_image.get(img.id.as_str()).map(Vec::as_slice).unwrap_or(&[]) {
                let is_novel = novel.contains(&gt.class_id);
                let miss = if is_novel { noise.novel_miss_rate } else { noise.miss_rate };
                if rng.random_bool(miss) {
                    continue;
                }
                let bg = if is_novel { noise.novel_background_mass } else { noise.background_mass };
                let bbox = match noise.jitter_scale {
                    Some(s) => jitter_box(&gt.bbox, s, (w, h), &mut rng)?,
                    None => gt.bbox,
                };
                let predicted = rows[gt.class_id].sample(&mut rng);
                emit(bbox, draw_scores(&mut rng, k, predicted, noise.peak_mass, bg, noise.concentration));

                if noise.near_miss_rate > 0.0 {
                    let extra = Poisson::new(noise.near_miss_rate).map(|p| p.sample(&mut rng) as usize).unwrap_or(0);
                    for _ in 0..extra {
                        let nb = jitter_box(&gt.bbox, noise.near_miss_jitter_scale, (w, h), &mut rng)?;
                        let predicted = rows[gt.class_id].sample(&mut rng);
                        let bg = (bg + noise.fp_background_mass) / 2.0;
                        emit(nb, draw_scores(&mut rng, k, predicted, noise.peak_mass, bg, noise.concentration));
                    }
                }
            }
            if noise.fp_rate > 0.0 {
                let n_fp = Poisson::new(noise.fp_rate).map(|p| p.sample(&mut rng) as usize).unwrap_or(0);
                for _ in 0..n_fp {
                    let bbox = random_box(&mut rng, w, h);
                    let pool = if !novel.is_empty() && rng.random_bool(noise.fp_novel_share) { &novel } else { &base };
                    let pool = if pool.is_empty() { &novel } else { pool };
                    let predicted = pool[rng.random_range(0..pool.len())];
                    emit(
                        bbox,
                        draw_scores(
                            &mut rng,
                            k,
                            predicted,
                            noise.peak_mass,
                            noise.fp_background_mass,
                            noise.concentration,
                        ),
                    );
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{detections_to_json, parse_detections};
    use std::path::Path;

    fn small_spec() -> SceneSpec {
        let mut s = SceneSpec::shapes(4);
        s.width = 64;
        s.height = 64;
        s.min_size = 10;
        s.max_size = 20;
        s
    }

    #[test]
    fn empty_scene() {
        let mut s = small_spec();
        s.min_objects = 0;
        s.max_objects = 0;
        let d = generate_dataset(&s, 1, 1).unwrap();
        assert_eq!(d.manifest.images().len(), 1);
        assert!(d.manifest.annotations().is_empty());
    }

    #[test]
    fn generation_is_deterministic() {
        let s = small_spec();
        let a = generate_dataset(&s, 6, 3).unwrap();
        let b = generate_dataset(&s, 6, 3).unwrap();
        assert_eq!(a.manifest.to_json(), b.manifest.to_json());
        assert_eq!(a.images, b.images);
        let c = generate_dataset(&s, 6, 4).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn crowded_canvas_is_rejected() {
        let mut s = small_spec();
        s.min_objects = 30;
        s.max_objects = 30;
        s.min_size = 30;
        s.max_size = 30;
        assert!(matches!(generate_dataset(&s, 1, 0), Err(Error::CanvasTooSmall { .. })));
        s.min_size = 100;
        s.max_size = 100;
        assert!(matches!(generate_dataset(&s, 1, 0), Err(Error::CanvasTooSmall { .. })));
    }

    #[test]
    fn default_twelve_class_spec_covers_every_class() {
        let d = generate_dataset(&SceneSpec::shapes(12), 200, 7).unwrap();
        let mut counts = [0usize; 12];
        for a in d.manifest.annotations() {
            counts[a.class_id] += 1;
        }
        assert!(counts.iter().all(|&c| c >= 20), "{counts:?}");
    }

    #[test]
    fn noiseless_simulation_reproduces_ground_truth() {
        let d = generate_dataset(&small_spec(), 5, 2).unwrap();
        let dets = simulate_detections(&d.manifest, &DetectorNoise::noiseless(4), &[], 0).unwrap();
        assert_eq!(dets.len(), d.manifest.annotations().len());
        for (det, gt) in dets.iter().zip(d.manifest.annotations()) {
            assert_eq!(iou_unchecked(&det.bbox, &gt.bbox), 1.0);
            assert_eq!(det.top_class().0, gt.class_id);
        }
    }

    #[test]
    fn full_miss_rate_leaves_only_false_positives() {
        let d = generate_dataset(&small_spec(), 20, 2).unwrap();
        let mut noise = DetectorNoise::noiseless(4);
        noise.miss_rate = 1.0;
        noise.fp_rate = 1.5;
        let dets = simulate_detections(&d.manifest, &noise, &[], 0).unwrap();
        let by_image = d.manifest.annotations_by_image();
        assert!(!dets.is_empty());
        for det in &dets {
            let overlaps_gt =
                by_image.get(det.image_id.as_str()).map(|v| v.iter().any(|a| a.bbox == det.bbox)).unwrap_or(false);
            assert!(!overlaps_gt);
        }
    }

    #[test]
    fn false_positive_rate_matches_expectation() {
        let mut s = small_spec();
        s.min_objects = 0;
        s.max_objects = 0;
        let d = generate_dataset(&s, 2000, 1).unwrap();
        let mut noise = DetectorNoise::noiseless(4);
        noise.fp_rate = 1.7;
        let dets = simulate_detections(&d.manifest, &noise, &[], 5).unwrap();
        let mean = dets.len() as f64 / 2000.0;
        // Poisson: standard error sqrt(rate / n).
        assert!((mean - 1.7).abs() < 4.0 * (1.7f64 / 2000.0).sqrt(), "mean {mean}");
    }

    #[test]
    fn uniform_confusion_row_spreads_argmax() {
        let k = 5;
        let mut rng = substream(0, "conf");
        let row = WeightedIndex::new(vec![1.0; k]).unwrap();
        let mut counts = vec![0usize; k];
        let n = 10_000;
        for _ in 0..n {
            let p = row.sample(&mut rng);
            let s = draw_scores(&mut rng, k, p, 0.6, 0.2, Some(4.0));
            let argmax = (0..k).fold(0, |b, c| if s[c] > s[b] { c } else { b });
            assert_eq!(argmax, p);
            counts[argmax] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 1.0 / k as f64).abs() <= 0.02);
        }
    }

    #[test]
    fn scores_are_sub_stochastic() {
        let mut rng = substream(2, "scores");
        for _ in 0..1000 {
            let s = draw_scores(&mut rng, 6, 2, 0.8, 0.3, Some(2.0));
            assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(s.iter().sum::<f64>() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn simulated_detections_round_trip_through_json() {
        let d = generate_dataset(&small_spec(), 8, 4).unwrap();
        let noise = DetectorNoise::degraded_novel(4, &[3]);
        let dets = simulate_detections(&d.manifest, &noise, &[3], 11).unwrap();
        let back = parse_detections(&detections_to_json(&dets), Path::new("mem"), &d.manifest).unwrap();
        assert_eq!(back, dets);
    }

    #[test]
    fn noise_validation() {
        let mut n = DetectorNoise::noiseless(3);
        n.confusion[0][1] = 0.5;
        assert!(n.validate(3).is_err());
        assert!(DetectorNoise::noiseless(3).validate(4).is_err());
        assert!(DetectorNoise::degraded_novel(6, &[4, 5]).validate(6).is_ok());
    }
}
