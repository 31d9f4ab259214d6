//! Seeded inputs for the kernel benchmarks.

use lowshot_core::detsim::{generate_dataset, simulate_detections, DetectorNoise, SceneSpec, SyntheticDataset};
use lowshot_core::netcore::CgnlScale;
use lowshot_core::netcore::{CgnlWeights, FeatureMap};
use lowshot_core::rng::substream;
use lowshot_core::{CorrectionModel, Detection, FeatureExtractorConfig};
use rand::Rng;

fn uniform(n: usize, scale: f64, key: &str) -> Vec<f64> {
    let mut rng = substream(1, key);
    (0..n).map(|_| scale * (2.0 * rng.random::<f64>() - 1.0)).collect()
}

pub fn feature_map(c: usize, h: usize, w: usize) -> FeatureMap {
    FeatureMap::new(c, h, w, uniform(c * h * w, 1.0, "map")).expect("shape matches")
}

pub fn cgnl_weights(c: usize) -> CgnlWeights {
    let s = 1.0 / (c as f64).sqrt();
    CgnlWeights {
        channels: c,
        theta: uniform(c * c, s, "theta"),
        phi: uniform(c * c, s, "phi"),
        g: uniform(c * c, s, "g"),
        z: uniform(c * c, s, "z"),
    }
}

pub fn model(cfg: FeatureExtractorConfig, num_classes: usize) -> CorrectionModel {
    let names = (0..num_classes).map(|c| format!("c{c}")).collect();
    CorrectionModel::initialize(cfg, names, (0..num_classes).collect(), Vec::new(), 16.0, 3).expect("valid config")
}

pub fn compact_extractor() -> FeatureExtractorConfig {
    FeatureExtractorConfig {
        input_size: 32,
        channels: vec![8, 16, 32, 64],
        embedding_dim: 64,
        cgnl_after_stage: Some(3),
        cgnl_scale: CgnlScale::InversePositions,
    }
}

pub fn crops(n: usize, size: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| uniform(3 * size * size, 1.0, &format!("crop/{i}"))).collect()
}

/// A rendered scene set with degraded-novel detections on it.
pub fn scenes(classes: usize, images: usize) -> (SyntheticDataset, Vec<Detection>) {
    let novel = [classes - 1];
    let ds = generate_dataset(&SceneSpec::shapes(classes), images, 5).expect("valid spec");
    let dets = simulate_detections(&ds.manifest, &DetectorNoise::degraded_novel(classes, &novel), &novel, 6)
        .expect("valid noise");
    (ds, dets)
}
