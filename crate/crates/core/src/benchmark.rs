//! End-to-end synthetic benchmark: generate, simulate, train, refine and
//! evaluate, once per shot count.

use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::datamodel::{make_kshot_split, Detection, KShotSplit};
use crate::detsim::{generate_dataset, simulate_detections, DetectorNoise, SceneSpec, SyntheticDataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, EvalReport};
use crate::fusion::{refine_dataset, RefineConfig};
use crate::netcore::{CgnlScale, CorrectionModel, FeatureExtractorConfig};
use crate::rng::derive_seed;
use crate::sampler::SamplerConfig;
use crate::trainer::{
    imprint_and_infer, train_phase1, train_phase2, ImprintReport, TrainConfig, TrainReport, TrainingSet,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub num_classes: usize,
    pub novel_class_ids: Vec<usize>,
    pub train_images: usize,
    pub test_images: usize,
    /// Sampling weight of a novel class relative to a base class in the
    /// training scenes; test scenes are uniform.
    pub novel_class_weight: f64,
    pub shots: Vec<usize>,
    pub train: TrainConfig,
    pub refine: RefineConfig,
    pub eval: EvalConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        let extractor = FeatureExtractorConfig {
            input_size: 32,
            channels: vec![8, 16, 32, 64],
            embedding_dim: 64,
            cgnl_after_stage: Some(3),
            cgnl_scale: CgnlScale::InversePositions,
        };
        let train = TrainConfig {
            sampler: SamplerConfig { crop_size: 32, boxes_per_image: 16, ..Default::default() },
            extractor,
            phase1_iterations: 2000,
            phase2_iterations: 500,
            eval_every: 250,
            ..Default::default()
        };
        BenchmarkConfig {
            seed: 7,
            num_classes: 16,
            novel_class_ids: vec![3, 6, 9, 12],
            train_images: 200,
            test_images: 100,
            novel_class_weight: 0.4,
            shots: vec![1, 5],
            train,
            refine: RefineConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotOutcome {
    pub k: usize,
    pub split: KShotSplit,
    pub imprint: ImprintReport,
    pub phase2: TrainReport,
    pub imprint_only: EvalReport,
    pub refined: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub config: BenchmarkConfig,
    pub baseline: EvalReport,
    pub phase1: TrainReport,
    pub shots: Vec<ShotOutcome>,
    pub wall_time_secs: f64,
}

impl BenchmarkReport {
    pub fn outcome(&self, k: usize) -> Option<&ShotOutcome> {
        self.shots.iter().find(|s| s.k == k)
    }

    /// The report without wall-clock fields, for run-to-run comparison.
    pub fn without_timings(&self) -> Self {
        let mut r = self.clone();
        r.wall_time_secs = 0.0;
        r.phase1.wall_time_secs = 0.0;
        for s in &mut r.shots {
            s.phase2.wall_time_secs = 0.0;
        }
        r
    }
}

/// Datasets and detections shared by every shot count.
pub struct BenchmarkData {
    pub train: SyntheticDataset,
    pub test: SyntheticDataset,
    pub train_detections: Vec<Detection>,
    pub test_detections: Vec<Detection>,
}

pub fn benchmark_data(cfg: &BenchmarkConfig) -> Result<BenchmarkData> {
    let k = cfg.num_classes;
    if let Some(c) = cfg.novel_class_ids.iter().find(|&&c| c >= k) {
        return Err(Error::InvalidArgument(format!("novel class {c} out of range")));
    }
    let mut train_spec = SceneSpec::shapes(k);
    train_spec.class_weights =
        Some((0..k).map(|c| if cfg.novel_class_ids.contains(&c) { cfg.novel_class_weight } else { 1.0 }).collect());
    let test_spec = SceneSpec::shapes(k);
    let train = generate_dataset(&train_spec, cfg.train_images, derive_seed(cfg.seed, "train-scenes"))?;
    let test = generate_dataset(&test_spec, cfg.test_images, derive_seed(cfg.seed, "test-scenes"))?;
    let noise = DetectorNoise::degraded_novel(k, &cfg.novel_class_ids);
    let train_detections =
        simulate_detections(&train.manifest, &noise, &cfg.novel_class_ids, derive_seed(cfg.seed, "train-detector"))?;
    let test_detections =
        simulate_detections(&test.manifest, &noise, &cfg.novel_class_ids, derive_seed(cfg.seed, "test-detector"))?;
    Ok(BenchmarkData { train, test, train_detections, test_detections })
}

fn refine_and_evaluate(data: &BenchmarkData, model: &CorrectionModel, cfg: &BenchmarkConfig) -> Result<EvalReport> {
    let manifest = &data.test.manifest;
    let refined = refine_dataset(manifest, &data.test_detections, model, &cfg.refine, |rec| {
        let i = manifest.images().iter().position(|r| r.id == rec.id).expect("record from manifest");
        Ok(data.test.images[i].clone())
    })?;
    let dets: Vec<Detection> = refined.iter().map(|r| r.to_detection()).collect();
    evaluate(&dets, manifest, &cfg.novel_class_ids, &cfg.eval)
}

pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkReport> {
    let start = Instant::now();
    let data = benchmark_data(cfg)?;
    let baseline = evaluate(&data.test_detections, &data.test.manifest, &cfg.novel_class_ids, &cfg.eval)?;
    let set = TrainingSet::new(&data.train.manifest, &data.train.images, &data.train_detections)?;
    let mut shots = Vec::new();
    let mut phase1 = None;
    let mut base_model = None;
    for &k in &cfg.shots {
        let split = make_kshot_split(&data.train.manifest, &cfg.novel_class_ids, k, derive_seed(cfg.seed, "split"))?;
        if base_model.is_none() {
            let (m, r) = train_phase1(&set, &split, &cfg.train)?;
            base_model = Some(m);
            phase1 = Some(r);
        }
        let m1 = base_model.as_ref().expect("phase 1 ran");
        let (imprinted, imprint) = imprint_and_infer(m1, &set, &split, &cfg.train)?;
        let imprint_only = refine_and_evaluate(&data, &imprinted, cfg)?;
        let (m2, phase2) = train_phase2(&imprinted, &set, &split, &cfg.train)?;
        let refined = refine_and_evaluate(&data, &m2, cfg)?;
        info!(
            "k={k}: novel AP50 baseline {:?} imprint-only {:?} refined {:?}; base AP50 baseline {:?} refined {:?}",
            baseline.novel_ap(0.5),
            imprint_only.novel_ap(0.5),
            refined.novel_ap(0.5),
            baseline.base_ap(0.5),
            refined.base_ap(0.5)
        );
        shots.push(ShotOutcome { k, split, imprint, phase2, imprint_only, refined });
    }
    let phase1 = phase1.ok_or_else(|| Error::InvalidArgument("no shot counts given".into()))?;
    Ok(BenchmarkReport { config: cfg.clone(), baseline, phase1, shots, wall_time_secs: start.elapsed().as_secs_f64() })
}
