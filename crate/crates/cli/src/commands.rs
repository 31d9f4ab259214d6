use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::info;
use lowshot_core::datamodel::{load_detections, load_manifest, make_kshot_split, save_detections};
use lowshot_core::detsim::{generate_dataset, simulate_detections, DetectorNoise, SceneSpec};
use lowshot_core::eval::{evaluate, ApMethod, EvalConfig, EvalReport, OracleMode};
use lowshot_core::fusion::{refine_dataset, save_refined, RefineConfig};
use lowshot_core::netcore::{load_checkpoint, save_checkpoint, ModelStage};
use lowshot_core::trainer::{imprint_and_infer, train_phase1, train_phase2, TrainConfig, TrainingSet};
use lowshot_core::{CorrectionModel, DatasetManifest, Error, Image, KShotSplit};
use serde::Serialize;

use crate::config::{describe, load_train_config, RunLog, TrainOverrides};
use crate::{invalid, plots};

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum NoisePreset {
    Noiseless,
    DegradedNovel,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum ApMethodArg {
    AllPoint,
    ElevenPoint,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum OracleModeArg {
    Suppress,
    Reassign,
    Combined,
}

impl From<ApMethodArg> for ApMethod {
    fn from(v: ApMethodArg) -> Self {
        match v {
            ApMethodArg::AllPoint => ApMethod::AllPoint,
            ApMethodArg::ElevenPoint => ApMethod::ElevenPoint,
        }
    }
}

impl From<OracleModeArg> for OracleMode {
    fn from(v: OracleModeArg) -> Self {
        match v {
            OracleModeArg::Suppress => OracleMode::Suppress,
            OracleModeArg::Reassign => OracleMode::Reassign,
            OracleModeArg::Combined => OracleMode::Combined,
        }
    }
}

/// Settings shared by every subcommand.
pub struct Context_ {
    pub config_file: Option<PathBuf>,
    pub single_thread: bool,
}

pub fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(invalid(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load_images(manifest: &DatasetManifest, root: &Path) -> Result<Vec<Image>> {
    use rayon::prelude::*;
    manifest.images().par_iter().map(|r| Image::load(&root.join(&r.source)).map_err(anyhow::Error::from)).collect()
}

fn train_config(ctx: &Context_, overrides: &TrainOverrides) -> Result<TrainConfig> {
    if let Some(p) = &ctx.config_file {
        require_file(p, "config file")?;
    }
    let mut cfg = load_train_config(ctx.config_file.as_deref())?;
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

/// Makes the configured extractor and crop size agree with a checkpoint.
fn align_with_checkpoint(cfg: &mut TrainConfig, model: &CorrectionModel) {
    if cfg.extractor != model.config {
        info!("using the checkpoint's extractor configuration");
        cfg.extractor = model.config.clone();
    }
    cfg.sampler.crop_size = model.config.input_size;
}

fn announce(cfg: &TrainConfig) {
    eprintln!("effective configuration:\n{}", describe(cfg));
}

fn parse_novel(novel: &[usize], split: Option<&Path>) -> Result<Vec<usize>> {
    match split {
        Some(p) => {
            require_file(p, "split")?;
            Ok(KShotSplit::load(p)?.novel_class_ids)
        }
        None => Ok(novel.to_vec()),
    }
}

#[derive(Debug, clap::Args)]
pub struct GenerateArgs {
    /// Number of classes
    #[arg(long, default_value_t = 12)]
    pub classes: usize,
    /// Number of images
    #[arg(long, default_value_t = 200)]
    pub images: usize,
    /// Scene seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Canvas width and height in pixels; object sizes scale along
    #[arg(long, default_value_t = 128)]
    pub size: u32,
    /// Classes to make rare (comma separated)
    #[arg(long, value_delimiter = ',')]
    pub novel: Vec<usize>,
    /// Sampling weight of each --novel class relative to the others
    #[arg(long, default_value_t = 1.0)]
    pub novel_weight: f64,
    /// Output directory (manifest.json and images/)
    #[arg(long)]
    pub out: PathBuf,
}

pub fn generate(ctx: &Context_, a: &GenerateArgs) -> Result<()> {
    let mut spec = SceneSpec::shapes(a.classes);
    let scale = |v: u32| ((v * a.size) / spec.width).max(4);
    (spec.min_size, spec.max_size) = (scale(spec.min_size), scale(spec.max_size));
    spec.width = a.size;
    spec.height = a.size;
    if !a.novel.is_empty() {
        if let Some(c) = a.novel.iter().find(|&&c| c >= a.classes) {
            return Err(invalid(format!("novel class {c} out of range")));
        }
        spec.class_weights =
            Some((0..a.classes).map(|c| if a.novel.contains(&c) { a.novel_weight } else { 1.0 }).collect());
    }
    let ds = generate_dataset(&spec, a.images, a.seed)?;
    prepare_out(&a.out)?;
    let img_dir = a.out.join("images");
    fs::create_dir_all(&img_dir).with_context(|| format!("creating {}", img_dir.display()))?;
    for (rec, img) in ds.manifest.images().iter().zip(&ds.images) {
        img.save_png(&a.out.join(&rec.source))?;
    }
    let manifest_path = a.out.join("manifest.json");
    ds.manifest.save(&manifest_path)?;
    println!(
        "wrote {} images and {} annotations to {}",
        ds.images.len(),
        ds.manifest.annotations().len(),
        a.out.display()
    );
    let mut log = RunLog::new("generate", ctx.single_thread);
    log.seed = Some(a.seed);
    log.config = serde_json::to_value(&spec)?;
    log.outputs = vec![manifest_path, img_dir];
    log.write(&a.out)
}

#[derive(Debug, clap::Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Novel classes (comma separated)
    #[arg(long, value_delimiter = ',')]
    pub novel: Vec<usize>,
    /// Detector noise preset
    #[arg(long, value_enum, default_value_t = NoisePreset::DegradedNovel)]
    pub noise: NoisePreset,
    /// JSON file with explicit detector noise parameters; overrides --noise
    #[arg(long)]
    pub noise_file: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (detections.json)
    #[arg(long)]
    pub out: PathBuf,
}

pub fn simulate(ctx: &Context_, a: &SimulateArgs) -> Result<()> {
    require_file(&a.manifest, "manifest")?;
    let manifest = load_manifest(&a.manifest)?;
    let k = manifest.num_classes();
    let noise = match &a.noise_file {
        Some(p) => {
            require_file(p, "noise file")?;
            let text = fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| invalid(format!("noise file {}: {e}", p.display())))?
        }
        None => match a.noise {
            NoisePreset::Noiseless => DetectorNoise::noiseless(k),
            NoisePreset::DegradedNovel => DetectorNoise::degraded_novel(k, &a.novel),
        },
    };
    let dets = simulate_detections(&manifest, &noise, &a.novel, a.seed)?;
    prepare_out(&a.out)?;
    let path = a.out.join("detections.json");
    save_detections(&path, &dets)?;
    println!("wrote {} detections to {}", dets.len(), path.display());
    let mut log = RunLog::new("simulate", ctx.single_thread);
    log.seed = Some(a.seed);
    log.config = serde_json::to_value(&noise)?;
    log.inputs = vec![a.manifest.clone()];
    log.outputs = vec![path];
    log.write(&a.out)
}

#[derive(Debug, clap::Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Novel classes (comma separated)
    #[arg(long, value_delimiter = ',', required = true)]
    pub novel: Vec<usize>,
    /// Shots per novel class
    #[arg(long)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (split.json)
    #[arg(long)]
    pub out: PathBuf,
}

pub fn split(ctx: &Context_, a: &SplitArgs) -> Result<()> {
    require_file(&a.manifest, "manifest")?;
    let manifest = load_manifest(&a.manifest)?;
    let split = make_kshot_split(&manifest, &a.novel, a.k, a.seed)?;
    prepare_out(&a.out)?;
    let path = a.out.join("split.json");
    split.save(&path)?;
    println!(
        "selected {} shots for {} novel classes",
        split.selected_novel_annotation_ids.len(),
        split.novel_class_ids.len()
    );
    let mut log = RunLog::new("split", ctx.single_thread);
    log.seed = Some(a.seed);
    log.config = serde_json::json!({ "novel": split.novel_class_ids, "k": a.k });
    log.inputs = vec![a.manifest.clone()];
    log.outputs = vec![path];
    log.write(&a.out)
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Base-detector output on the training images
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    /// 1 trains from scratch; 2 fine-tunes an imprinted checkpoint
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub phase: u8,
    /// Imprinted checkpoint (phase 2 only)
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    /// Output directory (phase{1,2}.json and a training report)
    #[arg(long)]
    pub out: PathBuf,
}

struct Loaded {
    manifest: DatasetManifest,
    images: Vec<Image>,
    detections: Vec<lowshot_core::Detection>,
    split: KShotSplit,
}

fn load_training(manifest: &Path, detections: &Path, split: &Path) -> Result<Loaded> {
    require_file(manifest, "manifest")?;
    require_file(detections, "detections")?;
    require_file(split, "split")?;
    let m = load_manifest(manifest)?;
    let split = KShotSplit::load(split)?;
    let detections = load_detections(detections, &m)?;
    let images = load_images(&m, &base_dir(manifest))?;
    Ok(Loaded { manifest: m, images, detections, split })
}

pub fn train(ctx: &Context_, a: &TrainArgs) -> Result<()> {
    let mut cfg = train_config(ctx, &a.overrides)?;
    let start = match (a.phase, &a.checkpoint) {
        (2, None) => return Err(invalid("phase 2 needs --checkpoint from imprint")),
        (1, Some(_)) => return Err(invalid("phase 1 starts from scratch; drop --checkpoint")),
        (_, Some(p)) => {
            require_file(p, "checkpoint")?;
            let m = load_checkpoint(p)?;
            align_with_checkpoint(&mut cfg, &m);
            Some(m)
        }
        _ => None,
    };
    let data = load_training(&a.manifest, &a.detections, &a.split)?;
    announce(&cfg);
    let set = TrainingSet::new(&data.manifest, &data.images, &data.detections)?;
    let (model, mut report) = match start {
        None => train_phase1(&set, &data.split, &cfg)?,
        Some(m) => train_phase2(&m, &set, &data.split, &cfg)?,
    };
    prepare_out(&a.out)?;
    let ckpt = a.out.join(format!("phase{}.json", a.phase));
    save_checkpoint(&model, &ckpt)?;
    report.checkpoint_path = Some(ckpt.display().to_string());
    let report_path = a.out.join(format!("phase{}_report.json", a.phase));
    write_json(&report_path, &report)?;
    if let (Some(first), Some(last)) = (report.first_snapshot(), report.last_snapshot()) {
        println!(
            "phase {}: held-out loss_cls {:?} -> {:?}, novel accuracy {:?} -> {:?}",
            a.phase, first.base_loss_cls, last.base_loss_cls, first.novel_accuracy, last.novel_accuracy
        );
    }
    println!("wrote {}", ckpt.display());
    let mut log = RunLog::new("train", ctx.single_thread);
    log.seed = Some(cfg.seed);
    log.config = serde_json::to_value(&cfg)?;
    log.inputs = vec![a.manifest.clone(), a.detections.clone(), a.split.clone()];
    log.inputs.extend(a.checkpoint.clone());
    log.outputs = vec![ckpt, report_path];
    log.write(&a.out)
}

#[derive(Debug, clap::Args)]
pub struct ImprintArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    /// Phase-1 checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    /// Output directory (imprinted.json and imprint_report.json)
    #[arg(long)]
    pub out: PathBuf,
}

pub fn imprint(ctx: &Context_, a: &ImprintArgs) -> Result<()> {
    let mut cfg = train_config(ctx, &a.overrides)?;
    require_file(&a.checkpoint, "checkpoint")?;
    let model = load_checkpoint(&a.checkpoint)?;
    align_with_checkpoint(&mut cfg, &model);
    let data = load_training(&a.manifest, &a.detections, &a.split)?;
    announce(&cfg);
    let set = TrainingSet::new(&data.manifest, &data.images, &data.detections)?;
    let (imprinted, report) = imprint_and_infer(&model, &set, &data.split, &cfg)?;
    prepare_out(&a.out)?;
    let ckpt = a.out.join("imprinted.json");
    save_checkpoint(&imprinted, &ckpt)?;
    let report_path = a.out.join("imprint_report.json");
    write_json(&report_path, &report)?;
    println!("imprinted {} novel classes; wrote {}", report.shots_per_class.len(), ckpt.display());
    let mut log = RunLog::new("imprint", ctx.single_thread);
    log.seed = Some(cfg.seed);
    log.config = serde_json::to_value(&cfg)?;
    log.inputs = vec![a.manifest.clone(), a.detections.clone(), a.split.clone(), a.checkpoint.clone()];
    log.outputs = vec![ckpt, report_path];
    log.write(&a.out)
}

#[derive(Debug, clap::Args)]
pub struct RefineArgs {
    /// Manifest of the images the detections belong to
    #[arg(long)]
    pub manifest: PathBuf,
    /// Base-detector output to refine
    #[arg(long)]
    pub detections: PathBuf,
    /// Imprinted or phase-2 checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Crops per forward batch
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Per-class NMS on the fused scores at this IoU (off by default)
    #[arg(long)]
    pub nms_iou: Option<f64>,
    /// Output directory (refined.json)
    #[arg(long)]
    pub out: PathBuf,
}

pub fn refine(ctx: &Context_, a: &RefineArgs) -> Result<()> {
    require_file(&a.manifest, "manifest")?;
    require_file(&a.detections, "detections")?;
    require_file(&a.checkpoint, "checkpoint")?;
    if matches!(a.nms_iou, Some(t) if !(0.0..=1.0).contains(&t)) {
        return Err(invalid("--nms-iou must lie in [0, 1]"));
    }
    let model = load_checkpoint(&a.checkpoint)?;
    if !matches!(model.stage, ModelStage::Imprinted | ModelStage::Phase2) {
        return Err(Error::Stage(format!(
            "refine needs an imprinted or phase-2 checkpoint, {} is {:?}; run imprint first",
            a.checkpoint.display(),
            model.stage
        ))
        .into());
    }
    let manifest = load_manifest(&a.manifest)?;
    let dets = load_detections(&a.detections, &manifest)?;
    let root = base_dir(&a.manifest);
    let cfg = RefineConfig { batch_size: a.batch_size, nms_iou: a.nms_iou };
    let refined = refine_dataset(&manifest, &dets, &model, &cfg, |rec| Image::load(&root.join(&rec.source)))?;
    prepare_out(&a.out)?;
    let path = a.out.join("refined.json");
    save_refined(&path, &refined)?;
    let n = refined.iter().filter(|r| r.refined()).count();
    println!("refined {n} of {} detections; wrote {}", refined.len(), path.display());
    let mut log = RunLog::new("refine", ctx.single_thread);
    log.config = serde_json::to_value(&cfg)?;
    log.inputs = vec![a.manifest.clone(), a.detections.clone(), a.checkpoint.clone()];
    log.outputs = vec![path];
    log.write(&a.out)
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    /// Manifest holding the ground truth
    #[arg(long)]
    pub manifest: PathBuf,
    /// Detections or refined detections
    #[arg(long)]
    pub detections: PathBuf,
    /// Novel classes (comma separated)
    #[arg(long, value_delimiter = ',')]
    pub novel: Vec<usize>,
    /// Take the novel classes from a split file instead of --novel
    #[arg(long, conflicts_with = "novel")]
    pub split: Option<PathBuf>,
    /// IoU thresholds for AP (comma separated)
    #[arg(long, value_delimiter = ',', default_values_t = [0.5, 0.75])]
    pub iou: Vec<f64>,
    #[arg(long, value_enum, default_value_t = ApMethodArg::AllPoint)]
    pub ap_method: ApMethodArg,
    /// Detections kept per image for the histogram and the oracle curve
    #[arg(long, default_value_t = 300)]
    pub top_t: usize,
    /// Histogram bins over [0, 1]
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    #[arg(long, value_enum, default_value_t = OracleModeArg::Combined)]
    pub oracle_mode: OracleModeArg,
    /// Oracle thresholds in [0, 0.5] (comma separated); default 0 to 0.5 by 0.05
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Vec<f64>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

fn run_eval(a: &EvalArgs) -> Result<(EvalReport, EvalConfig)> {
    require_file(&a.manifest, "manifest")?;
    require_file(&a.detections, "detections")?;
    let novel = parse_novel(&a.novel, a.split.as_deref())?;
    let mut cfg = EvalConfig {
        iou_thresholds: a.iou.clone(),
        ap_method: a.ap_method.into(),
        histogram_bins: a.bins,
        oracle_mode: a.oracle_mode.into(),
        top_t: a.top_t,
        ..Default::default()
    };
    if !a.thresholds.is_empty() {
        cfg.oracle_thresholds = a.thresholds.clone();
    }
    let manifest = load_manifest(&a.manifest)?;
    let dets = load_detections(&a.detections, &manifest)?;
    Ok((evaluate(&dets, &manifest, &novel, &cfg)?, cfg))
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{:.2}", 100.0 * v))
}

fn metrics_table(report: &EvalReport) -> String {
    let mut out = String::from("class_id,name,split,num_gt");
    for t in &report.iou_thresholds {
        out.push_str(&format!(",ap{}", (t * 100.0).round()));
    }
    out.push('\n');
    for c in &report.per_class {
        out.push_str(&format!("{},{},{:?},{}", c.class_id, c.name, c.split, c.num_gt).to_lowercase());
        for v in &c.ap {
            out.push_str(&format!(",{}", v.map_or(String::new(), |v| format!("{v:.6}"))));
        }
        out.push('\n');
    }
    for (name, values) in
        [("mean_base", &report.mean_base), ("mean_novel", &report.mean_novel), ("mean_all", &report.mean_all)]
    {
        out.push_str(&format!("-,{name},-,-"));
        for v in values {
            out.push_str(&format!(",{}", v.map_or(String::new(), |v| format!("{v:.6}"))));
        }
        out.push('\n');
    }
    out
}

pub fn evaluate_cmd(ctx: &Context_, a: &EvalArgs) -> Result<()> {
    let (report, cfg) = run_eval(a)?;
    prepare_out(&a.out)?;
    let report_path = a.out.join("report.json");
    fs::write(&report_path, report.to_json() + "\n").with_context(|| format!("writing {}", report_path.display()))?;
    let table_path = a.out.join("metrics.csv");
    fs::write(&table_path, metrics_table(&report)).with_context(|| format!("writing {}", table_path.display()))?;
    println!("{:>8} {:>8} {:>8} {:>8}", "IoU", "base", "novel", "all");
    for (i, t) in report.iou_thresholds.iter().enumerate() {
        println!(
            "{:>8.2} {:>8} {:>8} {:>8}",
            t,
            pct(report.mean_base[i]),
            pct(report.mean_novel[i]),
            pct(report.mean_all[i])
        );
    }
    let mut log = RunLog::new("evaluate", ctx.single_thread);
    log.config = serde_json::to_value(&cfg)?;
    log.inputs = vec![a.manifest.clone(), a.detections.clone()];
    log.inputs.extend(a.split.clone());
    log.outputs = vec![report_path, table_path];
    log.write(&a.out)
}

pub fn analyze(ctx: &Context_, a: &EvalArgs) -> Result<()> {
    let (report, cfg) = run_eval(a)?;
    prepare_out(&a.out)?;
    let h = &report.histogram;
    let mut hist = String::from("iou_low,iou_high,base,novel\n");
    for (i, w) in h.edges.windows(2).enumerate() {
        hist.push_str(&format!("{},{},{},{}\n", w[0], w[1], h.base[i], h.novel[i]));
    }
    let mut curve = String::from("threshold,ap50_base,ap50_novel,ap50_all\n");
    let cell = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
    for p in &report.oracle_curve {
        curve.push_str(&format!("{},{},{},{}\n", p.threshold, cell(p.ap_base), cell(p.ap_novel), cell(p.ap_all)));
    }
    let paths = [
        a.out.join("iou_histogram.csv"),
        a.out.join("oracle_curve.csv"),
        a.out.join("analysis.json"),
        a.out.join("iou_histogram.png"),
        a.out.join("oracle_curve.png"),
    ];
    fs::write(&paths[0], hist)?;
    fs::write(&paths[1], curve)?;
    write_json(
        &paths[2],
        &serde_json::json!({ "oracle_mode": report.oracle_mode, "histogram": report.histogram, "oracle_curve": report.oracle_curve }),
    )?;
    plots::histogram_png(&report.histogram, &paths[3])?;
    plots::oracle_png(&report.oracle_curve, &paths[4])?;
    for p in &report.oracle_curve {
        println!("t={:.2} AP50 base {} novel {}", p.threshold, pct(p.ap_base), pct(p.ap_novel));
    }
    let mut log = RunLog::new("analyze", ctx.single_thread);
    log.config = serde_json::to_value(&cfg)?;
    log.inputs = vec![a.manifest.clone(), a.detections.clone()];
    log.inputs.extend(a.split.clone());
    log.outputs = paths.to_vec();
    log.write(&a.out)
}
