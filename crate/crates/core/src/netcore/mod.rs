//! Correction-network trunk: strided 3x3 convolution stages with ReLU, an
//! optional compact non-local block after one stage, global average pooling
//! and a linear embedding layer.
//!
//! Trunk parameters live in one flat `f64` buffer described by a
//! [`Layout`]; the cosine head is kept separately in [`CosineHead`].

mod cgnl;
mod checkpoint;
mod conv;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use cgnl::{
    cgnl_backward, cgnl_forward, cgnl_forward_reference, cgnl_forward_scaled, CgnlGrads, CgnlScale, CgnlWeights,
    FeatureMap,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_SCHEMA_VERSION};

use crate::classifier::CosineHead;
use crate::error::{Error, Result};
use crate::rng::substream;
use cgnl::CgnlCache;
use conv::{gemm, ConvShape};

/// Fixed input normalization: `(pixel - 0.5) * 4`.
const INPUT_MEAN: f64 = 0.5;
const INPUT_SCALE: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureExtractorConfig {
    /// Side of the square input crop, in pixels.
    pub input_size: usize,
    /// Output channels of each stride-2 stage.
    pub channels: Vec<usize>,
    pub embedding_dim: usize,
    /// 1-based stage after which the non-local block runs.
    pub cgnl_after_stage: Option<usize>,
    pub cgnl_scale: CgnlScale,
}

impl Default for FeatureExtractorConfig {
    fn default() -> Self {
        FeatureExtractorConfig {
            input_size: 64,
            channels: vec![16, 32, 64, 128],
            embedding_dim: 128,
            cgnl_after_stage: Some(3),
            cgnl_scale: CgnlScale::None,
        }
    }
}

impl FeatureExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim < 2 {
            return Err(Error::InvalidArgument("embedding dimension must be at least 2".into()));
        }
        if self.channels.is_empty() || self.channels.contains(&0) || self.input_size == 0 {
            return Err(Error::InvalidArgument("extractor needs at least one non-empty stage".into()));
        }
        if let Some(s) = self.cgnl_after_stage {
            if s == 0 || s > self.channels.len() {
                return Err(Error::InvalidArgument(format!(
                    "cgnl_after_stage {s} outside 1..={}",
                    self.channels.len()
                )));
            }
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        3 * self.input_size * self.input_size
    }

    fn conv_shapes(&self) -> Vec<ConvShape> {
        let mut shapes = Vec::with_capacity(self.channels.len());
        let (mut c, mut h, mut w) = (3, self.input_size, self.input_size);
        for &out_c in &self.channels {
            let s = ConvShape { in_c: c, out_c, in_h: h, in_w: w, stride: 2 };
            (c, h, w) = (out_c, s.out_h(), s.out_w());
            shapes.push(s);
        }
        shapes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Named tensors inside the flat trunk parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub tensors: Vec<TensorSpec>,
    pub total: usize,
}

impl Layout {
    pub fn for_config(cfg: &FeatureExtractorConfig) -> Self {
        let mut tensors = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let spec = TensorSpec { name, shape, offset };
            offset += spec.len();
            tensors.push(spec);
        };
        for (i, s) in cfg.conv_shapes().iter().enumerate() {
            push(format!("stage{}.weight", i + 1), vec![s.out_c, s.in_c, 3, 3]);
            push(format!("stage{}.bias", i + 1), vec![s.out_c]);
        }
        if let Some(stage) = cfg.cgnl_after_stage {
            let c = cfg.channels[stage - 1];
            for m in ["theta", "phi", "g", "z"] {
                push(format!("cgnl.{m}"), vec![c, c]);
            }
        }
        let last = *cfg.channels.last().expect("validated");
        push("embed.weight".into(), vec![cfg.embedding_dim, last]);
        push("embed.bias".into(), vec![cfg.embedding_dim]);
        Layout { tensors, total: offset }
    }

    pub fn get(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn range(&self, name: &str) -> std::ops::Range<usize> {
        self.get(name).unwrap_or_else(|| panic!("missing tensor {name}")).range()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelStage {
    Initialized,
    Phase1,
    Imprinted,
    Phase2,
}

/// The trainable artifact: trunk parameters, cosine head and class metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionModel {
    pub config: FeatureExtractorConfig,
    pub params: Vec<f64>,
    pub head: CosineHead,
    pub class_names: Vec<String>,
    pub base_class_ids: Vec<usize>,
    pub novel_class_ids: Vec<usize>,
    pub stage: ModelStage,
}

/// Per-sample activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct TrunkCache {
    cols: Vec<Vec<f64>>,
    /// Post-ReLU output of each stage (before the non-local block).
    activations: Vec<Vec<f64>>,
    cgnl: Option<CgnlCache>,
    pooled: Vec<f64>,
}

/// Parameters borrowed for one batch, with the non-local weights unpacked.
pub struct Trunk<'a> {
    cfg: &'a FeatureExtractorConfig,
    layout: Layout,
    shapes: Vec<ConvShape>,
    params: &'a [f64],
    cgnl: Option<CgnlWeights>,
}

impl<'a> Trunk<'a> {
    pub fn new(cfg: &'a FeatureExtractorConfig, params: &'a [f64]) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::for_config(cfg);
        if params.len() != layout.total {
            return Err(Error::DimensionMismatch(format!(
                "trunk expects {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        let cgnl = cfg.cgnl_after_stage.map(|stage| {
            let c = cfg.channels[stage - 1];
            let take = |n: &str| params[layout.range(&format!("cgnl.{n}"))].to_vec();
            CgnlWeights { channels: c, theta: take("theta"), phi: take("phi"), g: take("g"), z: take("z") }
        });
        Ok(Trunk { cfg, shapes: cfg.conv_shapes(), layout, params, cgnl })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    fn tensor(&self, name: &str) -> &[f64] {
        &self.params[self.layout.range(name)]
    }

    pub fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.cfg.input_len() {
            return Err(Error::DimensionMismatch(format!(
                "crop has {} values, extractor expects 3x{s}x{s}",
                input.len(),
                s = self.cfg.input_size
            )));
        }
        Ok(())
    }

    /// Raw (unnormalized) embedding of one crop and its cache.
    pub fn forward(&self, input: &[f64]) -> (Vec<f64>, TrunkCache) {
        let mut x: Vec<f64> = input.iter().map(|v| (v - INPUT_MEAN) * INPUT_SCALE).collect();
        let mut cols_all = Vec::with_capacity(self.shapes.len());
        let mut acts = Vec::with_capacity(self.shapes.len());
        let mut cgnl_cache = None;
        for (i, s) in self.shapes.iter().enumerate() {
            let w = self.tensor(&format!("stage{}.weight", i + 1));
            let b = self.tensor(&format!("stage{}.bias", i + 1));
            let (cols, mut out) = s.forward(&x, w, b);
            out.iter_mut().for_each(|v| *v = v.max(0.0));
            cols_all.push(cols);
            x = out;
            acts.push(x.clone());
            if self.cfg.cgnl_after_stage == Some(i + 1) {
                let weights = self.cgnl.as_ref().expect("cgnl weights");
                let (z, cache) = cgnl::forward_cached(&x, s.out_c, s.out_h() * s.out_w(), weights, self.cfg.cgnl_scale);
                x = z;
                cgnl_cache = Some(cache);
            }
        }
        let last = self.shapes.last().expect("validated");
        let p = last.out_h() * last.out_w();
        let pooled: Vec<f64> = x.chunks_exact(p).map(|ch| ch.iter().sum::<f64>() / p as f64).collect();
        let d = self.cfg.embedding_dim;
        let mut emb = self.tensor("embed.bias").to_vec();
        gemm(d, last.out_c, 1, self.tensor("embed.weight"), false, &pooled, false, 1.0, &mut emb);
        (emb, TrunkCache { cols: cols_all, activations: acts, cgnl: cgnl_cache, pooled })
    }

    /// Accumulates `dL/dparams` into `grad` given `dL/d(embedding)`.
    /// Returns `dL/d(input pixels)` when requested.
    pub fn backward(
        &self,
        cache: &TrunkCache,
        d_emb: &[f64],
        grad: &mut [f64],
        want_input_grad: bool,
    ) -> Option<Vec<f64>> {
        let d = self.cfg.embedding_dim;
        let last = *self.shapes.last().expect("validated");
        let c_last = last.out_c;
        let p = last.out_h() * last.out_w();
        {
            let r = self.layout.range("embed.weight");
            gemm(d, 1, c_last, d_emb, false, &cache.pooled, false, 1.0, &mut grad[r]);
            let rb = self.layout.range("embed.bias");
            for (g, v) in grad[rb].iter_mut().zip(d_emb) {
                *g += v;
            }
        }
        let mut d_pooled = vec![0.0; c_last];
        gemm(c_last, d, 1, self.tensor("embed.weight"), true, d_emb, false, 0.0, &mut d_pooled);
        let mut dx: Vec<f64> = d_pooled.iter().flat_map(|g| std::iter::repeat_n(g / p as f64, p)).collect();

        for i in (0..self.shapes.len()).rev() {
            let s = self.shapes[i];
            let positions = s.out_h() * s.out_w();
            if self.cfg.cgnl_after_stage == Some(i + 1) {
                let cache_c = cache.cgnl.as_ref().expect("cgnl cache");
                let weights = self.cgnl.as_ref().expect("cgnl weights");
                let mut g = CgnlGrads::zeros(s.out_c);
                dx = cgnl::backward(cache_c, weights, self.cfg.cgnl_scale, s.out_c, positions, &dx, &mut g);
                for (name, src) in [("theta", &g.theta), ("phi", &g.phi), ("g", &g.g), ("z", &g.z)] {
                    let r = self.layout.range(&format!("cgnl.{name}"));
                    for (a, b) in grad[r].iter_mut().zip(src.iter()) {
                        *a += b;
                    }
                }
            }
            // ReLU mask from the stage output.
            for (g, a) in dx.iter_mut().zip(&cache.activations[i]) {
                if *a <= 0.0 {
                    *g = 0.0;
                }
            }
            let w_range = self.layout.range(&format!("stage{}.weight", i + 1));
            let b_range = self.layout.range(&format!("stage{}.bias", i + 1));
            let (lo, hi) = grad.split_at_mut(b_range.start);
            let d_w = &mut lo[w_range.clone()];
            let d_b = &mut hi[..b_range.len()];
            let need = i > 0 || want_input_grad;
            dx = s.backward(&cache.cols[i], &self.params[w_range], &dx, d_w, d_b, need)?;
        }
        Some(dx.iter().map(|v| v * INPUT_SCALE).collect())
    }
}

impl CorrectionModel {
    /// Fresh model with He-initialized convolutions, zero output projection
    /// in the non-local block and a random head.
    pub fn initialize(
        config: FeatureExtractorConfig,
        class_names: Vec<String>,
        base_class_ids: Vec<usize>,
        novel_class_ids: Vec<usize>,
        logit_scale: f64,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let layout = Layout::for_config(&config);
        let mut rng = substream(seed, "model-init");
        let mut params = vec![0.0; layout.total];
        for t in &layout.tensors {
            let std = if t.name.ends_with(".bias") || t.name == "cgnl.z" {
                0.0
            } else if t.name.starts_with("stage") {
                (2.0 / (t.shape[1] * 9) as f64).sqrt()
            } else {
                (1.0 / t.shape[1] as f64).sqrt()
            };
            for v in &mut params[t.range()] {
                *v = std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let head = CosineHead::random(class_names.len(), config.embedding_dim, logit_scale, &mut rng)?;
        Ok(CorrectionModel {
            config,
            params,
            head,
            class_names,
            base_class_ids,
            novel_class_ids,
            stage: ModelStage::Initialized,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn trunk(&self) -> Result<Trunk<'_>> {
        Trunk::new(&self.config, &self.params)
    }

    pub fn layout(&self) -> Layout {
        Layout::for_config(&self.config)
    }
}

/// Raw embeddings (`B x d`) for a batch of `3 x S x S` crops. Pure in the
/// model weights and inputs; rows are computed independently.
pub fn extract_features(crops: &[Vec<f64>], model: &CorrectionModel) -> Result<Vec<Vec<f64>>> {
    let trunk = model.trunk()?;
    for c in crops {
        trunk.check_input(c)?;
    }
    Ok(crops.par_iter().map(|c| trunk.forward(c).0).collect())
}
