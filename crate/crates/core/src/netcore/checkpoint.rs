//! JSON checkpoint container.
//!
//! ```text
//! {
//!   "schema_version": 1,
//!   "stage": "phase1" | "imprinted" | "phase2" | "initialized",
//!   "config": { FeatureExtractorConfig },
//!   "logit_scale": f64,
//!   "class_names": [string],
//!   "base_class_ids": [usize],
//!   "novel_class_ids": [usize],
//!   "tensors": [{ "name": string, "shape": [usize], "data": [f64] }]
//! }
//! ```
//!
//! Tensor names follow [`Layout`](super::Layout) plus `head.weight`
//! (`(K + 1) x d`, background last).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CorrectionModel, FeatureExtractorConfig, Layout, ModelStage};
use crate::classifier::CosineHead;
use crate::error::{Error, Result};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    schema_version: u32,
    stage: ModelStage,
    config: FeatureExtractorConfig,
    logit_scale: f64,
    class_names: Vec<String>,
    base_class_ids: Vec<usize>,
    novel_class_ids: Vec<usize>,
    tensors: Vec<TensorRecord>,
}

impl CorrectionModel {
    pub fn to_json(&self) -> String {
        let layout = self.layout();
        let mut tensors: Vec<TensorRecord> = layout
            .tensors
            .iter()
            .map(|t| TensorRecord {
                name: t.name.clone(),
                shape: t.shape.clone(),
                data: self.params[t.range()].to_vec(),
            })
            .collect();
        tensors.push(TensorRecord {
            name: "head.weight".into(),
            shape: vec![self.head.num_rows(), self.head.dim()],
            data: self.head.raw_weights().to_vec(),
        });
        let file = CheckpointFile {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            stage: self.stage,
            config: self.config.clone(),
            logit_scale: self.head.logit_scale(),
            class_names: self.class_names.clone(),
            base_class_ids: self.base_class_ids.clone(),
            novel_class_ids: self.novel_class_ids.clone(),
            tensors,
        };
        serde_json::to_string(&file).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text).map_err(|e| Error::json(origin, e))?;
        let bad = |reason: String| Error::validation(origin.display().to_string(), reason);
        if file.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(bad(format!("unsupported schema_version {}", file.schema_version)));
        }
        file.config.validate()?;
        let layout = Layout::for_config(&file.config);
        let mut params = vec![0.0; layout.total];
        let mut seen = vec![false; layout.tensors.len()];
        let mut head = None;
        for t in file.tensors {
            if t.data.len() != t.shape.iter().product::<usize>() {
                return Err(bad(format!("tensor {} data does not match its shape", t.name)));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(bad(format!("tensor {} has non-finite entries", t.name)));
            }
            if t.name == "head.weight" {
                if t.shape != [file.class_names.len() + 1, file.config.embedding_dim] {
                    return Err(bad(format!("head.weight has shape {:?}", t.shape)));
                }
                head =
                    Some(CosineHead::new(file.class_names.len(), file.config.embedding_dim, file.logit_scale, t.data)?);
                continue;
            }
            let Some(i) = layout.tensors.iter().position(|s| s.name == t.name) else {
                return Err(bad(format!("unexpected tensor {}", t.name)));
            };
            let spec = &layout.tensors[i];
            if spec.shape != t.shape {
                return Err(bad(format!("tensor {} has shape {:?}, expected {:?}", t.name, t.shape, spec.shape)));
            }
            params[spec.range()].copy_from_slice(&t.data);
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(bad(format!("missing tensor {}", layout.tensors[i].name)));
        }
        let head = head.ok_or_else(|| bad("missing tensor head.weight".into()))?;
        let k = file.class_names.len();
        if file.base_class_ids.iter().chain(&file.novel_class_ids).any(|&c| c >= k) {
            return Err(bad("class id out of range".into()));
        }
        Ok(CorrectionModel {
            config: file.config,
            params,
            head,
            class_names: file.class_names,
            base_class_ids: file.base_class_ids,
            novel_class_ids: file.novel_class_ids,
            stage: file.stage,
        })
    }
}

pub fn save_checkpoint(model: &CorrectionModel, path: &Path) -> Result<()> {
    std::fs::write(path, model.to_json()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<CorrectionModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    CorrectionModel::from_json(&text, path)
}
