//! Versioned model checkpoints: layer shapes, all parameter arrays, the head
//! mode, the inference setting chosen after training, and (optionally) the
//! optimizer state for resuming. Serialized as JSON, which round-trips `f64`
//! exactly and is byte-stable for identical runs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::inference::InterpolationSetting;
use crate::model::{
    CosineHead, DenseLayer, FeatureExtractor, HeadMode, KdHead, LinearHead, StudentModel,
};
use crate::trainer::OptimizerState;

pub const FORMAT_TAG: &str = "dho-checkpoint-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub mode: HeadMode,
    pub num_classes: usize,
    pub input_dim: usize,
    pub feature_dim: usize,
    pub extractor: Vec<DenseLayer>,
    pub ce_head: LinearHead,
    pub kd_head: Option<KdHead>,
    /// Inference setting chosen after training, if any.
    pub setting: Option<InterpolationSetting>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn from_model(
        model: &StudentModel,
        setting: Option<InterpolationSetting>,
        optimizer: Option<OptimizerState>,
    ) -> Self {
        Self {
            format: FORMAT_TAG.to_string(),
            mode: model.mode,
            num_classes: model.num_classes(),
            input_dim: model.input_dim(),
            feature_dim: model.feature_dim(),
            extractor: model.extractor.layers().to_vec(),
            ce_head: model.ce_head.clone(),
            kd_head: model.kd_head.clone(),
            setting,
            optimizer,
        }
    }

    /// Rebuilds the model, revalidating every shape invariant.
    pub fn into_model(self) -> Result<(StudentModel, Option<InterpolationSetting>, Option<OptimizerState>)> {
        if self.format != FORMAT_TAG {
            return Err(CoreError::Checkpoint(format!(
                "unsupported checkpoint format '{}', expected '{FORMAT_TAG}'",
                self.format
            )));
        }
        let extractor = FeatureExtractor::from_layers(self.extractor)
            .map_err(|e| CoreError::Checkpoint(format!("bad extractor: {e}")))?;
        if extractor.input_dim() != self.input_dim || extractor.output_dim() != self.feature_dim {
            return Err(CoreError::Checkpoint("extractor shape disagrees with header".into()));
        }
        if self.ce_head.num_classes() != self.num_classes
            || self.ce_head.feature_dim() != self.feature_dim
        {
            return Err(CoreError::Checkpoint("CE head shape disagrees with header".into()));
        }
        let kd_head = match self.kd_head {
            Some(KdHead::Linear(h)) => {
                if h.num_classes() != self.num_classes || h.feature_dim() != self.feature_dim {
                    return Err(CoreError::Checkpoint("KD head shape disagrees with header".into()));
                }
                Some(KdHead::Linear(h))
            }
            Some(KdHead::Cosine(h)) => {
                if h.num_classes() != self.num_classes || h.feature_dim() != self.feature_dim {
                    return Err(CoreError::Checkpoint("KD head shape disagrees with header".into()));
                }
                // revalidate the zero-row and scale invariants
                Some(KdHead::Cosine(
                    CosineHead::new(h.weight, h.scale)
                        .map_err(|e| CoreError::Checkpoint(format!("bad cosine head: {e}")))?,
                ))
            }
            None => None,
        };
        if self.mode == HeadMode::Dual && kd_head.is_none() {
            return Err(CoreError::Checkpoint("dual-mode checkpoint is missing its KD head".into()));
        }
        let model = StudentModel { extractor, ce_head: self.ce_head, kd_head, mode: self.mode };
        Ok((model, self.setting, self.optimizer))
    }
}

pub fn save(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(checkpoint)?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path)?;
    let checkpoint: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| CoreError::Checkpoint(format!("cannot parse {}: {e}", path.display())))?;
    Ok(checkpoint)
}
