//! Dual-head interpolation inference, post-training `(alpha, beta)` grid
//! search, entropy-adaptive weighting, and single-head emulation.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{CoreError, Result};
use crate::model::StudentModel;
use crate::numcore::{entropy, softmax, ProbVector, Vector};

/// Inference-time mixing weight and KD temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterpolationSetting {
    pub alpha: f64,
    pub beta: f64,
    pub validation_accuracy: Option<f64>,
}

impl InterpolationSetting {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(CoreError::InvalidArgument(format!(
                "alpha must be in [0,1], got {alpha}"
            )));
        }
        if !(beta > 0.0) {
            return Err(CoreError::InvalidArgument(format!("beta must be > 0, got {beta}")));
        }
        Ok(Self { alpha, beta, validation_accuracy: None })
    }
}

/// `alpha * p_ce + (1 - alpha) * softmax(kd_logits / beta)`.
pub fn interpolate(
    p_ce: &ProbVector,
    kd_logits: &Vector,
    alpha: f64,
    beta: f64,
) -> Result<ProbVector> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CoreError::InvalidArgument(format!("alpha must be in [0,1], got {alpha}")));
    }
    if !(beta > 0.0) {
        return Err(CoreError::InvalidArgument(format!("beta must be > 0, got {beta}")));
    }
    if p_ce.dim() != kd_logits.dim() {
        return Err(CoreError::DimensionMismatch {
            expected: p_ce.dim(),
            got: kd_logits.dim(),
            context: "interpolate",
        });
    }
    let p_kd = softmax(kd_logits, beta)?;
    ProbVector::new(
        p_ce.as_slice()
            .iter()
            .zip(p_kd.as_slice())
            .map(|(&a, &b)| alpha * a + (1.0 - alpha) * b)
            .collect(),
    )
}

/// CE-head probabilities and raw KD-head logits for one input; the two
/// quantities every interpolation consumes.
pub fn model_outputs(model: &StudentModel, x: &Vector) -> Result<(ProbVector, Vector)> {
    let z = model.extractor.forward_features(x)?;
    let p_ce = softmax(&model.ce_logits(&z)?, 1.0)?;
    let kd_logits = model.kd_logits(&z)?;
    Ok((p_ce, kd_logits))
}

/// Interpolated prediction; ties broken by the lowest class index.
pub fn predict(model: &StudentModel, x: &Vector, setting: &InterpolationSetting) -> Result<usize> {
    let (p_ce, kd_logits) = model_outputs(model, x)?;
    Ok(interpolate(&p_ce, &kd_logits, setting.alpha, setting.beta)?.argmax())
}

/// Per-example mixing weight from head confidences:
/// `exp(-H(p_ce)) / (exp(-H(p_ce)) + exp(-H(p_kd)))`.
pub fn entropy_adaptive_alpha(p_ce: &ProbVector, p_kd: &ProbVector) -> f64 {
    let a = (-entropy(p_ce)).exp();
    let b = (-entropy(p_kd)).exp();
    a / (a + b)
}

/// Prediction with the entropy-adaptive per-example alpha; `beta` still
/// tempers the KD head before both the weighting and the mixture.
pub fn predict_adaptive(model: &StudentModel, x: &Vector, beta: f64) -> Result<usize> {
    let (p_ce, kd_logits) = model_outputs(model, x)?;
    let p_kd = softmax(&kd_logits, beta)?;
    let alpha = entropy_adaptive_alpha(&p_ce, &p_kd);
    Ok(interpolate(&p_ce, &kd_logits, alpha, beta)?.argmax())
}

/// The interpolation setting that emulates a shared head trained with the
/// given loss weight: `alpha = lambda`, `beta = 1`.
pub fn emulate_sho(lambda: f64) -> Result<InterpolationSetting> {
    InterpolationSetting::new(lambda, 1.0)
}

/// Heuristic setting when no validation data exists: `beta = 0.5`, and
/// `alpha` keyed off measured teacher accuracy (0.2 for reliable teachers at
/// or above the 0.75 threshold, 0.4 otherwise).
pub fn heuristic_setting(teacher_accuracy: Option<f64>) -> InterpolationSetting {
    let alpha = match teacher_accuracy {
        Some(acc) if acc >= 0.75 => 0.2,
        _ => 0.4,
    };
    InterpolationSetting { alpha, beta: 0.5, validation_accuracy: None }
}

/// Default grid axes. The alpha grid always contains both endpoints so grid
/// search can never lose to a single head.
pub fn default_alpha_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

pub fn default_beta_grid() -> Vec<f64> {
    vec![0.1, 0.3, 0.5, 0.7, 1.0, 2.0]
}

/// Accuracy over the full `(alpha, beta)` grid plus the best setting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// `accuracy[i][j]` for `(alphas[i], betas[j])`.
    pub accuracy: Vec<Vec<f64>>,
    pub best: InterpolationSetting,
}

impl GridSearchResult {
    pub fn accuracy_at(&self, alpha: f64, beta: f64) -> Option<f64> {
        let i = self.alphas.iter().position(|&a| a == alpha)?;
        let j = self.betas.iter().position(|&b| b == beta)?;
        Some(self.accuracy[i][j])
    }

    /// Best accuracy achieved by any grid point with the given alpha.
    pub fn best_at_alpha(&self, alpha: f64) -> Option<f64> {
        let i = self.alphas.iter().position(|&a| a == alpha)?;
        self.accuracy[i].iter().cloned().reduce(f64::max)
    }
}

/// Evaluates interpolated accuracy at every grid point over the labeled
/// examples of `validation`. Head outputs are computed once per example and
/// reused across the whole grid. Ties prefer alpha closest to 0.5, then
/// smaller beta, then smaller alpha.
pub fn grid_search(
    model: &StudentModel,
    validation: &Dataset,
    alphas: &[f64],
    betas: &[f64],
) -> Result<GridSearchResult> {
    if alphas.is_empty() || betas.is_empty() {
        return Err(CoreError::InvalidArgument("grid axes must be non-empty".into()));
    }
    for &a in alphas {
        if !(0.0..=1.0).contains(&a) {
            return Err(CoreError::InvalidArgument(format!("alpha {a} out of [0,1]")));
        }
    }
    for &b in betas {
        if !(b > 0.0) {
            return Err(CoreError::InvalidArgument(format!("beta {b} must be > 0")));
        }
    }
    let mut outputs = Vec::new();
    for i in 0..validation.len() {
        if let Some(y) = validation.label(i) {
            let (p_ce, kd_logits) = model_outputs(model, validation.features(i))?;
            outputs.push((p_ce, kd_logits, y));
        }
    }
    if outputs.is_empty() {
        return Err(CoreError::InvalidArgument(
            "validation set has no labeled examples".into(),
        ));
    }
    let n = outputs.len() as f64;
    let mut accuracy = vec![vec![0.0; betas.len()]; alphas.len()];
    for (j, &beta) in betas.iter().enumerate() {
        // softmax(kd/beta) depends only on beta; hoist it out of the alpha loop
        let kd_probs: Vec<ProbVector> = outputs
            .iter()
            .map(|(_, kd_logits, _)| softmax(kd_logits, beta))
            .collect::<Result<_>>()?;
        for (i, &alpha) in alphas.iter().enumerate() {
            let mut correct = 0usize;
            for ((p_ce, _, y), p_kd) in outputs.iter().zip(&kd_probs) {
                let mixed = ProbVector::new(
                    p_ce.as_slice()
                        .iter()
                        .zip(p_kd.as_slice())
                        .map(|(&a, &b)| alpha * a + (1.0 - alpha) * b)
                        .collect(),
                )?;
                if mixed.argmax() == *y {
                    correct += 1;
                }
            }
            accuracy[i][j] = correct as f64 / n;
        }
    }

    let mut best = (0usize, 0usize);
    for i in 0..alphas.len() {
        for j in 0..betas.len() {
            let better = accuracy[i][j] > accuracy[best.0][best.1];
            let tie = accuracy[i][j] == accuracy[best.0][best.1];
            let closer_alpha =
                (alphas[i] - 0.5).abs() < (alphas[best.0] - 0.5).abs();
            let same_alpha_dist =
                (alphas[i] - 0.5).abs() == (alphas[best.0] - 0.5).abs();
            let smaller_beta = betas[j] < betas[best.1];
            let same_beta = betas[j] == betas[best.1];
            let smaller_alpha = alphas[i] < alphas[best.0];
            if better
                || (tie
                    && (closer_alpha
                        || (same_alpha_dist && (smaller_beta || (same_beta && smaller_alpha)))))
            {
                best = (i, j);
            }
        }
    }
    let mut setting = InterpolationSetting::new(alphas[best.0], betas[best.1])?;
    setting.validation_accuracy = Some(accuracy[best.0][best.1]);
    Ok(GridSearchResult { alphas: alphas.to_vec(), betas: betas.to_vec(), accuracy, best: setting })
}

/// Interpolated accuracy over the labeled examples of a dataset.
pub fn dataset_accuracy(
    model: &StudentModel,
    dataset: &Dataset,
    setting: &InterpolationSetting,
) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for i in 0..dataset.len() {
        let Some(y) = dataset.label(i) else { continue };
        if predict(model, dataset.features(i), setting)? == y {
            correct += 1;
        }
        total += 1;
    }
    if total == 0 {
        return Err(CoreError::InvalidArgument("no labeled examples to score".into()));
    }
    Ok(correct as f64 / total as f64)
}
