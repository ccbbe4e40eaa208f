//! Loss evaluation for single- and dual-head training, closed-form head
//! gradients, backpropagation through the extractor, and gradient-conflict
//! metrics.
//!
//! The supervised loss is the batch-mean cross-entropy of the CE head at
//! temperature 1. The distillation loss is the sum of two separately
//! normalized KL terms, `KL(teacher || student)` on the labeled batch and on
//! the unlabeled batch, with the student KD logits divided by the training
//! temperature `eta`. Gradients of the two losses are kept separate so their
//! conflict can be measured; the combined gradient is the
//! `lambda / (1 - lambda)` weighted sum.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{CoreError, Result};
use crate::model::{FeatureExtractor, ForwardTrace, HeadMode, KdHead, StudentModel};
use crate::numcore::{
    cosine_similarity, cross_entropy_counting, kl_divergence_counting, softmax, ClampCounter,
    Matrix, ProbVector, Vector,
};
use crate::teacher::TeacherPredictions;

/// Loss values for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce_loss: f64,
    pub kd_loss: f64,
    pub combined: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    fn new(ce_loss: f64, kd_loss: f64, lambda: f64) -> Self {
        Self { ce_loss, kd_loss, combined: lambda * ce_loss + (1.0 - lambda) * kd_loss, lambda }
    }
}

/// Per-layer extractor gradients (weight, bias), matching the extractor's
/// layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorGrad {
    pub layers: Vec<(Matrix, Vector)>,
}

impl ExtractorGrad {
    pub fn zeros_like(extractor: &FeatureExtractor) -> Self {
        let layers = extractor
            .layers()
            .iter()
            .map(|l| {
                (Matrix::zeros(l.weight.rows(), l.weight.cols()), Vector::zeros(l.bias.dim()))
            })
            .collect();
        Self { layers }
    }

    /// All parameters flattened into one vector, layer by layer (weight then
    /// bias), for whole-extractor cosine computations.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b.as_slice());
        }
        out
    }

    pub fn add_scaled(&mut self, scale: f64, other: &ExtractorGrad) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            w.add_scaled(scale, ow);
            b.add_scaled(scale, ob);
        }
    }
}

/// Gradient on one prediction head.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadGrad {
    Linear { weight: Matrix, bias: Vector },
    Cosine { weight: Matrix },
}

impl HeadGrad {
    fn zeros_for(head: &KdHead) -> Self {
        match head {
            KdHead::Linear(h) => HeadGrad::Linear {
                weight: Matrix::zeros(h.weight.rows(), h.weight.cols()),
                bias: Vector::zeros(h.bias.dim()),
            },
            KdHead::Cosine(h) => {
                HeadGrad::Cosine { weight: Matrix::zeros(h.weight.rows(), h.weight.cols()) }
            }
        }
    }

    pub fn weight(&self) -> &Matrix {
        match self {
            HeadGrad::Linear { weight, .. } | HeadGrad::Cosine { weight } => weight,
        }
    }

    pub fn is_finite(&self) -> bool {
        let w_ok = self.weight().as_slice().iter().all(|x| x.is_finite());
        match self {
            HeadGrad::Linear { bias, .. } => {
                w_ok && bias.as_slice().iter().all(|x| x.is_finite())
            }
            HeadGrad::Cosine { .. } => w_ok,
        }
    }
}

/// Raw (unweighted by `lambda`) gradients of the two losses for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    /// Gradient of the CE loss on the CE head.
    pub ce_head: HeadGrad,
    /// Gradient of the KD loss on the KD head (the shared head in single
    /// mode).
    pub kd_head: HeadGrad,
    /// Gradient of the CE loss on the extractor parameters.
    pub theta_ce: ExtractorGrad,
    /// Gradient of the KD loss on the extractor parameters.
    pub theta_kd: ExtractorGrad,
}

impl GradientBundle {
    pub fn is_finite(&self) -> bool {
        self.ce_head.is_finite()
            && self.kd_head.is_finite()
            && self.theta_ce.flatten().iter().all(|x| x.is_finite())
            && self.theta_kd.flatten().iter().all(|x| x.is_finite())
    }
}

/// Residuals of one labeled example, the ingredients of the conflict inner
/// product.
#[derive(Debug, Clone)]
pub struct LabeledResiduals {
    /// `p_ce - y`
    pub ce_residual: Vector,
    /// `p_kd - p`
    pub kd_residual: Vector,
}

/// Per-step conflict measurements between the CE- and KD-loss gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictTrace {
    pub step: usize,
    /// Cosine between the head weight gradients (same matrix in single mode,
    /// CE head vs KD head in dual mode). Absent when either gradient is zero.
    pub cossim_head: Option<f64>,
    /// Cosine between the two extractor gradients, flattened over all
    /// parameters. Absent when either gradient is zero.
    pub cossim_theta: Option<f64>,
    /// Batch mean of `(p_ce - y) . (p_kd - p)`.
    pub inner_product: f64,
    /// Per-layer extractor cosines, for diagnostics.
    pub per_layer_theta: Vec<Option<f64>>,
}

/// Everything the trainer needs from one batch evaluation.
#[derive(Debug, Clone)]
pub struct BatchEval {
    pub losses: LossBreakdown,
    pub bundle: GradientBundle,
    pub residuals: Vec<LabeledResiduals>,
}

// ---------------------------------------------------------------------------
// Closed-form pieces
// ---------------------------------------------------------------------------

/// Gradient of the loss with respect to an affine head's parameters:
/// `grad_W = (probs - target) z^T / temperature`, `grad_b = (probs - target)
/// / temperature`. Use `temperature = 1` for the CE head and the training
/// temperature `eta` for the KD head (the chain-rule factor through
/// `h(z)/eta`).
pub fn head_gradients(
    probs: &ProbVector,
    target: &ProbVector,
    z: &Vector,
    temperature: f64,
) -> Result<(Matrix, Vector)> {
    if probs.dim() != target.dim() {
        return Err(CoreError::DimensionMismatch {
            expected: probs.dim(),
            got: target.dim(),
            context: "head_gradients target",
        });
    }
    if !(temperature > 0.0) {
        return Err(CoreError::InvalidArgument(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    let mut residual = probs.residual(target);
    residual.scale(1.0 / temperature);
    let mut grad_w = Matrix::zeros(probs.dim(), z.dim());
    grad_w.add_scaled_outer(1.0, &residual, z);
    Ok((grad_w, residual))
}

/// Backpropagates an upstream feature gradient `dz` through the extractor,
/// returning per-layer parameter gradients for one example.
pub fn backprop_extractor(
    extractor: &FeatureExtractor,
    trace: &ForwardTrace,
    upstream: &Vector,
) -> Result<ExtractorGrad> {
    let mut grad = ExtractorGrad::zeros_like(extractor);
    accumulate_backprop(extractor, trace, upstream, &mut grad)?;
    Ok(grad)
}

/// As [`backprop_extractor`] but accumulating into an existing gradient.
pub fn accumulate_backprop(
    extractor: &FeatureExtractor,
    trace: &ForwardTrace,
    upstream: &Vector,
    grad: &mut ExtractorGrad,
) -> Result<()> {
    let layers = extractor.layers();
    if trace.preacts.len() != layers.len() || trace.acts.len() != layers.len() {
        return Err(CoreError::State(format!(
            "forward trace has {} layers, extractor has {}",
            trace.preacts.len(),
            layers.len()
        )));
    }
    if upstream.dim() != extractor.output_dim() {
        return Err(CoreError::DimensionMismatch {
            expected: extractor.output_dim(),
            got: upstream.dim(),
            context: "upstream feature gradient",
        });
    }
    let mut delta = upstream.clone();
    for (idx, layer) in layers.iter().enumerate().rev() {
        if trace.preacts[idx].dim() != layer.output_dim() {
            return Err(CoreError::State(format!(
                "trace layer {idx} has dimension {}, extractor layer expects {}",
                trace.preacts[idx].dim(),
                layer.output_dim()
            )));
        }
        // gate by the ReLU derivative at this layer's pre-activation
        let gated = Vector::from_fn(delta.dim(), |i| {
            if trace.preacts[idx][i] > 0.0 {
                delta[i]
            } else {
                0.0
            }
        });
        let input = if idx == 0 { &trace.input } else { &trace.acts[idx - 1] };
        grad.layers[idx].0.add_scaled_outer(1.0, &gated, input);
        grad.layers[idx].1.add_scaled(1.0, &gated);
        if idx > 0 {
            delta = layer.weight.matvec_transpose(&gated);
        }
    }
    Ok(())
}

/// Gradient of the KD loss through a cosine head: returns the per-row weight
/// gradient and the feature gradient for one example, given `g = dL/dv`
/// (`v` being the raw cosine logits).
fn cosine_head_backward(
    weight: &Matrix,
    scale: f64,
    z: &Vector,
    g: &Vector,
) -> Result<(Matrix, Vector)> {
    let z_norm = z.norm();
    if z_norm == 0.0 {
        return Err(CoreError::UndefinedSimilarity);
    }
    let mut grad_w = Matrix::zeros(weight.rows(), weight.cols());
    let mut dz = Vector::zeros(z.dim());
    let z_hat = {
        let mut v = z.clone();
        v.scale(1.0 / z_norm);
        v
    };
    for c in 0..weight.rows() {
        let row = weight.row(c);
        let w_norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if w_norm == 0.0 {
            return Err(CoreError::UndefinedSimilarity);
        }
        let w_hat = Vector::from_fn(row.len(), |j| row[j] / w_norm);
        let cos = z_hat.dot(&w_hat);
        let gc = g[c];
        // d(cos/scale)/dz = (w_hat - cos z_hat) / (scale |z|)
        for j in 0..z.dim() {
            dz.as_mut_slice()[j] += gc * (w_hat[j] - cos * z_hat[j]) / (scale * z_norm);
        }
        // d(cos/scale)/dw = (z_hat - cos w_hat) / (scale |w|)
        for (j, out) in grad_w.row_mut(c).iter_mut().enumerate() {
            *out += gc * (z_hat[j] - cos * w_hat[j]) / (scale * w_norm);
        }
    }
    Ok((grad_w, dz))
}

/// Mean squared error between linearly projected student features and
/// teacher features, batch-averaged (per-example error is the squared L2
/// norm of the difference).
pub fn feature_distillation_loss(
    student_features: &[Vector],
    teacher_features: &[Vector],
    projection: &Matrix,
) -> Result<f64> {
    if student_features.len() != teacher_features.len() {
        return Err(CoreError::DimensionMismatch {
            expected: student_features.len(),
            got: teacher_features.len(),
            context: "feature distillation batch",
        });
    }
    if student_features.is_empty() {
        return Err(CoreError::InvalidArgument("empty feature batch".into()));
    }
    let mut total = 0.0;
    for (z, t) in student_features.iter().zip(teacher_features) {
        if z.dim() != projection.cols() {
            return Err(CoreError::DimensionMismatch {
                expected: projection.cols(),
                got: z.dim(),
                context: "projection input",
            });
        }
        if t.dim() != projection.rows() {
            return Err(CoreError::DimensionMismatch {
                expected: projection.rows(),
                got: t.dim(),
                context: "teacher feature dimension",
            });
        }
        let projected = projection.matvec(z);
        let diff = projected.sub(t);
        total += diff.dot(&diff);
    }
    Ok(total / student_features.len() as f64)
}

// ---------------------------------------------------------------------------
// Batch evaluation
// ---------------------------------------------------------------------------

/// Evaluates losses, raw gradients, and conflict residuals for one batch.
///
/// `targets` are the teacher's training-time distributions (already at the
/// composed temperature), indexed like the dataset. The labeled batch feeds
/// both losses; the unlabeled batch feeds only the KD loss.
pub fn evaluate_batch(
    model: &StudentModel,
    dataset: &Dataset,
    targets: &[ProbVector],
    labeled_batch: &[usize],
    unlabeled_batch: &[usize],
    lambda: f64,
    eta: f64,
    clamp: Option<&ClampCounter>,
) -> Result<BatchEval> {
    if labeled_batch.is_empty() {
        return Err(CoreError::InvalidArgument("labeled batch is empty".into()));
    }
    if unlabeled_batch.is_empty() {
        return Err(CoreError::InvalidArgument("unlabeled batch is empty".into()));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(CoreError::InvalidArgument(format!("lambda must be in [0,1], got {lambda}")));
    }
    if !(eta > 0.0) {
        return Err(CoreError::InvalidArgument(format!("eta must be > 0, got {eta}")));
    }
    if targets.len() != dataset.len() {
        return Err(CoreError::DimensionMismatch {
            expected: dataset.len(),
            got: targets.len(),
            context: "teacher targets",
        });
    }

    let c = model.num_classes();
    let b = labeled_batch.len() as f64;
    let b_prime = unlabeled_batch.len() as f64;

    let mut ce_sum = 0.0;
    let mut kd_labeled_sum = 0.0;
    let mut kd_unlabeled_sum = 0.0;

    let mut ce_head_grad = HeadGrad::Linear {
        weight: Matrix::zeros(c, model.feature_dim()),
        bias: Vector::zeros(c),
    };
    let mut kd_head_grad = match (&model.mode, &model.kd_head) {
        (HeadMode::Single, _) => HeadGrad::Linear {
            weight: Matrix::zeros(c, model.feature_dim()),
            bias: Vector::zeros(c),
        },
        (HeadMode::Dual, Some(h)) => HeadGrad::zeros_for(h),
        (HeadMode::Dual, None) => {
            return Err(CoreError::State("dual-mode model is missing its KD head".into()))
        }
    };
    let mut theta_ce = ExtractorGrad::zeros_like(&model.extractor);
    let mut theta_kd = ExtractorGrad::zeros_like(&model.extractor);
    let mut residuals = Vec::with_capacity(labeled_batch.len());

    // labeled batch: CE on the CE head, KL on the KD head
    for &i in labeled_batch {
        let y = dataset.label(i).ok_or_else(|| {
            CoreError::State(format!("labeled batch index {i} has no label"))
        })?;
        let trace = model.extractor.forward_trace(dataset.features(i))?;
        let z = trace.features();

        let ce_probs = softmax(&model.ce_logits(z)?, 1.0)?;
        ce_sum += cross_entropy_counting(&ce_probs, y, clamp)?;
        let y_dist = ProbVector::one_hot(y, c)?;
        let ce_residual = ce_probs.residual(&y_dist);

        let kd_probs = softmax(&model.kd_logits(z)?, eta)?;
        kd_labeled_sum += kl_divergence_counting(&targets[i], &kd_probs, clamp)?;
        let kd_residual = kd_probs.residual(&targets[i]);

        // CE path gradients (weight 1/B)
        let mut ce_g = ce_residual.clone();
        ce_g.scale(1.0 / b);
        apply_linear_head_grad(&mut ce_head_grad, &ce_g, z);
        let dz_ce = model.ce_head.weight.matvec_transpose(&ce_g);
        accumulate_backprop(&model.extractor, &trace, &dz_ce, &mut theta_ce)?;

        // KD path gradients (weight 1/(B eta))
        let mut kd_g = kd_residual.clone();
        kd_g.scale(1.0 / (b * eta));
        let dz_kd = apply_kd_head_grad(model, &mut kd_head_grad, &kd_g, z)?;
        accumulate_backprop(&model.extractor, &trace, &dz_kd, &mut theta_kd)?;

        residuals.push(LabeledResiduals { ce_residual, kd_residual });
    }

    // unlabeled batch: KL on the KD head only
    for &i in unlabeled_batch {
        let trace = model.extractor.forward_trace(dataset.features(i))?;
        let z = trace.features();
        let kd_probs = softmax(&model.kd_logits(z)?, eta)?;
        kd_unlabeled_sum += kl_divergence_counting(&targets[i], &kd_probs, clamp)?;

        let mut kd_g = kd_probs.residual(&targets[i]);
        kd_g.scale(1.0 / (b_prime * eta));
        let dz_kd = apply_kd_head_grad(model, &mut kd_head_grad, &kd_g, z)?;
        accumulate_backprop(&model.extractor, &trace, &dz_kd, &mut theta_kd)?;
    }

    let losses =
        LossBreakdown::new(ce_sum / b, kd_labeled_sum / b + kd_unlabeled_sum / b_prime, lambda);
    Ok(BatchEval {
        losses,
        bundle: GradientBundle {
            ce_head: ce_head_grad,
            kd_head: kd_head_grad,
            theta_ce,
            theta_kd,
        },
        residuals,
    })
}

fn apply_linear_head_grad(grad: &mut HeadGrad, g: &Vector, z: &Vector) {
    match grad {
        HeadGrad::Linear { weight, bias } => {
            weight.add_scaled_outer(1.0, g, z);
            bias.add_scaled(1.0, g);
        }
        HeadGrad::Cosine { .. } => unreachable!("CE head is always affine"),
    }
}

/// Accumulates the KD-head gradient for one example and returns the feature
/// gradient `dL/dz`. `g` must already carry the batch and temperature
/// weights.
fn apply_kd_head_grad(
    model: &StudentModel,
    grad: &mut HeadGrad,
    g: &Vector,
    z: &Vector,
) -> Result<Vector> {
    match (&model.mode, &model.kd_head) {
        (HeadMode::Single, _) => {
            apply_linear_head_grad(grad, g, z);
            Ok(model.ce_head.weight.matvec_transpose(g))
        }
        (HeadMode::Dual, Some(KdHead::Linear(h))) => {
            apply_linear_head_grad(grad, g, z);
            Ok(h.weight.matvec_transpose(g))
        }
        (HeadMode::Dual, Some(KdHead::Cosine(h))) => {
            let (gw, dz) = cosine_head_backward(&h.weight, h.scale, z, g)?;
            match grad {
                HeadGrad::Cosine { weight } => weight.add_scaled(1.0, &gw),
                HeadGrad::Linear { .. } => unreachable!("grad shape matches head kind"),
            }
            Ok(dz)
        }
        (HeadMode::Dual, None) => {
            Err(CoreError::State("dual-mode model is missing its KD head".into()))
        }
    }
}

// ---------------------------------------------------------------------------
// Named loss entry points
// ---------------------------------------------------------------------------

/// Losses for a model trained with one shared head. Errors unless the model
/// is in single mode.
pub fn sho_losses(
    model: &StudentModel,
    dataset: &Dataset,
    labeled_batch: &[usize],
    unlabeled_batch: &[usize],
    teacher: &TeacherPredictions,
    lambda: f64,
    eta: f64,
) -> Result<LossBreakdown> {
    if model.mode != HeadMode::Single {
        return Err(CoreError::InvalidArgument(
            "sho_losses requires a single-mode (shared-head) model".into(),
        ));
    }
    let targets = teacher.training_targets(eta)?;
    Ok(evaluate_batch(model, dataset, &targets, labeled_batch, unlabeled_batch, lambda, eta, None)?
        .losses)
}

/// Losses routed through the CE and KD heads. Accepts single-mode models,
/// where both heads alias the shared one.
pub fn dho_losses(
    model: &StudentModel,
    dataset: &Dataset,
    labeled_batch: &[usize],
    unlabeled_batch: &[usize],
    teacher: &TeacherPredictions,
    lambda: f64,
    eta: f64,
) -> Result<LossBreakdown> {
    let targets = teacher.training_targets(eta)?;
    Ok(evaluate_batch(model, dataset, &targets, labeled_batch, unlabeled_batch, lambda, eta, None)?
        .losses)
}

// ---------------------------------------------------------------------------
// Conflict metrics
// ---------------------------------------------------------------------------

fn optional_cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    match cosine_similarity(a, b) {
        Ok(v) => Some(v),
        Err(_) => None,
    }
}

/// Derives the per-step conflict record from a gradient bundle and the
/// labeled-batch residuals.
pub fn conflict_metrics(
    step: usize,
    bundle: &GradientBundle,
    residuals: &[LabeledResiduals],
) -> ConflictTrace {
    let cossim_head =
        optional_cosine(bundle.ce_head.weight().as_slice(), bundle.kd_head.weight().as_slice());
    let cossim_theta = optional_cosine(&bundle.theta_ce.flatten(), &bundle.theta_kd.flatten());
    let per_layer_theta = bundle
        .theta_ce
        .layers
        .iter()
        .zip(&bundle.theta_kd.layers)
        .map(|((wc, bc), (wk, bk))| {
            let mut a = wc.as_slice().to_vec();
            a.extend_from_slice(bc.as_slice());
            let mut b = wk.as_slice().to_vec();
            b.extend_from_slice(bk.as_slice());
            optional_cosine(&a, &b)
        })
        .collect();
    let inner_product = if residuals.is_empty() {
        0.0
    } else {
        residuals.iter().map(|r| r.ce_residual.dot(&r.kd_residual)).sum::<f64>()
            / residuals.len() as f64
    };
    ConflictTrace { step, cossim_head, cossim_theta, inner_product, per_layer_theta }
}

/// Exponential moving average used for reporting conflict series; the first
/// present value seeds the average, missing values carry the previous one.
pub fn ema_smooth(series: &[Option<f64>], factor: f64) -> Vec<Option<f64>> {
    let mut out = Vec::with_capacity(series.len());
    let mut state: Option<f64> = None;
    for value in series {
        if let Some(v) = value {
            state = Some(match state {
                None => *v,
                Some(s) => factor * s + (1.0 - factor) * v,
            });
        }
        out.push(state);
    }
    out
}
