//! The training loop (one loop serves single- and dual-head modes via head
//! aliasing), optimization, scheduling, and the linear-evaluation protocol.

use std::time::Instant;

use rand::seq::index::sample as sample_without_replacement;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabeledSplit};
use crate::error::{CoreError, Result};
use crate::losses::{conflict_metrics, evaluate_batch, ConflictTrace, HeadGrad};
use crate::model::{FeatureExtractor, HeadMode, LinearHead, StudentModel};
use crate::numcore::{softmax, ClampCounter, ProbVector, Vector};
use crate::seeding::stream_rng;
use crate::teacher::TeacherPredictions;

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Update rule. Weight decay is decoupled in both variants:
/// `p <- p - lr*wd*p - lr*step_direction`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OptimizerKind {
    AdamW { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl OptimizerKind {
    pub fn adamw_default() -> Self {
        OptimizerKind::AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment buffers for one parameter tensor (empty for SGD).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl MomentState {
    pub fn new(len: usize, kind: &OptimizerKind) -> Self {
        match kind {
            OptimizerKind::AdamW { .. } => Self { m: vec![0.0; len], v: vec![0.0; len] },
            OptimizerKind::Sgd => Self { m: Vec::new(), v: Vec::new() },
        }
    }
}

/// Optimizer state across all parameter tensors, in the model's canonical
/// tensor order. Checkpointed alongside parameters so training can resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub completed_epochs: usize,
    pub tensors: Vec<MomentState>,
}

/// One optimizer update on a flat parameter tensor. `t` is the 1-based step
/// count used for Adam bias correction; `group` names the tensor in
/// diagnostics.
pub fn optimizer_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut MomentState,
    t: u64,
    lr: f64,
    weight_decay: f64,
    kind: &OptimizerKind,
    group: &str,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(CoreError::DimensionMismatch {
            expected: params.len(),
            got: grads.len(),
            context: "optimizer gradient length",
        });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(CoreError::NonFiniteGradient { group: group.to_string(), step: t });
    }
    match *kind {
        OptimizerKind::Sgd => {
            for (p, &g) in params.iter_mut().zip(grads) {
                *p -= lr * weight_decay * *p;
                *p -= lr * g;
            }
        }
        OptimizerKind::AdamW { beta1, beta2, eps } => {
            let bc1 = 1.0 - beta1.powi(t as i32);
            let bc2 = 1.0 - beta2.powi(t as i32);
            for ((p, &g), (m, v)) in params
                .iter_mut()
                .zip(grads)
                .zip(state.m.iter_mut().zip(state.v.iter_mut()))
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * weight_decay * *p;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
    Ok(())
}

/// Linear warmup ramp followed by a half cosine from 1 to 0.
pub fn cosine_schedule(step: usize, total_steps: usize, warmup_steps: usize) -> f64 {
    if total_steps == 0 {
        return 1.0;
    }
    let step = step.min(total_steps);
    if warmup_steps > 0 && step < warmup_steps {
        return step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return 0.0;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight of the supervised loss in `lambda*CE + (1-lambda)*KD`.
    pub lambda: f64,
    /// Declared teacher temperature (the teacher's own softmax scale).
    pub teacher_temperature: f64,
    /// Training temperature applied to the student KD logits; the teacher is
    /// consumed at the composed temperature `teacher_temperature * eta`.
    pub eta: f64,
    pub epochs: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale defaults: 200 epochs, batches 64/64, AdamW(0.9, 0.999),
    /// lr 1e-3, weight decay 1e-2, cosine decay without warmup,
    /// `lambda = 0.5`, teacher temperature 0.01, training KD temperature 2.
    pub fn desk_default(seed: u64) -> Self {
        Self {
            lambda: 0.5,
            teacher_temperature: 0.01,
            eta: 2.0,
            epochs: 200,
            batch_labeled: 64,
            batch_unlabeled: 64,
            learning_rate: 1e-3,
            weight_decay: 1e-2,
            warmup_steps: 0,
            optimizer: OptimizerKind::adamw_default(),
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(CoreError::InvalidArgument(format!(
                "lambda must be in [0,1], got {}",
                self.lambda
            )));
        }
        if self.batch_labeled == 0 || self.batch_unlabeled == 0 {
            return Err(CoreError::InvalidArgument("batch sizes must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(CoreError::InvalidArgument("learning rate must be > 0".into()));
        }
        if !(self.eta > 0.0) {
            return Err(CoreError::InvalidArgument("eta must be > 0".into()));
        }
        Ok(())
    }
}

/// Mean losses over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub ce_loss: f64,
    pub kd_loss: f64,
    pub combined: f64,
}

/// Everything recorded during a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<EpochLoss>,
    pub conflict: Vec<ConflictTrace>,
    pub steps_per_epoch: usize,
    pub total_steps: usize,
    pub duration_secs: f64,
    pub clamp_events: u64,
    /// Set when any batch had to be sampled with replacement because a pool
    /// was smaller than its batch size.
    pub sampled_with_replacement: bool,
    /// Path of the saved checkpoint, filled in by callers that persist one.
    pub checkpoint: Option<String>,
}

/// Report plus the optimizer state needed to resume.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub optimizer_state: OptimizerState,
}

fn sample_batch(
    pool: &[usize],
    size: usize,
    rng: &mut ChaCha8Rng,
    with_replacement_flag: &mut bool,
) -> Vec<usize> {
    if pool.len() >= size {
        sample_without_replacement(rng, pool.len(), size)
            .iter()
            .map(|j| pool[j])
            .collect()
    } else {
        *with_replacement_flag = true;
        (0..size).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
    }
}

/// Runs the training loop from scratch.
pub fn train(
    model: &mut StudentModel,
    dataset: &Dataset,
    split: &LabeledSplit,
    teacher: &TeacherPredictions,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_state(model, dataset, split, teacher, config, None, None)
}

/// Runs the training loop, optionally resuming from a previous optimizer
/// state and optionally stopping early at `stop_after_epoch`. The learning
/// rate schedule always spans `config.epochs`, and batch order derives from
/// `(seed, epoch)`, so stop-then-resume follows the exact trajectory of an
/// uninterrupted run.
pub fn train_with_state(
    model: &mut StudentModel,
    dataset: &Dataset,
    split: &LabeledSplit,
    teacher: &TeacherPredictions,
    config: &TrainConfig,
    state: Option<OptimizerState>,
    stop_after_epoch: Option<usize>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if teacher.len() != dataset.len() {
        return Err(CoreError::DimensionMismatch {
            expected: dataset.len(),
            got: teacher.len(),
            context: "teacher predictions must cover the dataset",
        });
    }
    if split.labeled.is_empty() {
        return Err(CoreError::InvalidArgument("split has no labeled examples".into()));
    }
    let start = Instant::now();
    let targets = teacher.training_targets(config.eta)?;
    let union_pool = split.union();
    let steps_per_epoch = union_pool.len().div_ceil(config.batch_unlabeled);
    let total_steps = config.epochs * steps_per_epoch;

    let tensor_shapes: Vec<(String, usize)> = {
        let tensors = model.param_tensors_mut();
        tensors.iter().map(|(name, slice)| (name.clone(), slice.len())).collect()
    };
    let mut opt_state = match state {
        Some(s) => {
            if s.tensors.len() != tensor_shapes.len() {
                return Err(CoreError::State(format!(
                    "optimizer state has {} tensors, model has {}",
                    s.tensors.len(),
                    tensor_shapes.len()
                )));
            }
            if s.completed_epochs > config.epochs {
                return Err(CoreError::State(format!(
                    "resume state already covers {} epochs, config asks for {}",
                    s.completed_epochs, config.epochs
                )));
            }
            s
        }
        None => OptimizerState {
            step: 0,
            completed_epochs: 0,
            tensors: tensor_shapes
                .iter()
                .map(|(_, len)| MomentState::new(*len, &config.optimizer))
                .collect(),
        },
    };

    let clamp = ClampCounter::new();
    let last_epoch = stop_after_epoch.unwrap_or(config.epochs).min(config.epochs);
    let mut epoch_losses = Vec::new();
    let mut conflict = Vec::new();
    let mut with_replacement = false;

    // parameter groups frozen at the lambda edges: a loss with zero weight
    // trains nothing, so its private head stays exactly at initialization
    let freeze_ce_head = model.mode == HeadMode::Dual && config.lambda == 0.0;
    let freeze_kd_head = model.mode == HeadMode::Dual && config.lambda == 1.0;

    for epoch in opt_state.completed_epochs..last_epoch {
        let mut rng = stream_rng(config.seed, &format!("batch-epoch-{epoch}"));
        let mut ce_sum = 0.0;
        let mut kd_sum = 0.0;
        let mut combined_sum = 0.0;
        for _ in 0..steps_per_epoch {
            let labeled_batch =
                sample_batch(&split.labeled, config.batch_labeled, &mut rng, &mut with_replacement);
            let union_batch =
                sample_batch(&union_pool, config.batch_unlabeled, &mut rng, &mut with_replacement);
            let eval = evaluate_batch(
                model,
                dataset,
                &targets,
                &labeled_batch,
                &union_batch,
                config.lambda,
                config.eta,
                Some(&clamp),
            )?;
            if !eval.losses.ce_loss.is_finite() || !eval.losses.kd_loss.is_finite() {
                return Err(CoreError::NonFiniteLoss {
                    step: opt_state.step,
                    ce: eval.losses.ce_loss,
                    kd: eval.losses.kd_loss,
                });
            }
            ce_sum += eval.losses.ce_loss;
            kd_sum += eval.losses.kd_loss;
            combined_sum += eval.losses.combined;
            conflict.push(conflict_metrics(opt_state.step as usize, &eval.bundle, &eval.residuals));

            let lr = config.learning_rate
                * cosine_schedule(opt_state.step as usize, total_steps, config.warmup_steps);
            let updates = assemble_updates(
                model,
                &eval.bundle,
                config.lambda,
                freeze_ce_head,
                freeze_kd_head,
            );
            let t = opt_state.step + 1;
            let tensors = model.param_tensors_mut();
            debug_assert_eq!(tensors.len(), updates.len());
            for (((name, params), update), moments) in
                tensors.into_iter().zip(&updates).zip(opt_state.tensors.iter_mut())
            {
                if let Some(grad) = update {
                    optimizer_step(
                        params,
                        grad,
                        moments,
                        t,
                        lr,
                        config.weight_decay,
                        &config.optimizer,
                        &name,
                    )?;
                }
            }
            opt_state.step += 1;
        }
        let n = steps_per_epoch as f64;
        epoch_losses.push(EpochLoss {
            epoch,
            ce_loss: ce_sum / n,
            kd_loss: kd_sum / n,
            combined: combined_sum / n,
        });
        opt_state.completed_epochs = epoch + 1;
    }

    Ok(TrainOutcome {
        report: TrainReport {
            epoch_losses,
            conflict,
            steps_per_epoch,
            total_steps,
            duration_secs: start.elapsed().as_secs_f64(),
            clamp_events: clamp.count(),
            sampled_with_replacement: with_replacement,
            checkpoint: None,
        },
        optimizer_state: opt_state,
    })
}

/// Builds per-tensor gradient vectors (lambda-weighted) in the model's
/// canonical tensor order. `None` marks a frozen tensor.
fn assemble_updates(
    model: &StudentModel,
    bundle: &crate::losses::GradientBundle,
    lambda: f64,
    freeze_ce_head: bool,
    freeze_kd_head: bool,
) -> Vec<Option<Vec<f64>>> {
    let mut updates: Vec<Option<Vec<f64>>> = Vec::new();
    for ((wc, bc), (wk, bk)) in bundle.theta_ce.layers.iter().zip(&bundle.theta_kd.layers) {
        let w: Vec<f64> = wc
            .as_slice()
            .iter()
            .zip(wk.as_slice())
            .map(|(&a, &b)| lambda * a + (1.0 - lambda) * b)
            .collect();
        let b: Vec<f64> = bc
            .as_slice()
            .iter()
            .zip(bk.as_slice())
            .map(|(&a, &b)| lambda * a + (1.0 - lambda) * b)
            .collect();
        updates.push(Some(w));
        updates.push(Some(b));
    }
    match model.mode {
        HeadMode::Single => {
            // shared head: both loss gradients land on the same tensors
            let (cw, cb) = linear_parts(&bundle.ce_head);
            let (kw, kb) = linear_parts(&bundle.kd_head);
            let w: Vec<f64> = cw
                .iter()
                .zip(kw)
                .map(|(&a, &b)| lambda * a + (1.0 - lambda) * b)
                .collect();
            let b: Vec<f64> = cb
                .iter()
                .zip(kb)
                .map(|(&a, &b)| lambda * a + (1.0 - lambda) * b)
                .collect();
            updates.push(Some(w));
            updates.push(Some(b));
        }
        HeadMode::Dual => {
            let (cw, cb) = linear_parts(&bundle.ce_head);
            if freeze_ce_head {
                updates.push(None);
                updates.push(None);
            } else {
                updates.push(Some(cw.iter().map(|&g| lambda * g).collect()));
                updates.push(Some(cb.iter().map(|&g| lambda * g).collect()));
            }
            match &bundle.kd_head {
                HeadGrad::Linear { weight, bias } => {
                    if freeze_kd_head {
                        updates.push(None);
                        updates.push(None);
                    } else {
                        updates.push(Some(
                            weight.as_slice().iter().map(|&g| (1.0 - lambda) * g).collect(),
                        ));
                        updates.push(Some(
                            bias.as_slice().iter().map(|&g| (1.0 - lambda) * g).collect(),
                        ));
                    }
                }
                HeadGrad::Cosine { weight } => {
                    if freeze_kd_head {
                        updates.push(None);
                    } else {
                        updates.push(Some(
                            weight.as_slice().iter().map(|&g| (1.0 - lambda) * g).collect(),
                        ));
                    }
                }
            }
        }
    }
    updates
}

fn linear_parts(grad: &HeadGrad) -> (&[f64], &[f64]) {
    match grad {
        HeadGrad::Linear { weight, bias } => (weight.as_slice(), bias.as_slice()),
        HeadGrad::Cosine { .. } => unreachable!("CE head gradients are always affine"),
    }
}

// ---------------------------------------------------------------------------
// Linear evaluation
// ---------------------------------------------------------------------------

/// Hyperparameters of the linear probe trained on frozen features.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 100, learning_rate: 5e-2, weight_decay: 0.0, batch_size: 64, seed: 0 }
    }
}

/// Trains a fresh affine head on frozen features with cross-entropy over the
/// fully labeled training set and reports test accuracy.
pub fn linear_probe(
    extractor: &FeatureExtractor,
    train: &Dataset,
    test: &Dataset,
    config: &ProbeConfig,
) -> Result<f64> {
    let featurize = |ds: &Dataset| -> Result<(Vec<Vector>, Vec<usize>)> {
        let mut feats = Vec::with_capacity(ds.len());
        let mut labels = Vec::with_capacity(ds.len());
        for i in 0..ds.len() {
            let y = ds.label(i).ok_or_else(|| {
                CoreError::InvalidArgument(
                    "linear probe requires fully labeled datasets".into(),
                )
            })?;
            feats.push(extractor.forward_features(ds.features(i))?);
            labels.push(y);
        }
        Ok((feats, labels))
    };
    let (train_feats, train_labels) = featurize(train)?;
    let (test_feats, test_labels) = featurize(test)?;
    linear_probe_features(
        &train_feats,
        &train_labels,
        &test_feats,
        &test_labels,
        train.num_classes(),
        config,
    )
}

/// Probe on precomputed features.
pub fn linear_probe_features(
    train_features: &[Vector],
    train_labels: &[usize],
    test_features: &[Vector],
    test_labels: &[usize],
    num_classes: usize,
    config: &ProbeConfig,
) -> Result<f64> {
    if train_features.is_empty() || test_features.is_empty() {
        return Err(CoreError::InvalidArgument("probe needs non-empty datasets".into()));
    }
    let d = train_features[0].dim();
    let mut head = LinearHead::zeros(num_classes, d);
    head.init_random(config.seed, "probe-init");
    let kind = OptimizerKind::adamw_default();
    let mut w_state = MomentState::new(num_classes * d, &kind);
    let mut b_state = MomentState::new(num_classes, &kind);
    let steps_per_epoch = train_features.len().div_ceil(config.batch_size);
    let total_steps = config.epochs * steps_per_epoch;
    let mut t = 0u64;
    for epoch in 0..config.epochs {
        let mut rng = stream_rng(config.seed, &format!("probe-epoch-{epoch}"));
        for _ in 0..steps_per_epoch {
            let mut flag = false;
            let pool: Vec<usize> = (0..train_features.len()).collect();
            let batch = sample_batch(&pool, config.batch_size.min(pool.len()), &mut rng, &mut flag);
            let scale = 1.0 / batch.len() as f64;
            let mut grad_w = crate::numcore::Matrix::zeros(num_classes, d);
            let mut grad_b = Vector::zeros(num_classes);
            for &i in &batch {
                let z = &train_features[i];
                let probs = softmax(&head.forward(z)?, 1.0)?;
                let y = ProbVector::one_hot(train_labels[i], num_classes)?;
                let mut g = probs.residual(&y);
                g.scale(scale);
                grad_w.add_scaled_outer(1.0, &g, z);
                grad_b.add_scaled(1.0, &g);
            }
            let lr = config.learning_rate * cosine_schedule(t as usize, total_steps, 0);
            t += 1;
            optimizer_step(
                head.weight.as_mut_slice(),
                grad_w.as_slice(),
                &mut w_state,
                t,
                lr,
                config.weight_decay,
                &kind,
                "probe.weight",
            )?;
            optimizer_step(
                head.bias.as_mut_slice(),
                grad_b.as_slice(),
                &mut b_state,
                t,
                lr,
                config.weight_decay,
                &kind,
                "probe.bias",
            )?;
        }
    }
    let mut correct = 0usize;
    for (z, &y) in test_features.iter().zip(test_labels) {
        let logits = head.forward(z)?;
        if argmax_logits(&logits) == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_features.len() as f64)
}

fn argmax_logits(logits: &Vector) -> usize {
    let mut best = 0;
    for i in 1..logits.dim() {
        if logits[i] > logits[best] {
            best = i;
        }
    }
    best
}

/// Argmax accuracy of a single head over the labeled examples of a dataset.
pub fn head_accuracy(
    model: &StudentModel,
    dataset: &Dataset,
    use_kd_head: bool,
) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for i in 0..dataset.len() {
        let Some(y) = dataset.label(i) else { continue };
        let z = model.extractor.forward_features(dataset.features(i))?;
        let logits = if use_kd_head { model.kd_logits(&z)? } else { model.ce_logits(&z)? };
        if argmax_logits(&logits) == y {
            correct += 1;
        }
        total += 1;
    }
    if total == 0 {
        return Err(CoreError::InvalidArgument("no labeled examples to score".into()));
    }
    Ok(correct as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_gaussian_mixture, kshot_split, SplitTag};
    use crate::model::{KdHeadKind, ModelConfig};

    #[test]
    fn sgd_step_moves_against_gradient() {
        let mut params = vec![1.0, -2.0, 0.5];
        let grads = vec![0.5, -1.0, 2.0];
        let mut state = MomentState::new(3, &OptimizerKind::Sgd);
        optimizer_step(&mut params, &grads, &mut state, 1, 0.1, 0.0, &OptimizerKind::Sgd, "t")
            .unwrap();
        assert_eq!(params, vec![1.0 - 0.05, -2.0 + 0.1, 0.5 - 0.2]);
    }

    #[test]
    fn zero_gradient_zero_decay_leaves_params_unchanged() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::adamw_default()] {
            let mut params = vec![0.7, -0.3];
            let before = params.clone();
            let mut state = MomentState::new(2, &kind);
            optimizer_step(&mut params, &[0.0, 0.0], &mut state, 1, 0.5, 0.0, &kind, "t").unwrap();
            assert_eq!(params, before);
        }
    }

    #[test]
    fn adamw_three_steps_match_hand_traced_recurrence() {
        // independent scalar re-implementation of the update recurrences
        let (beta1, beta2, eps) = (0.9, 0.999, 1e-8);
        let kind = OptimizerKind::AdamW { beta1, beta2, eps };
        let lr = 0.05;
        let wd = 0.1;
        let grads_per_step = [[0.3, -0.2], [0.1, 0.4], [-0.5, 0.2]];

        let mut params = vec![1.0, -1.0];
        let mut state = MomentState::new(2, &kind);
        for (i, g) in grads_per_step.iter().enumerate() {
            optimizer_step(&mut params, g, &mut state, i as u64 + 1, lr, wd, &kind, "t").unwrap();
        }

        let mut expect = [1.0, -1.0];
        let mut m = [0.0; 2];
        let mut v = [0.0; 2];
        for (i, g) in grads_per_step.iter().enumerate() {
            let t = (i + 1) as i32;
            for j in 0..2 {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / (1.0 - beta1.powi(t));
                let v_hat = v[j] / (1.0 - beta2.powi(t));
                expect[j] -= lr * wd * expect[j];
                expect[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        for j in 0..2 {
            assert!((params[j] - expect[j]).abs() < 1e-15, "{} vs {}", params[j], expect[j]);
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected_with_group_name() {
        let mut params = vec![0.0];
        let mut state = MomentState::new(1, &OptimizerKind::Sgd);
        let err = optimizer_step(
            &mut params,
            &[f64::NAN],
            &mut state,
            1,
            0.1,
            0.0,
            &OptimizerKind::Sgd,
            "ce_head.weight",
        )
        .unwrap_err();
        match err {
            CoreError::NonFiniteGradient { group, .. } => assert_eq!(group, "ce_head.weight"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        assert_eq!(cosine_schedule(0, 100, 0), 1.0);
        assert_eq!(cosine_schedule(100, 100, 0), 0.0);
        assert!((cosine_schedule(50, 100, 0) - 0.5).abs() < 1e-12);
        // warmup ramp
        assert_eq!(cosine_schedule(0, 100, 10), 0.0);
        assert!((cosine_schedule(5, 100, 10) - 0.5).abs() < 1e-12);
        assert!((cosine_schedule(55, 100, 10) - 0.5).abs() < 1e-12);
    }

    fn tiny_benchmark(
        mode: HeadMode,
    ) -> (StudentModel, Dataset, crate::data::LabeledSplit, TeacherPredictions) {
        let ds = generate_gaussian_mixture(3, 6, 30, 8.0, 0.3, 17, SplitTag::Train).unwrap();
        let split = kshot_split(&ds, 4, 17).unwrap();
        let teacher = crate::teacher::oracle_teacher_predict(
            &crate::teacher::OracleTeacherConfig {
                prototypes: ds.class_mean_prototypes().unwrap(),
                logit_noise: 0.0,
                temperature: 0.05,
                corruption_rate: 0.0,
            },
            &ds,
            17,
        )
        .unwrap();
        let config = ModelConfig {
            layer_dims: vec![6, 16, 8],
            num_classes: 3,
            mode,
            kd_head: KdHeadKind::Linear,
        };
        (StudentModel::build(&config, 17).unwrap(), ds, split, teacher)
    }

    fn quick_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_labeled: 8,
            batch_unlabeled: 16,
            ..TrainConfig::desk_default(17)
        }
    }

    #[test]
    fn zero_epochs_leaves_model_unchanged() {
        let (mut model, ds, split, teacher) = tiny_benchmark(HeadMode::Dual);
        let before = model.clone();
        let out = train(&mut model, &ds, &split, &teacher, &quick_config(0)).unwrap();
        assert_eq!(model, before);
        assert!(out.report.conflict.is_empty());
        assert!(out.report.epoch_losses.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let (mut a, ds, split, teacher) = tiny_benchmark(HeadMode::Dual);
        let mut b = a.clone();
        let out_a = train(&mut a, &ds, &split, &teacher, &quick_config(3)).unwrap();
        let out_b = train(&mut b, &ds, &split, &teacher, &quick_config(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(out_a.report.conflict, out_b.report.conflict);
        assert_eq!(out_a.report.epoch_losses, out_b.report.epoch_losses);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (mut full, ds, split, teacher) = tiny_benchmark(HeadMode::Dual);
        let mut resumed = full.clone();
        let config = quick_config(4);
        let full_out = train(&mut full, &ds, &split, &teacher, &config).unwrap();

        let halfway =
            train_with_state(&mut resumed, &ds, &split, &teacher, &config, None, Some(2)).unwrap();
        assert_eq!(halfway.optimizer_state.completed_epochs, 2);
        let rest = train_with_state(
            &mut resumed,
            &ds,
            &split,
            &teacher,
            &config,
            Some(halfway.optimizer_state),
            None,
        )
        .unwrap();
        assert_eq!(full, resumed);
        assert_eq!(full_out.optimizer_state, rest.optimizer_state);
    }

    #[test]
    fn dual_lambda_one_keeps_kd_head_at_initialization() {
        let (mut model, ds, split, teacher) = tiny_benchmark(HeadMode::Dual);
        let kd_before = model.kd_head.clone();
        let ce_before = model.ce_head.clone();
        let mut config = quick_config(2);
        config.lambda = 1.0;
        train(&mut model, &ds, &split, &teacher, &config).unwrap();
        assert_eq!(model.kd_head, kd_before, "KD head must stay at initialization");
        assert_ne!(model.ce_head, ce_before, "CE head must train");

        let (mut model, ds, split, teacher) = tiny_benchmark(HeadMode::Dual);
        let ce_before = model.ce_head.clone();
        let mut config = quick_config(2);
        config.lambda = 0.0;
        train(&mut model, &ds, &split, &teacher, &config).unwrap();
        assert_eq!(model.ce_head, ce_before, "CE head must stay at initialization");
    }

    #[test]
    fn single_mode_one_sgd_step_matches_hand_combined_update() {
        let (mut model, ds, split, teacher) = tiny_benchmark(HeadMode::Single);
        let mut config = quick_config(1);
        config.optimizer = OptimizerKind::Sgd;
        config.weight_decay = 0.0;
        config.warmup_steps = 0;
        config.lambda = 0.3;
        // single step over the whole pool
        config.batch_labeled = split.num_labeled();
        config.batch_unlabeled = ds.len();

        // reproduce the batch the loop will draw
        let mut rng = stream_rng(config.seed, "batch-epoch-0");
        let mut flag = false;
        let labeled = sample_batch(&split.labeled, config.batch_labeled, &mut rng, &mut flag);
        let union = sample_batch(&split.union(), config.batch_unlabeled, &mut rng, &mut flag);
        let targets = teacher.training_targets(config.eta).unwrap();
        let eval = evaluate_batch(
            &model, &ds, &targets, &labeled, &union, config.lambda, config.eta, None,
        )
        .unwrap();
        let (cw, _) = linear_parts(&eval.bundle.ce_head);
        let (kw, _) = linear_parts(&eval.bundle.kd_head);
        let lr = config.learning_rate * cosine_schedule(0, 1, 0);
        let expected_first = model.ce_head.weight.as_slice()[0]
            - lr * (config.lambda * cw[0] + (1.0 - config.lambda) * kw[0]);

        // run exactly one epoch of one step
        let total = ds.len();
        config.batch_unlabeled = total; // one step per epoch
        train(&mut model, &ds, &split, &teacher, &config).unwrap();
        assert!(
            (model.ce_head.weight.as_slice()[0] - expected_first).abs() < 1e-12,
            "shared head update must be the lambda-weighted sum of both gradients"
        );
    }

    #[test]
    fn probe_on_one_hot_features_is_perfect() {
        let feats: Vec<Vector> = (0..30)
            .map(|i| Vector::from_fn(3, |j| if j == i % 3 { 1.0 } else { 0.0 }))
            .collect();
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let config = ProbeConfig::default();
        let acc =
            linear_probe_features(&feats, &labels, &feats, &labels, 3, &config).unwrap();
        assert_eq!(acc, 1.0);
    }
}
