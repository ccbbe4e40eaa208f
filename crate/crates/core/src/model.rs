//! The student: a small ReLU feed-forward feature extractor plus linear and
//! cosine prediction heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::numcore::{cosine_similarity, Matrix, Vector};
use crate::seeding::stream_rng;

/// One dense layer followed by ReLU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vector,
}

impl DenseLayer {
    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// L-layer perceptron with ReLU after every layer (output included).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractor {
    layers: Vec<DenseLayer>,
}

/// Activations retained after a forward pass, required for backprop.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input: Vector,
    /// Pre-activation of each layer.
    pub preacts: Vec<Vector>,
    /// Post-ReLU activation of each layer; the last one is the feature `z`.
    pub acts: Vec<Vector>,
}

impl ForwardTrace {
    pub fn features(&self) -> &Vector {
        self.acts.last().expect("trace has at least one layer")
    }
}

impl FeatureExtractor {
    /// `dims = [d_in, h_1, ..., d]`; zero-initialized parameters.
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 {
            return Err(CoreError::InvalidArgument(
                "extractor needs at least one layer (two dims)".into(),
            ));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(CoreError::InvalidArgument("layer dims must be > 0".into()));
        }
        let layers = dims
            .windows(2)
            .map(|w| DenseLayer { weight: Matrix::zeros(w[1], w[0]), bias: Vector::zeros(w[1]) })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(CoreError::InvalidArgument("extractor needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[1].input_dim() != w[0].output_dim() {
                return Err(CoreError::DimensionMismatch {
                    expected: w[0].output_dim(),
                    got: w[1].input_dim(),
                    context: "consecutive extractor layers",
                });
            }
        }
        for l in &layers {
            if l.bias.dim() != l.weight.rows() {
                return Err(CoreError::DimensionMismatch {
                    expected: l.weight.rows(),
                    got: l.bias.dim(),
                    context: "layer bias dimension",
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").output_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.rows() * l.weight.cols() + l.bias.dim())
            .sum()
    }

    /// Forward pass retaining all intermediate activations.
    pub fn forward_trace(&self, x: &Vector) -> Result<ForwardTrace> {
        if x.dim() != self.input_dim() {
            return Err(CoreError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.dim(),
                context: "extractor input",
            });
        }
        let mut preacts = Vec::with_capacity(self.layers.len());
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut current = x.clone();
        for layer in &self.layers {
            let mut pre = layer.weight.matvec(&current);
            pre.add_scaled(1.0, &layer.bias);
            let act = Vector::from_fn(pre.dim(), |i| pre[i].max(0.0));
            preacts.push(pre);
            current = act.clone();
            acts.push(act);
        }
        Ok(ForwardTrace { input: x.clone(), preacts, acts })
    }

    /// Features `z = g(x)` without retaining activations.
    pub fn forward_features(&self, x: &Vector) -> Result<Vector> {
        let mut trace = self.forward_trace(x)?;
        Ok(trace.acts.pop().expect("at least one layer"))
    }

    /// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases.
    pub fn init_random(&mut self, seed: u64) {
        for (idx, layer) in self.layers.iter_mut().enumerate() {
            let mut rng = stream_rng(seed, &format!("init-extractor-{idx}"));
            let bound = 1.0 / (layer.weight.cols() as f64).sqrt();
            for w in layer.weight.as_mut_slice() {
                *w = rng.gen_range(-bound..=bound);
            }
            for b in layer.bias.as_mut_slice() {
                *b = 0.0;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Heads
// ---------------------------------------------------------------------------

/// Affine prediction head `h(z) = Wz + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub weight: Matrix,
    pub bias: Vector,
}

impl LinearHead {
    pub fn zeros(num_classes: usize, feature_dim: usize) -> Self {
        Self { weight: Matrix::zeros(num_classes, feature_dim), bias: Vector::zeros(num_classes) }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, z: &Vector) -> Result<Vector> {
        if z.dim() != self.feature_dim() {
            return Err(CoreError::DimensionMismatch {
                expected: self.feature_dim(),
                got: z.dim(),
                context: "linear head input",
            });
        }
        let mut logits = self.weight.matvec(z);
        logits.add_scaled(1.0, &self.bias);
        Ok(logits)
    }

    pub fn init_random(&mut self, seed: u64, label: &str) {
        let mut rng = stream_rng(seed, label);
        let bound = 1.0 / (self.weight.cols() as f64).sqrt();
        for w in self.weight.as_mut_slice() {
            *w = rng.gen_range(-bound..=bound);
        }
        for b in self.bias.as_mut_slice() {
            *b = 0.0;
        }
    }

    /// Rows of `W` set to the per-class embeddings, bias zeroed. Idempotent.
    pub fn init_language_aware(&mut self, class_embeddings: &Matrix) -> Result<()> {
        check_embedding_shape(class_embeddings, self.num_classes(), self.feature_dim())?;
        self.weight = class_embeddings.clone();
        self.bias = Vector::zeros(self.num_classes());
        Ok(())
    }
}

/// Bias-free head scoring by scaled cosine similarity against per-class
/// weight rows: `logit_c = CosSim(z, w_c) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineHead {
    pub weight: Matrix,
    pub scale: f64,
}

impl CosineHead {
    pub fn new(weight: Matrix, scale: f64) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(CoreError::InvalidArgument(format!(
                "cosine head scale must be > 0, got {scale}"
            )));
        }
        for r in 0..weight.rows() {
            if weight.row(r).iter().all(|&w| w == 0.0) {
                return Err(CoreError::InvalidArgument(format!(
                    "cosine head row {r} is the zero vector"
                )));
            }
        }
        Ok(Self { weight, scale })
    }

    pub fn num_classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, z: &Vector) -> Result<Vector> {
        if z.dim() != self.feature_dim() {
            return Err(CoreError::DimensionMismatch {
                expected: self.feature_dim(),
                got: z.dim(),
                context: "cosine head input",
            });
        }
        let mut logits = Vec::with_capacity(self.num_classes());
        for c in 0..self.num_classes() {
            logits.push(cosine_similarity(z.as_slice(), self.weight.row(c))? / self.scale);
        }
        Vector::new(logits)
    }

    pub fn init_random(&mut self, seed: u64, label: &str) {
        let mut rng = stream_rng(seed, label);
        let bound = 1.0 / (self.weight.cols() as f64).sqrt();
        for w in self.weight.as_mut_slice() {
            *w = rng.gen_range(-bound..=bound);
        }
    }

    pub fn init_language_aware(&mut self, class_embeddings: &Matrix) -> Result<()> {
        check_embedding_shape(class_embeddings, self.num_classes(), self.feature_dim())?;
        for r in 0..class_embeddings.rows() {
            if class_embeddings.row(r).iter().all(|&w| w == 0.0) {
                return Err(CoreError::InvalidArgument(format!(
                    "class embedding row {r} is the zero vector"
                )));
            }
        }
        self.weight = class_embeddings.clone();
        Ok(())
    }
}

fn check_embedding_shape(emb: &Matrix, num_classes: usize, feature_dim: usize) -> Result<()> {
    if emb.rows() != num_classes {
        return Err(CoreError::DimensionMismatch {
            expected: num_classes,
            got: emb.rows(),
            context: "class embedding rows",
        });
    }
    if emb.cols() != feature_dim {
        return Err(CoreError::DimensionMismatch {
            expected: feature_dim,
            got: emb.cols(),
            context: "class embedding columns",
        });
    }
    Ok(())
}

/// The distillation head, affine or cosine-aligned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum KdHead {
    Linear(LinearHead),
    Cosine(CosineHead),
}

impl KdHead {
    pub fn forward(&self, z: &Vector) -> Result<Vector> {
        match self {
            KdHead::Linear(h) => h.forward(z),
            KdHead::Cosine(h) => h.forward(z),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            KdHead::Linear(h) => h.num_classes(),
            KdHead::Cosine(h) => h.num_classes(),
        }
    }
}

// ---------------------------------------------------------------------------
// Student model
// ---------------------------------------------------------------------------

/// Whether the two loss signals share one head or train separate heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadMode {
    /// One shared affine head receives both losses (the aliased
    /// representation: `kd_head` is absent and all KD paths use `ce_head`).
    Single,
    /// Independent supervised and distillation heads.
    Dual,
}

impl std::fmt::Display for HeadMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HeadMode::Single => write!(f, "single"),
            HeadMode::Dual => write!(f, "dual"),
        }
    }
}

/// Kind of distillation head to build.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum KdHeadKind {
    Linear,
    Cosine { scale: f64 },
}

/// Shape-level description of a student model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `[d_in, hidden..., d]`
    pub layer_dims: Vec<usize>,
    pub num_classes: usize,
    pub mode: HeadMode,
    pub kd_head: KdHeadKind,
}

/// Feature extractor plus prediction head(s).
#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel {
    pub extractor: FeatureExtractor,
    pub ce_head: LinearHead,
    /// Present only in [`HeadMode::Dual`]; in single mode the CE head is
    /// shared by both loss paths.
    pub kd_head: Option<KdHead>,
    pub mode: HeadMode,
}

impl StudentModel {
    /// Builds a model with randomly initialized parameters.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut extractor = FeatureExtractor::zeros(&config.layer_dims)?;
        extractor.init_random(seed);
        let d = extractor.output_dim();
        let c = config.num_classes;
        let mut ce_head = LinearHead::zeros(c, d);
        ce_head.init_random(seed, "init-ce-head");
        let kd_head = match (config.mode, config.kd_head) {
            (HeadMode::Single, _) => None,
            (HeadMode::Dual, KdHeadKind::Linear) => {
                let mut h = LinearHead::zeros(c, d);
                h.init_random(seed, "init-kd-head");
                Some(KdHead::Linear(h))
            }
            (HeadMode::Dual, KdHeadKind::Cosine { scale }) => {
                let mut h = CosineHead { weight: Matrix::zeros(c, d), scale };
                h.init_random(seed, "init-kd-head");
                // a freshly sampled row is zero with probability 0; enforce anyway
                Some(KdHead::Cosine(CosineHead::new(h.weight, scale)?))
            }
        };
        Ok(Self { extractor, ce_head, kd_head, mode: config.mode })
    }

    pub fn num_classes(&self) -> usize {
        self.ce_head.num_classes()
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor.output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.extractor.input_dim()
    }

    /// Logits of the supervised head.
    pub fn ce_logits(&self, z: &Vector) -> Result<Vector> {
        self.ce_head.forward(z)
    }

    /// Logits of the distillation head; the shared head in single mode.
    pub fn kd_logits(&self, z: &Vector) -> Result<Vector> {
        match (&self.mode, &self.kd_head) {
            (HeadMode::Single, _) => self.ce_head.forward(z),
            (HeadMode::Dual, Some(h)) => h.forward(z),
            (HeadMode::Dual, None) => {
                Err(CoreError::State("dual-mode model is missing its KD head".into()))
            }
        }
    }

    /// Applies language-aware initialization to every head present.
    pub fn init_language_aware(&mut self, class_embeddings: &Matrix) -> Result<()> {
        self.ce_head.init_language_aware(class_embeddings)?;
        match &mut self.kd_head {
            Some(KdHead::Linear(h)) => h.init_language_aware(class_embeddings)?,
            Some(KdHead::Cosine(h)) => h.init_language_aware(class_embeddings)?,
            None => {}
        }
        Ok(())
    }

    /// Named mutable views over every parameter tensor, in a stable order:
    /// extractor layers (weight then bias), CE head, then KD head if present.
    /// The order defines the optimizer-state layout.
    pub fn param_tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        for (i, layer) in self.extractor.layers_mut().iter_mut().enumerate() {
            out.push((format!("extractor.layer{i}.weight"), layer.weight.as_mut_slice()));
            out.push((format!("extractor.layer{i}.bias"), layer.bias.as_mut_slice()));
        }
        out.push(("ce_head.weight".into(), self.ce_head.weight.as_mut_slice()));
        out.push(("ce_head.bias".into(), self.ce_head.bias.as_mut_slice()));
        match &mut self.kd_head {
            Some(KdHead::Linear(h)) => {
                out.push(("kd_head.weight".into(), h.weight.as_mut_slice()));
                out.push(("kd_head.bias".into(), h.bias.as_mut_slice()));
            }
            Some(KdHead::Cosine(h)) => {
                out.push(("kd_head.weight".into(), h.weight.as_mut_slice()));
            }
            None => {}
        }
        out
    }
}
