//! Reference experiment setups shared by tests and the bundled configs.

use crate::data::{generate_splits, kshot_split, Dataset, LabeledSplit, SyntheticSpec};
use crate::error::Result;
use crate::model::{HeadMode, KdHeadKind, ModelConfig};
use crate::seeding::stream_seed;
use crate::teacher::{
    measure_teacher_accuracy, oracle_teacher_predict, OracleTeacherConfig, TeacherPredictions,
};
use crate::trainer::TrainConfig;

/// Fully assembled experiment: data splits, semi-supervised labeling, and a
/// frozen teacher with its measured accuracy.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub split: LabeledSplit,
    pub teacher: TeacherPredictions,
    pub teacher_accuracy: f64,
}

/// The gradient-conflict benchmark: a 4-class, 16-dimensional mixture with
/// modest separation, 2 labels per class, and a deliberately unreliable
/// teacher (~70% accurate via corruption), so the supervised and distillation
/// signals genuinely disagree.
pub fn conflict_benchmark(seed: u64) -> Result<Benchmark> {
    let spec = SyntheticSpec {
        classes: 4,
        feature_dim: 16,
        train_per_class: 150,
        val_per_class: 40,
        test_per_class: 100,
        separation: 5.0,
        noise_scale: 1.0,
    };
    build_benchmark(&spec, 2, CONFLICT_TEACHER_CORRUPTION, 0.5, seed)
}

/// Corruption rate calibrated so the prototype teacher lands near 70%
/// accuracy on the conflict mixture.
pub const CONFLICT_TEACHER_CORRUPTION: f64 = 0.27;

/// Easy reference benchmark: well-separated mixture, 4 shots per class, and
/// an accurate teacher.
pub fn reference_benchmark(seed: u64) -> Result<Benchmark> {
    let spec = SyntheticSpec {
        classes: 4,
        feature_dim: 16,
        train_per_class: 150,
        val_per_class: 40,
        test_per_class: 100,
        separation: 10.0,
        noise_scale: 0.1,
    };
    build_benchmark(&spec, 4, 0.0, 0.0, seed)
}

fn build_benchmark(
    spec: &SyntheticSpec,
    shots: usize,
    corruption: f64,
    logit_noise: f64,
    seed: u64,
) -> Result<Benchmark> {
    let (train, val, test) = generate_splits(spec, stream_seed(seed, "data"))?;
    let val = val.expect("preset specs declare a validation split");
    let split = kshot_split(&train, shots, stream_seed(seed, "split"))?;
    let teacher_config = OracleTeacherConfig {
        prototypes: train.class_mean_prototypes()?,
        logit_noise,
        temperature: 0.01,
        corruption_rate: corruption,
    };
    let mut teacher = oracle_teacher_predict(&teacher_config, &train, stream_seed(seed, "teacher"))?;
    let teacher_accuracy = measure_teacher_accuracy(&teacher, &train)?;
    teacher.set_measured_accuracy(teacher_accuracy);
    Ok(Benchmark { train, val, test, split, teacher, teacher_accuracy })
}

/// Default student shape for the benchmarks: 2 hidden layers of width 64,
/// feature dimension 32.
pub fn benchmark_model_config(input_dim: usize, num_classes: usize, mode: HeadMode) -> ModelConfig {
    ModelConfig {
        layer_dims: vec![input_dim, 64, 64, 32],
        num_classes,
        mode,
        kd_head: KdHeadKind::Linear,
    }
}

/// Training configuration used by the benchmark runs.
pub fn benchmark_train_config(seed: u64) -> TrainConfig {
    TrainConfig::desk_default(seed)
}
