//! Frozen teacher predictions: per-example categorical probability vectors
//! with a declared temperature. The teacher never enters the training
//! gradient path.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::Dataset;
use crate::error::{CoreError, Result};
use crate::numcore::{cosine_similarity, softmax, Matrix, ProbVector, Vector};
use crate::seeding::stream_rng;

/// Tolerance on the row sums of a loaded teacher file.
const ROW_SUM_TOL: f64 = 1e-4;

/// Immutable per-example teacher distributions, indexed like the dataset
/// they were produced for.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherPredictions {
    probs: Vec<ProbVector>,
    temperature: f64,
    measured_accuracy: Option<f64>,
}

impl TeacherPredictions {
    pub fn new(probs: Vec<ProbVector>, temperature: f64) -> Result<Self> {
        if probs.is_empty() {
            return Err(CoreError::InvalidArgument("teacher predictions are empty".into()));
        }
        if !(temperature > 0.0) {
            return Err(CoreError::InvalidArgument(format!(
                "teacher temperature must be > 0, got {temperature}"
            )));
        }
        let dim = probs[0].dim();
        if probs.iter().any(|p| p.dim() != dim) {
            return Err(CoreError::InvalidArgument("inconsistent class counts across rows".into()));
        }
        Ok(Self { probs, temperature, measured_accuracy: None })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.probs[0].dim()
    }

    /// Declared temperature the stored distributions were produced at.
    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn probs(&self, index: usize) -> &ProbVector {
        &self.probs[index]
    }

    pub fn measured_accuracy(&self) -> Option<f64> {
        self.measured_accuracy
    }

    pub fn set_measured_accuracy(&mut self, accuracy: f64) {
        self.measured_accuracy = Some(accuracy);
    }

    /// Distribution `index` softened by a further temperature factor `eta`.
    ///
    /// If the stored row came from logits at the declared temperature, the
    /// returned row equals the softmax of the same logits at temperature
    /// `declared * eta` (entry-wise power `1/eta`, renormalized). Training
    /// consumes the teacher at the composed temperature.
    pub fn training_target(&self, index: usize, eta: f64) -> Result<ProbVector> {
        soften(&self.probs[index], eta)
    }

    /// All training targets at the composed temperature.
    pub fn training_targets(&self, eta: f64) -> Result<Vec<ProbVector>> {
        (0..self.len()).map(|i| self.training_target(i, eta)).collect()
    }
}

/// Entry-wise power `1/eta` followed by renormalization.
fn soften(p: &ProbVector, eta: f64) -> Result<ProbVector> {
    if !(eta > 0.0) {
        return Err(CoreError::InvalidArgument(format!("eta must be > 0, got {eta}")));
    }
    if eta == 1.0 {
        return Ok(p.clone());
    }
    let powered: Vec<f64> = p.as_slice().iter().map(|&x| x.powf(1.0 / eta)).collect();
    let sum: f64 = powered.iter().sum();
    ProbVector::new(powered.into_iter().map(|x| x / sum).collect())
}

/// Synthetic stand-in for a pretrained teacher: scores examples by scaled
/// cosine similarity against fixed class prototypes.
#[derive(Debug, Clone)]
pub struct OracleTeacherConfig {
    /// C x d_in prototype matrix.
    pub prototypes: Matrix,
    /// Standard deviation of Gaussian noise added to the (already scaled)
    /// logits.
    pub logit_noise: f64,
    /// Temperature dividing the cosine similarities.
    pub temperature: f64,
    /// Probability that an example's logits are replaced by a vector peaked
    /// on a uniformly random wrong class.
    pub corruption_rate: f64,
}

impl OracleTeacherConfig {
    fn validate(&self, dataset: &Dataset) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(CoreError::InvalidArgument(format!(
                "teacher temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.corruption_rate) {
            return Err(CoreError::InvalidArgument(format!(
                "corruption rate must be in [0,1], got {}",
                self.corruption_rate
            )));
        }
        if self.logit_noise < 0.0 {
            return Err(CoreError::InvalidArgument("logit noise must be >= 0".into()));
        }
        if self.prototypes.cols() != dataset.feature_dim() {
            return Err(CoreError::DimensionMismatch {
                expected: dataset.feature_dim(),
                got: self.prototypes.cols(),
                context: "teacher prototype dimension",
            });
        }
        if self.prototypes.rows() != dataset.num_classes() {
            return Err(CoreError::DimensionMismatch {
                expected: dataset.num_classes(),
                got: self.prototypes.rows(),
                context: "teacher prototype class count",
            });
        }
        Ok(())
    }
}

/// Magnitude of the peak logit used for corrupted examples; at any sane
/// temperature this makes the wrong class carry essentially all the mass.
const CORRUPT_PEAK: f64 = 50.0;

/// Produces teacher distributions for every example in the dataset.
///
/// `logit_c = CosSim(x, prototype_c) / temperature + noise`; with probability
/// `corruption_rate` the logits are replaced by a vector peaked on a random
/// wrong class (wrong relative to the example's label when present, else to
/// the clean argmax).
pub fn oracle_teacher_predict(
    config: &OracleTeacherConfig,
    dataset: &Dataset,
    seed: u64,
) -> Result<TeacherPredictions> {
    config.validate(dataset)?;
    let c = dataset.num_classes();
    let mut rng = stream_rng(seed, "oracle-teacher");
    let mut probs = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let x = dataset.features(i);
        let mut logits = Vec::with_capacity(c);
        for class in 0..c {
            let sim = match cosine_similarity(x.as_slice(), config.prototypes.row(class)) {
                Ok(s) => s,
                // a zero feature vector carries no class information
                Err(CoreError::UndefinedSimilarity) => 0.0,
                Err(e) => return Err(e),
            };
            logits.push(sim / config.temperature);
        }
        let clean_argmax = argmax(&logits);
        let mut logits = Vector::new(
            logits
                .into_iter()
                .map(|l| l + config.logit_noise * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        )?;
        // corruption draw happens for every example so the stream stays
        // aligned regardless of the rate
        let corrupt_roll: f64 = rng.gen();
        let wrong_pick = rng.gen_range(0..c.saturating_sub(1).max(1));
        if corrupt_roll < config.corruption_rate {
            let truth = dataset.label(i).unwrap_or(clean_argmax);
            let wrong = (truth + 1 + wrong_pick) % c;
            logits = Vector::from_fn(c, |j| if j == wrong { CORRUPT_PEAK } else { 0.0 });
        }
        probs.push(softmax(&logits, 1.0)?);
    }
    TeacherPredictions::new(probs, config.temperature)
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Fraction of labeled examples where the teacher argmax equals the label.
pub fn measure_teacher_accuracy(preds: &TeacherPredictions, dataset: &Dataset) -> Result<f64> {
    if preds.len() != dataset.len() {
        return Err(CoreError::DimensionMismatch {
            expected: dataset.len(),
            got: preds.len(),
            context: "teacher prediction count",
        });
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for i in 0..dataset.len() {
        if let Some(y) = dataset.label(i) {
            total += 1;
            if preds.probs(i).argmax() == y {
                correct += 1;
            }
        }
    }
    if total == 0 {
        return Err(CoreError::InvalidArgument(
            "dataset has no labeled examples to measure teacher accuracy".into(),
        ));
    }
    Ok(correct as f64 / total as f64)
}

/// Loads a `p0,...,p{C-1}` CSV of per-example teacher probabilities. Rows are
/// renormalized when their sum is within `1e-4` of one; anything further off
/// is a format error naming the row.
pub fn load_teacher_predictions(
    path: &Path,
    dataset: &Dataset,
    temperature: f64,
) -> Result<TeacherPredictions> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| CoreError::Parse {
        row: 0,
        message: "empty teacher file".into(),
    })?;
    let cols = header.trim_end_matches('\r').split(',').count();
    if cols != dataset.num_classes() {
        return Err(CoreError::Schema(format!(
            "teacher file has {cols} probability columns, dataset declares {} classes",
            dataset.num_classes()
        )));
    }
    let mut probs = Vec::new();
    for (line_no, line) in lines {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let row = line_no + 1;
        let mut values = Vec::with_capacity(cols);
        for cell in line.split(',') {
            let v: f64 = cell.trim().parse().map_err(|_| CoreError::Parse {
                row,
                message: format!("non-numeric probability '{cell}'"),
            })?;
            values.push(v);
        }
        if values.len() != cols {
            return Err(CoreError::Parse {
                row,
                message: format!("expected {cols} probabilities, got {}", values.len()),
            });
        }
        if values.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(CoreError::Format {
                row,
                message: "probabilities must be finite and non-negative".into(),
            });
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(CoreError::Format {
                row,
                message: format!("row sums to {sum}, expected 1 within {ROW_SUM_TOL}"),
            });
        }
        probs.push(ProbVector::new(values.into_iter().map(|v| v / sum).collect())?);
    }
    if probs.len() != dataset.len() {
        return Err(CoreError::Schema(format!(
            "teacher file has {} rows, dataset has {} examples",
            probs.len(),
            dataset.len()
        )));
    }
    TeacherPredictions::new(probs, temperature)
}

/// Writes teacher predictions in the format read by
/// [`load_teacher_predictions`].
pub fn save_teacher_predictions(preds: &TeacherPredictions, path: &Path) -> Result<()> {
    use std::fmt::Write as _;
    let c = preds.num_classes();
    let mut out = String::new();
    for j in 0..c {
        if j > 0 {
            out.push(',');
        }
        let _ = write!(out, "p{j}");
    }
    out.push('\n');
    for i in 0..preds.len() {
        let row = preds.probs(i);
        for j in 0..c {
            if j > 0 {
                out.push(',');
            }
            let _ = write!(out, "{}", row[j]);
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_gaussian_mixture, SplitTag};

    fn mixture(noise: f64, sep: f64) -> Dataset {
        generate_gaussian_mixture(3, 6, 40, sep, noise, 5, SplitTag::Train).unwrap()
    }

    #[test]
    fn clean_prototype_teacher_is_accurate() {
        let ds = mixture(0.2, 10.0);
        let config = OracleTeacherConfig {
            prototypes: ds.class_mean_prototypes().unwrap(),
            logit_noise: 0.0,
            temperature: 0.05,
            corruption_rate: 0.0,
        };
        let preds = oracle_teacher_predict(&config, &ds, 0).unwrap();
        let acc = measure_teacher_accuracy(&preds, &ds).unwrap();
        assert!(acc >= 0.99, "clean teacher accuracy {acc}");
    }

    #[test]
    fn full_corruption_gives_zero_accuracy() {
        let ds = mixture(0.2, 10.0);
        let config = OracleTeacherConfig {
            prototypes: ds.class_mean_prototypes().unwrap(),
            logit_noise: 0.0,
            temperature: 0.05,
            corruption_rate: 1.0,
        };
        let preds = oracle_teacher_predict(&config, &ds, 0).unwrap();
        let acc = measure_teacher_accuracy(&preds, &ds).unwrap();
        assert_eq!(acc, 0.0);
    }

    #[test]
    fn huge_temperature_approaches_uniform() {
        let ds = mixture(0.2, 10.0);
        let config = OracleTeacherConfig {
            prototypes: ds.class_mean_prototypes().unwrap(),
            logit_noise: 0.0,
            temperature: 1e3,
            corruption_rate: 0.0,
        };
        let preds = oracle_teacher_predict(&config, &ds, 0).unwrap();
        let c = ds.num_classes() as f64;
        for i in 0..preds.len() {
            let max = preds
                .probs(i)
                .as_slice()
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(max - 1.0 / c < 0.01, "row {i} max {max} too peaked");
        }
    }

    #[test]
    fn oracle_teacher_is_deterministic() {
        let ds = mixture(0.5, 5.0);
        let config = OracleTeacherConfig {
            prototypes: ds.class_mean_prototypes().unwrap(),
            logit_noise: 1.0,
            temperature: 0.1,
            corruption_rate: 0.3,
        };
        let a = oracle_teacher_predict(&config, &ds, 42).unwrap();
        let b = oracle_teacher_predict(&config, &ds, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn measure_accuracy_examples() {
        let ds = mixture(0.2, 10.0);
        let c = ds.num_classes();
        let correct: Vec<ProbVector> = (0..ds.len())
            .map(|i| ProbVector::one_hot(ds.label(i).unwrap(), c).unwrap())
            .collect();
        let preds = TeacherPredictions::new(correct.clone(), 1.0).unwrap();
        assert_eq!(measure_teacher_accuracy(&preds, &ds).unwrap(), 1.0);

        let wrong: Vec<ProbVector> = (0..ds.len())
            .map(|i| ProbVector::one_hot((ds.label(i).unwrap() + 1) % c, c).unwrap())
            .collect();
        let preds = TeacherPredictions::new(wrong.clone(), 1.0).unwrap();
        assert_eq!(measure_teacher_accuracy(&preds, &ds).unwrap(), 0.0);

        let half: Vec<ProbVector> = (0..ds.len())
            .map(|i| if i % 2 == 0 { correct[i].clone() } else { wrong[i].clone() })
            .collect();
        let preds = TeacherPredictions::new(half, 1.0).unwrap();
        assert_eq!(measure_teacher_accuracy(&preds, &ds).unwrap(), 0.5);
    }

    #[test]
    fn soften_matches_resoftmax() {
        // powering probs by 1/eta must equal re-softmaxing the source logits
        let logits = Vector::new(vec![1.3, -0.4, 0.9, 2.2]).unwrap();
        let at_t1 = softmax(&logits, 1.0).unwrap();
        let preds = TeacherPredictions::new(vec![at_t1], 1.0).unwrap();
        let softened = preds.training_target(0, 2.0).unwrap();
        let direct = softmax(&logits, 2.0).unwrap();
        for c in 0..4 {
            assert!((softened[c] - direct[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn teacher_file_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_gaussian_mixture(2, 3, 1, 1.0, 0.1, 0, SplitTag::Train).unwrap();

        let path = dir.path().join("one_hot.csv");
        std::fs::write(&path, "p0,p1\n1,0\n0,1\n").unwrap();
        let preds = load_teacher_predictions(&path, &ds, 1.0).unwrap();
        assert_eq!(preds.probs(0).as_slice(), &[1.0, 0.0]);
        let out = dir.path().join("round.csv");
        save_teacher_predictions(&preds, &out).unwrap();
        let again = load_teacher_predictions(&out, &ds, 1.0).unwrap();
        assert_eq!(preds, again);

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "p0,p1\n0.5,0.4\n0,1\n").unwrap();
        match load_teacher_predictions(&bad, &ds, 1.0) {
            Err(CoreError::Format { row, .. }) => assert_eq!(row, 2),
            other => panic!("expected format error, got {other:?}"),
        }

        let close = dir.path().join("close.csv");
        std::fs::write(&close, "p0,p1\n0.33335,0.66665\n0.49998,0.5\n").unwrap();
        let preds = load_teacher_predictions(&close, &ds, 1.0).unwrap();
        for i in 0..2 {
            let sum: f64 = preds.probs(i).as_slice().iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
