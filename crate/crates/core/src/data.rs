//! Dataset ingestion, synthetic-data generation, and K-shot / fractional
//! semi-supervised splitting.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::index::sample as sample_without_replacement;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::numcore::{Matrix, Vector};
use crate::seeding::stream_rng;

/// One example: a feature vector and an optional class label.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: Vector,
    pub label: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitTag::Train => write!(f, "train"),
            SplitTag::Val => write!(f, "val"),
            SplitTag::Test => write!(f, "test"),
        }
    }
}

/// Immutable collection of examples with a declared class count and feature
/// dimension.
#[derive(Debug, Clone)]
pub struct Dataset {
    examples: Vec<Example>,
    num_classes: usize,
    feature_dim: usize,
    split: SplitTag,
}

impl Dataset {
    pub fn new(examples: Vec<Example>, num_classes: usize, split: SplitTag) -> Result<Self> {
        if num_classes < 2 {
            return Err(CoreError::InvalidArgument(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        let feature_dim = examples
            .first()
            .map(|e| e.features.dim())
            .ok_or_else(|| CoreError::InvalidArgument("dataset must be non-empty".into()))?;
        for (i, ex) in examples.iter().enumerate() {
            if ex.features.dim() != feature_dim {
                return Err(CoreError::DimensionMismatch {
                    expected: feature_dim,
                    got: ex.features.dim(),
                    context: "example feature dimension",
                });
            }
            if let Some(y) = ex.label {
                if y >= num_classes {
                    return Err(CoreError::Schema(format!(
                        "example {i} has label {y} >= num_classes {num_classes}"
                    )));
                }
            }
        }
        Ok(Self { examples, num_classes, feature_dim, split })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    pub fn example(&self, i: usize) -> &Example {
        &self.examples[i]
    }

    pub fn features(&self, i: usize) -> &Vector {
        &self.examples[i].features
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.examples[i].label
    }

    pub fn iter(&self) -> impl Iterator<Item = &Example> {
        self.examples.iter()
    }

    /// Indices of examples that carry a label.
    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.examples[i].label.is_some()).collect()
    }

    /// Per-class counts over labeled examples.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for ex in &self.examples {
            if let Some(y) = ex.label {
                counts[y] += 1;
            }
        }
        counts
    }

    /// Copy with the labels of `indices` removed.
    pub fn without_labels(&self, indices: &[usize]) -> Dataset {
        let mut out = self.clone();
        for &i in indices {
            out.examples[i].label = None;
        }
        out
    }

    /// Copy with labels restored from `source` at `indices`.
    pub fn with_labels_from(&self, source: &Dataset, indices: &[usize]) -> Dataset {
        let mut out = self.clone();
        for &i in indices {
            out.examples[i].label = source.examples[i].label;
        }
        out
    }

    /// Per-class mean feature vectors over labeled examples; errors if any
    /// class has none.
    pub fn class_mean_prototypes(&self) -> Result<Matrix> {
        let mut sums = vec![vec![0.0; self.feature_dim]; self.num_classes];
        let mut counts = vec![0usize; self.num_classes];
        for ex in &self.examples {
            if let Some(y) = ex.label {
                counts[y] += 1;
                for (s, &f) in sums[y].iter_mut().zip(ex.features.as_slice()) {
                    *s += f;
                }
            }
        }
        for (class, &n) in counts.iter().enumerate() {
            if n == 0 {
                return Err(CoreError::InsufficientData { class, available: 0, needed: 1 });
            }
            for s in &mut sums[class] {
                *s /= n as f64;
            }
        }
        Matrix::from_rows(&sums)
    }
}

// ---------------------------------------------------------------------------
// Semi-supervised splits
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SplitKind {
    Shots(usize),
    Fraction(f64),
}

/// Disjoint partition of a training dataset into labeled and unlabeled index
/// sets. Ground-truth labels stay in the [`Dataset`]; training code must only
/// read labels at `labeled` indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSplit {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub kind: SplitKind,
}

impl LabeledSplit {
    pub fn num_labeled(&self) -> usize {
        self.labeled.len()
    }

    pub fn num_unlabeled(&self) -> usize {
        self.unlabeled.len()
    }

    /// All training indices (labeled plus unlabeled).
    pub fn union(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.labeled.iter().chain(&self.unlabeled).copied().collect();
        all.sort_unstable();
        all
    }
}

fn indices_by_class(dataset: &Dataset) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); dataset.num_classes()];
    for i in 0..dataset.len() {
        if let Some(y) = dataset.label(i) {
            by_class[y].push(i);
        }
    }
    by_class
}

fn stratified_split(
    dataset: &Dataset,
    picks_per_class: &[usize],
    kind: SplitKind,
    seed: u64,
    label: &str,
) -> Result<LabeledSplit> {
    let mut rng = stream_rng(seed, label);
    let by_class = indices_by_class(dataset);
    let mut labeled = Vec::new();
    for (class, pool) in by_class.iter().enumerate() {
        let want = picks_per_class[class];
        if pool.len() < want {
            return Err(CoreError::InsufficientData {
                class,
                available: pool.len(),
                needed: want,
            });
        }
        let chosen = sample_without_replacement(&mut rng, pool.len(), want);
        labeled.extend(chosen.iter().map(|j| pool[j]));
    }
    labeled.sort_unstable();
    let labeled_set: std::collections::HashSet<usize> = labeled.iter().copied().collect();
    let unlabeled: Vec<usize> = (0..dataset.len()).filter(|i| !labeled_set.contains(i)).collect();
    Ok(LabeledSplit { labeled, unlabeled, kind })
}

/// Exactly `k` labeled examples per class, chosen uniformly without
/// replacement; everything else becomes unlabeled.
pub fn kshot_split(dataset: &Dataset, k: usize, seed: u64) -> Result<LabeledSplit> {
    if k == 0 {
        return Err(CoreError::InvalidArgument("K must be >= 1".into()));
    }
    let picks = vec![k; dataset.num_classes()];
    stratified_split(dataset, &picks, SplitKind::Shots(k), seed, "kshot-split")
}

/// Stratified fractional labeling: roughly `fraction` of each class is
/// labeled, with at least one label per class.
pub fn fraction_split(dataset: &Dataset, fraction: f64, seed: u64) -> Result<LabeledSplit> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(CoreError::InvalidArgument(format!(
            "fraction must be in (0,1), got {fraction}"
        )));
    }
    let c = dataset.num_classes();
    if (fraction * dataset.len() as f64) < c as f64 {
        return Err(CoreError::InsufficientData {
            class: 0,
            available: (fraction * dataset.len() as f64) as usize,
            needed: c,
        });
    }
    let by_class = indices_by_class(dataset);
    let picks: Vec<usize> = by_class
        .iter()
        .map(|pool| ((fraction * pool.len() as f64).round() as usize).max(1))
        .collect();
    stratified_split(dataset, &picks, SplitKind::Fraction(fraction), seed, "fraction-split")
}

/// Moves a stratified share of the labeled indices out of a split to serve as
/// a validation set when the dataset declares none. Classes with a single
/// labeled example keep it for training.
pub fn carve_validation(
    dataset: &Dataset,
    split: &LabeledSplit,
    fraction: f64,
    seed: u64,
) -> Result<(LabeledSplit, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(CoreError::InvalidArgument(format!(
            "carve fraction must be in (0,1), got {fraction}"
        )));
    }
    let mut rng = stream_rng(seed, "carve-validation");
    let mut by_class = vec![Vec::new(); dataset.num_classes()];
    for &i in &split.labeled {
        let y = dataset.label(i).ok_or_else(|| {
            CoreError::State(format!("labeled index {i} has no label in dataset"))
        })?;
        by_class[y].push(i);
    }
    let mut val = Vec::new();
    let mut keep = Vec::new();
    for pool in by_class {
        if pool.len() < 2 {
            keep.extend(pool);
            continue;
        }
        let take = ((fraction * pool.len() as f64).round() as usize)
            .max(1)
            .min(pool.len() - 1);
        let chosen: std::collections::HashSet<usize> =
            sample_without_replacement(&mut rng, pool.len(), take).iter().collect();
        for (j, idx) in pool.into_iter().enumerate() {
            if chosen.contains(&j) {
                val.push(idx);
            } else {
                keep.push(idx);
            }
        }
    }
    keep.sort_unstable();
    val.sort_unstable();
    Ok((
        LabeledSplit { labeled: keep, unlabeled: split.unlabeled.clone(), kind: split.kind.clone() },
        val,
    ))
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Isotropic Gaussian mixture: class means drawn uniformly on a sphere of
/// radius `class_separation`, examples are mean plus `noise_scale` Gaussian
/// noise. Fully labeled.
pub fn generate_gaussian_mixture(
    num_classes: usize,
    feature_dim: usize,
    n_per_class: usize,
    class_separation: f64,
    noise_scale: f64,
    seed: u64,
    split: SplitTag,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(CoreError::InvalidArgument("need at least 2 classes".into()));
    }
    if feature_dim < 2 {
        return Err(CoreError::InvalidArgument("need feature_dim >= 2".into()));
    }
    if !(noise_scale > 0.0) {
        return Err(CoreError::InvalidArgument("noise_scale must be > 0".into()));
    }
    if class_separation < 0.0 {
        return Err(CoreError::InvalidArgument("class_separation must be >= 0".into()));
    }
    if n_per_class == 0 {
        return Err(CoreError::InvalidArgument("n_per_class must be >= 1".into()));
    }
    let mut mean_rng = stream_rng(seed, "mixture-means");
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            let raw: Vec<f64> = (0..feature_dim).map(|_| mean_rng.sample(StandardNormal)).collect();
            let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 || class_separation == 0.0 {
                vec![0.0; feature_dim]
            } else {
                raw.into_iter().map(|x| x / norm * class_separation).collect()
            }
        })
        .collect();
    let mut noise_rng = stream_rng(seed, "mixture-noise");
    let mut examples = Vec::with_capacity(num_classes * n_per_class);
    for (class, mean) in means.iter().enumerate() {
        for _ in 0..n_per_class {
            let feats: Vec<f64> = mean
                .iter()
                .map(|&m| m + noise_scale * noise_rng.sample::<f64, _>(StandardNormal))
                .collect();
            examples.push(Example { features: Vector::new(feats)?, label: Some(class) });
        }
    }
    Dataset::new(examples, num_classes, split)
}

/// Parameters for a train/val/test triple of Gaussian mixtures that share
/// class means (the means depend only on the master seed).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub feature_dim: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub separation: f64,
    pub noise_scale: f64,
}

/// Generates train/val/test datasets with identical class means and
/// independent noise. `val` is `None` when `val_per_class == 0`.
pub fn generate_splits(spec: &SyntheticSpec, seed: u64) -> Result<(Dataset, Option<Dataset>, Dataset)> {
    // Class means must coincide across the three splits, so draw one pool
    // and slice it per class.
    let total = spec.train_per_class + spec.val_per_class + spec.test_per_class;
    let pool = generate_gaussian_mixture(
        spec.classes,
        spec.feature_dim,
        total,
        spec.separation,
        spec.noise_scale,
        seed,
        SplitTag::Train,
    )?;
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for class in 0..spec.classes {
        let base = class * total;
        for j in 0..total {
            let ex = pool.example(base + j).clone();
            if j < spec.train_per_class {
                train.push(ex);
            } else if j < spec.train_per_class + spec.val_per_class {
                val.push(ex);
            } else {
                test.push(ex);
            }
        }
    }
    let train = Dataset::new(train, spec.classes, SplitTag::Train)?;
    let val = if spec.val_per_class > 0 {
        Some(Dataset::new(val, spec.classes, SplitTag::Val)?)
    } else {
        None
    };
    let test = Dataset::new(test, spec.classes, SplitTag::Test)?;
    Ok((train, val, test))
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Per-feature z-scoring statistics, fit on training data only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(train: &Dataset) -> Normalizer {
        let d = train.feature_dim();
        let n = train.len() as f64;
        let mut mean = vec![0.0; d];
        for ex in train.iter() {
            for (m, &f) in mean.iter_mut().zip(ex.features.as_slice()) {
                *m += f;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0; d];
        for ex in train.iter() {
            for ((v, &m), &f) in var.iter_mut().zip(&mean).zip(ex.features.as_slice()) {
                *v += (f - m) * (f - m);
            }
        }
        let std = var.into_iter().map(|v| (v / n).sqrt().max(1e-12)).collect();
        Normalizer { mean, std }
    }

    pub fn apply(&self, dataset: &Dataset) -> Result<Dataset> {
        if dataset.feature_dim() != self.mean.len() {
            return Err(CoreError::DimensionMismatch {
                expected: self.mean.len(),
                got: dataset.feature_dim(),
                context: "normalizer feature dimension",
            });
        }
        let examples = dataset
            .iter()
            .map(|ex| {
                let feats: Vec<f64> = ex
                    .features
                    .as_slice()
                    .iter()
                    .zip(&self.mean)
                    .zip(&self.std)
                    .map(|((&f, &m), &s)| (f - m) / s)
                    .collect();
                Ok(Example { features: Vector::new(feats)?, label: ex.label })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(examples, dataset.num_classes(), dataset.split())
    }
}

// ---------------------------------------------------------------------------
// CSV ingestion
// ---------------------------------------------------------------------------

/// Expectations for a dataset CSV. `None` fields are inferred from the file.
#[derive(Debug, Clone, Default)]
pub struct CsvSchema {
    pub feature_dim: Option<usize>,
    pub num_classes: Option<usize>,
}

/// Loads `f0,...,f{d-1},label` CSV; an empty label cell means unlabeled.
/// Row order is preserved. Accepts LF or CRLF.
pub fn load_csv_dataset(path: &Path, schema: &CsvSchema, split: SplitTag) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| CoreError::Parse {
        row: 0,
        message: "empty file".into(),
    })?;
    let columns: Vec<&str> = header.trim_end_matches('\r').split(',').collect();
    if columns.len() < 2 || columns.last() != Some(&"label") {
        return Err(CoreError::Schema(format!(
            "expected header 'f0,...,f{{d-1}},label', got '{header}'"
        )));
    }
    let d = columns.len() - 1;
    if let Some(expected) = schema.feature_dim {
        if d != expected {
            return Err(CoreError::Schema(format!(
                "header declares {d} feature columns, expected {expected}"
            )));
        }
    }
    let mut examples = Vec::new();
    let mut max_label = 0usize;
    for (line_no, line) in lines {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let row = line_no + 1; // 1-based, counting the header as row 1
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != d + 1 {
            return Err(CoreError::Parse {
                row,
                message: format!("expected {} cells, got {}", d + 1, cells.len()),
            });
        }
        let mut feats = Vec::with_capacity(d);
        for (col, cell) in cells[..d].iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| CoreError::Parse {
                row,
                message: format!("non-numeric feature in column f{col}: '{cell}'"),
            })?;
            feats.push(v);
        }
        let label_cell = cells[d].trim();
        let label = if label_cell.is_empty() {
            None
        } else {
            let y: usize = label_cell.parse().map_err(|_| CoreError::Parse {
                row,
                message: format!("label must be a non-negative integer, got '{label_cell}'"),
            })?;
            if let Some(c) = schema.num_classes {
                if y >= c {
                    return Err(CoreError::Schema(format!(
                        "row {row}: label {y} >= declared num_classes {c}"
                    )));
                }
            }
            max_label = max_label.max(y);
            Some(y)
        };
        examples.push(Example {
            features: Vector::new(feats).map_err(|e| CoreError::Parse {
                row,
                message: e.to_string(),
            })?,
            label,
        });
    }
    let num_classes = schema.num_classes.unwrap_or((max_label + 1).max(2));
    Dataset::new(examples, num_classes, split)
}

/// Writes a dataset in the `f0,...,f{d-1},label` format accepted by
/// [`load_csv_dataset`].
pub fn save_csv_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    use std::fmt::Write as _;
    let mut out = String::new();
    for j in 0..dataset.feature_dim() {
        let _ = write!(out, "f{j},");
    }
    out.push_str("label\n");
    for ex in dataset.iter() {
        for &f in ex.features.as_slice() {
            let _ = write!(out, "{f},");
        }
        match ex.label {
            Some(y) => {
                let _ = writeln!(out, "{y}");
            }
            None => out.push('\n'),
        }
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dataset(per_class: usize, classes: usize) -> Dataset {
        generate_gaussian_mixture(classes, 4, per_class, 3.0, 0.5, 11, SplitTag::Train).unwrap()
    }

    #[test]
    fn kshot_counts() {
        let ds = toy_dataset(10, 3);
        let split = kshot_split(&ds, 2, 0).unwrap();
        assert_eq!(split.num_labeled(), 6);
        assert_eq!(split.num_unlabeled(), 24);
        // exactly K per class
        let mut per_class = vec![0; 3];
        for &i in &split.labeled {
            per_class[ds.label(i).unwrap()] += 1;
        }
        assert_eq!(per_class, vec![2, 2, 2]);
    }

    #[test]
    fn kshot_n_equals_k_times_c() {
        let ds = toy_dataset(3, 5);
        let split = kshot_split(&ds, 1, 9).unwrap();
        assert_eq!(split.num_labeled(), 5);
    }

    #[test]
    fn kshot_deterministic() {
        let ds = toy_dataset(10, 3);
        let a = kshot_split(&ds, 4, 123).unwrap();
        let b = kshot_split(&ds, 4, 123).unwrap();
        assert_eq!(a, b);
        let c = kshot_split(&ds, 4, 124).unwrap();
        assert_ne!(a.labeled, c.labeled);
    }

    #[test]
    fn kshot_insufficient_class_named() {
        let ds = toy_dataset(3, 3);
        match kshot_split(&ds, 5, 0) {
            Err(CoreError::InsufficientData { class, available, needed }) => {
                assert_eq!(class, 0);
                assert_eq!(available, 3);
                assert_eq!(needed, 5);
            }
            other => panic!("expected InsufficientData, got {other:?}"),
        }
    }

    #[test]
    fn splits_are_disjoint_and_cover() {
        let ds = toy_dataset(8, 4);
        for seed in 0..5 {
            let split = kshot_split(&ds, 3, seed).unwrap();
            let mut all = split.union();
            all.dedup();
            assert_eq!(all.len(), ds.len());
            let labeled: std::collections::HashSet<_> = split.labeled.iter().collect();
            assert!(split.unlabeled.iter().all(|i| !labeled.contains(i)));
        }
    }

    #[test]
    fn fraction_split_stratified_counts() {
        let ds = toy_dataset(100, 10);
        let split = fraction_split(&ds, 0.1, 7).unwrap();
        assert_eq!(split.num_labeled(), 100);
        let mut per_class = vec![0; 10];
        for &i in &split.labeled {
            per_class[ds.label(i).unwrap()] += 1;
        }
        assert!(per_class.iter().all(|&n| n == 10));

        let small = fraction_split(&ds, 0.01, 7).unwrap();
        assert_eq!(small.num_labeled(), 10);
        assert_eq!(fraction_split(&ds, 0.1, 7).unwrap(), split);
    }

    #[test]
    fn fraction_split_too_small_errors() {
        let ds = toy_dataset(10, 4);
        assert!(matches!(
            fraction_split(&ds, 0.01, 0),
            Err(CoreError::InsufficientData { .. })
        ));
    }

    #[test]
    fn strip_then_reattach_round_trips() {
        let ds = toy_dataset(6, 3);
        let split = kshot_split(&ds, 2, 5).unwrap();
        let stripped = ds.without_labels(&split.unlabeled);
        for &i in &split.unlabeled {
            assert_eq!(stripped.label(i), None);
        }
        for &i in &split.labeled {
            assert_eq!(stripped.label(i), ds.label(i));
        }
        let restored = stripped.with_labels_from(&ds, &split.unlabeled);
        for i in 0..ds.len() {
            assert_eq!(restored.example(i), ds.example(i));
        }
    }

    #[test]
    fn mixture_reproducible_and_zero_separation_collapses_means() {
        let a = generate_gaussian_mixture(3, 4, 5, 10.0, 0.1, 42, SplitTag::Train).unwrap();
        let b = generate_gaussian_mixture(3, 4, 5, 10.0, 0.1, 42, SplitTag::Train).unwrap();
        for i in 0..a.len() {
            assert_eq!(a.example(i), b.example(i));
        }
        let c = generate_gaussian_mixture(3, 4, 200, 0.0, 1.0, 42, SplitTag::Train).unwrap();
        let protos = c.class_mean_prototypes().unwrap();
        // all class means near the origin: separation 0 makes classes indistinguishable
        for r in 0..3 {
            for v in protos.row(r) {
                assert!(v.abs() < 0.5, "mean entry {v} too far from 0");
            }
        }
    }

    #[test]
    fn generate_splits_shares_means_across_splits() {
        let spec = SyntheticSpec {
            classes: 3,
            feature_dim: 4,
            train_per_class: 50,
            val_per_class: 20,
            test_per_class: 30,
            separation: 8.0,
            noise_scale: 0.2,
        };
        let (train, val, test) = generate_splits(&spec, 3).unwrap();
        assert_eq!(train.len(), 150);
        assert_eq!(val.as_ref().unwrap().len(), 60);
        assert_eq!(test.len(), 90);
        let pt = train.class_mean_prototypes().unwrap();
        let pe = test.class_mean_prototypes().unwrap();
        for r in 0..3 {
            for (a, b) in pt.row(r).iter().zip(pe.row(r)) {
                assert!((a - b).abs() < 0.5, "class means diverge across splits");
            }
        }
    }

    #[test]
    fn carve_validation_is_stratified_and_disjoint() {
        let ds = toy_dataset(20, 4);
        let split = kshot_split(&ds, 10, 1).unwrap();
        let (rest, val) = carve_validation(&ds, &split, 0.2, 1).unwrap();
        assert_eq!(val.len(), 8); // 2 per class
        assert_eq!(rest.num_labeled(), 32);
        let vs: std::collections::HashSet<_> = val.iter().collect();
        assert!(rest.labeled.iter().all(|i| !vs.contains(i)));
    }

    #[test]
    fn csv_round_trip_and_inference() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.csv");
        std::fs::write(&path, "f0,f1,label\n0.5,1.25,0\n-1.0,2.0,1\n3.5,0.0,\n").unwrap();
        let ds = load_csv_dataset(&path, &CsvSchema::default(), SplitTag::Train).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.num_classes(), 2);
        assert_eq!(ds.label(0), Some(0));
        assert_eq!(ds.label(2), None);
        assert_eq!(ds.features(1).as_slice(), &[-1.0, 2.0]);

        let out = dir.path().join("round.csv");
        save_csv_dataset(&ds, &out).unwrap();
        let ds2 = load_csv_dataset(&out, &CsvSchema::default(), SplitTag::Train).unwrap();
        for i in 0..ds.len() {
            assert_eq!(ds.example(i), ds2.example(i));
        }
    }

    #[test]
    fn csv_errors_carry_row_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "f0,f1,label\n1.0,2.0,0\nx,2.0,1\n").unwrap();
        match load_csv_dataset(&path, &CsvSchema::default(), SplitTag::Train) {
            Err(CoreError::Parse { row, .. }) => assert_eq!(row, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        let path2 = dir.path().join("bad2.csv");
        std::fs::write(&path2, "f0,f1,label\n1.0,2.0,7\n").unwrap();
        let schema = CsvSchema { feature_dim: None, num_classes: Some(3) };
        assert!(matches!(
            load_csv_dataset(&path2, &schema, SplitTag::Train),
            Err(CoreError::Schema(_))
        ));
    }

    #[test]
    fn zscore_uses_train_statistics_only() {
        let train = toy_dataset(50, 3);
        let norm = Normalizer::fit(&train);
        let normed = norm.apply(&train).unwrap();
        let d = train.feature_dim();
        let n = normed.len() as f64;
        for j in 0..d {
            let mean: f64 = normed.iter().map(|e| e.features[j]).sum::<f64>() / n;
            let var: f64 = normed.iter().map(|e| (e.features[j] - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-8);
        }
    }
}
