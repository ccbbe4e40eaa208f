//! Standalone numerical verification of the optimality and equivalence
//! properties behind dual-head interpolation: the optimal single-head
//! distribution is the weighted arithmetic mean of the two targets, the
//! Pinsker bound ties L1 distance to KL divergence, and epsilon-converged
//! heads interpolate to within epsilon of that optimum.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::numcore::{kl_divergence, l1_distance, softmax, ProbVector, Vector};
use crate::seeding::stream_rng;

/// Entries below this are treated as boundary (the objective diverges there).
pub const INTERIOR_FLOOR: f64 = 1e-9;

/// Weight of the uniform mixture used to push one-hot targets into the
/// simplex interior before objective evaluation.
pub const ONE_HOT_SMOOTHING: f64 = 1e-6;

/// A point on the probability simplex, flagged when all entries clear the
/// interior floor.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexPoint {
    point: ProbVector,
    interior: bool,
}

impl SimplexPoint {
    pub fn new(point: ProbVector) -> Self {
        let interior = point.as_slice().iter().all(|&p| p >= INTERIOR_FLOOR);
        Self { point, interior }
    }

    pub fn probs(&self) -> &ProbVector {
        &self.point
    }

    pub fn is_interior(&self) -> bool {
        self.interior
    }
}

/// Outcome of one theorem check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheoremCheckReport {
    pub theorem: String,
    pub trials: u64,
    pub max_violation: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub note: Option<String>,
}

impl TheoremCheckReport {
    fn new(theorem: &str, trials: u64, max_violation: f64, tolerance: f64) -> Self {
        Self {
            theorem: theorem.to_string(),
            trials,
            max_violation,
            tolerance,
            pass: max_violation <= tolerance,
            note: None,
        }
    }

    fn with_note(mut self, note: String) -> Self {
        self.note = Some(note);
        self
    }
}

/// Uniform (symmetric Dirichlet with concentration 1) sample from the
/// simplex: normalized standard exponentials.
pub fn sample_simplex(dim: usize, rng: &mut ChaCha8Rng) -> ProbVector {
    loop {
        let raw: Vec<f64> = (0..dim).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
        let sum: f64 = raw.iter().sum();
        if sum > 0.0 {
            return ProbVector::new(raw.into_iter().map(|x| x / sum).collect())
                .expect("normalized exponentials form a probability vector");
        }
    }
}

/// One-hot distribution mixed toward uniform with weight
/// [`ONE_HOT_SMOOTHING`], keeping the objective finite on the probe region.
pub fn smooth_one_hot(class: usize, dim: usize) -> Result<ProbVector> {
    let one_hot = ProbVector::one_hot(class, dim)?;
    mix_toward_uniform(&one_hot, ONE_HOT_SMOOTHING)
}

fn mix_toward_uniform(p: &ProbVector, weight: f64) -> Result<ProbVector> {
    let dim = p.dim();
    let u = 1.0 / dim as f64;
    ProbVector::new(p.as_slice().iter().map(|&x| (1.0 - weight) * x + weight * u).collect())
}

/// The optimal single-head distribution: `lambda y + (1 - lambda) p`.
pub fn optimal_mixture(y: &ProbVector, p: &ProbVector, lambda: f64) -> Result<ProbVector> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(CoreError::InvalidArgument(format!("lambda must be in [0,1], got {lambda}")));
    }
    if y.dim() != p.dim() {
        return Err(CoreError::DimensionMismatch {
            expected: y.dim(),
            got: p.dim(),
            context: "optimal_mixture",
        });
    }
    ProbVector::new(
        y.as_slice()
            .iter()
            .zip(p.as_slice())
            .map(|(&yc, &pc)| lambda * yc + (1.0 - lambda) * pc)
            .collect(),
    )
}

/// The single-head objective `lambda CE(phat, y) + (1 - lambda) KL(p || phat)`
/// evaluated exactly (no probability floor). Returns infinity when `phat` has
/// a boundary entry where `y` or `p` carries mass.
pub fn sho_objective(
    phat: &SimplexPoint,
    y: &ProbVector,
    p: &ProbVector,
    lambda: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(CoreError::InvalidArgument(format!("lambda must be in [0,1], got {lambda}")));
    }
    let q = phat.probs();
    if y.dim() != q.dim() || p.dim() != q.dim() {
        return Err(CoreError::DimensionMismatch {
            expected: q.dim(),
            got: y.dim().max(p.dim()),
            context: "sho_objective",
        });
    }
    let mut ce = 0.0;
    let mut kl = 0.0;
    for c in 0..q.dim() {
        let qc = q[c];
        if qc < INTERIOR_FLOOR && (y[c] > 0.0 || p[c] > 0.0) {
            return Ok(f64::INFINITY);
        }
        if y[c] > 0.0 {
            ce -= y[c] * qc.ln();
        }
        if p[c] > 0.0 {
            kl += p[c] * (p[c].ln() - qc.ln());
        }
    }
    Ok(lambda * ce + (1.0 - lambda) * kl)
}

/// Brute-force optimality check: no sampled simplex-tangent perturbation of
/// the mixture may lower the objective by more than the tolerance.
///
/// Perturbed points are convex combinations `(1 - t) phat* + t q` with `q`
/// uniform on the simplex and `t` in `(0, scale]`, which keeps them on the
/// simplex. Both targets are smoothed toward uniform by
/// [`ONE_HOT_SMOOTHING`] so the objective is finite everywhere probed.
pub fn verify_optimum(
    y: &ProbVector,
    p: &ProbVector,
    lambda: f64,
    n_perturbations: u64,
    perturbation_scale: f64,
    seed: u64,
) -> Result<TheoremCheckReport> {
    if !(perturbation_scale > 0.0 && perturbation_scale <= 1.0) {
        return Err(CoreError::InvalidArgument(format!(
            "perturbation scale must be in (0,1], got {perturbation_scale}"
        )));
    }
    let y = mix_toward_uniform(y, ONE_HOT_SMOOTHING)?;
    let p = mix_toward_uniform(p, ONE_HOT_SMOOTHING)?;
    let opt = SimplexPoint::new(optimal_mixture(&y, &p, lambda)?);
    let base = sho_objective(&opt, &y, &p, lambda)?;
    let mut rng = stream_rng(seed, "verify-optimum");
    let mut max_violation: f64 = 0.0;
    for _ in 0..n_perturbations {
        let q = sample_simplex(y.dim(), &mut rng);
        let t = rng.gen_range(f64::EPSILON..=perturbation_scale);
        let perturbed = ProbVector::new(
            opt.probs()
                .as_slice()
                .iter()
                .zip(q.as_slice())
                .map(|(&o, &qc)| (1.0 - t) * o + t * qc)
                .collect(),
        )?;
        let value = sho_objective(&SimplexPoint::new(perturbed), &y, &p, lambda)?;
        max_violation = max_violation.max(base - value);
    }
    Ok(TheoremCheckReport::new("optimal-mixture", n_perturbations, max_violation, 1e-9))
}

/// `(||p - q||_1, sqrt(2 KL(p || q)))`; the Pinsker bound requires the first
/// to be at most the second.
pub fn pinsker_check(p: &ProbVector, q: &ProbVector) -> Result<(f64, f64)> {
    let l1 = l1_distance(p, q)?;
    let bound = (2.0 * kl_divergence(p, q)?).sqrt();
    Ok((l1, bound))
}

/// Pinsker bound on random Dirichlet pairs across dimensions 2..=10.
pub fn verify_pinsker(n_trials: u64, seed: u64) -> Result<TheoremCheckReport> {
    let mut rng = stream_rng(seed, "verify-pinsker");
    let mut max_violation: f64 = 0.0;
    for _ in 0..n_trials {
        let dim = rng.gen_range(2..=10);
        let p = sample_simplex(dim, &mut rng);
        let q = sample_simplex(dim, &mut rng);
        let (l1, bound) = pinsker_check(&p, &q)?;
        max_violation = max_violation.max(l1 - bound);
    }
    Ok(TheoremCheckReport::new("pinsker", n_trials, max_violation, 1e-9))
}

/// Random distribution at L1 distance at most `eps` from `base`:
/// `(1 - t) base + t r` with `t` scaled so the distance cannot exceed `eps`.
fn nearby_distribution(
    base: &ProbVector,
    eps: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ProbVector> {
    let r = sample_simplex(base.dim(), rng);
    let spread = l1_distance(&r, base)?;
    let t = if spread == 0.0 { 0.0 } else { rng.gen::<f64>() * (eps / spread).min(1.0) };
    ProbVector::new(
        base.as_slice()
            .iter()
            .zip(r.as_slice())
            .map(|(&b, &rc)| (1.0 - t) * b + t * rc)
            .collect(),
    )
}

/// Inference-equivalence check: heads within L1 distance `eps` of their
/// targets interpolate (with `alpha = lambda`) to within `eps` of
/// `lambda y + (1 - lambda) p`.
pub fn verify_inference_equivalence(
    eps: f64,
    lambda: f64,
    n_trials: u64,
    num_classes: usize,
    seed: u64,
) -> Result<TheoremCheckReport> {
    if !(0.0..=2.0).contains(&eps) {
        return Err(CoreError::InvalidArgument(format!("eps must be in [0,2], got {eps}")));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(CoreError::InvalidArgument(format!("lambda must be in [0,1], got {lambda}")));
    }
    let mut rng = stream_rng(seed, "verify-inference-equivalence");
    let mut max_violation: f64 = 0.0;
    for _ in 0..n_trials {
        let y = ProbVector::one_hot(rng.gen_range(0..num_classes), num_classes)?;
        let p = sample_simplex(num_classes, &mut rng);
        let head_ce = nearby_distribution(&y, eps, &mut rng)?;
        let head_kd = nearby_distribution(&p, eps, &mut rng)?;
        let combined = ProbVector::new(
            head_ce
                .as_slice()
                .iter()
                .zip(head_kd.as_slice())
                .map(|(&a, &b)| lambda * a + (1.0 - lambda) * b)
                .collect(),
        )?;
        let target = optimal_mixture(&y, &p, lambda)?;
        let distance = l1_distance(&combined, &target)?;
        max_violation = max_violation.max(distance - eps);
    }
    Ok(TheoremCheckReport::new("inference-equivalence", n_trials, max_violation, 1e-9))
}

/// Temperature-matching check. Student logits are rejection-sampled until
/// `KL(p_1 || softmax(h)) <= delta`; then the Pinsker side
/// `||softmax(h/tau) - p_tau||_1 <= sqrt(2 KL(p_tau || softmax(h/tau)))`
/// is asserted, and the gap between that KL and `delta` is reported (the
/// temperature-transport step is an approximation, so it is measured, not
/// asserted).
pub fn verify_temperature_matching(
    delta: f64,
    n_trials: u64,
    num_classes: usize,
    tau: f64,
    seed: u64,
) -> Result<TheoremCheckReport> {
    if !(delta > 0.0) {
        return Err(CoreError::InvalidArgument(format!("delta must be > 0, got {delta}")));
    }
    if !(tau > 0.0) {
        return Err(CoreError::InvalidArgument(format!("tau must be > 0, got {tau}")));
    }
    let mut rng = stream_rng(seed, "verify-temperature-matching");
    let mut max_violation: f64 = 0.0;
    let mut max_gap = f64::NEG_INFINITY;
    let mut gap_sum = 0.0;
    for _ in 0..n_trials {
        let teacher_logits = Vector::from_fn(num_classes, |_| rng.gen_range(-2.0..2.0));
        let p1 = softmax(&teacher_logits, 1.0)?;
        // shrink the noise scale until the KL constraint is met
        let mut noise_scale = delta.sqrt();
        let student_logits = loop {
            let candidate = Vector::from_fn(num_classes, |i| {
                teacher_logits[i] + noise_scale * rng.gen_range(-1.0..1.0)
            });
            if kl_divergence(&p1, &softmax(&candidate, 1.0)?)? <= delta {
                break candidate;
            }
            noise_scale *= 0.7;
        };
        let p_tau = softmax(&teacher_logits, tau)?;
        let student_tau = softmax(&student_logits, tau)?;
        let l1 = l1_distance(&student_tau, &p_tau)?;
        let kl_tau = kl_divergence(&p_tau, &student_tau)?;
        max_violation = max_violation.max(l1 - (2.0 * kl_tau).sqrt());
        let gap = kl_tau - delta;
        max_gap = max_gap.max(gap);
        gap_sum += gap;
    }
    Ok(TheoremCheckReport::new("temperature-matching", n_trials, max_violation, 1e-9)
        .with_note(format!(
            "KL(p_tau || student_tau) - delta: mean {:.3e}, max {:.3e} (measured, not asserted)",
            gap_sum / n_trials as f64,
            max_gap
        )))
}

/// Sweep sizes for [`run_all_checks`].
#[derive(Debug, Clone)]
pub struct TheoryCheckConfig {
    pub optimum_configs: u64,
    pub optimum_perturbations: u64,
    pub pinsker_trials: u64,
    pub equivalence_trials: u64,
    pub temperature_trials: u64,
    pub seed: u64,
}

impl Default for TheoryCheckConfig {
    fn default() -> Self {
        Self {
            optimum_configs: 100,
            optimum_perturbations: 10_000,
            pinsker_trials: 10_000,
            equivalence_trials: 10_000,
            temperature_trials: 1_000,
            seed: 0,
        }
    }
}

/// Runs every theorem check at its default operating point and returns one
/// report per theorem (optimum reports are merged by max violation).
pub fn run_all_checks(config: &TheoryCheckConfig) -> Result<Vec<TheoremCheckReport>> {
    let mut reports = Vec::new();

    let mut rng = stream_rng(config.seed, "theory-configs");
    let mut optimum = TheoremCheckReport::new("optimal-mixture", 0, 0.0, 1e-9);
    for i in 0..config.optimum_configs {
        let dim = rng.gen_range(2..=10);
        let y = ProbVector::one_hot(rng.gen_range(0..dim), dim)?;
        let p = sample_simplex(dim, &mut rng);
        let lambda = rng.gen_range(0.0..=1.0);
        let report = verify_optimum(
            &y,
            &p,
            lambda,
            config.optimum_perturbations,
            1.0,
            config.seed.wrapping_add(i),
        )?;
        optimum.trials += report.trials;
        optimum.max_violation = optimum.max_violation.max(report.max_violation);
    }
    optimum.pass = optimum.max_violation <= optimum.tolerance;
    reports.push(optimum);

    reports.push(verify_pinsker(config.pinsker_trials, config.seed)?);

    let mut equivalence = TheoremCheckReport::new("inference-equivalence", 0, 0.0, 1e-9);
    for &eps in &[0.01, 0.1, 0.5] {
        for &lambda in &[0.0, 0.3, 0.5, 0.7, 1.0] {
            let report = verify_inference_equivalence(
                eps,
                lambda,
                config.equivalence_trials,
                6,
                config.seed,
            )?;
            equivalence.trials += report.trials;
            equivalence.max_violation = equivalence.max_violation.max(report.max_violation);
        }
    }
    equivalence.pass = equivalence.max_violation <= equivalence.tolerance;
    reports.push(equivalence);

    reports.push(verify_temperature_matching(
        0.01,
        config.temperature_trials,
        5,
        2.0,
        config.seed,
    )?);

    Ok(reports)
}
