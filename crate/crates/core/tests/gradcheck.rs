//! Central-finite-difference verification of every analytic gradient path:
//! affine heads, the cosine head, and backpropagation through the extractor,
//! for both losses, in single and dual mode.

use dho_core::data::{Dataset, Example, SplitTag};
use dho_core::losses::{evaluate_batch, GradientBundle, HeadGrad};
use dho_core::model::{HeadMode, KdHeadKind, ModelConfig, StudentModel};
use dho_core::numcore::{ProbVector, Vector};
use dho_core::seeding::stream_rng;
use dho_core::theory::sample_simplex;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const FD_STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-5;

struct Case {
    model: StudentModel,
    dataset: Dataset,
    targets: Vec<ProbVector>,
    labeled: Vec<usize>,
    unlabeled: Vec<usize>,
    lambda: f64,
    eta: f64,
}

/// Random evaluation state with every pre-activation away from the ReLU kink
/// and a safely non-zero feature norm, so finite differences are valid.
fn random_case(rng: &mut ChaCha8Rng, mode: HeadMode, kd_head: KdHeadKind) -> Case {
    'outer: loop {
        let d_in = rng.gen_range(3..=5);
        let hidden = rng.gen_range(4..=6);
        let d = rng.gen_range(3..=5);
        let c = rng.gen_range(3..=4);
        let config = ModelConfig {
            layer_dims: vec![d_in, hidden, d],
            num_classes: c,
            mode,
            kd_head,
        };
        let model = StudentModel::build(&config, rng.gen()).unwrap();

        let n = rng.gen_range(4..=7);
        let mut examples = Vec::with_capacity(n);
        for _ in 0..n {
            examples.push(Example {
                features: Vector::from_fn(d_in, |_| rng.gen_range(-1.5..1.5)),
                label: Some(rng.gen_range(0..c)),
            });
        }
        let dataset = Dataset::new(examples, c, SplitTag::Train).unwrap();

        // reject states near ReLU kinks or with tiny features (cosine head)
        for i in 0..dataset.len() {
            let trace = model.extractor.forward_trace(dataset.features(i)).unwrap();
            for pre in &trace.preacts {
                if pre.as_slice().iter().any(|v| v.abs() < 1e-3) {
                    continue 'outer;
                }
            }
            if trace.features().norm() < 1e-2 {
                continue 'outer;
            }
        }

        let targets = (0..dataset.len()).map(|_| sample_simplex(c, rng)).collect();
        let labeled: Vec<usize> = (0..n.min(3)).collect();
        let unlabeled: Vec<usize> = (n.min(3)..n).collect();
        if unlabeled.is_empty() {
            continue;
        }
        let lambda = [0.0, 0.3, 0.7, 1.0][rng.gen_range(0..4)];
        let eta = [1.0, 2.0][rng.gen_range(0..2)];
        return Case { model, dataset, targets, labeled, unlabeled, lambda, eta };
    }
}

fn losses_of(case: &Case) -> (f64, f64) {
    let eval = evaluate_batch(
        &case.model,
        &case.dataset,
        &case.targets,
        &case.labeled,
        &case.unlabeled,
        case.lambda,
        case.eta,
        None,
    )
    .unwrap();
    (eval.losses.ce_loss, eval.losses.kd_loss)
}

fn bundle_of(case: &Case) -> GradientBundle {
    evaluate_batch(
        &case.model,
        &case.dataset,
        &case.targets,
        &case.labeled,
        &case.unlabeled,
        case.lambda,
        case.eta,
        None,
    )
    .unwrap()
    .bundle
}

/// Analytic gradient of one loss laid out in the model's tensor order.
/// `None` marks tensors the loss cannot touch (exact-zero expectation).
fn analytic_tensors(case: &Case, bundle: &GradientBundle, ce: bool) -> Vec<Option<Vec<f64>>> {
    let mut out: Vec<Option<Vec<f64>>> = Vec::new();
    let theta = if ce { &bundle.theta_ce } else { &bundle.theta_kd };
    for (w, b) in &theta.layers {
        out.push(Some(w.as_slice().to_vec()));
        out.push(Some(b.as_slice().to_vec()));
    }
    let head_grad = |g: &HeadGrad| -> Vec<Option<Vec<f64>>> {
        match g {
            HeadGrad::Linear { weight, bias } => {
                vec![Some(weight.as_slice().to_vec()), Some(bias.as_slice().to_vec())]
            }
            HeadGrad::Cosine { weight } => vec![Some(weight.as_slice().to_vec())],
        }
    };
    match case.model.mode {
        HeadMode::Single => {
            let g = if ce { &bundle.ce_head } else { &bundle.kd_head };
            out.extend(head_grad(g));
        }
        HeadMode::Dual => {
            if ce {
                out.extend(head_grad(&bundle.ce_head));
                // the CE loss cannot reach the KD head
                out.extend(head_grad(&bundle.kd_head).into_iter().map(|_| None));
            } else {
                out.extend(head_grad(&bundle.ce_head).into_iter().map(|_| None));
                out.extend(head_grad(&bundle.kd_head));
            }
        }
    }
    out
}

fn tensor_count(model: &mut StudentModel) -> usize {
    model.param_tensors_mut().len()
}

fn tensor_len(model: &mut StudentModel, t: usize) -> usize {
    model.param_tensors_mut()[t].1.len()
}

fn nudge(model: &mut StudentModel, t: usize, i: usize, delta: f64) {
    model.param_tensors_mut()[t].1[i] += delta;
}

fn rel_err(a: &[f64], f: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(f).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nf: f64 = f.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nf).max(1e-10)
}

fn check_case(case: &mut Case) {
    let bundle = bundle_of(case);
    for &ce in &[true, false] {
        let analytic = analytic_tensors(case, &bundle, ce);
        let n_tensors = tensor_count(&mut case.model);
        assert_eq!(analytic.len(), n_tensors);
        for t in 0..n_tensors {
            let len = tensor_len(&mut case.model, t);
            let mut fd = vec![0.0; len];
            let mut exact_zero = true;
            for i in 0..len {
                nudge(&mut case.model, t, i, FD_STEP);
                let plus = losses_of(case);
                nudge(&mut case.model, t, i, -2.0 * FD_STEP);
                let minus = losses_of(case);
                nudge(&mut case.model, t, i, FD_STEP);
                let (p, m) = if ce { (plus.0, minus.0) } else { (plus.1, minus.1) };
                exact_zero &= p == m;
                fd[i] = (p - m) / (2.0 * FD_STEP);
            }
            match &analytic[t] {
                Some(a) => {
                    let err = rel_err(a, &fd);
                    assert!(
                        err < REL_TOL,
                        "tensor {t} ({} loss): relative error {err:.3e}",
                        if ce { "ce" } else { "kd" }
                    );
                }
                None => {
                    // decoupling must be exact: the loss never reads these
                    // parameters, so the two perturbed losses are bit-equal
                    assert!(
                        exact_zero,
                        "tensor {t}: cross-head gradient must be exactly zero"
                    );
                }
            }
        }
    }
}

#[test]
fn gradients_match_finite_differences_dual_linear() {
    let mut rng = stream_rng(101, "gradcheck-dual-linear");
    for _ in 0..8 {
        let mut case = random_case(&mut rng, HeadMode::Dual, KdHeadKind::Linear);
        check_case(&mut case);
    }
}

#[test]
fn gradients_match_finite_differences_dual_cosine() {
    let mut rng = stream_rng(102, "gradcheck-dual-cosine");
    for _ in 0..6 {
        let mut case =
            random_case(&mut rng, HeadMode::Dual, KdHeadKind::Cosine { scale: 0.5 });
        check_case(&mut case);
    }
}

#[test]
fn gradients_match_finite_differences_single() {
    let mut rng = stream_rng(103, "gradcheck-single");
    for _ in 0..6 {
        let mut case = random_case(&mut rng, HeadMode::Single, KdHeadKind::Linear);
        check_case(&mut case);
    }
}

#[test]
fn separately_stored_gradients_sum_to_the_combined_gradient() {
    // the finite difference of lambda*CE + (1-lambda)*KD must match the
    // lambda-weighted sum of the separately stored extractor gradients,
    // justifying keeping them apart for conflict measurement
    let mut rng = stream_rng(104, "gradcheck-linearity");
    for _ in 0..4 {
        let mut case = random_case(&mut rng, HeadMode::Dual, KdHeadKind::Linear);
        case.lambda = 0.37;
        let bundle = bundle_of(&case);
        let lambda = case.lambda;
        // extractor tensors come first, (weight, bias) per layer
        for (layer, (wc, _)) in bundle.theta_ce.layers.iter().enumerate() {
            let wk = &bundle.theta_kd.layers[layer].0;
            let analytic: Vec<f64> = wc
                .as_slice()
                .iter()
                .zip(wk.as_slice())
                .map(|(&a, &b)| lambda * a + (1.0 - lambda) * b)
                .collect();
            let t = 2 * layer;
            let len = tensor_len(&mut case.model, t);
            let mut fd = vec![0.0; len];
            for i in 0..len {
                nudge(&mut case.model, t, i, FD_STEP);
                let (cp, kp) = losses_of(&case);
                nudge(&mut case.model, t, i, -2.0 * FD_STEP);
                let (cm, km) = losses_of(&case);
                nudge(&mut case.model, t, i, FD_STEP);
                let plus = lambda * cp + (1.0 - lambda) * kp;
                let minus = lambda * cm + (1.0 - lambda) * km;
                fd[i] = (plus - minus) / (2.0 * FD_STEP);
            }
            let err = rel_err(&analytic, &fd);
            assert!(err < REL_TOL, "layer {layer} combined gradient error {err:.3e}");
        }
    }
}
