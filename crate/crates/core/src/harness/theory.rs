//! Randomized checks of the gradient engine and the geometric results.
//!
//! Each check draws its own small random networks from the seed and returns a
//! [`CheckReport`]; [`run_theory_checks`] runs them all.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::attribution::{attribute_class, integrated_gradients, AttributionConfig, Method};
use crate::autodiff::{finite_diff_gradient, finite_diff_hessian};
use crate::geometry::{
    closed_form_hessian, estimate_attribution_robustness, sg_global_bound, sg_noise_threshold, gradient_difference_bound,
    triangle_bound_check, verify_smoothing_convolution, BallSpec, CheckReport, CrossEntropyField, HessianFactorization, NetQoi, Norm,
    ScalarField,
};
use crate::linalg::jacobi_eigen;
use crate::nn::{Activation, ClassSelector, Network, QuantityOfInterest, Stage};
use crate::{par, rng};

use super::Result;

/// Sample counts for each check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TheoryConfig {
    pub seed: u64,
    pub gradient_nets: usize,
    pub ig_nets: usize,
    pub ig_steps: usize,
    pub hessian_points: usize,
    pub eigen_factorizations: usize,
    pub sg_bound_trials: usize,
    pub gradient_difference_nets: usize,
    pub gradient_difference_pairs: usize,
    pub gradient_difference_delta2: f64,
    pub convolution_nets: usize,
    pub convolution_samples: usize,
    pub convolution_sigma: f64,
    pub noise_threshold_trials: usize,
    pub triangle_nets: usize,
    pub triangle_samples: usize,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            gradient_nets: 100,
            ig_nets: 50,
            ig_steps: 512,
            hessian_points: 50,
            eigen_factorizations: 100,
            sg_bound_trials: 1000,
            gradient_difference_nets: 10,
            gradient_difference_pairs: 1000,
            gradient_difference_delta2: 1e-2,
            convolution_nets: 20,
            convolution_samples: 10_000,
            convolution_sigma: 0.1,
            noise_threshold_trials: 10_000,
            triangle_nets: 10,
            triangle_samples: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheorySummary {
    pub pass: bool,
    pub checks: Vec<CheckReport>,
}

impl TheorySummary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}

/// Random MLP with `d ≤ 16`, `c ≤ 10`, one or two hidden layers.
pub fn random_network(r: &mut ChaCha8Rng, activation: Activation) -> Network {
    let d = r.random_range(2..=16);
    let c = r.random_range(2..=10);
    let mut widths = vec![d];
    for _ in 0..r.random_range(1..=2) {
        widths.push(r.random_range(3..=16));
    }
    widths.push(c);
    Network::random(&widths, activation, r.random()).expect("valid widths")
}

fn random_softplus(r: &mut ChaCha8Rng) -> Network {
    let beta = r.random_range(1.0..5.0);
    random_network(r, Activation::Softplus { beta })
}

fn random_point(r: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| r.random_range(-1.0..1.0)).collect()
}

/// Richardson-extrapolated central differences (error `O(h⁴)`).
fn richardson_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let coarse = finite_diff_gradient(&f, x, h);
    let fine = finite_diff_gradient(&f, x, h / 2.0);
    fine.iter().zip(&coarse).map(|(a, b)| (4.0 * a - b) / 3.0).collect()
}

fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Backward vs finite differences on random softplus nets, for the
/// cross-entropy and for `‖∇ₓ CE‖²` (double backprop).
pub fn check_gradients(nets: usize, seed: u64) -> CheckReport {
    let floor = 1e-6;
    let results = par::map(nets, |t| {
        let mut r = rng::stream(seed, t as u64);
        let net = random_softplus(&mut r);
        let x = random_point(&mut r, net.input_dim());
        let label = r.random_range(0..net.classes());
        let ce = CrossEntropyField { net: &net, label };
        let first = ce.gradient(&x);
        let fd = richardson_gradient(|z| ce.value(z), &x, 1e-3);
        let err1 = first.iter().zip(&fd).map(|(a, b)| relative_error(*a, *b, floor)).fold(0.0, f64::max);

        let grad_sq = |z: &[f64]| -> f64 { ce.gradient(z).iter().map(|v| v * v).sum() };
        let (mut g, xv, logits) = net.forward_logits(&x).expect("dims");
        let loss = g.cross_entropy(logits, label).expect("label");
        let gx = g.backward(loss, &[xv], true).expect("scalar")[0];
        let sq = g.dot(gx, gx).expect("same shape");
        let second = g.backward(sq, &[xv], false).expect("scalar")[0];
        let second = g.value(second).to_vec();
        let fd2 = richardson_gradient(grad_sq, &x, 1e-3);
        let err2 = second.iter().zip(&fd2).map(|(a, b)| relative_error(*a, *b, floor)).fold(0.0, f64::max);
        (err1, err2)
    });
    let mut report = CheckReport::new("gradient_correctness");
    let (mut worst1, mut worst2) = (0.0_f64, 0.0_f64);
    for (t, (e1, e2)) in results.into_iter().enumerate() {
        worst1 = worst1.max(e1);
        worst2 = worst2.max(e2);
        if e1 >= 1e-4 || e2 >= 1e-3 {
            report.fail(json!({"net": t, "first_order_rel": e1, "double_backprop_rel": e2}));
        }
    }
    report.stat("nets", nets as u64).stat("max_rel_first", worst1).stat("max_rel_double", worst2);
    report
}

/// `Σ IG = f(x) − f(x_b)` with the midpoint rule on random softplus nets.
pub fn check_ig_completeness(nets: usize, steps: usize, seed: u64) -> Result<CheckReport> {
    let results = par::map(nets, |t| -> Result<(f64, f64)> {
        let mut r = rng::stream(seed, t as u64);
        let net = random_softplus(&mut r);
        let x = random_point(&mut r, net.input_dim());
        let cfg = AttributionConfig { ig_steps: steps, ..Default::default() };
        let class = net.predict(&x)?;
        let map = integrated_gradients(&net, &x, &cfg)?;
        let gap = net.logits(&x)?[class] - net.logits(&vec![0.0; x.len()])?[class];
        Ok((map.scores.iter().sum::<f64>() - gap, gap))
    });
    let mut report = CheckReport::new("ig_completeness");
    let mut worst = 0.0_f64;
    for (t, res) in results.into_iter().enumerate() {
        let (err, gap) = res?;
        let tol = 1e-3 * gap.abs() + 1e-6;
        worst = worst.max(err.abs() / tol);
        if err.abs() >= tol {
            report.fail(json!({"net": t, "error": err, "gap": gap}));
        }
    }
    report.stat("nets", nets as u64).stat("steps", steps as u64).stat("max_error_over_tolerance", worst);
    Ok(report)
}

/// Hook applied to the closed-form Hessian before comparison (negative controls).
pub type HessianTamper<'a> = &'a (dyn Fn(&mut DMatrix<f64>) + Sync);

/// Closed-form `W A Wᵀ` vs the finite-difference cross-entropy Hessian on
/// ReLU nets at points whose pre-activations all clear `1e−2`.
pub fn check_closed_form_hessian(points: usize, seed: u64, tamper: Option<HessianTamper<'_>>) -> Result<CheckReport> {
    let results = par::map(points, |t| -> Result<serde_json::Value> {
        let mut r = rng::stream(seed, t as u64);
        let net = random_network(&mut r, Activation::Relu);
        let x = loop {
            let x = random_point(&mut r, net.input_dim());
            if net.activation_margin(&x)? > 1e-2 {
                break x;
            }
        };
        let fac = closed_form_hessian(&net, &x)?;
        let mut h = fac.explicit_hessian();
        if let Some(f) = tamper {
            f(&mut h);
        }
        let ce = CrossEntropyField { net: &net, label: net.predict(&x)? };
        let fd = finite_diff_hessian(|z| ce.value(z), &x, 1e-4);
        let d = x.len();
        let mut max_err = 0.0_f64;
        let mut at = (0, 0);
        for i in 0..d {
            for j in 0..d {
                let e = (h[(i, j)] - fd[i][j]).abs();
                if e > max_err {
                    max_err = e;
                    at = (i, j);
                }
            }
        }
        let row_sum = (0..fac.a.nrows()).map(|i| fac.a.row(i).sum().abs()).fold(0.0, f64::max);
        let min_eig = fac.eigvals.iter().cloned().fold(f64::INFINITY, f64::min);
        Ok(json!({"point": t, "max_entry_error": max_err, "entry": [at.0, at.1], "a_row_sum": row_sum, "min_eigenvalue": min_eig}))
    });
    let mut report = CheckReport::new("closed_form_hessian");
    let (mut worst, mut worst_row, mut min_eig) = (0.0_f64, 0.0_f64, f64::INFINITY);
    for res in results {
        let w = res?;
        let e = w["max_entry_error"].as_f64().unwrap_or(f64::NAN);
        let rs = w["a_row_sum"].as_f64().unwrap_or(f64::NAN);
        let me = w["min_eigenvalue"].as_f64().unwrap_or(f64::NAN);
        worst = worst.max(e);
        worst_row = worst_row.max(rs);
        min_eig = min_eig.min(me);
        if !(e < 1e-3 && rs < 1e-12 && me >= -1e-8) {
            report.fail(w);
        }
    }
    report
        .stat("points", points as u64)
        .stat("max_entry_error", worst)
        .stat("max_a_row_sum", worst_row)
        .stat("min_eigenvalue", min_eig);
    Ok(report)
}

/// Spectrum of the `c × c` system `BᵀB` against a dense eigensolver on `B Bᵀ`.
pub fn check_eigen_trick(factorizations: usize, seed: u64) -> Result<CheckReport> {
    let results = par::map(factorizations, |t| -> Result<(f64, usize, usize)> {
        let mut r = rng::stream(seed, t as u64);
        let d = r.random_range(2..=16);
        let c = r.random_range(2..=10);
        let w = DMatrix::from_fn(d, c, |_, _| r.random_range(-1.0..1.0));
        let logits: Vec<f64> = (0..c).map(|_| r.random_range(-2.0..2.0)).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        let fac = HessianFactorization::from_parts(w, e.iter().map(|v| v / s).collect())?;
        let dense = (&fac.b * fac.b.transpose()).symmetric_eigen();
        let mut oracle: Vec<f64> = dense.eigenvalues.iter().copied().collect();
        oracle.sort_by(|a, b| b.total_cmp(a));
        let scale = oracle[0].abs().max(f64::MIN_POSITIVE);
        let mut worst = 0.0_f64;
        for k in 0..c {
            let mine = fac.eigvals[k];
            let theirs = if k < d { oracle[k] } else { 0.0 };
            let err = if theirs > 1e-6 * scale { (mine - theirs).abs() / theirs } else { (mine - theirs).abs() / scale };
            worst = worst.max(err);
        }
        Ok((worst, d, c))
    });
    let mut report = CheckReport::new("eigenvalue_trick");
    let mut worst = 0.0_f64;
    for (t, res) in results.into_iter().enumerate() {
        let (err, d, c) = res?;
        worst = worst.max(err);
        if err >= 1e-8 {
            report.fail(json!({"factorization": t, "d": d, "c": c, "relative_error": err}));
        }
    }
    report.stat("factorizations", factorizations as u64).stat("max_relative_error", worst);
    Ok(report)
}

/// SmoothGrad robustness on post-softmax outputs never exceeds `2/σ²`.
pub fn check_sg_global_bound(trials: usize, seed: u64) -> Result<CheckReport> {
    let results = par::map(trials, |t| -> Result<(f64, f64, f64)> {
        let mut r = rng::stream(seed, t as u64);
        let act = if r.random_bool(0.5) { Activation::Relu } else { Activation::Softplus { beta: r.random_range(1.0..10.0) } };
        let net = random_network(&mut r, act);
        let x = random_point(&mut r, net.input_dim());
        let sigma = r.random_range(0.05..1.0);
        let radius = r.random_range(0.01..1.0);
        let norm = if r.random_bool(0.5) { Norm::L2 } else { Norm::LInf };
        let class = net.predict(&x)?;
        let cfg = AttributionConfig {
            qoi: QuantityOfInterest { stage: Stage::PostSoftmax, class: ClassSelector::Fixed(class) },
            sg_sigma: sigma,
            sg_samples: 64,
            seed: r.random(),
            ..Default::default()
        };
        let ball = BallSpec::new(x, radius, norm)?;
        let est = par::sequential(|| {
            estimate_attribution_robustness(
                |z| attribute_class(&net, z, Method::SmoothGrad, &cfg, class).expect("dims").scores,
                &ball,
                16,
                r.random(),
            )
        })?;
        Ok((est.lambda_hat, sg_global_bound(1.0, sigma)?, sigma))
    });
    let mut report = CheckReport::new("sg_global_bound");
    let mut worst_ratio = 0.0_f64;
    for (t, res) in results.into_iter().enumerate() {
        let (lambda, bound, sigma) = res?;
        worst_ratio = worst_ratio.max(lambda / bound);
        if lambda > bound {
            report.fail(json!({"trial": t, "lambda_hat": lambda, "bound": bound, "sigma": sigma}));
        }
    }
    report.stat("trials", trials as u64).stat("max_lambda_over_bound", worst_ratio);
    Ok(report)
}

/// `‖∇f(x) − ∇f(x′)‖₂ ≤ 1.1 · δ₂ · max|ξ|` for cross-entropy on softplus
/// nets, with `ξ` from a finite-difference Hessian; ≥ 99 % of pairs per net.
pub fn check_gradient_difference(nets: usize, pairs: usize, delta2: f64, seed: u64) -> Result<CheckReport> {
    let mut report = CheckReport::new("gradient_difference_bound");
    let mut worst_fraction = 1.0_f64;
    for t in 0..nets {
        let mut r = rng::stream(seed, t as u64);
        let net = random_softplus(&mut r);
        let x = random_point(&mut r, net.input_dim());
        let field = CrossEntropyField { net: &net, label: net.predict(&x)? };
        let fd = finite_diff_hessian(|z| field.value(z), &x, 1e-4);
        let d = x.len();
        let h = DMatrix::from_fn(d, d, |i, j| fd[i][j]);
        let eig = jacobi_eigen(&h).map_err(crate::geometry::GeometryError::from)?;
        let bound = 1.1 * gradient_difference_bound(delta2, &eig.values);
        let ball = BallSpec::new(x.clone(), delta2, Norm::L2)?;
        let g0 = field.gradient(&x);
        let ball_seed = r.random();
        let gaps = par::map(pairs, |i| diff_norm(&field.gradient(&ball.sample(ball_seed, i as u64)), &g0));
        let ok = gaps.iter().filter(|&&g| g <= bound).count();
        let fraction = ok as f64 / pairs as f64;
        worst_fraction = worst_fraction.min(fraction);
        if fraction < 0.99 {
            let worst = gaps.iter().cloned().fold(0.0, f64::max);
            report.fail(json!({"net": t, "fraction_within": fraction, "bound": bound, "max_gap": worst}));
        }
    }
    report
        .stat("nets", nets as u64)
        .stat("pairs", pairs as u64)
        .stat("delta2", delta2)
        .stat("min_fraction_within", worst_fraction);
    Ok(report)
}

/// [`verify_smoothing_convolution`] on random softplus nets; passes when every net passes.
pub fn check_smoothing_convolution(nets: usize, samples: usize, sigma: f64, seed: u64) -> Result<CheckReport> {
    let mut report = CheckReport::new("smoothing_convolution");
    let mut worst_z = 0.0_f64;
    for t in 0..nets {
        let mut r = rng::stream(seed, t as u64);
        let net = random_softplus(&mut r);
        let x = random_point(&mut r, net.input_dim());
        let sub = verify_smoothing_convolution(&net, &x, sigma, samples, r.random())?;
        let z = sub.statistics.get("max_abs_z").and_then(|v| v.as_f64()).unwrap_or(0.0);
        worst_z = worst_z.max(z);
        if !sub.pass {
            report.fail(json!({"net": t, "max_abs_z": z, "witnesses": sub.witnesses}));
        }
    }
    report.stat("nets", nets as u64).stat("samples", samples as u64).stat("max_abs_z", worst_z);
    Ok(report)
}

/// Any σ above the noise threshold gives a SmoothGrad bound below `2L/δ₂`.
pub fn check_noise_threshold(trials: usize, seed: u64) -> Result<CheckReport> {
    let mut r = rng::stream(seed, 0x5032);
    let mut report = CheckReport::new("noise_threshold");
    for t in 0..trials {
        let delta2 = r.random_range(1e-3..2.0);
        let f_sup = if t % 10 == 0 { 0.0 } else { r.random_range(0.0..10.0) };
        let lip = r.random_range(1e-2..100.0);
        let threshold = sg_noise_threshold(delta2, f_sup, lip)?;
        let sigma = threshold * r.random_range(1.001..4.0) + if f_sup == 0.0 { 1e-3 } else { 0.0 };
        let sg = sg_global_bound(f_sup, sigma)?;
        let sm = 2.0 * lip / delta2;
        if sg >= sm {
            report.fail(json!({"trial": t, "delta2": delta2, "F": f_sup, "L": lip, "sigma": sigma, "sg_bound": sg, "sm_bound": sm}));
        }
    }
    report.stat("trials", trials as u64);
    Ok(report)
}

/// Triangle-inequality consistency of the Lipschitz estimator on random nets.
pub fn check_triangle(nets: usize, samples: usize, seed: u64) -> Result<CheckReport> {
    let mut report = CheckReport::new("triangle_bound");
    let mut worst = 0.0_f64;
    for t in 0..nets {
        let mut r = rng::stream(seed, t as u64);
        let act = if t % 2 == 0 { Activation::Relu } else { Activation::Softplus { beta: 2.0 } };
        let net = random_network(&mut r, act);
        let scale = 10f64.powi(r.random_range(-3..=3));
        let x: Vec<f64> = random_point(&mut r, net.input_dim()).iter().map(|v| v * scale).collect();
        let field = NetQoi::at(&net, QuantityOfInterest::default(), &x)?;
        let norm = if t % 3 == 0 { Norm::LInf } else { Norm::L2 };
        let ball = BallSpec::new(x, 0.5 * scale, norm)?;
        let sub = triangle_bound_check(&field, &ball, samples, r.random())?;
        let l_hat = sub.statistics["l_hat"].as_f64().unwrap_or(0.0);
        let gap = sub.statistics["max_gradient_gap"].as_f64().unwrap_or(0.0);
        if l_hat > 0.0 {
            worst = worst.max(gap / (2.0 * l_hat));
        }
        if !sub.pass {
            report.fail(json!({"net": t, "witnesses": sub.witnesses}));
        }
    }
    report.stat("nets", nets as u64).stat("max_gap_over_two_l", worst);
    Ok(report)
}

/// Runs every check with `cfg`'s sample counts.
pub fn run_theory_checks(cfg: &TheoryConfig) -> Result<TheorySummary> {
    run_theory_checks_with(cfg, None)
}

/// As [`run_theory_checks`], with a hook that can corrupt the closed-form
/// Hessian inside the exactness check.
pub fn run_theory_checks_with(cfg: &TheoryConfig, tamper: Option<HessianTamper<'_>>) -> Result<TheorySummary> {
    let s = |k: u64| rng::mix(cfg.seed, k);
    let checks = vec![
        check_gradients(cfg.gradient_nets, s(1)),
        check_ig_completeness(cfg.ig_nets, cfg.ig_steps, s(2))?,
        check_closed_form_hessian(cfg.hessian_points, s(3), tamper)?,
        check_eigen_trick(cfg.eigen_factorizations, s(4))?,
        check_sg_global_bound(cfg.sg_bound_trials, s(5))?,
        check_gradient_difference(cfg.gradient_difference_nets, cfg.gradient_difference_pairs, cfg.gradient_difference_delta2, s(6))?,
        check_smoothing_convolution(cfg.convolution_nets, cfg.convolution_samples, cfg.convolution_sigma, s(7))?,
        check_noise_threshold(cfg.noise_threshold_trials, s(8))?,
        check_triangle(cfg.triangle_nets, cfg.triangle_samples, s(9))?,
    ];
    Ok(TheorySummary { pass: checks.iter().all(|c| c.pass), checks })
}
