//! Input-Hessian geometry of the cross-entropy loss and sampled Lipschitz /
//! attribution-robustness estimators.
//!
//! For a locally linear (ReLU) network with logit Jacobian `W` (`d × c`) and
//! softmax output `p`, the input Hessian of the cross-entropy is
//! `W A Wᵀ` with `A = diag(p) − p pᵀ`. Writing `B = W √A`, the nonzero
//! spectrum of the `d × d` Hessian equals that of the `c × c` matrix `BᵀB`,
//! so the top eigenpair never needs the full Hessian.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::attribution::{attribute_class, AttributionConfig, AttributionError, Method};
use crate::autodiff::{finite_diff_gradient, Graph};
use crate::linalg::{jacobi_eigen, psd_sqrt, LinalgError};
use crate::nn::{Activation, Network, NnError, QuantityOfInterest, Stage};
use crate::{par, rng};

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("check requires a softplus network")]
    RequiresSoftplus,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Network(#[from] NnError),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Pieces of the closed-form input Hessian `H̃ = W A Wᵀ = B Bᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianFactorization {
    /// `d × c` logit Jacobian.
    pub w: DMatrix<f64>,
    pub p: Vec<f64>,
    /// `diag(p) − p pᵀ`.
    pub a: DMatrix<f64>,
    pub sqrt_a: DMatrix<f64>,
    /// `W √A`.
    pub b: DMatrix<f64>,
    /// Eigenvalues of `BᵀB`, descending.
    pub eigvals: Vec<f64>,
    /// Unit top eigenvector of `H̃` in input space.
    pub top_eigvec: Vec<f64>,
    /// Top eigenvector of the `c × c` system.
    pub small_top_eigvec: Vec<f64>,
}

impl HessianFactorization {
    /// Builds the factorization from a logit Jacobian and probabilities.
    pub fn from_parts(w: DMatrix<f64>, p: Vec<f64>) -> Result<Self> {
        let c = p.len();
        if w.ncols() != c {
            return Err(GeometryError::InvalidArgument(format!(
                "Jacobian has {} columns but {c} probabilities",
                w.ncols()
            )));
        }
        let pv = DVector::from_vec(p.clone());
        let a = DMatrix::from_diagonal(&pv) - &pv * pv.transpose();
        let sqrt_a = psd_sqrt(&a)?;
        let b = &w * &sqrt_a;
        let eig = jacobi_eigen(&(b.transpose() * &b))?;
        let v = eig.vectors.column(0).into_owned();
        let bv = &b * &v;
        let norm = bv.norm();
        let top_eigvec = if norm > 0.0 {
            (bv / norm).iter().copied().collect()
        } else {
            let mut e = vec![0.0; w.nrows()];
            e[0] = 1.0;
            e
        };
        Ok(Self {
            w,
            p,
            a,
            sqrt_a,
            b,
            eigvals: eig.values,
            top_eigvec,
            small_top_eigvec: v.iter().copied().collect(),
        })
    }

    pub fn top_eigenvalue(&self) -> f64 {
        self.eigvals[0]
    }

    /// Dense `W A Wᵀ`.
    pub fn explicit_hessian(&self) -> DMatrix<f64> {
        &self.w * &self.a * self.w.transpose()
    }
}

/// Closed-form input Hessian of the cross-entropy at `x`.
pub fn closed_form_hessian(net: &Network, x: &[f64]) -> Result<HessianFactorization> {
    let w = net.input_jacobian(x)?;
    let p = net.probabilities(x)?;
    HessianFactorization::from_parts(w, p)
}

/// Eigenvalues of `BᵀB`, descending. Works on the `c × c` system only.
pub fn hessian_eigenvalues(fac: &HessianFactorization) -> Result<Vec<f64>> {
    Ok(jacobi_eigen(&(fac.b.transpose() * &fac.b))?.values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    L2,
    LInf,
}

impl Norm {
    pub fn of(self, v: &[f64]) -> f64 {
        match self {
            Norm::L2 => v.iter().map(|a| a * a).sum::<f64>().sqrt(),
            Norm::LInf => v.iter().fold(0.0, |m, a| m.max(a.abs())),
        }
    }

    pub fn dual(self) -> DualNorm {
        match self {
            Norm::L2 => DualNorm::L2,
            Norm::LInf => DualNorm::L1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DualNorm {
    L2,
    L1,
}

impl DualNorm {
    pub fn of(self, v: &[f64]) -> f64 {
        match self {
            DualNorm::L2 => l2(v),
            DualNorm::L1 => v.iter().map(|a| a.abs()).sum(),
        }
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn l2_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Closed norm ball `B(center, radius)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BallSpec {
    pub center: Vec<f64>,
    pub radius: f64,
    pub norm: Norm,
}

impl BallSpec {
    pub fn new(center: Vec<f64>, radius: f64, norm: Norm) -> Result<Self> {
        if !(radius >= 0.0) {
            return Err(GeometryError::InvalidArgument(format!("radius must be >= 0, got {radius}")));
        }
        Ok(Self { center, radius, norm })
    }

    /// Uniform sample from the ball, drawn from stream `index` of `seed`.
    ///
    /// ℓ₂: uniform direction scaled by `radius · U^(1/d)`; ℓ∞: per-coordinate uniform.
    pub fn sample(&self, seed: u64, index: u64) -> Vec<f64> {
        let mut r = rng::stream(seed, index);
        let d = self.center.len();
        match self.norm {
            Norm::L2 => {
                let dir: Vec<f64> = (0..d).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
                let len = l2(&dir);
                let u: f64 = r.random();
                let mag = self.radius * u.powf(1.0 / d as f64);
                self.center
                    .iter()
                    .zip(&dir)
                    .map(|(c, v)| if len > 0.0 { c + mag * v / len } else { *c })
                    .collect()
            }
            Norm::LInf => self
                .center
                .iter()
                .map(|c| c + self.radius * r.random_range(-1.0..=1.0))
                .collect(),
        }
    }

    /// Sample `i` of an estimator's sequence; sample 0 is the center itself.
    fn point(&self, seed: u64, i: usize) -> Vec<f64> {
        if i == 0 {
            self.center.clone()
        } else {
            self.sample(seed, i as u64)
        }
    }
}

/// A differentiable scalar function of the input.
pub trait ScalarField: Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
}

/// One network output (pre- or post-softmax score of a fixed class).
#[derive(Debug, Clone)]
pub struct NetQoi<'a> {
    pub net: &'a Network,
    pub stage: Stage,
    pub class: usize,
}

impl<'a> NetQoi<'a> {
    /// Pins the class selected by `qoi` at `x`.
    pub fn at(net: &'a Network, qoi: QuantityOfInterest, x: &[f64]) -> Result<Self> {
        Ok(Self { net, stage: qoi.stage, class: qoi.resolve(net, x)? })
    }
}

impl ScalarField for NetQoi<'_> {
    fn dim(&self) -> usize {
        self.net.input_dim()
    }

    fn value(&self, x: &[f64]) -> f64 {
        match self.stage {
            Stage::PreSoftmax => self.net.logits(x).expect("input dim checked")[self.class],
            Stage::PostSoftmax => self.net.probabilities(x).expect("input dim checked")[self.class],
        }
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = Graph::new();
        let bound = self.net.bind(&mut g, false);
        let xv = g.variable(x);
        let q = bound.quantity(&mut g, xv, self.stage, self.class).expect("input dim checked");
        let gx = g.backward(q, &[xv], false).expect("scalar root")[0];
        g.value(gx).to_vec()
    }
}

/// Cross-entropy of the network at a fixed label, as a field of the input.
#[derive(Debug, Clone)]
pub struct CrossEntropyField<'a> {
    pub net: &'a Network,
    pub label: usize,
}

impl ScalarField for CrossEntropyField<'_> {
    fn dim(&self) -> usize {
        self.net.input_dim()
    }

    fn value(&self, x: &[f64]) -> f64 {
        -self.net.probabilities(x).expect("input dim checked")[self.label].ln()
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let (mut g, xv, logits) = self.net.forward_logits(x).expect("input dim checked");
        let ce = g.cross_entropy(logits, self.label).expect("label in range");
        let gx = g.backward(ce, &[xv], false).expect("scalar root")[0];
        g.value(gx).to_vec()
    }
}

/// A field given by closures.
pub struct FnField<V, G> {
    pub dim: usize,
    pub value: V,
    pub gradient: G,
}

impl<V, G> ScalarField for FnField<V, G>
where
    V: Fn(&[f64]) -> f64 + Sync,
    G: Fn(&[f64]) -> Vec<f64> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        (self.gradient)(x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LipschitzEstimate {
    pub l_hat: f64,
    pub samples: usize,
    /// Sample attaining the maximum gradient norm.
    pub witness: Vec<f64>,
    pub norm: Norm,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RobustnessEstimate {
    pub lambda_hat: f64,
    pub samples: usize,
    /// `(x, x')` attaining the maximum ratio, when any admissible `x'` was drawn.
    pub witness: Option<(Vec<f64>, Vec<f64>)>,
    pub norm: Norm,
}

/// Max of `(value, index)` pairs; ties keep the smallest index.
fn argmax_pairs(values: &[f64]) -> (usize, f64) {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
}

/// Largest dual-norm gradient over `n_samples` points of the ball (the
/// center counts as the first sample).
pub fn estimate_local_lipschitz(
    field: &dyn ScalarField,
    ball: &BallSpec,
    n_samples: usize,
    seed: u64,
) -> Result<LipschitzEstimate> {
    if n_samples == 0 {
        return Err(GeometryError::InvalidArgument("n_samples must be >= 1".into()));
    }
    let dual = ball.norm.dual();
    let norms = par::map(n_samples, |i| dual.of(&field.gradient(&ball.point(seed, i))));
    let (best, l_hat) = argmax_pairs(&norms);
    Ok(LipschitzEstimate { l_hat, samples: n_samples, witness: ball.point(seed, best), norm: ball.norm })
}

/// Largest `‖g(x) − g(x')‖₂ / ‖x − x'‖₂` over `n_samples` points `x'` of the
/// ball other than its center. A zero-radius ball yields 0.
pub fn estimate_attribution_robustness<F>(
    attr: F,
    ball: &BallSpec,
    n_samples: usize,
    seed: u64,
) -> Result<RobustnessEstimate>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    if n_samples == 0 {
        return Err(GeometryError::InvalidArgument("n_samples must be >= 1".into()));
    }
    let empty = RobustnessEstimate { lambda_hat: 0.0, samples: n_samples, witness: None, norm: ball.norm };
    if ball.radius == 0.0 {
        return Ok(empty);
    }
    let g0 = attr(&ball.center);
    let ratios = par::map(n_samples, |i| {
        let xp = ball.sample(seed, i as u64 + 1);
        let dist = l2_dist(&xp, &ball.center);
        if dist == 0.0 {
            return f64::NEG_INFINITY;
        }
        l2_dist(&attr(&xp), &g0) / dist
    });
    let (best, lambda) = argmax_pairs(&ratios);
    if lambda == f64::NEG_INFINITY {
        return Ok(empty);
    }
    Ok(RobustnessEstimate {
        lambda_hat: lambda,
        samples: n_samples,
        witness: Some((ball.center.clone(), ball.sample(seed, best as u64 + 1))),
        norm: ball.norm,
    })
}

/// Global robustness bound `2F/σ²` of SmoothGrad on a function bounded by `F`.
pub fn sg_global_bound(f_sup: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(GeometryError::InvalidArgument(format!("sigma must be > 0, got {sigma}")));
    }
    if !(f_sup >= 0.0) {
        return Err(GeometryError::InvalidArgument(format!("F must be >= 0, got {f_sup}")));
    }
    Ok(2.0 * f_sup / (sigma * sigma))
}

/// `√(δ₂ F / L)`: any larger σ makes `2F/σ²` smaller than `2L/δ₂`.
pub fn sg_noise_threshold(delta2: f64, f_sup: f64, lipschitz: f64) -> Result<f64> {
    if !(lipschitz > 0.0) {
        return Err(GeometryError::InvalidArgument(format!("L must be > 0, got {lipschitz}")));
    }
    if !(delta2 >= 0.0 && f_sup >= 0.0) {
        return Err(GeometryError::InvalidArgument("delta2 and F must be >= 0".into()));
    }
    Ok((delta2 * f_sup / lipschitz).sqrt())
}

/// `δ₂ · maxᵢ |ξᵢ|`.
pub fn gradient_difference_bound(delta2: f64, eigvals: &[f64]) -> f64 {
    delta2 * eigvals.iter().fold(0.0, |m: f64, v| m.max(v.abs()))
}

/// Outcome of an empirical check, serialized as `{check, pass, witnesses, statistics}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub check: String,
    pub pass: bool,
    pub witnesses: Vec<Value>,
    pub statistics: serde_json::Map<String, Value>,
}

impl CheckReport {
    pub fn new(check: &str) -> Self {
        Self { check: check.to_string(), pass: true, witnesses: Vec::new(), statistics: serde_json::Map::new() }
    }

    pub fn stat(&mut self, key: &str, value: impl Into<Value>) -> &mut Self {
        self.statistics.insert(key.to_string(), value.into());
        self
    }

    pub fn fail(&mut self, witness: Value) {
        self.pass = false;
        if self.witnesses.len() < 16 {
            self.witnesses.push(witness);
        }
    }
}

fn mean_and_var(rows: &[Vec<f64>], j: usize) -> (f64, f64) {
    let n = rows.len() as f64;
    let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
    let var = if rows.len() > 1 {
        rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var)
}

/// SmoothGrad against the finite-difference gradient of a Monte-Carlo
/// estimate of the Gaussian-smoothed function (independent noise, shared
/// across the stencil). Passes when every coordinate's z-score is below 4.
pub fn verify_smoothing_convolution(net: &Network, x: &[f64], sigma: f64, n_samples: usize, seed: u64) -> Result<CheckReport> {
    if net.layers().len() > 1 && net.activation() == Activation::Relu {
        return Err(GeometryError::RequiresSoftplus);
    }
    if n_samples == 0 || !(sigma >= 0.0) {
        return Err(GeometryError::InvalidArgument("need n_samples >= 1 and sigma >= 0".into()));
    }
    let qoi = QuantityOfInterest::default();
    let field = NetQoi::at(net, qoi, x)?;
    let d = x.len();
    let h = 1e-4;
    let mut report = CheckReport::new("smoothing_convolution");
    report.stat("sigma", sigma).stat("samples", n_samples as u64).stat("d", d as u64);

    if sigma == 0.0 {
        let sm = field.gradient(x);
        let fd = finite_diff_gradient(|v| field.value(v), x, h);
        let err = sm.iter().zip(&fd).map(|(a, b)| (a - b).abs() / a.abs().max(1.0)).fold(0.0, f64::max);
        report.stat("max_rel_error", err);
        if err >= 1e-4 {
            report.fail(json!({"saliency": sm, "finite_difference": fd}));
        }
        return Ok(report);
    }

    let cfg = AttributionConfig { qoi, sg_sigma: sigma, sg_samples: n_samples, seed, ..AttributionConfig::default() };
    let sg = attribute_class(net, x, Method::SmoothGrad, &cfg, field.class)?.scores;
    let offsets = cfg.gaussian_offsets(d);
    let sg_rows = par::map(n_samples, |i| {
        let p: Vec<f64> = x.iter().zip(&offsets[i]).map(|(a, b)| a + b).collect();
        field.gradient(&p)
    });

    let conv_cfg = AttributionConfig { seed: rng::mix(seed, 0xC0), ..cfg };
    let conv_offsets = conv_cfg.gaussian_offsets(d);
    let conv_rows = par::map(n_samples, |i| {
        let base: Vec<f64> = x.iter().zip(&conv_offsets[i]).map(|(a, b)| a + b).collect();
        finite_diff_gradient(|v| field.value(v), &base, h)
    });

    let mut max_z: f64 = 0.0;
    let n = n_samples as f64;
    let mut zs = Vec::with_capacity(d);
    for j in 0..d {
        let (ms, vs) = mean_and_var(&sg_rows, j);
        let (mc, vc) = mean_and_var(&conv_rows, j);
        // floor covers finite-difference rounding when both estimators are exact
        let floor = 1e-8 * ms.abs().max(1.0);
        let se = (vs / n + vc / n + floor * floor).sqrt();
        let z = (sg[j] - mc) / se;
        max_z = max_z.max(z.abs());
        zs.push(z);
    }
    report.stat("max_abs_z", max_z);
    if !(max_z < 4.0) {
        report.fail(json!({"x": x, "z_scores": zs}));
    }
    Ok(report)
}

/// Checks `‖∇f(x) − ∇f(x')‖₂ ≤ 2 L̂` over sampled `x'`, where `L̂` is the
/// largest sampled gradient norm. Also reports the witness distance, which
/// is the constant hidden in the `O(L)` robustness bound.
pub fn triangle_bound_check(field: &dyn ScalarField, ball: &BallSpec, n_samples: usize, seed: u64) -> Result<CheckReport> {
    if n_samples == 0 {
        return Err(GeometryError::InvalidArgument("n_samples must be >= 1".into()));
    }
    let grads = par::map(n_samples, |i| field.gradient(&ball.point(seed, i)));
    let l_hat = grads.iter().map(|g| l2(g)).fold(0.0, f64::max);
    let g0 = &grads[0];
    let mut report = CheckReport::new("triangle_bound");
    let mut max_diff: f64 = 0.0;
    let mut best_ratio = 0.0;
    let mut witness_dist = 0.0;
    for (i, g) in grads.iter().enumerate().skip(1) {
        let diff = l2_dist(g, g0);
        max_diff = max_diff.max(diff);
        let xp = ball.point(seed, i);
        let dist = l2_dist(&xp, &ball.center);
        if dist > 0.0 && diff / dist > best_ratio {
            best_ratio = diff / dist;
            witness_dist = dist;
        }
        if diff > 2.0 * l_hat * (1.0 + 1e-12) {
            report.fail(json!({"x_prime": xp, "gradient_gap": diff, "two_l_hat": 2.0 * l_hat}));
        }
    }
    report
        .stat("l_hat", l_hat)
        .stat("max_gradient_gap", max_diff)
        .stat("lambda_hat", best_ratio)
        .stat("witness_distance", witness_dist)
        .stat("samples", n_samples as u64);
    Ok(report)
}
