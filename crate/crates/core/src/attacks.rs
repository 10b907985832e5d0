//! Attribution attacks: signed-gradient PGD inside an ℓ∞ ball that keeps the
//! model's prediction fixed while pushing its attribution away from the
//! original (top-k, mass-center) or toward a target (manipulate).
//!
//! The attack objective is differentiated through a softplus surrogate of
//! the network, because the input Hessian of a ReLU network is zero almost
//! everywhere. The prediction constraint is always checked on the network
//! itself.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{attribute_class, attribution_node, normalize_map, AttributionConfig, AttributionError, Method};
use crate::autodiff::{AutodiffError, Graph, Var};
use crate::metrics::{mass_center, top_k_indices, GridGeometry, MetricError};
use crate::nn::{Network, NnError};
use crate::rng;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Network(#[from] NnError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, AttackError>;

/// Smoothing constant of `|v| ≈ √(v² + ε)` inside attack losses.
pub const SMOOTH_ABS_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    #[serde(rename = "topk")]
    TopK,
    MassCenter,
    Manipulate,
}

impl AttackKind {
    pub const ALL: [AttackKind; 3] = [AttackKind::TopK, AttackKind::MassCenter, AttackKind::Manipulate];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::TopK => "topk",
            AttackKind::MassCenter => "mass_center",
            AttackKind::Manipulate => "manipulate",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// ℓ∞ budget, in the same units as the input.
    pub epsilon: f64,
    pub steps: usize,
    /// Defaults to `2ε / steps`.
    pub step_size: Option<f64>,
    pub surrogate_beta: f64,
    pub k: usize,
    pub beta0: f64,
    pub beta1: f64,
    /// Manipulate target; it and the attacked map are compared as normalized
    /// magnitudes (unit ℓ1 mass).
    pub target_map: Option<Vec<f64>>,
    pub data_range: (f64, f64),
    pub seed: u64,
    pub method: Method,
    pub attribution: AttributionConfig,
    pub geometry: GridGeometry,
}

impl AttackConfig {
    pub fn new(kind: AttackKind, epsilon: f64, method: Method, geometry: GridGeometry) -> Self {
        Self {
            kind,
            epsilon,
            steps: 50,
            step_size: None,
            surrogate_beta: 50.0,
            k: 4,
            beta0: 1e11,
            beta1: 1e6,
            target_map: None,
            data_range: (0.0, 1.0),
            seed: 0,
            method,
            attribution: AttributionConfig::default(),
            geometry,
        }
    }

    pub fn effective_step_size(&self) -> f64 {
        self.step_size.unwrap_or(if self.steps == 0 { 0.0 } else { 2.0 * self.epsilon / self.steps as f64 })
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let bad = |m: String| Err(AttackError::InvalidConfig(m));
        if !(self.epsilon >= 0.0) {
            return bad(format!("epsilon must be >= 0, got {}", self.epsilon));
        }
        if !(self.surrogate_beta > 0.0) {
            return bad("surrogate_beta must be > 0".into());
        }
        if self.data_range.0 > self.data_range.1 {
            return bad("data_range is empty".into());
        }
        if self.geometry.len() != d {
            return bad(format!("geometry covers {} features, input has {d}", self.geometry.len()));
        }
        if self.kind == AttackKind::TopK && (self.k == 0 || self.k > d) {
            return bad(format!("k must be in 1..={d}, got {}", self.k));
        }
        match (&self.target_map, self.kind) {
            (Some(t), AttackKind::Manipulate) if t.len() == d => Ok(()),
            (Some(_), AttackKind::Manipulate) => bad("target_map length differs from input".into()),
            (None, AttackKind::Manipulate) => bad("manipulate attack needs a target_map".into()),
            (Some(_), _) => bad("target_map is only used by the manipulate attack".into()),
            (None, _) => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub x_adv: Vec<f64>,
    /// The returned point keeps the clean prediction.
    pub feasible: bool,
    /// Attack loss on the attacked network at iterates `0..=steps`.
    pub loss_trace: Vec<f64>,
    pub best_step: usize,
    pub linf: f64,
    pub l2: f64,
}

/// Projection onto `[x − ε, x + ε] ∩ [lo, hi]`, per coordinate.
pub fn project(candidate: f64, x: f64, epsilon: f64, range: (f64, f64)) -> f64 {
    candidate.clamp(x - epsilon, x + epsilon).clamp(range.0, range.1)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn smooth_weights(g: &mut Graph, z: Var) -> Result<Var> {
    let a = g.smooth_abs(z, SMOOTH_ABS_EPS);
    let total = g.sum(a);
    let tb = g.broadcast(total, g.shape(a).to_vec().as_slice())?;
    Ok(g.div(a, tb)?)
}

/// Normalized attribution mass on `top_k`; minimizing it evacuates the set.
pub fn topk_loss(g: &mut Graph, z: Var, top_k: &[usize]) -> Result<Var> {
    let w = smooth_weights(g, z)?;
    let mut mask = vec![0.0; g.value(z).len()];
    for &i in top_k {
        mask[i] = 1.0;
    }
    let m = g.constant(&mask);
    Ok(g.dot(w, m)?)
}

/// Negative distance between the attribution's mass center and `center0`.
pub fn mass_center_loss(g: &mut Graph, z: Var, geom: GridGeometry, center0: &[f64]) -> Result<Var> {
    let w = smooth_weights(g, z)?;
    let (axes, coords) = geom.coordinate_matrix();
    let cm = g.matrix(coords, axes, geom.len(), false)?;
    let center = g.matvec(cm, w)?;
    let c0 = g.constant(center0);
    let diff = g.sub(center, c0)?;
    let sq = g.dot(diff, diff)?;
    let sq = g.affine(sq, 1.0, 1e-24);
    let dist = g.sqrt(sq);
    Ok(g.neg(dist))
}

/// `β₀‖z − target‖² + β₁‖h − h_orig‖²`.
pub fn manipulate_loss(
    g: &mut Graph,
    z: Var,
    target: &[f64],
    h_adv: Var,
    h_orig: &[f64],
    beta0: f64,
    beta1: f64,
) -> Result<Var> {
    let t = g.constant(target);
    let dz = g.sub(z, t)?;
    let lz = g.dot(dz, dz)?;
    let ho = g.constant(h_orig);
    let dh = g.sub(h_adv, ho)?;
    let lh = g.dot(dh, dh)?;
    let lz = g.scale(lz, beta0);
    let lh = g.scale(lh, beta1);
    Ok(g.add(lz, lh)?)
}

#[derive(Clone)]
enum Objective {
    TopK(Vec<usize>),
    MassCenter(Vec<f64>),
    Manipulate { target: Vec<f64>, h_orig: Vec<f64> },
}

/// Loss at `x_t` and, when asked, its input gradient.
fn evaluate(
    surrogate: &Network,
    x_t: &[f64],
    cfg: &AttackConfig,
    class: usize,
    objective: &Objective,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let mut g = Graph::new();
    let bound = surrogate.bind(&mut g, false);
    let xv = g.variable(x_t);
    let z = attribution_node(&mut g, &bound, xv, cfg.method, &cfg.attribution, class, want_grad)?;
    let loss = match objective {
        Objective::TopK(set) => topk_loss(&mut g, z, set)?,
        Objective::MassCenter(c0) => mass_center_loss(&mut g, z, cfg.geometry, c0)?,
        Objective::Manipulate { target, h_orig } => {
            let logits = bound.logits(&mut g, xv)?;
            let h = g.softmax(logits);
            let w = smooth_weights(&mut g, z)?;
            manipulate_loss(&mut g, w, target, h, h_orig, cfg.beta0, cfg.beta1)?
        }
    };
    let value = g.item(loss);
    if !want_grad {
        return Ok((value, None));
    }
    let grad = g.backward(loss, &[xv], false)?[0];
    Ok((value, Some(g.value(grad).to_vec())))
}

/// Runs the attack from `x` and returns the lowest-loss iterate that keeps
/// the network's prediction (the clean input counts as iterate 0). Steps
/// follow the surrogate's gradient; iterates are scored on `net` itself.
pub fn pgd_attack(net: &Network, x: &[f64], cfg: &AttackConfig) -> Result<AttackResult> {
    let d = x.len();
    if d != net.input_dim() {
        return Err(NnError::InputDim { expected: net.input_dim(), got: d }.into());
    }
    cfg.validate(d)?;
    let surrogate = net.with_softplus(cfg.surrogate_beta)?;
    let label = net.predict(x)?;
    let class = cfg.attribution.qoi.resolve(net, x)?;
    let objective = match cfg.kind {
        AttackKind::TopK => {
            let z0 = attribute_class(net, x, cfg.method, &cfg.attribution, class)?.scores;
            Objective::TopK(top_k_indices(&z0, cfg.k)?)
        }
        AttackKind::MassCenter => {
            let z0 = attribute_class(net, x, cfg.method, &cfg.attribution, class)?.scores;
            Objective::MassCenter(mass_center(&z0, cfg.geometry)?)
        }
        AttackKind::Manipulate => Objective::Manipulate {
            target: normalize_map(cfg.target_map.as_deref().expect("validated"))?,
            h_orig: surrogate.probabilities(x)?,
        },
    };
    let measured = match &objective {
        Objective::Manipulate { target, .. } => {
            Objective::Manipulate { target: target.clone(), h_orig: net.probabilities(x)? }
        }
        _ => objective.clone(),
    };

    let alpha = cfg.effective_step_size();
    let mut x_t = x.to_vec();
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    let mut best: Option<(usize, f64, Vec<f64>)> = None;
    for t in 0..=cfg.steps {
        let (loss, _) = evaluate(net, &x_t, cfg, class, &measured, false)?;
        trace.push(loss);
        if net.predict(&x_t)? == label && best.as_ref().is_none_or(|b| loss < b.1) {
            best = Some((t, loss, x_t.clone()));
        }
        if t < cfg.steps {
            let (_, grad) = evaluate(&surrogate, &x_t, cfg, class, &objective, true)?;
            let grad = grad.expect("gradient requested");
            for ((xi, gi), x0) in x_t.iter_mut().zip(&grad).zip(x) {
                *xi = project(*xi - alpha * sign(*gi), *x0, cfg.epsilon, cfg.data_range);
            }
        }
    }

    let (feasible, best_step, x_adv) = match best {
        Some((t, _, xb)) => (true, t, xb),
        None => (false, 0, x.to_vec()),
    };
    let delta: Vec<f64> = x_adv.iter().zip(x).map(|(a, b)| a - b).collect();
    Ok(AttackResult {
        linf: delta.iter().fold(0.0, |m, v| m.max(v.abs())),
        l2: delta.iter().map(|v| v * v).sum::<f64>().sqrt(),
        x_adv,
        feasible,
        loss_trace: trace,
        best_step,
    })
}

/// Per-coordinate uniform noise in `[−ε, ε]`, clamped to the data range.
pub fn random_perturbation(x: &[f64], epsilon: f64, data_range: (f64, f64), seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, 0x52414e44);
    x.iter()
        .map(|&v| {
            let u: f64 = if epsilon > 0.0 { r.random_range(-epsilon..=epsilon) } else { 0.0 };
            (v + u).clamp(data_range.0, data_range.1)
        })
        .collect()
}
