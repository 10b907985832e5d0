//! Mini-batch training: plain cross-entropy, Smooth Surface Regularization
//! (cross-entropy plus `β·s·max ξ`, the top eigenvalue of the closed-form
//! input Hessian) and an ℓ₂ PGD adversarial-training baseline.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Var};
use crate::geometry::{closed_form_hessian, GeometryError, HessianFactorization};
use crate::harness::data::Dataset;
use crate::nn::{logit_gradients, Activation, BoundNetwork, Network, NnError, TrainMode, TrainingMeta};
use crate::{par, rng};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Diverged { epoch: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty or has labels outside 0..{classes}")]
    BadDataset { classes: usize },
    #[error(transparent)]
    Network(#[from] NnError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Optimizer {
    Sgd,
    Momentum { mu: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsrConfig {
    pub beta: f64,
    /// Scale matching the penalty to the loss: 1e6 for data in [0, 255], 1 for [0, 1].
    pub s: f64,
}

impl Default for SsrConfig {
    fn default() -> Self {
        Self { beta: 0.3, s: 1.0 }
    }
}

impl SsrConfig {
    /// Default scale for a data range: `1e6` for 8-bit pixel values, `1` for unit range.
    pub fn for_range(lo: f64, hi: f64) -> Self {
        let s = if hi - lo > 1.0 + 1e-9 { 1e6 } else { 1.0 };
        Self { beta: 0.3, s }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PgdAtConfig {
    pub delta2: f64,
    pub steps: usize,
    pub surrogate_beta: f64,
}

impl Default for PgdAtConfig {
    fn default() -> Self {
        Self { delta2: 0.25, steps: 30, surrogate_beta: 50.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    /// Hidden-layer widths of the freshly initialized network.
    pub hidden: Vec<usize>,
    pub ssr: SsrConfig,
    pub pgd_at: PgdAtConfig,
    /// Training examples used for the per-epoch mean top eigenvalue.
    pub eigen_probe: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Natural,
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.05,
            optimizer: Optimizer::Momentum { mu: 0.9 },
            seed: 0,
            hidden: vec![32],
            ssr: SsrConfig::default(),
            pgd_at: PgdAtConfig::default(),
            eigen_probe: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if !(self.ssr.beta >= 0.0) || !(self.ssr.s > 0.0) {
            return bad("ssr needs beta >= 0 and s > 0");
        }
        if !(self.pgd_at.delta2 >= 0.0) || !(self.pgd_at.surrogate_beta > 0.0) {
            return bad("pgd_at needs delta2 >= 0 and surrogate_beta > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub mean_top_eigenvalue: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub rows: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,accuracy,mean_top_eigenvalue,wall_time_s\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.loss, r.accuracy, r.mean_top_eigenvalue, r.wall_time_s
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Option<TrainHistory> {
        let mut rows = Vec::new();
        for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return None;
            }
            rows.push(EpochRecord {
                epoch: f[0].parse().ok()?,
                loss: f[1].parse().ok()?,
                accuracy: f[2].parse().ok()?,
                mean_top_eigenvalue: f[3].parse().ok()?,
                wall_time_s: f[4].parse().ok()?,
            });
        }
        Some(TrainHistory { rows })
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.rows.last()
    }

    pub fn mean_epoch_time(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.wall_time_s).sum::<f64>() / self.rows.len() as f64
    }
}

/// `uᵀ(W A Wᵀ)u` for one example, with `u` held constant.
///
/// `q = Wᵀu` is formed from differentiable logit gradients and `p` from the
/// differentiable softmax, so the node carries parameter gradients; by
/// eigenvalue perturbation these equal the gradient of the top eigenvalue.
pub fn top_eigenvalue_node(g: &mut Graph, x: Var, logits: Var, u: &[f64]) -> Result<Var> {
    let cols = logit_gradients(g, x, logits, true)?;
    let uv = g.constant(u);
    let q: Vec<Var> = cols.iter().map(|&c| g.dot(uv, c)).collect::<std::result::Result<_, _>>()?;
    let q = g.stack(&q)?;
    let p = g.softmax(logits);
    let q2 = g.mul(q, q)?;
    let first = g.dot(p, q2)?;
    let pq = g.dot(p, q)?;
    let second = g.mul(pq, pq)?;
    Ok(g.sub(first, second)?)
}

/// SSR penalty `β·s·ξ_max(x)` for one example as a graph node, plus the
/// numeric factorization it was built from.
pub fn ssr_penalty_node(
    g: &mut Graph,
    net: &Network,
    bound: &BoundNetwork,
    x: &[f64],
    s: f64,
    beta: f64,
) -> Result<(Var, Var, HessianFactorization)> {
    let fac = closed_form_hessian(net, x)?;
    let xv = g.variable(x);
    let logits = bound.logits(g, xv)?;
    let top = top_eigenvalue_node(g, xv, logits, &fac.top_eigvec)?;
    Ok((g.scale(top, beta * s), logits, fac))
}

/// Mean SSR penalty over `batch` and its gradient with respect to every
/// parameter (weight then bias, layer by layer, each flattened).
pub fn ssr_penalty(net: &Network, batch: &[Vec<f64>], s: f64, beta: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    let per = par::map(batch.len(), |i| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let bound = net.bind(&mut g, true);
        let (pen, _, _) = ssr_penalty_node(&mut g, net, &bound, &batch[i], s, beta)?;
        let grads = g.backward(pen, &bound.params(), false)?;
        Ok((g.item(pen), grads.iter().map(|v| g.value(*v).to_vec()).collect()))
    });
    let mut total = 0.0;
    let mut acc: Option<Vec<Vec<f64>>> = None;
    for r in per {
        let (v, gr) = r?;
        total += v;
        accumulate(&mut acc, gr);
    }
    let n = batch.len() as f64;
    let mut grads = acc.unwrap_or_default();
    grads.iter_mut().flatten().for_each(|v| *v /= n);
    Ok((total / n, grads))
}

fn accumulate(acc: &mut Option<Vec<Vec<f64>>>, grads: Vec<Vec<f64>>) {
    match acc {
        None => *acc = Some(grads),
        Some(a) => {
            for (dst, src) in a.iter_mut().zip(grads) {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
    }
}

fn cross_entropy(net: &Network, x: &[f64], label: usize) -> f64 {
    -net.probabilities(x).expect("dims checked")[label].max(f64::MIN_POSITIVE).ln()
}

/// ℓ₂ PGD on the cross-entropy. Gradients come from the softplus surrogate;
/// the returned point is the iterate with the highest loss on `net` itself.
pub fn l2_pgd(net: &Network, x: &[f64], label: usize, cfg: &PgdAtConfig, range: (f64, f64)) -> Result<Vec<f64>> {
    if cfg.delta2 == 0.0 || cfg.steps == 0 {
        return Ok(x.to_vec());
    }
    let surrogate = net.with_softplus(cfg.surrogate_beta)?;
    let alpha = 2.5 * cfg.delta2 / cfg.steps as f64;
    let mut x_t = x.to_vec();
    let mut best = (cross_entropy(net, x, label), x.to_vec());
    for _ in 0..cfg.steps {
        let (mut g, xv, logits) = surrogate.forward_logits(&x_t)?;
        let ce = g.cross_entropy(logits, label)?;
        let grad = g.backward(ce, &[xv], false)?[0];
        let grad = g.value(grad);
        let norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        for (xi, gi) in x_t.iter_mut().zip(grad) {
            *xi += alpha * gi / norm;
        }
        let delta: Vec<f64> = x_t.iter().zip(x).map(|(a, b)| a - b).collect();
        let dn = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
        let shrink = if dn > cfg.delta2 { cfg.delta2 / dn } else { 1.0 };
        for ((xi, di), x0) in x_t.iter_mut().zip(&delta).zip(x) {
            *xi = (x0 + di * shrink).clamp(range.0, range.1);
        }
        let loss = cross_entropy(net, &x_t, label);
        if loss > best.0 {
            best = (loss, x_t.clone());
        }
    }
    Ok(best.1)
}

/// Fraction of examples still classified correctly after [`l2_pgd`].
pub fn robust_accuracy(net: &Network, data: &Dataset, cfg: &PgdAtConfig) -> Result<f64> {
    let hits = par::map(data.len(), |i| -> Result<bool> {
        let xa = l2_pgd(net, &data.features[i], data.labels[i], cfg, data.data_range)?;
        Ok(net.predict(&xa)? == data.labels[i])
    });
    let mut correct = 0usize;
    for h in hits {
        correct += h? as usize;
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

pub fn accuracy(net: &Network, data: &Dataset) -> f64 {
    let hits = par::map(data.len(), |i| net.predict(&data.features[i]).map(|p| p == data.labels[i]).unwrap_or(false));
    hits.iter().filter(|h| **h).count() as f64 / data.len().max(1) as f64
}

/// Mean top input-Hessian eigenvalue over the first `limit` examples.
pub fn mean_top_eigenvalue(net: &Network, data: &Dataset, limit: usize) -> Result<f64> {
    let n = data.len().min(limit);
    if n == 0 {
        return Ok(0.0);
    }
    let vals = par::map(n, |i| closed_form_hessian(net, &data.features[i]).map(|f| f.top_eigenvalue()));
    let mut total = 0.0;
    for v in vals {
        total += v?;
    }
    Ok(total / n as f64)
}

/// Loss and parameter gradients of one example under `mode`.
fn example_gradient(
    net: &Network,
    x: &[f64],
    label: usize,
    cfg: &TrainConfig,
    range: (f64, f64),
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let bound = net.bind(&mut g, true);
    let objective = match cfg.mode {
        TrainMode::Ssr if cfg.ssr.beta > 0.0 => {
            let (pen, logits, _) = ssr_penalty_node(&mut g, net, &bound, x, cfg.ssr.s, cfg.ssr.beta)?;
            let ce = g.cross_entropy(logits, label)?;
            g.add(ce, pen)?
        }
        TrainMode::PgdAt => {
            let xa = l2_pgd(net, x, label, &cfg.pgd_at, range)?;
            let xv = g.constant(&xa);
            let logits = bound.logits(&mut g, xv)?;
            g.cross_entropy(logits, label)?
        }
        TrainMode::Natural | TrainMode::Ssr => {
            let xv = g.constant(x);
            let logits = bound.logits(&mut g, xv)?;
            g.cross_entropy(logits, label)?
        }
    };
    let grads = g.backward(objective, &bound.params(), false)?;
    Ok((g.item(objective), grads.iter().map(|v| g.value(*v).to_vec()).collect()))
}

fn check_dataset(data: &Dataset, classes: usize) -> Result<()> {
    if data.is_empty() || data.labels.iter().any(|&l| l >= classes) {
        return Err(TrainError::BadDataset { classes });
    }
    Ok(())
}

/// Initial network for `cfg`: ReLU MLP with the configured hidden widths.
pub fn initial_network(data: &Dataset, cfg: &TrainConfig) -> Result<Network> {
    let mut widths = vec![data.dim()];
    widths.extend(&cfg.hidden);
    widths.push(data.classes);
    Ok(Network::random(&widths, Activation::Relu, rng::mix(cfg.seed, 0x1417))?)
}

/// Trains a freshly initialized network according to `cfg.mode`.
pub fn train(data: &Dataset, cfg: &TrainConfig) -> Result<(Network, TrainHistory)> {
    let net = initial_network(data, cfg)?;
    train_from(net, data, cfg)
}

pub fn train_natural(data: &Dataset, cfg: &TrainConfig) -> Result<(Network, TrainHistory)> {
    train(data, &TrainConfig { mode: TrainMode::Natural, ..cfg.clone() })
}

pub fn train_ssr(data: &Dataset, cfg: &TrainConfig) -> Result<(Network, TrainHistory)> {
    train(data, &TrainConfig { mode: TrainMode::Ssr, ..cfg.clone() })
}

pub fn train_pgd_at(data: &Dataset, cfg: &TrainConfig) -> Result<(Network, TrainHistory)> {
    train(data, &TrainConfig { mode: TrainMode::PgdAt, ..cfg.clone() })
}

/// Continues training `net`. Zero epochs returns it unchanged.
pub fn train_from(mut net: Network, data: &Dataset, cfg: &TrainConfig) -> Result<(Network, TrainHistory)> {
    cfg.validate()?;
    check_dataset(data, net.classes())?;
    let mut history = TrainHistory::default();
    let mut velocity: Option<Vec<Vec<f64>>> = None;
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        order.sort_unstable();
        order.shuffle(&mut rng::stream(cfg.seed, epoch as u64));
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let frozen = &net;
            let results = par::map(batch.len(), |j| {
                let i = batch[j];
                example_gradient(frozen, &data.features[i], data.labels[i], cfg, data.data_range)
            });
            let mut acc = None;
            for r in results {
                let (loss, grads) = r?;
                loss_sum += loss;
                accumulate(&mut acc, grads);
            }
            if !loss_sum.is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            let mut grads = acc.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().flatten().for_each(|v| *v *= scale);
            apply_update(&mut net, grads, &mut velocity, cfg);
        }
        let mean_loss = loss_sum / data.len() as f64;
        let record = EpochRecord {
            epoch: epoch + 1,
            loss: mean_loss,
            accuracy: accuracy(&net, data),
            mean_top_eigenvalue: mean_top_eigenvalue(&net, data, cfg.eigen_probe)?,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} mode {:?}: loss {:.4} acc {:.4} top-eig {:.4}",
            record.epoch,
            cfg.mode,
            record.loss,
            record.accuracy,
            record.mean_top_eigenvalue
        );
        history.rows.push(record);
        net.meta = Some(TrainingMeta { mode: cfg.mode, seed: cfg.seed, epoch: (epoch + 1) as u32 });
    }
    Ok((net, history))
}

fn apply_update(net: &mut Network, grads: Vec<Vec<f64>>, velocity: &mut Option<Vec<Vec<f64>>>, cfg: &TrainConfig) {
    let step: Vec<Vec<f64>> = match cfg.optimizer {
        Optimizer::Sgd => grads,
        Optimizer::Momentum { mu } => {
            let v = velocity.get_or_insert_with(|| grads.iter().map(|g| vec![0.0; g.len()]).collect());
            for (vv, gg) in v.iter_mut().zip(&grads) {
                for (a, b) in vv.iter_mut().zip(gg) {
                    *a = mu * *a + b;
                }
            }
            v.clone()
        }
    };
    let lr = cfg.learning_rate;
    for (k, layer) in net.layers_mut().iter_mut().enumerate() {
        for (w, d) in layer.weights.iter_mut().zip(&step[2 * k]) {
            *w -= lr * d;
        }
        for (b, d) in layer.bias.iter_mut().zip(&step[2 * k + 1]) {
            *b -= lr * d;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::gen_two_moons;

    fn quick_cfg(mode: TrainMode) -> TrainConfig {
        TrainConfig { mode, epochs: 3, batch_size: 16, hidden: vec![8], eigen_probe: 16, seed: 5, ..Default::default() }
    }

    #[test]
    fn zero_epochs_returns_initial_network() {
        let data = gen_two_moons(40, 0.1, 1);
        let cfg = TrainConfig { epochs: 0, ..quick_cfg(TrainMode::Natural) };
        let (net, hist) = train(&data, &cfg).unwrap();
        assert_eq!(net, initial_network(&data, &cfg).unwrap());
        assert!(hist.rows.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let data = gen_two_moons(60, 0.1, 2);
        let cfg = quick_cfg(TrainMode::Natural);
        let (a, _) = train(&data, &cfg).unwrap();
        let (b, _) = train(&data, &cfg).unwrap();
        assert_eq!(a, b);
        let (c, _) = par::sequential(|| train(&data, &cfg)).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn degenerate_regularizers_reduce_to_natural() {
        let data = gen_two_moons(48, 0.1, 3);
        let (nat, _) = train(&data, &quick_cfg(TrainMode::Natural)).unwrap();
        let ssr0 = TrainConfig { ssr: SsrConfig { beta: 0.0, s: 1.0 }, ..quick_cfg(TrainMode::Ssr) };
        assert_eq!(train(&data, &ssr0).unwrap().0.layers(), nat.layers());
        let at0 = TrainConfig { pgd_at: PgdAtConfig { delta2: 0.0, ..Default::default() }, ..quick_cfg(TrainMode::PgdAt) };
        assert_eq!(train(&data, &at0).unwrap().0.layers(), nat.layers());
        let at_steps0 = TrainConfig { pgd_at: PgdAtConfig { steps: 0, ..Default::default() }, ..quick_cfg(TrainMode::PgdAt) };
        assert_eq!(train(&data, &at_steps0).unwrap().0.layers(), nat.layers());
    }

    #[test]
    fn divergence_is_reported() {
        let data = gen_two_moons(40, 0.1, 1);
        let cfg = TrainConfig { learning_rate: 1e200, optimizer: Optimizer::Sgd, ..quick_cfg(TrainMode::Natural) };
        assert!(matches!(train(&data, &cfg), Err(TrainError::Diverged { .. })));
    }

    #[test]
    fn history_csv_round_trip() {
        let h = TrainHistory {
            rows: vec![EpochRecord { epoch: 1, loss: 0.5, accuracy: 0.75, mean_top_eigenvalue: 1.25, wall_time_s: 0.1 }],
        };
        assert_eq!(TrainHistory::from_csv(&h.to_csv()).unwrap(), h);
    }

    #[test]
    fn range_defaults_for_scale() {
        assert_eq!(SsrConfig::for_range(0.0, 255.0).s, 1e6);
        assert_eq!(SsrConfig::for_range(0.0, 1.0).s, 1.0);
        assert_eq!(SsrConfig::default().beta, 0.3);
        assert_eq!(PgdAtConfig::default().delta2, 0.25);
        assert_eq!(PgdAtConfig::default().steps, 30);
    }

    #[test]
    fn l2_pgd_stays_in_ball() {
        let data = gen_two_moons(20, 0.1, 4);
        let net = initial_network(&data, &quick_cfg(TrainMode::Natural)).unwrap();
        let cfg = PgdAtConfig { delta2: 0.3, steps: 10, surrogate_beta: 20.0 };
        for i in 0..data.len() {
            let x = &data.features[i];
            let xa = l2_pgd(&net, x, data.labels[i], &cfg, (-10.0, 10.0)).unwrap();
            let d: f64 = xa.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            assert!(d <= 0.3 + 1e-12);
            assert!(cross_entropy(&net, &xa, data.labels[i]) >= cross_entropy(&net, x, data.labels[i]));
        }
    }
}
