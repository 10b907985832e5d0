//! Gradient attributions: Saliency Map, Integrated Gradients, SmoothGrad and
//! Uniform Gradient.
//!
//! Every method is built on one graph-level routine, [`attribution_node`],
//! so attacks can differentiate through an attribution (with
//! `create_graph`) using exactly the code that produces the reported maps.
//! Noise for SmoothGrad / Uniform Gradient is drawn from the config seed, so
//! two evaluations with the same config see the same samples.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Var};
use crate::nn::{BoundNetwork, Network, NnError, QuantityOfInterest};
use crate::rng;

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("degenerate attribution (all scores zero)")]
    Degenerate,
    #[error("invalid attribution config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Network(#[from] NnError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, AttributionError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "SM")]
    Saliency,
    #[serde(rename = "IG")]
    IntegratedGradients,
    #[serde(rename = "SG")]
    SmoothGrad,
    #[serde(rename = "UG")]
    UniformGradient,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Saliency,
        Method::IntegratedGradients,
        Method::SmoothGrad,
        Method::UniformGradient,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Saliency => "SM",
            Method::IntegratedGradients => "IG",
            Method::SmoothGrad => "SG",
            Method::UniformGradient => "UG",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.tag().eq_ignore_ascii_case(tag))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributionConfig {
    pub qoi: QuantityOfInterest,
    /// Integrated Gradients baseline; `None` means the zero input.
    pub ig_baseline: Option<Vec<f64>>,
    pub ig_steps: usize,
    pub sg_sigma: f64,
    pub sg_samples: usize,
    pub ug_radius: f64,
    pub ug_samples: usize,
    pub seed: u64,
    /// Multiply SM / SG / UG gradients elementwise by the input.
    pub grad_times_input: bool,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self::for_range(0.0, 1.0)
    }
}

/// Noise-level presets, as fractions of the data range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoisePreset {
    /// σ = 0.1 · range, r = 4/255 · range.
    Cifar,
    /// σ = 0.2 · range, r = 0.2 · range.
    Imagenet,
}

impl AttributionConfig {
    /// Desk default for data in `[lo, hi]`: 50 samples / steps, σ = 0.1 · range,
    /// r = 0.2 · range, zero baseline, predicted-class logit.
    pub fn for_range(lo: f64, hi: f64) -> Self {
        let range = hi - lo;
        Self {
            qoi: QuantityOfInterest::default(),
            ig_baseline: None,
            ig_steps: 50,
            sg_sigma: 0.1 * range,
            sg_samples: 50,
            ug_radius: 0.2 * range,
            ug_samples: 50,
            seed: 0,
            grad_times_input: false,
        }
    }

    pub fn preset(lo: f64, hi: f64, preset: NoisePreset) -> Self {
        let range = hi - lo;
        let (sigma, radius) = match preset {
            NoisePreset::Cifar => (0.1 * range, 4.0 / 255.0 * range),
            NoisePreset::Imagenet => (0.2 * range, 0.2 * range),
        };
        Self { sg_sigma: sigma, ug_radius: radius, ..Self::for_range(lo, hi) }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let bad = |msg: String| Err(AttributionError::InvalidConfig(msg));
        if !(self.sg_sigma >= 0.0) {
            return bad(format!("sg_sigma must be >= 0, got {}", self.sg_sigma));
        }
        if !(self.ug_radius >= 0.0) {
            return bad(format!("ug_radius must be >= 0, got {}", self.ug_radius));
        }
        if self.ig_steps == 0 || self.sg_samples == 0 || self.ug_samples == 0 {
            return bad("step and sample counts must be >= 1".into());
        }
        if let Some(b) = &self.ig_baseline {
            if b.len() != d {
                return bad(format!("ig_baseline has length {}, input has {d}", b.len()));
            }
        }
        Ok(())
    }

    pub fn baseline(&self, d: usize) -> Vec<f64> {
        self.ig_baseline.clone().unwrap_or_else(|| vec![0.0; d])
    }

    /// Gaussian offsets `σ·n` for SmoothGrad, one per sample.
    pub fn gaussian_offsets(&self, d: usize) -> Vec<Vec<f64>> {
        let mut rng = rng::stream(self.seed, 0x5347);
        (0..self.sg_samples)
            .map(|_| (0..d).map(|_| self.sg_sigma * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect()
    }

    /// Per-coordinate uniform offsets in `[−r, r]` for Uniform Gradient.
    pub fn uniform_offsets(&self, d: usize) -> Vec<Vec<f64>> {
        let mut rng = rng::stream(self.seed, 0x5547);
        (0..self.ug_samples)
            .map(|_| (0..d).map(|_| self.ug_radius * rng.random_range(-1.0..=1.0)).collect())
            .collect()
    }
}

/// An attribution together with how it was produced.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap {
    pub scores: Vec<f64>,
    pub method: Method,
    pub grad_times_input: bool,
    pub config: AttributionConfig,
    pub input: Vec<f64>,
}

#[derive(Serialize)]
struct AttributionRecord<'a> {
    method: Method,
    d: usize,
    scores: &'a [f64],
    config: &'a AttributionConfig,
}

impl AttributionMap {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(AttributionRecord {
            method: self.method,
            d: self.scores.len(),
            scores: &self.scores,
            config: &self.config,
        })
        .expect("attribution record serializes")
    }

    /// Scores as little-endian `f64`s.
    pub fn to_blob(&self) -> Vec<u8> {
        self.scores.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn scores_from_blob(bytes: &[u8]) -> Option<Vec<f64>> {
        if bytes.len() % 8 != 0 {
            return None;
        }
        Some(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Attribution of `x` as a graph node.
///
/// `class` is the explained output index (already resolved by the caller, so
/// an attack can pin it to the clean prediction). With `create_graph` the
/// result is differentiable with respect to `x` and the network parameters.
pub fn attribution_node(
    g: &mut Graph,
    net: &BoundNetwork,
    x: Var,
    method: Method,
    cfg: &AttributionConfig,
    class: usize,
    create_graph: bool,
) -> Result<Var> {
    let d = g.value(x).len();
    cfg.validate(d)?;
    let stage = cfg.qoi.stage;
    let gradient_at_offsets = |g: &mut Graph, offsets: Vec<Vec<f64>>| -> Result<Var> {
        let n = offsets.len();
        let mut total = None;
        for off in offsets {
            let o = g.constant(&off);
            let p = g.add(x, o)?;
            let q = net.quantity(g, p, stage, class)?;
            total = Some(match total {
                None => q,
                Some(t) => g.add(t, q)?,
            });
        }
        let grad = g.backward(total.expect("at least one sample"), &[x], create_graph)?[0];
        Ok(g.scale(grad, 1.0 / n as f64))
    };

    let grad = match method {
        Method::IntegratedGradients => {
            let m = cfg.ig_steps;
            let base = cfg.baseline(d);
            let mut points = Vec::with_capacity(m);
            let mut total = None;
            for t in 1..=m {
                let alpha = (t as f64 - 0.5) / m as f64;
                let shifted: Vec<f64> = base.iter().map(|b| (1.0 - alpha) * b).collect();
                let sx = g.scale(x, alpha);
                let c = g.constant(&shifted);
                let p = g.add(sx, c)?;
                let q = net.quantity(g, p, stage, class)?;
                points.push(p);
                total = Some(match total {
                    None => q,
                    Some(acc) => g.add(acc, q)?,
                });
            }
            let grads = g.backward(total.expect("m >= 1"), &points, create_graph)?;
            let mean = g.mean(&grads)?;
            let bv = g.constant(&base);
            let delta = g.sub(x, bv)?;
            return Ok(g.mul(delta, mean)?);
        }
        Method::SmoothGrad if cfg.sg_sigma > 0.0 => gradient_at_offsets(g, cfg.gaussian_offsets(d))?,
        Method::UniformGradient if cfg.ug_radius > 0.0 => gradient_at_offsets(g, cfg.uniform_offsets(d))?,
        // zero noise degenerates to the plain gradient
        Method::Saliency | Method::SmoothGrad | Method::UniformGradient => {
            let q = net.quantity(g, x, stage, class)?;
            g.backward(q, &[x], create_graph)?[0]
        }
    };
    if cfg.grad_times_input {
        Ok(g.mul(grad, x)?)
    } else {
        Ok(grad)
    }
}

/// Attribution of `x` with the explained class resolved from `cfg.qoi`.
pub fn attribute(net: &Network, x: &[f64], method: Method, cfg: &AttributionConfig) -> Result<AttributionMap> {
    let class = cfg.qoi.resolve(net, x)?;
    attribute_class(net, x, method, cfg, class)
}

/// Attribution of `x` for an explicit class index.
pub fn attribute_class(
    net: &Network,
    x: &[f64],
    method: Method,
    cfg: &AttributionConfig,
    class: usize,
) -> Result<AttributionMap> {
    if x.len() != net.input_dim() {
        return Err(NnError::InputDim { expected: net.input_dim(), got: x.len() }.into());
    }
    let mut g = Graph::new();
    let bound = net.bind(&mut g, false);
    let xv = g.variable(x);
    let z = attribution_node(&mut g, &bound, xv, method, cfg, class, false)?;
    let scores = g.value(z).to_vec();
    Ok(AttributionMap {
        scores,
        method,
        grad_times_input: cfg.grad_times_input && method != Method::IntegratedGradients,
        config: cfg.clone(),
        input: x.to_vec(),
    })
}

pub fn saliency_map(net: &Network, x: &[f64], cfg: &AttributionConfig) -> Result<AttributionMap> {
    attribute(net, x, Method::Saliency, cfg)
}

pub fn integrated_gradients(net: &Network, x: &[f64], cfg: &AttributionConfig) -> Result<AttributionMap> {
    attribute(net, x, Method::IntegratedGradients, cfg)
}

pub fn smooth_gradient(net: &Network, x: &[f64], cfg: &AttributionConfig) -> Result<AttributionMap> {
    attribute(net, x, Method::SmoothGrad, cfg)
}

pub fn uniform_gradient(net: &Network, x: &[f64], cfg: &AttributionConfig) -> Result<AttributionMap> {
    attribute(net, x, Method::UniformGradient, cfg)
}

/// `|z| / Σ|z|`.
pub fn normalize_map(z: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = z.iter().map(|v| v.abs()).sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(AttributionError::Degenerate);
    }
    Ok(z.iter().map(|v| v.abs() / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Layer};
    use approx::assert_abs_diff_eq;

    /// Two-logit linear model whose class-0 logit is `w·x`.
    fn linear(w: &[f64]) -> Network {
        let d = w.len();
        let mut weights = w.to_vec();
        weights.extend(std::iter::repeat(0.0).take(d));
        Network::new(vec![Layer::new(2, d, weights, vec![0.0, -1e9])], Activation::Relu).unwrap()
    }

    fn cfg() -> AttributionConfig {
        AttributionConfig { seed: 17, ..AttributionConfig::default() }
    }

    #[test]
    fn saliency_of_linear_model() {
        let net = linear(&[1.0, 2.0]);
        let m = saliency_map(&net, &[3.0, 4.0], &cfg()).unwrap();
        assert_eq!(m.scores, vec![1.0, 2.0]);
        let gti = AttributionConfig { grad_times_input: true, ..cfg() };
        let m = saliency_map(&net, &[3.0, 4.0], &gti).unwrap();
        assert_eq!(m.scores, vec![3.0, 8.0]);
        assert!(m.grad_times_input);
    }

    #[test]
    fn integrated_gradients_on_linear_model() {
        let net = linear(&[1.0, 2.0]);
        for m in [1, 3, 50] {
            let c = AttributionConfig { ig_steps: m, ..cfg() };
            let ig = integrated_gradients(&net, &[3.0, 4.0], &c).unwrap();
            assert_abs_diff_eq!(ig.scores[0], 3.0, epsilon = 1e-12);
            assert_abs_diff_eq!(ig.scores[1], 8.0, epsilon = 1e-12);
            assert_abs_diff_eq!(ig.scores.iter().sum::<f64>(), 11.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn noise_methods_reduce_to_saliency() {
        let net = Network::random(&[4, 6, 3], Activation::Softplus { beta: 5.0 }, 1).unwrap();
        let x = [0.2, 0.4, -0.1, 0.7];
        let sm = saliency_map(&net, &x, &cfg()).unwrap();
        let sg = smooth_gradient(&net, &x, &AttributionConfig { sg_sigma: 0.0, ..cfg() }).unwrap();
        let ug = uniform_gradient(&net, &x, &AttributionConfig { ug_radius: 0.0, ..cfg() }).unwrap();
        assert_eq!(sm.scores, sg.scores);
        assert_eq!(sm.scores, ug.scores);
    }

    #[test]
    fn noise_methods_on_linear_model() {
        let net = linear(&[0.5, -1.5, 2.0]);
        for samples in [1, 7, 50] {
            let c = AttributionConfig { sg_samples: samples, ug_samples: samples, sg_sigma: 0.8, ..cfg() };
            for m in [Method::SmoothGrad, Method::UniformGradient] {
                let z = attribute(&net, &[0.1, 0.2, 0.3], m, &c).unwrap();
                for (a, b) in z.scores.iter().zip([0.5, -1.5, 2.0]) {
                    assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn seeded_noise_is_reproducible() {
        let net = Network::random(&[3, 8, 2], Activation::Relu, 4).unwrap();
        let x = [0.3, 0.6, 0.9];
        let a = smooth_gradient(&net, &x, &cfg()).unwrap();
        let b = smooth_gradient(&net, &x, &cfg()).unwrap();
        assert_eq!(a, b);
        let other = smooth_gradient(&net, &x, &AttributionConfig { seed: 18, ..cfg() }).unwrap();
        assert_ne!(a.scores, other.scores);
    }

    #[test]
    fn uniform_offsets_stay_in_box() {
        let c = AttributionConfig { ug_radius: 0.3, ..cfg() };
        let offs = c.uniform_offsets(5);
        assert_eq!(offs.len(), 50);
        assert!(offs.iter().flatten().all(|v| v.abs() <= 0.3));
    }

    #[test]
    fn imagenet_preset_radius() {
        let c = AttributionConfig::preset(0.0, 255.0, NoisePreset::Imagenet);
        assert_abs_diff_eq!(c.ug_radius, 51.0, epsilon = 1e-12);
        let c = AttributionConfig::preset(0.0, 255.0, NoisePreset::Cifar);
        assert_abs_diff_eq!(c.ug_radius, 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.sg_sigma, 25.5, epsilon = 1e-12);
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_map(&[4.0, -3.0, 2.0, 1.0]).unwrap(), vec![0.4, 0.3, 0.2, 0.1]);
        let n = [0.25, 0.25, 0.5];
        assert_eq!(normalize_map(&n).unwrap(), n.to_vec());
        let scaled = normalize_map(&[40.0, -30.0, 20.0, 10.0]).unwrap();
        for (a, b) in scaled.iter().zip([0.4, 0.3, 0.2, 0.1]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        assert!(matches!(normalize_map(&[0.0, 0.0]), Err(AttributionError::Degenerate)));
    }

    #[test]
    fn invalid_config_rejected() {
        let net = linear(&[1.0, 1.0]);
        let c = AttributionConfig { ig_steps: 0, ..cfg() };
        assert!(matches!(integrated_gradients(&net, &[1.0, 1.0], &c), Err(AttributionError::InvalidConfig(_))));
        let c = AttributionConfig { sg_sigma: -1.0, ..cfg() };
        assert!(smooth_gradient(&net, &[1.0, 1.0], &c).is_err());
        let c = AttributionConfig { ig_baseline: Some(vec![0.0]), ..cfg() };
        assert!(integrated_gradients(&net, &[1.0, 1.0], &c).is_err());
    }

    #[test]
    fn json_record_and_blob() {
        let net = linear(&[1.0, 2.0]);
        let m = saliency_map(&net, &[3.0, 4.0], &cfg()).unwrap();
        let j = m.to_json();
        assert_eq!(j["method"], "SM");
        assert_eq!(j["d"], 2);
        assert_eq!(j["scores"][1], 2.0);
        assert!(j["config"].is_object());
        assert_eq!(AttributionMap::scores_from_blob(&m.to_blob()).unwrap(), m.scores);
    }
}
