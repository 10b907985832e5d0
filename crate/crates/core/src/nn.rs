//! Dense feed-forward classifiers with switchable ReLU / softplus hidden
//! activations, quantity-of-interest selection, input Jacobians and the
//! binary checkpoint format.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Var};
use crate::rng;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SGEOCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const META_TAG: &[u8; 4] = b"META";

#[derive(Debug, Error)]
pub enum NnError {
    #[error("input has length {got}, network expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("layer {layer} expects input width {expected}, previous layer emits {got}")]
    LayerChain { layer: usize, expected: usize, got: usize },
    #[error("layer {layer} payload does not match its declared {out_dim}x{in_dim} shape")]
    LayerPayload { layer: usize, out_dim: usize, in_dim: usize },
    #[error("network needs at least one layer, an input width of 1 or more and 2 or more classes")]
    Degenerate,
    #[error("class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("softplus beta must be positive, got {0}")]
    InvalidBeta(f64),
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("truncated payload")]
    TruncatedPayload,
    #[error("unsupported checkpoint version {found} (expected {CHECKPOINT_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("{0} unexpected trailing bytes after checkpoint payload")]
    TrailingBytes(usize),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Softplus { beta: f64 },
}

impl Activation {
    fn code(self) -> (u32, f64) {
        match self {
            Activation::Relu => (0, 0.0),
            Activation::Softplus { beta } => (1, beta),
        }
    }

    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Softplus { beta } => v.max(0.0) + (-(beta * v).abs()).exp().ln_1p() / beta,
        }
    }
}

/// One affine map `W h + b`, with `W` stored row-major as `out_dim × in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub out_dim: usize,
    pub in_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn new(out_dim: usize, in_dim: usize, weights: Vec<f64>, bias: Vec<f64>) -> Self {
        Self { out_dim, in_dim, weights, bias }
    }

    fn apply(&self, h: &[f64]) -> Vec<f64> {
        (0..self.out_dim)
            .map(|r| {
                let row = &self.weights[r * self.in_dim..(r + 1) * self.in_dim];
                row.iter().zip(h).map(|(w, x)| w * x).sum::<f64>() + self.bias[r]
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Natural,
    Ssr,
    PgdAt,
}

impl TrainMode {
    fn code(self) -> u32 {
        match self {
            TrainMode::Natural => 0,
            TrainMode::Ssr => 1,
            TrainMode::PgdAt => 2,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(TrainMode::Natural),
            1 => Some(TrainMode::Ssr),
            2 => Some(TrainMode::PgdAt),
            _ => None,
        }
    }
}

/// Provenance carried alongside the weights in a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub mode: TrainMode,
    pub seed: u64,
    pub epoch: u32,
}

/// Feed-forward classifier. The final layer emits logits with no activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    activation: Activation,
    pub meta: Option<TrainingMeta>,
}

impl Network {
    pub fn new(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() || layers[0].in_dim == 0 || layers.last().unwrap().out_dim < 2 {
            return Err(NnError::Degenerate);
        }
        if let Activation::Softplus { beta } = activation {
            if !(beta > 0.0) {
                return Err(NnError::InvalidBeta(beta));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weights.len() != l.out_dim * l.in_dim || l.bias.len() != l.out_dim {
                return Err(NnError::LayerPayload { layer: i, out_dim: l.out_dim, in_dim: l.in_dim });
            }
            if i > 0 && layers[i - 1].out_dim != l.in_dim {
                return Err(NnError::LayerChain { layer: i, expected: l.in_dim, got: layers[i - 1].out_dim });
            }
        }
        Ok(Self { layers, activation, meta: None })
    }

    /// Uniform He-style initialization. `widths` lists input, hidden and output widths.
    pub fn random(widths: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if widths.len() < 2 {
            return Err(NnError::Degenerate);
        }
        let mut rng = rng::seeded(seed);
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / fan_in as f64).sqrt();
                let weights = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
                let bias = (0..fan_out).map(|_| rng.random_range(-0.1..0.1)).collect();
                Layer::new(fan_out, fan_in, weights, bias)
            })
            .collect();
        Self::new(layers, activation)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn classes(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn hidden_units(&self) -> usize {
        self.layers[..self.layers.len() - 1].iter().map(|l| l.out_dim).sum()
    }

    /// Surrogate sharing this network's weights with softplus hidden activations.
    pub fn with_softplus(&self, beta: f64) -> Result<Network> {
        if !(beta > 0.0) {
            return Err(NnError::InvalidBeta(beta));
        }
        Ok(Network {
            layers: self.layers.clone(),
            activation: Activation::Softplus { beta },
            meta: self.meta,
        })
    }

    pub fn with_relu(&self) -> Network {
        Network { layers: self.layers.clone(), activation: Activation::Relu, meta: self.meta }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(NnError::InputDim { expected: self.input_dim(), got: x.len() });
        }
        Ok(())
    }

    /// Logits without building a graph.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(&h);
            if i < last {
                h.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
        }
        Ok(h)
    }

    /// Hidden-layer pre-activations, one vector per hidden layer.
    pub fn preactivations(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_input(x)?;
        let mut out = Vec::new();
        let mut h = x.to_vec();
        for layer in &self.layers[..self.layers.len() - 1] {
            let pre = layer.apply(&h);
            h = pre.iter().map(|v| self.activation.apply(*v)).collect();
            out.push(pre);
        }
        Ok(out)
    }

    /// Smallest |pre-activation| over all hidden units (∞ for a linear model).
    pub fn activation_margin(&self, x: &[f64]) -> Result<f64> {
        Ok(self
            .preactivations(x)?
            .iter()
            .flatten()
            .fold(f64::INFINITY, |m, v| m.min(v.abs())))
    }

    pub fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        let z = self.logits(x)?;
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = e.iter().sum();
        Ok(e.into_iter().map(|v| v / total).collect())
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    /// Copies the parameters into `g` as leaves.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundNetwork {
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut biases = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            weights.push(g.leaf(l.weights.clone(), &[l.out_dim, l.in_dim], trainable).expect("validated shape"));
            biases.push(g.leaf(l.bias.clone(), &[l.out_dim], trainable).expect("validated shape"));
        }
        BoundNetwork {
            activation: self.activation,
            weights,
            biases,
            input_dim: self.input_dim(),
            classes: self.classes(),
        }
    }

    /// Logits node for `x` in a fresh graph, with `x` as a differentiable leaf.
    pub fn forward_logits(&self, x: &[f64]) -> Result<(Graph, Var, Var)> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xv = g.variable(x);
        let logits = bound.logits(&mut g, xv)?;
        Ok((g, xv, logits))
    }

    /// Selected scalar score at `x`, in a fresh graph.
    pub fn quantity(&self, x: &[f64], qoi: QuantityOfInterest) -> Result<(Graph, Var, Var)> {
        let class = qoi.resolve(self, x)?;
        self.check_input(x)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xv = g.variable(x);
        let q = bound.quantity(&mut g, xv, qoi.stage, class)?;
        Ok((g, xv, q))
    }

    /// `d × c` Jacobian of the logits; column `i` is `∇ₓ ŷᵢ`.
    pub fn input_jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let (mut g, xv, logits) = self.forward_logits(x)?;
        let cols = logit_gradients(&mut g, xv, logits, false)?;
        let d = self.input_dim();
        Ok(DMatrix::from_fn(d, cols.len(), |r, c| g.value(cols[c])[r]))
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let (code, beta) = self.activation.code();
        out.extend_from_slice(&code.to_le_bytes());
        out.extend_from_slice(&beta.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.out_dim as u32).to_le_bytes());
            out.extend_from_slice(&(l.in_dim as u32).to_le_bytes());
            for v in l.weights.iter().chain(&l.bias) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(meta) = self.meta {
            out.extend_from_slice(META_TAG);
            out.extend_from_slice(&meta.mode.code().to_le_bytes());
            out.extend_from_slice(&meta.seed.to_le_bytes());
            out.extend_from_slice(&meta.epoch.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Network> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8).map_err(|_| NnError::CorruptHeader("file shorter than magic".into()))?;
        if magic != CHECKPOINT_MAGIC {
            return Err(NnError::CorruptHeader("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(NnError::VersionMismatch { found: version });
        }
        let code = r.u32()?;
        let beta = r.f64()?;
        let activation = match code {
            0 => Activation::Relu,
            1 => Activation::Softplus { beta },
            other => return Err(NnError::CorruptHeader(format!("unknown activation code {other}"))),
        };
        let count = r.u32()? as usize;
        let mut layers = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let out_dim = r.u32()? as usize;
            let in_dim = r.u32()? as usize;
            let weights = r.f64s(out_dim.checked_mul(in_dim).ok_or(NnError::TruncatedPayload)?)?;
            let bias = r.f64s(out_dim)?;
            layers.push(Layer::new(out_dim, in_dim, weights, bias));
        }
        let meta = match r.remaining() {
            0 => None,
            20 if r.take(4)? == META_TAG => {
                let code = r.u32()?;
                let mode = TrainMode::from_code(code)
                    .ok_or_else(|| NnError::CorruptHeader(format!("unknown training mode {code}")))?;
                Some(TrainingMeta { mode, seed: r.u64()?, epoch: r.u32()? })
            }
            n => return Err(NnError::TrailingBytes(n)),
        };
        let mut net = Network::new(layers, activation)?;
        net.meta = meta;
        Ok(net)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(NnError::TruncatedPayload)?;
        if end > self.bytes.len() {
            return Err(NnError::TruncatedPayload);
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or(NnError::TruncatedPayload)?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Network parameters living in one graph.
#[derive(Debug, Clone)]
pub struct BoundNetwork {
    activation: Activation,
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
    input_dim: usize,
    classes: usize,
}

impl BoundNetwork {
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Parameters in layer order, weight before bias.
    pub fn params(&self) -> Vec<Var> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [*w, *b]).collect()
    }

    pub fn logits(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if g.shape(x) != [self.input_dim] {
            return Err(NnError::InputDim { expected: self.input_dim, got: g.value(x).len() });
        }
        let last = self.weights.len() - 1;
        let mut h = x;
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let wx = g.matvec(*w, h)?;
            h = g.add(wx, *b)?;
            if i < last {
                h = match self.activation {
                    Activation::Relu => g.relu(h),
                    Activation::Softplus { beta } => g.softplus(h, beta),
                };
            }
        }
        Ok(h)
    }

    pub fn quantity(&self, g: &mut Graph, x: Var, stage: Stage, class: usize) -> Result<Var> {
        if class >= self.classes {
            return Err(NnError::ClassOutOfRange { class, classes: self.classes });
        }
        let logits = self.logits(g, x)?;
        let scores = match stage {
            Stage::PreSoftmax => logits,
            Stage::PostSoftmax => g.softmax(logits),
        };
        Ok(g.index(scores, class)?)
    }
}

/// Gradients of every logit with respect to `x`, one node per class.
pub fn logit_gradients(g: &mut Graph, x: Var, logits: Var, create_graph: bool) -> Result<Vec<Var>> {
    let c = g.value(logits).len();
    (0..c)
        .map(|i| {
            let yi = g.index(logits, i)?;
            Ok(g.backward(yi, &[x], create_graph)?[0])
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PreSoftmax,
    PostSoftmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassSelector {
    Predicted,
    Fixed(usize),
}

/// Which scalar output an attribution explains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantityOfInterest {
    pub stage: Stage,
    pub class: ClassSelector,
}

impl Default for QuantityOfInterest {
    fn default() -> Self {
        Self { stage: Stage::PreSoftmax, class: ClassSelector::Predicted }
    }
}

impl QuantityOfInterest {
    pub fn post_softmax() -> Self {
        Self { stage: Stage::PostSoftmax, class: ClassSelector::Predicted }
    }

    /// Class index this selector picks at `x`.
    pub fn resolve(&self, net: &Network, x: &[f64]) -> Result<usize> {
        match self.class {
            ClassSelector::Predicted => net.predict(x),
            ClassSelector::Fixed(c) if c < net.classes() => Ok(c),
            ClassSelector::Fixed(c) => Err(NnError::ClassOutOfRange { class: c, classes: net.classes() }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn linear(w: Vec<f64>, c: usize, d: usize) -> Network {
        Network::new(vec![Layer::new(c, d, w, vec![0.0; c])], Activation::Relu).unwrap()
    }

    #[test]
    fn single_layer_logits_are_wx() {
        let net = linear(vec![1.0, 2.0, -1.0, 0.5], 2, 2);
        let (g, _, z) = net.forward_logits(&[3.0, 4.0]).unwrap();
        assert_eq!(g.value(z), &[11.0, -1.0]);
        assert_eq!(net.logits(&[3.0, 4.0]).unwrap(), vec![11.0, -1.0]);
    }

    #[test]
    fn negative_inputs_kill_identity_hidden_layer() {
        let hidden = Layer::new(2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0; 2]);
        let out = Layer::new(2, 2, vec![1.0, 2.0, 3.0, 4.0], vec![0.5, -0.5]);
        let net = Network::new(vec![hidden, out], Activation::Relu).unwrap();
        // only the output bias survives
        assert_eq!(net.logits(&[-1.0, -3.0]).unwrap(), vec![0.5, -0.5]);
    }

    #[test]
    fn forward_is_deterministic_and_matches_fast_path() {
        let net = Network::random(&[5, 7, 3], Activation::Softplus { beta: 4.0 }, 3).unwrap();
        let x = [0.1, -0.2, 0.3, 0.9, -1.0];
        let (g1, _, z1) = net.forward_logits(&x).unwrap();
        let (g2, _, z2) = net.forward_logits(&x).unwrap();
        assert_eq!(g1.value(z1), g2.value(z2));
        for (a, b) in g1.value(z1).iter().zip(net.logits(&x).unwrap()) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.1, 0.9]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.2, 0.7, 0.7]), 1);
    }

    #[test]
    fn predictions_are_stable() {
        let net = Network::random(&[4, 6, 3], Activation::Relu, 11).unwrap();
        let x = [0.3, 0.1, -0.4, 0.8];
        let first = net.predict(&x).unwrap();
        assert!((0..10).all(|_| net.predict(&x).unwrap() == first));
    }

    #[test]
    fn quantity_selection() {
        let net = linear(vec![0.0; 4], 2, 2);
        let (g, _, q) = net.quantity(&[1.0, 1.0], QuantityOfInterest::post_softmax()).unwrap();
        assert_abs_diff_eq!(g.item(q), 0.5, epsilon = 1e-15);

        let net = Network::random(&[3, 5, 4], Activation::Relu, 2).unwrap();
        let x = [0.5, -0.5, 0.25];
        let (g, _, q) = net.quantity(&x, QuantityOfInterest::default()).unwrap();
        let max = net.logits(&x).unwrap().into_iter().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(g.item(q), max);

        let total: f64 = (0..4)
            .map(|c| {
                let qoi = QuantityOfInterest { stage: Stage::PostSoftmax, class: ClassSelector::Fixed(c) };
                let (g, _, q) = net.quantity(&x, qoi).unwrap();
                let v = g.item(q);
                assert!(v > 0.0 && v < 1.0);
                v
            })
            .sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);

        let bad = QuantityOfInterest { stage: Stage::PreSoftmax, class: ClassSelector::Fixed(4) };
        assert!(matches!(bad.resolve(&net, &x), Err(NnError::ClassOutOfRange { .. })));
    }

    #[test]
    fn softplus_surrogate_shares_weights() {
        let net = Network::random(&[3, 4, 2], Activation::Relu, 5).unwrap();
        let sp = net.with_softplus(50.0).unwrap();
        assert_eq!(sp.layers(), net.layers());
        assert_eq!(sp.activation(), Activation::Softplus { beta: 50.0 });
        assert_eq!(net.activation(), Activation::Relu);
        assert!(net.with_softplus(0.0).is_err());
    }

    #[test]
    fn large_beta_reproduces_relu_on_one_unit() {
        // 1 hidden unit: z = 2·relu(x − 0.3) + 0.1, second logit zero
        let hidden = Layer::new(1, 1, vec![1.0], vec![-0.3]);
        let out = Layer::new(2, 1, vec![2.0, 0.0], vec![0.1, 0.0]);
        let net = Network::new(vec![hidden, out], Activation::Relu).unwrap();
        let sp = net.with_softplus(1e4).unwrap();
        for x in [0.0, 0.25, 0.35, 1.0, -2.0] {
            let (a, b) = (net.logits(&[x]).unwrap(), sp.logits(&[x]).unwrap());
            assert!((a[0] - b[0]).abs() < 1e-6, "x={x}");
        }
    }

    #[test]
    fn jacobian_of_linear_model_is_transpose() {
        let m = vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0];
        let net = linear(m.clone(), 2, 3);
        let j = net.input_jacobian(&[0.2, 0.3, 0.4]).unwrap();
        assert_eq!(j.shape(), (3, 2));
        for r in 0..3 {
            for c in 0..2 {
                assert_eq!(j[(r, c)], m[c * 3 + r]);
            }
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let a = Layer::new(3, 2, vec![0.0; 6], vec![0.0; 3]);
        let b = Layer::new(2, 4, vec![0.0; 8], vec![0.0; 2]);
        assert!(matches!(Network::new(vec![a.clone(), b], Activation::Relu), Err(NnError::LayerChain { .. })));
        let single = Layer::new(1, 2, vec![0.0; 2], vec![0.0]);
        assert!(matches!(Network::new(vec![single], Activation::Relu), Err(NnError::Degenerate)));
        let net = Network::new(vec![Layer::new(2, 2, vec![0.0; 4], vec![0.0; 2])], Activation::Relu).unwrap();
        assert!(matches!(net.logits(&[1.0]), Err(NnError::InputDim { expected: 2, got: 1 })));
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let mut net = Network::random(&[4, 5, 3], Activation::Softplus { beta: 7.5 }, 9).unwrap();
        net.meta = Some(TrainingMeta { mode: TrainMode::Ssr, seed: 42, epoch: 3 });
        let bytes = net.to_bytes();
        assert_eq!(&bytes[..8], b"SGEOCKPT");
        let back = Network::from_bytes(&bytes).unwrap();
        assert_eq!(back, net);

        assert!(matches!(Network::from_bytes(&bytes[..bytes.len() - 30]), Err(NnError::TruncatedPayload)));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Network::from_bytes(&bad), Err(NnError::CorruptHeader(_))));
        let mut v2 = bytes.clone();
        v2[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(Network::from_bytes(&v2), Err(NnError::VersionMismatch { found: 2 })));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(Network::from_bytes(&extra), Err(NnError::TrailingBytes(21))));
        assert!(matches!(Network::from_bytes(&[]), Err(NnError::CorruptHeader(_))));
    }
}
