//! Tape-based reverse-mode differentiation over dense `f64` arrays.
//!
//! Every node lives in a [`Graph`] arena and is addressed by a [`Var`] handle.
//! Node indices are assigned in creation order, so index order is already a
//! valid topological order. [`Graph::backward`] emits gradients as ordinary
//! graph nodes; with `create_graph` set those nodes are themselves
//! differentiable, which is what second-order attribution attacks and the
//! curvature penalty rely on.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("leaf has {len} values but shape {shape:?}")]
    LeafLength { len: usize, shape: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds. Parents are stored inline, so arity is fixed by the variant.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `scale * a + shift`, elementwise.
    Affine(Var, f64, f64),
    /// Matrix `[m, n]` times vector `[n]`.
    MatVec(Var, Var),
    /// Transposed matrix `[m, n]` times vector `[m]`.
    MatTVec(Var, Var),
    /// `a bᵀ` for vectors `[m]`, `[n]`.
    Outer(Var, Var),
    Relu(Var),
    Softplus(Var, f64),
    /// Logistic function of `beta * a`; the derivative of `Softplus(a, beta)`.
    Sigmoid(Var, f64),
    Sqrt(Var),
    Sum(Var),
    /// Scalar broadcast to the given shape.
    Broadcast(Var, Vec<usize>),
    Dot(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
    Index(Var, usize),
    /// Scalar placed at an index of a zero vector of the given length.
    Scatter(Var, usize, usize),
    /// Scalars gathered into a vector.
    Stack(Vec<Var>),
}

impl Op {
    pub fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatVec(a, b) | MatTVec(a, b)
            | Outer(a, b) | Dot(a, b) => vec![*a, *b],
            Affine(a, ..) | Relu(a) | Softplus(a, _) | Sigmoid(a, _) | Sqrt(a) | Sum(a)
            | Broadcast(a, _) | Softmax(a) | LogSoftmax(a) | Index(a, _) | Scatter(a, ..) => {
                vec![*a]
            }
            Stack(vs) => vs.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TensorNode {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub op: Op,
    pub requires_grad: bool,
}

/// Node arena. Confined to one thread while it is being built or differentiated.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<TensorNode>,
    record: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softplus(v: f64, beta: f64) -> f64 {
    v.max(0.0) + (-(beta * v).abs()).exp().ln_1p() / beta
}

fn softmax_values(a: &[f64]) -> Vec<f64> {
    let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = a.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_softmax_values(a: &[f64]) -> Vec<f64> {
    let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + a.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    a.iter().map(|v| v - lse).collect()
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &TensorNode {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Value of a single-element node.
    pub fn item(&self, v: Var) -> f64 {
        let vals = self.value(v);
        debug_assert_eq!(vals.len(), 1);
        vals[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Node indices in topological order (parents first).
    pub fn topological_order(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    pub fn leaf(&mut self, values: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Var> {
        if values.len() != numel(shape) {
            return Err(AutodiffError::LeafLength {
                len: values.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(self.push_leaf(values, shape.to_vec(), requires_grad))
    }

    /// Differentiable input vector.
    pub fn variable(&mut self, values: &[f64]) -> Var {
        self.push_leaf(values.to_vec(), vec![values.len()], true)
    }

    /// Constant vector (never receives gradient).
    pub fn constant(&mut self, values: &[f64]) -> Var {
        self.push_leaf(values.to_vec(), vec![values.len()], false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push_leaf(vec![value], vec![1], false)
    }

    pub fn matrix(&mut self, values: Vec<f64>, rows: usize, cols: usize, requires_grad: bool) -> Result<Var> {
        self.leaf(values, &[rows, cols], requires_grad)
    }

    fn push_leaf(&mut self, values: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Var {
        self.nodes.push(TensorNode {
            shape,
            values,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn expect_scalar(&self, op: &'static str, a: Var) -> Result<()> {
        if self.value(a).len() != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: vec![1],
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        Ok(self.push(Op::Div(a, b)))
    }

    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        self.push(Op::Affine(a, scale, shift))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.affine(a, factor, 0.0)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 0.0)
    }

    pub fn matvec(&mut self, m: Var, x: Var) -> Result<Var> {
        let (ms, xs) = (self.shape(m), self.shape(x));
        if ms.len() != 2 || xs.len() != 1 || ms[1] != xs[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matvec",
                lhs: ms.to_vec(),
                rhs: xs.to_vec(),
            });
        }
        Ok(self.push(Op::MatVec(m, x)))
    }

    pub fn mattvec(&mut self, m: Var, v: Var) -> Result<Var> {
        let (ms, vs) = (self.shape(m), self.shape(v));
        if ms.len() != 2 || vs.len() != 1 || ms[0] != vs[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "mattvec",
                lhs: ms.to_vec(),
                rhs: vs.to_vec(),
            });
        }
        Ok(self.push(Op::MatTVec(m, v)))
    }

    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a), self.shape(b));
        if as_.len() != 1 || bs.len() != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "outer",
                lhs: as_.to_vec(),
                rhs: bs.to_vec(),
            });
        }
        Ok(self.push(Op::Outer(a, b)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.push(Op::Relu(a))
    }

    /// `beta⁻¹ log(1 + exp(beta v))`, evaluated in overflow-safe form.
    pub fn softplus(&mut self, a: Var, beta: f64) -> Var {
        assert!(beta > 0.0, "softplus beta must be positive");
        self.push(Op::Softplus(a, beta))
    }

    pub fn sigmoid(&mut self, a: Var, beta: f64) -> Var {
        self.push(Op::Sigmoid(a, beta))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.push(Op::Sqrt(a))
    }

    /// `sqrt(v² + eps)`: differentiable absolute value.
    pub fn smooth_abs(&mut self, a: Var, eps: f64) -> Var {
        let sq = self.push(Op::Mul(a, a));
        let shifted = self.affine(sq, 1.0, eps);
        self.sqrt(shifted)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.push(Op::Sum(a))
    }

    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.expect_scalar("broadcast", a)?;
        Ok(self.push(Op::Broadcast(a, shape.to_vec())))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("dot", a, b)?;
        Ok(self.push(Op::Dot(a, b)))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        self.push(Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        self.push(Op::LogSoftmax(a))
    }

    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let len = self.value(a).len();
        if i >= len {
            return Err(AutodiffError::IndexOutOfRange { op: "index", index: i, len });
        }
        Ok(self.push(Op::Index(a, i)))
    }

    pub fn scatter(&mut self, a: Var, i: usize, len: usize) -> Result<Var> {
        self.expect_scalar("scatter", a)?;
        if i >= len {
            return Err(AutodiffError::IndexOutOfRange { op: "scatter", index: i, len });
        }
        Ok(self.push(Op::Scatter(a, i, len)))
    }

    pub fn stack(&mut self, items: &[Var]) -> Result<Var> {
        for &v in items {
            self.expect_scalar("stack", v)?;
        }
        Ok(self.push(Op::Stack(items.to_vec())))
    }

    /// `−log softmax(logits)[class]`.
    pub fn cross_entropy(&mut self, logits: Var, class: usize) -> Result<Var> {
        let ls = self.log_softmax(logits);
        let picked = self.index(ls, class)?;
        Ok(self.neg(picked))
    }

    /// Mean of same-shaped nodes, summed left to right.
    pub fn mean(&mut self, items: &[Var]) -> Result<Var> {
        assert!(!items.is_empty(), "mean of an empty list");
        let mut acc = items[0];
        for &v in &items[1..] {
            acc = self.add(acc, v)?;
        }
        Ok(self.scale(acc, 1.0 / items.len() as f64))
    }

    fn push(&mut self, op: Op) -> Var {
        let (shape, values) = self.evaluate(&op);
        let requires_grad = self.record && op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(TensorNode {
            shape,
            values,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn evaluate(&self, op: &Op) -> (Vec<usize>, Vec<f64>) {
        let val = |v: &Var| &self.nodes[v.0].values;
        let shp = |v: &Var| self.nodes[v.0].shape.clone();
        let zip = |a: &Var, b: &Var, f: fn(f64, f64) -> f64| -> Vec<f64> {
            val(a).iter().zip(val(b)).map(|(x, y)| f(*x, *y)).collect()
        };
        match op {
            Op::Leaf => unreachable!("leaves are pushed directly"),
            Op::Add(a, b) => (shp(a), zip(a, b, |x, y| x + y)),
            Op::Sub(a, b) => (shp(a), zip(a, b, |x, y| x - y)),
            Op::Mul(a, b) => (shp(a), zip(a, b, |x, y| x * y)),
            Op::Div(a, b) => (shp(a), zip(a, b, |x, y| x / y)),
            Op::Affine(a, s, t) => (shp(a), val(a).iter().map(|x| s * x + t).collect()),
            Op::MatVec(m, x) => {
                let (rows, cols) = (self.nodes[m.0].shape[0], self.nodes[m.0].shape[1]);
                let (mv, xv) = (val(m), val(x));
                let out = (0..rows)
                    .map(|r| mv[r * cols..(r + 1) * cols].iter().zip(xv).map(|(w, x)| w * x).sum())
                    .collect();
                (vec![rows], out)
            }
            Op::MatTVec(m, v) => {
                let (rows, cols) = (self.nodes[m.0].shape[0], self.nodes[m.0].shape[1]);
                let (mv, vv) = (val(m), val(v));
                let mut out = vec![0.0; cols];
                for r in 0..rows {
                    let s = vv[r];
                    for (o, w) in out.iter_mut().zip(&mv[r * cols..(r + 1) * cols]) {
                        *o += w * s;
                    }
                }
                (vec![cols], out)
            }
            Op::Outer(a, b) => {
                let (av, bv) = (val(a), val(b));
                let out = av.iter().flat_map(|x| bv.iter().map(move |y| x * y)).collect();
                (vec![av.len(), bv.len()], out)
            }
            Op::Relu(a) => (shp(a), val(a).iter().map(|x| x.max(0.0)).collect()),
            Op::Softplus(a, beta) => (shp(a), val(a).iter().map(|x| softplus(*x, *beta)).collect()),
            Op::Sigmoid(a, beta) => (shp(a), val(a).iter().map(|x| sigmoid(beta * x)).collect()),
            Op::Sqrt(a) => (shp(a), val(a).iter().map(|x| x.sqrt()).collect()),
            Op::Sum(a) => (vec![1], vec![val(a).iter().sum()]),
            Op::Broadcast(a, shape) => (shape.clone(), vec![val(a)[0]; numel(shape)]),
            Op::Dot(a, b) => (vec![1], vec![val(a).iter().zip(val(b)).map(|(x, y)| x * y).sum()]),
            Op::Softmax(a) => (shp(a), softmax_values(val(a))),
            Op::LogSoftmax(a) => (shp(a), log_softmax_values(val(a))),
            Op::Index(a, i) => (vec![1], vec![val(a)[*i]]),
            Op::Scatter(a, i, len) => {
                let mut out = vec![0.0; *len];
                out[*i] = val(a)[0];
                (vec![*len], out)
            }
            Op::Stack(items) => (vec![items.len()], items.iter().map(|v| val(v)[0]).collect()),
        }
    }

    /// Gradients of the scalar `root` with respect to each node of `wrt`.
    ///
    /// Nodes that `root` does not depend on get a zero gradient. With
    /// `create_graph` the returned nodes carry their own history and can be
    /// differentiated again.
    pub fn backward(&mut self, root: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
        if self.value(root).len() != 1 {
            return Err(AutodiffError::NonScalarRoot(self.shape(root).to_vec()));
        }
        let saved = self.record;
        self.record = create_graph;
        let mut grads: Vec<Option<Var>> = vec![None; root.0 + 1];
        grads[root.0] = Some(self.push_leaf(vec![1.0], self.shape(root).to_vec(), false));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i] else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            for (parent, contribution) in self.local_grads(Var(i), &op, g) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                grads[parent.0] = Some(match grads[parent.0] {
                    None => contribution,
                    Some(prev) => self.push(Op::Add(prev, contribution)),
                });
            }
        }

        let out = wrt
            .iter()
            .map(|&w| match grads.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let shape = self.shape(w).to_vec();
                    self.push_leaf(vec![0.0; numel(&shape)], shape, false)
                }
            })
            .collect();
        self.record = saved;
        Ok(out)
    }

    /// Per-parent contributions `∂out/∂parent · g`, built from graph primitives.
    fn local_grads(&mut self, out: Var, op: &Op, g: Var) -> Vec<(Var, Var)> {
        match *op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(a, g), (b, g)],
            Op::Sub(a, b) => vec![(a, g), (b, self.neg(g))],
            Op::Mul(a, b) => {
                let ga = self.push(Op::Mul(g, b));
                let gb = self.push(Op::Mul(g, a));
                vec![(a, ga), (b, gb)]
            }
            Op::Div(a, b) => {
                let ga = self.push(Op::Div(g, b));
                let ratio = self.push(Op::Div(out, b));
                let prod = self.push(Op::Mul(g, ratio));
                vec![(a, ga), (b, self.neg(prod))]
            }
            Op::Affine(a, s, _) => vec![(a, self.scale(g, s))],
            Op::MatVec(m, x) => {
                let gm = self.push(Op::Outer(g, x));
                let gx = self.push(Op::MatTVec(m, g));
                vec![(m, gm), (x, gx)]
            }
            Op::MatTVec(m, v) => {
                let gm = self.push(Op::Outer(v, g));
                let gv = self.push(Op::MatVec(m, g));
                vec![(m, gm), (v, gv)]
            }
            Op::Outer(a, b) => {
                let ga = self.push(Op::MatVec(g, b));
                let gb = self.push(Op::MatTVec(g, a));
                vec![(a, ga), (b, gb)]
            }
            Op::Relu(a) => {
                // derivative taken as 0 at exactly 0
                let mask: Vec<f64> = self.value(a).iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
                let shape = self.shape(a).to_vec();
                let mask = self.push_leaf(mask, shape, false);
                vec![(a, self.push(Op::Mul(g, mask)))]
            }
            Op::Softplus(a, beta) => {
                let s = self.push(Op::Sigmoid(a, beta));
                vec![(a, self.push(Op::Mul(g, s)))]
            }
            Op::Sigmoid(a, beta) => {
                let one_minus = self.affine(out, -1.0, 1.0);
                let ds = self.push(Op::Mul(out, one_minus));
                let ds = self.scale(ds, beta);
                vec![(a, self.push(Op::Mul(g, ds)))]
            }
            Op::Sqrt(a) => {
                let half = self.scale(g, 0.5);
                vec![(a, self.push(Op::Div(half, out)))]
            }
            Op::Sum(a) => {
                let shape = self.shape(a).to_vec();
                vec![(a, self.push(Op::Broadcast(g, shape)))]
            }
            Op::Broadcast(a, _) => vec![(a, self.push(Op::Sum(g)))],
            Op::Dot(a, b) => {
                let shape = self.shape(a).to_vec();
                let gb_ = self.push(Op::Broadcast(g, shape));
                let ga = self.push(Op::Mul(gb_, b));
                let gb = self.push(Op::Mul(gb_, a));
                vec![(a, ga), (b, gb)]
            }
            Op::Softmax(a) => {
                let shape = self.shape(a).to_vec();
                let gy = self.push(Op::Dot(g, out));
                let gy = self.push(Op::Broadcast(gy, shape));
                let centered = self.push(Op::Sub(g, gy));
                vec![(a, self.push(Op::Mul(out, centered)))]
            }
            Op::LogSoftmax(a) => {
                let shape = self.shape(a).to_vec();
                let p = self.push(Op::Softmax(a));
                let total = self.push(Op::Sum(g));
                let total = self.push(Op::Broadcast(total, shape));
                let weighted = self.push(Op::Mul(p, total));
                vec![(a, self.push(Op::Sub(g, weighted)))]
            }
            Op::Index(a, i) => {
                let len = self.value(a).len();
                vec![(a, self.push(Op::Scatter(g, i, len)))]
            }
            Op::Scatter(a, i, _) => vec![(a, self.push(Op::Index(g, i)))],
            Op::Stack(ref items) => items
                .iter()
                .enumerate()
                .map(|(k, &v)| (v, self.push(Op::Index(g, k))))
                .collect(),
        }
    }
}

/// Central-difference gradient of a scalar function.
pub fn finite_diff_gradient<F>(f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    assert!(h > 0.0, "step must be positive");
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Four-point second-difference Hessian, symmetrized. Row-major `d × d`.
pub fn finite_diff_hessian<F>(f: F, x: &[f64], h: f64) -> Vec<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    assert!(h > 0.0, "step must be positive");
    let d = x.len();
    let mut probe = x.to_vec();
    let mut eval = |i: usize, si: f64, j: usize, sj: f64| {
        probe.copy_from_slice(x);
        probe[i] += si * h;
        probe[j] += sj * h;
        f(&probe)
    };
    let mut hess = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..d {
            let v = eval(i, 1.0, j, 1.0) - eval(i, 1.0, j, -1.0) - eval(i, -1.0, j, 1.0) + eval(i, -1.0, j, -1.0);
            hess[i][j] = v / (4.0 * h * h);
        }
    }
    for i in 0..d {
        for j in (i + 1)..d {
            let avg = 0.5 * (hess[i][j] + hess[j][i]);
            hess[i][j] = avg;
            hess[j][i] = avg;
        }
    }
    hess
}
