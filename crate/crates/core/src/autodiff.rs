//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive as it is evaluated. Nodes are appended
//! in evaluation order, so reverse append order is a valid topological order
//! for the backward sweep. Tapes are built fresh for each objective
//! evaluation and consumed by [`Tape::backward`].
//!
//! Derivatives of primitives are themselves expressed with primitives where a
//! caller needs them inside a graph (see [`Tape::activation_derivative`]),
//! which is what makes input-gradient penalties differentiable in the
//! parameters.

use crate::error::{contract, Error, Result};
use crate::kernels::RbfPlan;
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, pairwise_sqdist, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Elu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
        }
    }

    pub fn second_derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => 0.0,
            Activation::Tanh => {
                let t = x.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            Activation::Elu => {
                if x > 0.0 {
                    0.0
                } else {
                    x.exp()
                }
            }
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Elu => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Elu),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Square(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    SumCols(Var),
    MaxScalar(Var, f64),
    MinScalar(Var, f64),
    Act(Var, Activation),
    ActDeriv(Var, Activation),
    Transpose(Var),
    SqDist(Var, Var),
    /// Source distances and the elementwise derivative `Σ −γ_q exp(−γ_q d)`.
    RbfMixture(Var, Tensor),
    VStack(Var, Var),
    Trace(Var),
    SliceRows(Var, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Append-only record of evaluated primitives.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every tracked node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` did not influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        let (r, c) = self.shapes[v.0];
        self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(r, c))
    }
}

fn broadcast_shape(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| match (x, y) {
        _ if x == y => Some(x),
        (1, _) => Some(y),
        (_, 1) => Some(x),
        _ => None,
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::Dimension {
            op,
            left: a,
            right: b,
        }),
    }
}

fn broadcast_zip(a: &Tensor, b: &Tensor, shape: (usize, usize), f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    if a.shape() == shape && br == 1 && bc == ac {
        // Row vector against a matrix, the bias-add case.
        let mut out = a.clone();
        for row in out.data_mut().chunks_exact_mut(ac) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o = f(*o, bv);
            }
        }
        return out;
    }
    Tensor::from_fn(shape.0, shape.1, |i, j| {
        f(a.get(i % ar, j % ac), b.get(i % br, j % bc))
    })
}

/// Sums `g` down to `shape` over the broadcast dimensions.
fn reduce_to(g: Tensor, shape: (usize, usize)) -> Tensor {
    if g.shape() == shape {
        return g;
    }
    if shape == (1, g.cols()) {
        return g.column_sums();
    }
    let mut out = Tensor::zeros(shape.0, shape.1);
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let (oi, oj) = (i % shape.0, j % shape.1);
            let v = out.get(oi, oj) + g.get(i, j);
            out.set(oi, oj, v);
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tracked leaf (a parameter or an input whose gradient is wanted).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Registers an untracked leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push_raw(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric { op: name });
        }
        let tracked = parents.iter().any(|p| self.nodes[p.0].tracked);
        Ok(self.push_raw(value, op, tracked))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(Error::Dimension {
                op: "matmul",
                left: va.shape(),
                right: vb.shape(),
            });
        }
        let out = matmul_nn(va, vb);
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// Elementwise sum with broadcasting of unit dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = broadcast_shape("add", self.shape(a), self.shape(b))?;
        let out = broadcast_zip(self.value(a), self.value(b), shape, |x, y| x + y);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = broadcast_shape("sub", self.shape(a), self.shape(b))?;
        let out = broadcast_zip(self.value(a), self.value(b), shape, |x, y| x - y);
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product with broadcasting of unit dimensions.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = broadcast_shape("mul", self.shape(a), self.shape(b))?;
        let out = broadcast_zip(self.value(a), self.value(b), shape, |x, y| x * y);
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| -x);
        self.push("neg", out, Op::Neg(a), &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| c * x);
        self.push("scale", out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + c);
        self.push("add_scalar", out, Op::AddScalar(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push("exp", out, Op::Exp(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * x);
        self.push("square", out, Op::Square(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(Error::Numeric { op: "sqrt" });
        }
        let out = self.value(a).map(f64::sqrt);
        self.push("sqrt", out, Op::Sqrt(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).mean());
        self.push("mean", out, Op::Mean(a), &[a])
    }

    /// Sums each row: `n×m → n×1`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let out = Tensor::new(v.rows(), 1, v.iter_rows().map(|r| r.iter().sum()).collect())?;
        self.push("sum_rows", out, Op::SumRows(a), &[a])
    }

    /// Sums each column: `n×m → 1×m`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let mut out = vec![0.0; v.cols()];
        for r in v.iter_rows() {
            for (o, x) in out.iter_mut().zip(r) {
                *o += x;
            }
        }
        self.push("sum_cols", Tensor::row_vector(out), Op::SumCols(a), &[a])
    }

    pub fn mean_cols(&mut self, a: Var) -> Result<Var> {
        let n = self.shape(a).0 as f64;
        let s = self.sum_cols(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn max_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(c));
        self.push("max_scalar", out, Op::MaxScalar(a, c), &[a])
    }

    pub fn min_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x.min(c));
        self.push("min_scalar", out, Op::MinScalar(a, c), &[a])
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Result<Var> {
        let out = self.value(a).map(|x| act.apply(x));
        self.push("activation", out, Op::Act(a, act), &[a])
    }

    /// Elementwise `act'(a)`, itself differentiable.
    pub fn activation_derivative(&mut self, a: Var, act: Activation) -> Result<Var> {
        let out = self.value(a).map(|x| act.derivative(x));
        self.push("activation_derivative", out, Op::ActDeriv(a, act), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    /// Matrix of squared distances between rows of `a` and rows of `b`.
    pub fn pairwise_sqdist(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = if a == b {
            let v = self.value(a);
            pairwise_sqdist(v, v)?
        } else {
            pairwise_sqdist(self.value(a), self.value(b))?
        };
        self.push("pairwise_sqdist", out, Op::SqDist(a, b), &[a, b])
    }

    /// `Σ_q exp(−γ_q · d)` elementwise over a distance matrix.
    pub fn rbf_mixture(&mut self, d: Var, gammas: &[f64]) -> Result<Var> {
        let plan = RbfPlan::new(gammas);
        let src = self.value(d);
        let mut out = Tensor::zeros(src.rows(), src.cols());
        let mut slope = Tensor::zeros(src.rows(), src.cols());
        plan.fill(src.data(), out.data_mut(), Some(slope.data_mut()));
        self.push("rbf_mixture", out, Op::RbfMixture(d, slope), &[d])
    }

    pub fn vstack(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).vstack(self.value(b))?;
        self.push("vstack", out, Op::VStack(a, b), &[a, b])
    }

    pub fn trace(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.rows() != v.cols() {
            return Err(contract(format!("trace of non-square {:?}", v.shape())));
        }
        let out = Tensor::scalar((0..v.rows()).map(|i| v.get(i, i)).sum());
        self.push("trace", out, Op::Trace(a), &[a])
    }

    /// Rows `start..end` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a);
        if start > end || end > v.rows() {
            return Err(contract(format!("row slice {start}..{end} of {} rows", v.rows())));
        }
        let idx: Vec<usize> = (start..end).collect();
        let out = v.select_rows(&idx);
        self.push("slice_rows", out, Op::SliceRows(a, start), &[a])
    }

    /// Reverse sweep from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let shapes: Vec<_> = self.nodes.iter().map(|nd| nd.value.shape()).collect();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        if !self.nodes[loss.0].tracked {
            return Ok(Gradients { grads, shapes });
        }
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.tracked {
                continue;
            }
            if let Op::Leaf = node.op {
                // Leaves keep their gradient.
                grads[id] = Some(g);
                continue;
            }
            let nodes = &self.nodes;
            let val = |v: Var| &nodes[v.0].value;
            let mut acc = |v: Var, delta: Tensor| {
                if !nodes[v.0].tracked {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&delta),
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    acc(*a, matmul_nt(&g, val(*b)));
                    acc(*b, matmul_tn(val(*a), &g));
                }
                Op::Add(a, b) => {
                    acc(*a, reduce_to(g.clone(), val(*a).shape()));
                    acc(*b, reduce_to(g, val(*b).shape()));
                }
                Op::Sub(a, b) => {
                    acc(*a, reduce_to(g.clone(), val(*a).shape()));
                    acc(*b, reduce_to(g.map(|x| -x), val(*b).shape()));
                }
                Op::Mul(a, b) => {
                    let shape = g.shape();
                    let ga = broadcast_zip(&g, val(*b), shape, |x, y| x * y);
                    let gb = broadcast_zip(&g, val(*a), shape, |x, y| x * y);
                    acc(*a, reduce_to(ga, val(*a).shape()));
                    acc(*b, reduce_to(gb, val(*b).shape()));
                }
                Op::Neg(a) => acc(*a, g.map(|x| -x)),
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(*a, g.map(|x| c * x));
                }
                Op::AddScalar(a) => acc(*a, g),
                Op::Exp(a) => acc(*a, g.zip_map(&node.value, |x, e| x * e)),
                Op::Square(a) => acc(*a, g.zip_map(val(*a), |x, v| 2.0 * v * x)),
                Op::Sqrt(a) => acc(*a, g.zip_map(&node.value, |x, s| x / (2.0 * s))),
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, Tensor::filled(r, c, g.item()));
                }
                Op::Mean(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, Tensor::filled(r, c, g.item() / (r * c) as f64));
                }
                Op::SumRows(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, Tensor::from_fn(r, c, |i, _| g.get(i, 0)));
                }
                Op::SumCols(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, Tensor::from_fn(r, c, |_, j| g.get(0, j)));
                }
                Op::MaxScalar(a, c) => {
                    let c = *c;
                    acc(*a, g.zip_map(val(*a), |x, v| if v > c { x } else { 0.0 }));
                }
                Op::MinScalar(a, c) => {
                    let c = *c;
                    acc(*a, g.zip_map(val(*a), |x, v| if v < c { x } else { 0.0 }));
                }
                Op::Act(a, act) => {
                    let act = *act;
                    acc(*a, g.zip_map(val(*a), |x, v| x * act.derivative(v)));
                }
                Op::ActDeriv(a, act) => {
                    let act = *act;
                    acc(*a, g.zip_map(val(*a), |x, v| x * act.second_derivative(v)));
                }
                Op::Transpose(a) => acc(*a, g.transpose()),
                Op::SqDist(a, b) => {
                    // d_ij = ‖a_i − b_j‖², so ∂/∂a_i = 2 Σ_j g_ij (a_i − b_j).
                    let (va, vb) = (val(*a), val(*b));
                    let row_sums: Vec<f64> = g.iter_rows().map(|r| r.iter().sum()).collect();
                    let mut ga = matmul_nn(&g, vb);
                    for i in 0..va.rows() {
                        let rs = row_sums[i];
                        for (o, &x) in ga.row_mut(i).iter_mut().zip(va.row(i)) {
                            *o = 2.0 * (x * rs - *o);
                        }
                    }
                    let mut col_sums = vec![0.0; g.cols()];
                    for r in g.iter_rows() {
                        for (c, x) in col_sums.iter_mut().zip(r) {
                            *c += x;
                        }
                    }
                    let mut gb = matmul_tn(&g, va);
                    for j in 0..vb.rows() {
                        let cs = col_sums[j];
                        for (o, &x) in gb.row_mut(j).iter_mut().zip(vb.row(j)) {
                            *o = 2.0 * (x * cs - *o);
                        }
                    }
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::RbfMixture(d, slope) => {
                    acc(*d, g.zip_map(slope, |x, s| x * s));
                }
                Op::VStack(a, b) => {
                    let ra = val(*a).rows();
                    let rb = val(*b).rows();
                    let top: Vec<usize> = (0..ra).collect();
                    let bottom: Vec<usize> = (ra..ra + rb).collect();
                    acc(*a, g.select_rows(&top));
                    acc(*b, g.select_rows(&bottom));
                }
                Op::Trace(a) => {
                    let n = val(*a).rows();
                    let s = g.item();
                    acc(*a, Tensor::from_fn(n, n, |i, j| if i == j { s } else { 0.0 }));
                }
                Op::SliceRows(a, start) => {
                    let (r, c) = val(*a).shape();
                    let mut full = Tensor::zeros(r, c);
                    for i in 0..g.rows() {
                        full.row_mut(start + i).copy_from_slice(g.row(i));
                    }
                    acc(*a, full);
                }
            }
        }
        Ok(Gradients { grads, shapes })
    }
}
