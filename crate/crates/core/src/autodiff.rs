//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only arena: every operation pushes a node whose
//! parents have strictly smaller indices, so walking the arena backwards is a
//! topological order and each node is visited exactly once. A fresh graph is
//! built for every training step.
//!
//! Elementwise binary operations accept equal shapes or a one-element operand
//! (scalar broadcasting). Row-wise broadcasting is available through the
//! explicit [`Graph::add_row`] and [`Graph::mul_row`] operations.

use crate::eval::average_ranks;
use crate::error::{dim_err, DsclError, Result};
use crate::ranking::ordinal_ranks;
use crate::tensor::{gemm_nt, gemm_tn, Tensor};

/// Epsilon added under the square root of [`Graph::l2_norm_rows`].
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Relu,
    Tanh,
    Abs,
    Square,
    Sqrt,
    Scale(f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Tanh(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    Scale(Var, f64),
    AddScalar(Var),
    SumAll(Var),
    SumAxis(Var, usize),
    MeanAll(Var),
    MeanAxis(Var, usize),
    L2NormRows(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    SelectRow(Var, usize),
    SelectCol(Var, usize),
    NormalizeRows(Var),
    PairwiseSqDist(Var),
    PairwiseDist(Var),
    PairwiseDiff(Var),
    RankRows(Var, f64, Ties),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match *self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | MulRow(a, b) => {
                vec![a, b]
            }
            Transpose(a) | Relu(a) | Tanh(a) | Abs(a) | Square(a) | Sqrt(a) | Scale(a, _)
            | AddScalar(a) | SumAll(a) | SumAxis(a, _) | MeanAll(a) | MeanAxis(a, _)
            | L2NormRows(a) | SelectRow(a, _) | SelectCol(a, _) | NormalizeRows(a)
            | PairwiseSqDist(a) | PairwiseDist(a) | PairwiseDiff(a) | RankRows(a, _, _) => vec![a],
        }
    }
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// How [`Graph::rank_rows_with`] ranks equal entries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ties {
    /// Ties broken by index: a permutation of `0..B`.
    Ordinal,
    /// Tied entries share the mean of their ordinal ranks.
    Average,
}

impl Ties {
    fn ranks(self, v: &[f64]) -> Vec<f64> {
        match self {
            Ties::Ordinal => ordinal_ranks(v).into_iter().map(|x| x as f64).collect(),
            Ties::Average => average_ranks(v).into_iter().map(|x| x - 1.0).collect(),
        }
    }
}

/// Arena of nodes for one forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf; gradients are accumulated into it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward root with respect to `v`, if `v`
    /// participates in differentiation.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Clears all gradients so that `backward` may run again.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op) -> Var {
        let rg = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, rg)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // ---------------------------------------------------------------------
    // linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push_op(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return dim_err(format!("transpose needs a matrix, got {:?}", self.shape(a)));
        }
        let value = self.value(a).transpose();
        Ok(self.push_op(value, Op::Transpose(a)))
    }

    // ---------------------------------------------------------------------
    // elementwise

    /// Dispatches one of the elementwise operations. Binary operations read
    /// two arguments, unary ones read the first.
    pub fn elementwise(&mut self, op: Elementwise, args: &[Var]) -> Result<Var> {
        let arity = match op {
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul => 2,
            _ => 1,
        };
        if args.len() != arity {
            return Err(DsclError::Contract(format!(
                "{op:?} takes {arity} argument(s), got {}",
                args.len()
            )));
        }
        match op {
            Elementwise::Add => self.add(args[0], args[1]),
            Elementwise::Sub => self.sub(args[0], args[1]),
            Elementwise::Mul => self.mul(args[0], args[1]),
            Elementwise::Relu => Ok(self.relu(args[0])),
            Elementwise::Tanh => Ok(self.tanh(args[0])),
            Elementwise::Abs => Ok(self.abs(args[0])),
            Elementwise::Square => Ok(self.square(args[0])),
            Elementwise::Sqrt => self.sqrt(args[0]),
            Elementwise::Scale(c) => Ok(self.scale(args[0], c)),
        }
    }

    fn broadcast_binary(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let value = if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(av.shape().to_vec(), data)?
        } else if bv.len() == 1 {
            let y = bv.data()[0];
            av.map(|x| f(x, y))
        } else if av.len() == 1 {
            let x = av.data()[0];
            bv.map(|y| f(x, y))
        } else {
            return dim_err(format!(
                "cannot broadcast {:?} with {:?}",
                av.shape(),
                bv.shape()
            ));
        };
        Ok(self.push_op(value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push_op(value, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push_op(value, Op::Tanh(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        self.push_op(value, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        self.push_op(value, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(DsclError::Numeric("sqrt of a negative value".into()));
        }
        let value = self.value(a).map(f64::sqrt);
        Ok(self.push_op(value, Op::Sqrt(a)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| c * x);
        self.push_op(value, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.push_op(value, Op::AddScalar(a))
    }

    /// `x + row` with `row` (length `C`) added to every row of `x` (`R×C`).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let value = self.row_broadcast(x, row, |a, b| a + b)?;
        Ok(self.push_op(value, Op::AddRow(x, row)))
    }

    /// `x ⊙ row` with `row` multiplied into every row of `x`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let value = self.row_broadcast(x, row, |a, b| a * b)?;
        Ok(self.push_op(value, Op::MulRow(x, row)))
    }

    fn row_broadcast(&self, x: Var, row: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (xv, rv) = (self.value(x), self.value(row));
        let (r, c) = xv.dims2();
        if xv.shape().len() != 2 || rv.len() != c {
            return dim_err(format!(
                "row broadcast of {:?} against {:?}",
                rv.shape(),
                xv.shape()
            ));
        }
        let mut out = xv.data().to_vec();
        for i in 0..r {
            for (o, &b) in out[i * c..(i + 1) * c].iter_mut().zip(rv.data()) {
                *o = f(*o, b);
            }
        }
        Tensor::new(xv.shape().to_vec(), out)
    }

    // ---------------------------------------------------------------------
    // reductions

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push_op(value, Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.len().max(1) as f64);
        self.push_op(value, Op::MeanAll(a))
    }

    /// Sum of a matrix over `axis` (0 collapses rows, 1 collapses columns).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let value = self.reduce_axis(a, axis)?;
        Ok(self.push_op(value, Op::SumAxis(a, axis)))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let mut value = self.reduce_axis(a, axis)?;
        let n = self.value(a).shape()[axis] as f64;
        value.data_mut().iter_mut().for_each(|v| *v /= n);
        Ok(self.push_op(value, Op::MeanAxis(a, axis)))
    }

    fn reduce_axis(&self, a: Var, axis: usize) -> Result<Tensor> {
        let t = self.value(a);
        if t.shape().len() != 2 || axis > 1 {
            return dim_err(format!("axis {axis} is invalid for shape {:?}", t.shape()));
        }
        let (r, c) = t.dims2();
        let out = if axis == 0 {
            let mut s = vec![0.0; c];
            for i in 0..r {
                for (acc, &v) in s.iter_mut().zip(t.row(i)) {
                    *acc += v;
                }
            }
            s
        } else {
            (0..r).map(|i| t.row(i).iter().sum()).collect()
        };
        Ok(Tensor::vector(out))
    }

    /// Euclidean norm of every row, `sqrt(Σ x² + 1e-12)`.
    pub fn l2_norm_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return dim_err(format!("l2_norm_rows needs a matrix, got {:?}", t.shape()));
        }
        let norms = (0..t.rows())
            .map(|i| (t.row(i).iter().map(|x| x * x).sum::<f64>() + NORM_EPS).sqrt())
            .collect();
        Ok(self.push_op(Tensor::vector(norms), Op::L2NormRows(a)))
    }

    // ---------------------------------------------------------------------
    // indexing

    /// Row `i` of a matrix as a `1×C` matrix.
    pub fn select_row(&mut self, a: Var, i: usize) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 || i >= t.rows() {
            return dim_err(format!("row {i} out of range for {:?}", t.shape()));
        }
        let value = Tensor::matrix(1, t.cols(), t.row(i).to_vec())?;
        Ok(self.push_op(value, Op::SelectRow(a, i)))
    }

    /// Column `j` of a matrix as an `R×1` matrix.
    pub fn select_col(&mut self, a: Var, j: usize) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 || j >= t.cols() {
            return dim_err(format!("column {j} out of range for {:?}", t.shape()));
        }
        let value = Tensor::matrix(t.rows(), 1, t.column(j))?;
        Ok(self.push_op(value, Op::SelectCol(a, j)))
    }

    // ---------------------------------------------------------------------
    // geometry

    /// Scales each row to unit length. Rows whose norm is below
    /// [`ZERO_ROW_NORM`] are mapped to zero and receive zero gradient.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return dim_err(format!("normalize_rows needs a matrix, got {:?}", t.shape()));
        }
        let mut out = t.clone();
        let c = t.cols();
        for i in 0..t.rows() {
            let row = &mut out.data_mut()[i * c..(i + 1) * c];
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > ZERO_ROW_NORM {
                row.iter_mut().for_each(|x| *x /= n);
            } else {
                row.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        Ok(self.push_op(out, Op::NormalizeRows(a)))
    }

    /// `D[i,j] = ‖x_i − x_j‖²` over the rows of `x`.
    pub fn pairwise_sq_dist(&mut self, a: Var) -> Result<Var> {
        let value = pairwise(self.value(a), |d2| d2)?;
        Ok(self.push_op(value, Op::PairwiseSqDist(a)))
    }

    /// `D[i,j] = ‖x_i − x_j‖` over the rows of `x`; subgradient 0 where two
    /// rows coincide.
    pub fn pairwise_dist(&mut self, a: Var) -> Result<Var> {
        let value = pairwise(self.value(a), f64::sqrt)?;
        Ok(self.push_op(value, Op::PairwiseDist(a)))
    }

    /// `P[i,j] = c[j] − c[i]` for a column or vector `c` of length `B`.
    pub fn pairwise_diff(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2();
        if r != 1 && c != 1 {
            return dim_err(format!("pairwise_diff needs a vector, got {:?}", t.shape()));
        }
        let v = t.data();
        let b = v.len();
        let mut out = vec![0.0; b * b];
        for i in 0..b {
            for j in 0..b {
                out[i * b + j] = v[j] - v[i];
            }
        }
        Ok(self.push_op(Tensor::matrix(b, b, out)?, Op::PairwiseDiff(a)))
    }

    // ---------------------------------------------------------------------
    // ranking

    /// Ordinal ranks of every row (0 = smallest, ties broken by index) with
    /// the blackbox interpolation backward: for upstream `g` the gradient is
    /// `(rk(v + λ·g) − rk(v)) / λ`.
    pub fn rank_rows(&mut self, a: Var, lambda: f64) -> Result<Var> {
        self.rank_rows_with(a, lambda, Ties::Ordinal)
    }

    /// [`Graph::rank_rows`] with an explicit tie rule.
    pub fn rank_rows_with(&mut self, a: Var, lambda: f64, ties: Ties) -> Result<Var> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(DsclError::Contract(format!("λ must be positive, got {lambda}")));
        }
        let t = self.value(a);
        if !t.is_finite() {
            return Err(DsclError::Numeric("cannot rank non-finite values".into()));
        }
        let (r, c) = t.dims2();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            out.extend(ties.ranks(&t.data()[i * c..(i + 1) * c]));
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push_op(value, Op::RankRows(a, lambda, ties)))
    }

    // ---------------------------------------------------------------------
    // backward

    /// Populates gradients of every ancestor of the scalar `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(DsclError::Contract(
                "backward already ran on this graph; call zero_grad first".into(),
            ));
        }
        let rv = &self.nodes[root.0].value;
        if rv.len() != 1 {
            return Err(DsclError::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                rv.shape()
            )));
        }
        self.backward_done = true;
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let seed = Tensor::full(rv.shape(), 1.0);
        self.nodes[root.0].grad = Some(seed);

        for idx in (0..=root.0).rev() {
            let Some(upstream) = self.nodes[idx].grad.take() else {
                continue;
            };
            let op = self.nodes[idx].op.clone();
            for p in op.parents() {
                if p.0 >= idx {
                    return Err(DsclError::Graph(format!(
                        "node {idx} depends on later node {}; cycle",
                        p.0
                    )));
                }
            }
            let deltas = self.local_grads(idx, &op, &upstream)?;
            self.nodes[idx].grad = Some(upstream);
            for (p, delta) in deltas {
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                match &mut self.nodes[p.0].grad {
                    Some(g) => {
                        for (x, d) in g.data_mut().iter_mut().zip(delta.data()) {
                            *x += d;
                        }
                    }
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        // Nodes that require gradients but were not reached get zeros so the
        // gradient-shape invariant holds everywhere.
        for n in &mut self.nodes[..=root.0] {
            if n.requires_grad && n.grad.is_none() {
                n.grad = Some(Tensor::zeros(n.value.shape()));
            }
        }
        Ok(())
    }

    fn local_grads(&self, idx: usize, op: &Op, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let out = &self.nodes[idx].value;
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut res = Vec::with_capacity(2);
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (p, q) = av.dims2();
                let r = bv.cols();
                if rg(a) {
                    let mut ga = vec![0.0; p * q];
                    gemm_nt(g.data(), bv.data(), &mut ga, p, r, q);
                    res.push((a, Tensor::new(av.shape().to_vec(), ga)?));
                }
                if rg(b) {
                    let mut gb = vec![0.0; q * r];
                    gemm_tn(av.data(), g.data(), &mut gb, p, q, r);
                    res.push((b, Tensor::new(bv.shape().to_vec(), gb)?));
                }
            }
            Op::Transpose(a) => res.push((a, g.transpose())),
            Op::Add(a, b) => {
                res.push((a, unbroadcast(g.clone(), val(a))));
                res.push((b, unbroadcast(g.clone(), val(b))));
            }
            Op::Sub(a, b) => {
                res.push((a, unbroadcast(g.clone(), val(a))));
                res.push((b, unbroadcast(g.map(|x| -x), val(b))));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                if rg(a) {
                    res.push((a, unbroadcast(broadcast_mul(g, bv), av)));
                }
                if rg(b) {
                    res.push((b, unbroadcast(broadcast_mul(g, av), bv)));
                }
            }
            Op::Relu(a) => res.push((a, zip_map(g, val(a), |g, x| if x > 0.0 { g } else { 0.0 }))),
            Op::Tanh(a) => res.push((a, zip_map(g, out, |g, y| g * (1.0 - y * y)))),
            Op::Abs(a) => res.push((a, zip_map(g, val(a), |g, x| g * sign0(x)))),
            Op::Square(a) => res.push((a, zip_map(g, val(a), |g, x| 2.0 * g * x))),
            Op::Sqrt(a) => res.push((
                a,
                zip_map(g, out, |g, y| if y > 0.0 { g / (2.0 * y) } else { 0.0 }),
            )),
            Op::Scale(a, c) => res.push((a, g.map(|x| c * x))),
            Op::AddScalar(a) => res.push((a, g.clone())),
            Op::SumAll(a) => res.push((a, Tensor::full(val(a).shape(), g.item()))),
            Op::MeanAll(a) => {
                let n = val(a).len().max(1) as f64;
                res.push((a, Tensor::full(val(a).shape(), g.item() / n)));
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let av = val(a);
                let (r, c) = av.dims2();
                let scale = match op {
                    Op::MeanAxis(..) => 1.0 / av.shape()[axis] as f64,
                    _ => 1.0,
                };
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = scale * if axis == 0 { g.data()[j] } else { g.data()[i] };
                    }
                }
                res.push((a, Tensor::new(av.shape().to_vec(), d)?));
            }
            Op::L2NormRows(a) => {
                let av = val(a);
                let c = av.cols();
                let mut d = av.data().to_vec();
                for i in 0..av.rows() {
                    let k = g.data()[i] / out.data()[i];
                    d[i * c..(i + 1) * c].iter_mut().for_each(|x| *x *= k);
                }
                res.push((a, Tensor::new(av.shape().to_vec(), d)?));
            }
            Op::AddRow(x, row) => {
                res.push((x, g.clone()));
                if rg(row) {
                    let (r, c) = g.dims2();
                    let mut s = vec![0.0; c];
                    for i in 0..r {
                        for (acc, &v) in s.iter_mut().zip(g.row(i)) {
                            *acc += v;
                        }
                    }
                    res.push((row, Tensor::new(val(row).shape().to_vec(), s)?));
                }
            }
            Op::MulRow(x, row) => {
                let (xv, rv) = (val(x), val(row));
                let (r, c) = g.dims2();
                if rg(x) {
                    let mut d = g.data().to_vec();
                    for i in 0..r {
                        for (o, &b) in d[i * c..(i + 1) * c].iter_mut().zip(rv.data()) {
                            *o *= b;
                        }
                    }
                    res.push((x, Tensor::new(xv.shape().to_vec(), d)?));
                }
                if rg(row) {
                    let mut s = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            s[j] += g.data()[i * c + j] * xv.data()[i * c + j];
                        }
                    }
                    res.push((row, Tensor::new(rv.shape().to_vec(), s)?));
                }
            }
            Op::SelectRow(a, i) => {
                let av = val(a);
                let c = av.cols();
                let mut d = Tensor::zeros(av.shape());
                d.data_mut()[i * c..(i + 1) * c].copy_from_slice(g.data());
                res.push((a, d));
            }
            Op::SelectCol(a, j) => {
                let av = val(a);
                let mut d = Tensor::zeros(av.shape());
                for i in 0..av.rows() {
                    d.set(i, j, g.data()[i]);
                }
                res.push((a, d));
            }
            Op::NormalizeRows(a) => {
                let av = val(a);
                let c = av.cols();
                let mut d = vec![0.0; av.len()];
                for i in 0..av.rows() {
                    let x = av.row(i);
                    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n <= ZERO_ROW_NORM {
                        continue;
                    }
                    let y = out.row(i);
                    let gi = g.row(i);
                    let dot: f64 = y.iter().zip(gi).map(|(a, b)| a * b).sum();
                    for k in 0..c {
                        d[i * c + k] = (gi[k] - y[k] * dot) / n;
                    }
                }
                res.push((a, Tensor::new(av.shape().to_vec(), d)?));
            }
            Op::PairwiseSqDist(a) | Op::PairwiseDist(a) => {
                let av = val(a);
                let (b, k) = av.dims2();
                let squared = matches!(op, Op::PairwiseSqDist(_));
                let mut d = vec![0.0; b * k];
                for i in 0..b {
                    for j in 0..b {
                        if i == j {
                            continue;
                        }
                        let sym = g.data()[i * b + j] + g.data()[j * b + i];
                        let coef = if squared {
                            2.0 * sym
                        } else {
                            let dist = out.data()[i * b + j];
                            if dist > 0.0 {
                                sym / dist
                            } else {
                                0.0
                            }
                        };
                        if coef == 0.0 {
                            continue;
                        }
                        let (xi, xj) = (av.row(i), av.row(j));
                        for t in 0..k {
                            d[i * k + t] += coef * (xi[t] - xj[t]);
                        }
                    }
                }
                res.push((a, Tensor::new(av.shape().to_vec(), d)?));
            }
            Op::PairwiseDiff(a) => {
                let av = val(a);
                let b = av.len();
                let mut d = vec![0.0; b];
                for i in 0..b {
                    for j in 0..b {
                        let gij = g.data()[i * b + j];
                        d[j] += gij;
                        d[i] -= gij;
                    }
                }
                res.push((a, Tensor::new(av.shape().to_vec(), d)?));
            }
            Op::RankRows(a, lambda, ties) => {
                let av = val(a);
                let (r, c) = av.dims2();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let gi = &g.data()[i * c..(i + 1) * c];
                    if gi.iter().all(|&x| x == 0.0) {
                        continue;
                    }
                    let perturbed: Vec<f64> = av.data()[i * c..(i + 1) * c]
                        .iter()
                        .zip(gi)
                        .map(|(v, g)| v + lambda * g)
                        .collect();
                    let shifted = ties.ranks(&perturbed);
                    let base = &out.data()[i * c..(i + 1) * c];
                    for t in 0..c {
                        d[i * c + t] = (shifted[t] - base[t]) / lambda;
                    }
                }
                res.push((a, Tensor::new(av.shape().to_vec(), d)?));
            }
        }
        Ok(res)
    }
}

/// Rows with norm at or below this are treated as zero by
/// [`Graph::normalize_rows`].
pub const ZERO_ROW_NORM: f64 = 1e-12;

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn zip_map(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(x.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::new(g.shape().to_vec(), data).expect("same shape")
}

fn broadcast_mul(g: &Tensor, other: &Tensor) -> Tensor {
    if other.len() == 1 {
        let y = other.data()[0];
        g.map(|x| x * y)
    } else {
        zip_map(g, other, |a, b| a * b)
    }
}

/// Sums `grad` down to the shape of a scalar-broadcast operand.
fn unbroadcast(grad: Tensor, target: &Tensor) -> Tensor {
    if grad.shape() == target.shape() {
        grad
    } else {
        Tensor::full(target.shape(), grad.sum())
    }
}

fn pairwise(t: &Tensor, f: impl Fn(f64) -> f64) -> Result<Tensor> {
    if t.shape().len() != 2 {
        return dim_err(format!("pairwise distances need a matrix, got {:?}", t.shape()));
    }
    let b = t.rows();
    let mut out = vec![0.0; b * b];
    for i in 0..b {
        for j in (i + 1)..b {
            let d2: f64 = t.row(i).iter().zip(t.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
            let v = f(d2);
            out[i * b + j] = v;
            out[j * b + i] = v;
        }
    }
    Tensor::matrix(b, b, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::identity(2));
        let b = g.constant(Tensor::from_rows(&[[3.0], [4.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn relu_forward() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn abs_backward_uses_sign() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![-3.0, 5.0, 0.0]));
        let y = g.abs(x);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[-1.0, 1.0, 0.0]);
    }

    #[test]
    fn non_broadcastable_shapes_fail() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 2]));
        let b = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(g.add(a, b), Err(DsclError::Dimension(_))));
        let s = g.constant(Tensor::scalar(2.0));
        let c = g.mul(a, s).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 2]);
    }

    #[test]
    fn reductions() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[[3.0, 4.0]]));
        let n = g.l2_norm_rows(x).unwrap();
        assert!((g.value(n).item() - 5.0).abs() < 1e-12);

        let m = g.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
        let s = g.sum_axis(m, 0).unwrap();
        assert_eq!(g.value(s).data(), &[4.0, 6.0]);
        assert!(g.sum_axis(m, 2).is_err());
    }

    #[test]
    fn mean_backward_spreads_evenly() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]));
        let m = g.mean(x);
        g.backward(m).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn sum_root_gives_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_rows(&[[1.0, -2.0, 3.0], [0.5, 0.0, 9.0]]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let mut g = Graph::new();
        let data = vec![0.3, -1.2, 2.5];
        let x = g.param(Tensor::vector(data.clone()));
        let sq = g.square(x);
        let s = g.sum(sq);
        let h = g.scale(s, 0.5);
        g.backward(h).unwrap();
        assert!(close(g.grad(x).unwrap().data(), &data));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.5, -2.0]));
        let xx = g.mul(x, x).unwrap();
        let s = g.sum(xx);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[3.0, -4.0]);
    }

    #[test]
    fn backward_twice_is_an_error_until_reset() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(DsclError::Contract(_))));
        g.zero_grad();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(DsclError::Contract(_))));
    }

    #[test]
    fn rank_rows_forward_and_ties() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::from_rows(&[[0.1, 0.5, 0.3], [7.0, 7.0, 7.0]]));
        let r = g.rank_rows(v, 0.5).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 2.0, 1.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn rank_rows_zero_upstream_gives_zero_grad() {
        let mut g = Graph::new();
        let v = g.param(Tensor::vector(vec![0.1, 0.5, 0.3]));
        let r = g.rank_rows(v, 0.5).unwrap();
        let z = g.scale(r, 0.0);
        let s = g.sum(z);
        g.backward(s).unwrap();
        assert_eq!(g.grad(v).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn normalize_zero_row_stays_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_rows(&[[0.0, 0.0], [3.0, 4.0]]));
        let y = g.normalize_rows(x).unwrap();
        assert!(close(g.value(y).data(), &[0.0, 0.0, 0.6, 0.8]));
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(&g.grad(x).unwrap().data()[..2], &[0.0, 0.0]);
    }

    #[test]
    fn elementwise_dispatch_checks_arity() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![4.0]));
        assert!(g.elementwise(Elementwise::Add, &[x]).is_err());
        let y = g.elementwise(Elementwise::Sqrt, &[x]).unwrap();
        assert_eq!(g.value(y).data(), &[2.0]);
    }
}
