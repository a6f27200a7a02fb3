use alloc::vec;
use alloc::vec::Vec;

use super::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};
use crate::graphgen::DistanceMetric;
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    ConcatCols(Var, Var),
    GatherRows(Var, Vec<usize>),
    MaskedSelect(Var, Vec<usize>),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Square(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SumCols(Var),
    Extremum(Var, usize),
    Huber(Var, f64),
    LogSoftmaxRows(Var),
    PickCols(Var, Vec<usize>),
    PairDistSq(Var, Var, DistanceMetric),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::ConcatCols(..) => "concat_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::MaskedSelect(..) => "masked_select",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MeanRows(..) => "mean_rows",
            Op::SumCols(..) => "sum_cols",
            Op::Extremum(..) => "extremum",
            Op::Huber(..) => "huber",
            Op::LogSoftmaxRows(..) => "log_softmax_rows",
            Op::PickCols(..) => "pick_cols",
            Op::PairDistSq(..) => "pair_dist_sq",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// Leaves enter through [`Tape::param`] (gradient tracked) or
/// [`Tape::constant`]. Each primitive checks operand shapes and rejects
/// non-finite results. Only scalar-vs-tensor broadcasting is supported;
/// per-row bias and scaling use the explicit [`Tape::add_row`] and
/// [`Tape::mul_row`] primitives.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
    backward_order: Vec<usize>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_matrix() {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op,
            left: t.shape().to_vec(),
            right: vec![0, 0],
        })
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
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

    /// Drops every recorded node.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.consumed = false;
        self.backward_order.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v`
    /// tracks gradients.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let data = match self.grads.get(v.0) {
            Some(Some(g)) => g.clone(),
            _ => vec![0.0; node.value.numel()],
        };
        Some(Tensor::from_parts(node.value.shape().to_vec(), data))
    }

    /// Names of recorded primitives in forward order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    /// Node indices visited by the most recent backward pass.
    pub fn backward_order(&self) -> &[usize] {
        &self.backward_order
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.consumed = false;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
            .expect("tensor invariant guarantees finite values")
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
            .expect("tensor invariant guarantees finite values")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        require_matrix("matmul", av)?;
        require_matrix("matmul", bv)?;
        if av.cols() != bv.rows() {
            return Err(mismatch("matmul", av, bv));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![0.0; m * n];
        matmul_acc(av.data(), bv.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let value = if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_parts(av.shape().to_vec(), data)
        } else if bv.is_scalar() {
            let y = bv.data()[0];
            let data = av.data().iter().map(|&x| f(x, y)).collect();
            Tensor::from_parts(av.shape().to_vec(), data)
        } else if av.is_scalar() {
            let x = av.data()[0];
            let data = bv.data().iter().map(|&y| f(x, y)).collect();
            Tensor::from_parts(bv.shape().to_vec(), data)
        } else {
            return Err(mismatch(name, av, bv));
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    fn row_op(&mut self, a: Var, row: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        require_matrix(name, av)?;
        if rv.shape() != [1, av.cols()] {
            return Err(mismatch(name, av, rv));
        }
        let c = av.cols();
        let r = rv.data();
        let data = av.data().iter().enumerate().map(|(i, &x)| f(x, r[i % c])).collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, op, rg)
    }

    /// Adds a `1 x C` row to every row of an `N x C` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_op(a, row, "add_row", |x, y| x + y, Op::AddRow(a, row))
    }

    /// Multiplies every row of an `N x C` matrix elementwise by a `1 x C` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_op(a, row, "mul_row", |x, y| x * y, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.map(a, |x| x * c);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.map(a, |x| x + c);
        let rg = self.rg(a);
        self.push(value, Op::Offset(a), rg)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        require_matrix("concat_cols", av)?;
        require_matrix("concat_cols", bv)?;
        if av.rows() != bv.rows() {
            return Err(mismatch("concat_cols", av, bv));
        }
        let (n, ca, cb) = (av.rows(), av.cols(), bv.cols());
        let mut data = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            data.extend_from_slice(av.row_slice(i));
            data.extend_from_slice(bv.row_slice(i));
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_parts(vec![n, ca + cb], data), Op::ConcatCols(a, b), rg)
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let av = self.value(a);
        require_matrix("gather_rows", av)?;
        let (n, c) = (av.rows(), av.cols());
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                left: av.shape().to_vec(),
                right: vec![bad],
            });
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(av.row_slice(r));
        }
        let rg = self.rg(a);
        self.push(
            Tensor::from_parts(vec![rows.len(), c], data),
            Op::GatherRows(a, rows.to_vec()),
            rg,
        )
    }

    /// Selects the elements where `mask` is true, in row-major order, as a
    /// column.
    pub fn masked_select(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let av = self.value(a);
        if mask.len() != av.numel() {
            return Err(Error::ShapeMismatch {
                op: "masked_select",
                left: av.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let idx: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        let data = idx.iter().map(|&i| av.data()[i]).collect();
        let rg = self.rg(a);
        self.push(
            Tensor::from_parts(vec![idx.len(), 1], data),
            Op::MaskedSelect(a, idx),
            rg,
        )
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let av = self.value(a);
        Tensor::from_parts(av.shape().to_vec(), av.data().iter().map(|&x| f(x)).collect())
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.map(a, f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, libm::log, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, libm::exp, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, libm::sqrt, Op::Sqrt(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.numel() == 0 {
            return Err(Error::Empty("mean operand"));
        }
        let m = av.data().iter().sum::<f64>() / av.numel() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// Column means of an `N x C` matrix, as a `1 x C` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        require_matrix("mean_rows", av)?;
        let (n, c) = (av.rows(), av.cols());
        if n == 0 {
            return Err(Error::Empty("mean_rows operand"));
        }
        let mut out = vec![0.0; c];
        for i in 0..n {
            for (o, &x) in out.iter_mut().zip(av.row_slice(i)) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        let rg = self.rg(a);
        self.push(Tensor::from_parts(vec![1, c], out), Op::MeanRows(a), rg)
    }

    /// Row sums of an `N x C` matrix, as an `N x 1` column.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        require_matrix("sum_cols", av)?;
        let n = av.rows();
        let out = (0..n).map(|i| av.row_slice(i).iter().sum()).collect();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(vec![n, 1], out), Op::SumCols(a), rg)
    }

    /// Largest element; the gradient flows to the first maximizer.
    pub fn max(&mut self, a: Var) -> Result<Var> {
        self.extremum(a, |x, best| x > best)
    }

    /// Smallest element; the gradient flows to the first minimizer.
    pub fn min(&mut self, a: Var) -> Result<Var> {
        self.extremum(a, |x, best| x < best)
    }

    fn extremum(&mut self, a: Var, better: impl Fn(f64, f64) -> bool) -> Result<Var> {
        let data = self.value(a).data();
        if data.is_empty() {
            return Err(Error::Empty("extremum operand"));
        }
        let mut idx = 0;
        for (i, &x) in data.iter().enumerate().skip(1) {
            if better(x, data[idx]) {
                idx = i;
            }
        }
        let v = data[idx];
        let rg = self.rg(a);
        self.push(Tensor::scalar(v), Op::Extremum(a, idx), rg)
    }

    /// Elementwise Huber function of residuals.
    pub fn huber(&mut self, a: Var, delta: f64) -> Result<Var> {
        self.unary(a, |e| huber(e, delta), Op::Huber(a, delta))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        require_matrix("log_softmax_rows", av)?;
        let (n, c) = (av.rows(), av.cols());
        let mut out = Vec::with_capacity(n * c);
        for i in 0..n {
            let row = av.row_slice(i);
            let lse = log_sum_exp(row);
            out.extend(row.iter().map(|&x| x - lse));
        }
        let rg = self.rg(a);
        self.push(Tensor::from_parts(vec![n, c], out), Op::LogSoftmaxRows(a), rg)
    }

    /// Picks `a[i, cols[i]]` for every row, as an `N x 1` column.
    pub fn pick_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let av = self.value(a);
        require_matrix("pick_cols", av)?;
        if cols.len() != av.rows() || cols.iter().any(|&c| c >= av.cols()) {
            return Err(Error::ShapeMismatch {
                op: "pick_cols",
                left: av.shape().to_vec(),
                right: vec![cols.len()],
            });
        }
        let out = cols.iter().enumerate().map(|(i, &c)| av.get(i, c)).collect();
        let rg = self.rg(a);
        self.push(
            Tensor::from_parts(vec![cols.len(), 1], out),
            Op::PickCols(a, cols.to_vec()),
            rg,
        )
    }

    /// Squared distance between matching rows of two `E x D` matrices.
    pub fn pair_dist_sq(&mut self, a: Var, b: Var, metric: DistanceMetric) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        require_matrix("pair_dist_sq", av)?;
        if av.shape() != bv.shape() {
            return Err(mismatch("pair_dist_sq", av, bv));
        }
        let out = (0..av.rows())
            .map(|i| metric.sq_distance(av.row_slice(i), bv.row_slice(i)))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::from_parts(vec![av.rows(), 1], out),
            Op::PairDistSq(a, b, metric),
            rg,
        )
    }

    /// Reverse pass from a scalar loss. Gradients are readable through
    /// [`Tape::grad`] afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_order.clear();
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.backward_order.push(idx);
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        self.consumed = true;
        Ok(())
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[idx];
        let out = node.value.data();
        let val = |v: Var| &nodes[v.0].value;
        let rg = |v: Var| nodes[v.0].requires_grad;

        macro_rules! acc {
            ($v:expr, |$buf:ident| $body:expr) => {{
                let v: Var = $v;
                if rg(v) {
                    let len = nodes[v.0].value.numel();
                    accumulate(&mut grads[v.0], len, |$buf| $body);
                }
            }};
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                acc!(*a, |buf| matmul_bt_acc(g, bv.data(), buf, m, n, k));
                acc!(*b, |buf| matmul_at_acc(av.data(), g, buf, m, k, n));
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (v, s) in [(*a, 1.0), (*b, sign)] {
                    let broadcast = val(v).numel() != g.len();
                    acc!(v, |buf| if broadcast {
                        buf[0] += s * g.iter().sum::<f64>();
                    } else {
                        buf.iter_mut().zip(g).for_each(|(o, gi)| *o += s * gi);
                    });
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(node.op, Op::Div(..));
                let (av, bv) = (val(*a).data(), val(*b).data());
                let pick = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
                let a_b = av.len() != g.len();
                let b_b = bv.len() != g.len();
                // d/da: g * b  (div: g / b)
                acc!(*a, |buf| {
                    for (i, gi) in g.iter().enumerate() {
                        let y = pick(bv, i);
                        let c = if is_div { gi / y } else { gi * y };
                        if a_b {
                            buf[0] += c;
                        } else {
                            buf[i] += c;
                        }
                    }
                });
                // d/db: g * a  (div: -g * a / b^2)
                acc!(*b, |buf| {
                    for (i, gi) in g.iter().enumerate() {
                        let x = pick(av, i);
                        let c = if is_div {
                            let y = pick(bv, i);
                            -gi * x / (y * y)
                        } else {
                            gi * x
                        };
                        if b_b {
                            buf[0] += c;
                        } else {
                            buf[i] += c;
                        }
                    }
                });
            }
            Op::AddRow(a, r) => {
                let c = val(*r).numel();
                acc!(*a, |buf| buf.iter_mut().zip(g).for_each(|(o, gi)| *o += gi));
                acc!(*r, |buf| g.iter().enumerate().for_each(|(i, gi)| buf[i % c] += gi));
            }
            Op::MulRow(a, r) => {
                let (av, rv) = (val(*a).data(), val(*r).data());
                let c = rv.len();
                acc!(*a, |buf| g
                    .iter()
                    .enumerate()
                    .for_each(|(i, gi)| buf[i] += gi * rv[i % c]));
                acc!(*r, |buf| g
                    .iter()
                    .enumerate()
                    .for_each(|(i, gi)| buf[i % c] += gi * av[i]));
            }
            Op::Scale(a, c) => {
                acc!(*a, |buf| buf.iter_mut().zip(g).for_each(|(o, gi)| *o += c * gi));
            }
            Op::Offset(a) => {
                acc!(*a, |buf| buf.iter_mut().zip(g).for_each(|(o, gi)| *o += gi));
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (val(*a).cols(), val(*b).cols());
                let w = ca + cb;
                acc!(*a, |buf| for (i, row) in buf.chunks_mut(ca).enumerate() {
                    row.iter_mut().zip(&g[i * w..i * w + ca]).for_each(|(o, gi)| *o += gi);
                });
                acc!(*b, |buf| for (i, row) in buf.chunks_mut(cb).enumerate() {
                    row.iter_mut()
                        .zip(&g[i * w + ca..(i + 1) * w])
                        .for_each(|(o, gi)| *o += gi);
                });
            }
            Op::GatherRows(a, rows) => {
                let c = val(*a).cols();
                acc!(*a, |buf| for (k, &r) in rows.iter().enumerate() {
                    buf[r * c..(r + 1) * c]
                        .iter_mut()
                        .zip(&g[k * c..(k + 1) * c])
                        .for_each(|(o, gi)| *o += gi);
                });
            }
            Op::MaskedSelect(a, idx) => {
                acc!(*a, |buf| idx.iter().zip(g).for_each(|(&i, gi)| buf[i] += gi));
            }
            Op::Relu(a) => {
                let av = val(*a).data();
                acc!(*a, |buf| for i in 0..g.len() {
                    if av[i] > 0.0 {
                        buf[i] += g[i];
                    }
                });
            }
            Op::Sigmoid(a) => {
                acc!(*a, |buf| for i in 0..g.len() {
                    buf[i] += g[i] * out[i] * (1.0 - out[i]);
                });
            }
            Op::Log(a) => {
                let av = val(*a).data();
                acc!(*a, |buf| for i in 0..g.len() {
                    buf[i] += g[i] / av[i];
                });
            }
            Op::Exp(a) => {
                acc!(*a, |buf| for i in 0..g.len() {
                    buf[i] += g[i] * out[i];
                });
            }
            Op::Square(a) => {
                let av = val(*a).data();
                acc!(*a, |buf| for i in 0..g.len() {
                    buf[i] += 2.0 * g[i] * av[i];
                });
            }
            Op::Sqrt(a) => {
                acc!(*a, |buf| for i in 0..g.len() {
                    // zero upstream gradient contributes nothing, even at sqrt(0)
                    if g[i] != 0.0 {
                        buf[i] += g[i] / (2.0 * out[i]);
                    }
                });
            }
            Op::Sum(a) => {
                acc!(*a, |buf| buf.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::Mean(a) => {
                let n = val(*a).numel() as f64;
                acc!(*a, |buf| buf.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::MeanRows(a) => {
                let (n, c) = (val(*a).rows(), val(*a).cols());
                acc!(*a, |buf| for (i, o) in buf.iter_mut().enumerate() {
                    *o += g[i % c] / n as f64;
                });
            }
            Op::SumCols(a) => {
                let c = val(*a).cols();
                acc!(*a, |buf| for (i, o) in buf.iter_mut().enumerate() {
                    *o += g[i / c];
                });
            }
            Op::Extremum(a, at) => {
                acc!(*a, |buf| buf[*at] += g[0]);
            }
            Op::Huber(a, delta) => {
                let av = val(*a).data();
                acc!(*a, |buf| for i in 0..g.len() {
                    buf[i] += g[i] * huber_grad(av[i], *delta);
                });
            }
            Op::LogSoftmaxRows(a) => {
                let c = val(*a).cols();
                acc!(
                    *a,
                    |buf| for (row_g, (row_o, row_b)) in g.chunks(c).zip(out.chunks(c).zip(buf.chunks_mut(c))) {
                        let gsum: f64 = row_g.iter().sum();
                        for j in 0..c {
                            row_b[j] += row_g[j] - libm::exp(row_o[j]) * gsum;
                        }
                    }
                );
            }
            Op::PickCols(a, cols) => {
                let c = val(*a).cols();
                acc!(*a, |buf| for (i, &col) in cols.iter().enumerate() {
                    buf[i * c + col] += g[i];
                });
            }
            Op::PairDistSq(a, b, metric) => {
                let (av, bv) = (val(*a), val(*b));
                let d = av.cols();
                let mut gu = vec![0.0; d];
                let mut gv = vec![0.0; d];
                let mut du = vec![0.0; av.numel()];
                let mut dv = vec![0.0; av.numel()];
                for i in 0..av.rows() {
                    if g[i] == 0.0 {
                        continue;
                    }
                    metric.sq_distance_grad(av.row_slice(i), bv.row_slice(i), &mut gu, &mut gv);
                    for j in 0..d {
                        du[i * d + j] = g[i] * gu[j];
                        dv[i * d + j] = g[i] * gv[j];
                    }
                }
                acc!(*a, |buf| buf.iter_mut().zip(&du).for_each(|(o, x)| *o += x));
                acc!(*b, |buf| buf.iter_mut().zip(&dv).for_each(|(o, x)| *o += x));
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub fn huber(e: f64, delta: f64) -> f64 {
    let a = e.abs();
    if a <= delta {
        0.5 * e * e
    } else {
        delta * (a - 0.5 * delta)
    }
}

fn huber_grad(e: f64, delta: f64) -> f64 {
    if e.abs() <= delta {
        e
    } else {
        delta * e.signum()
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + libm::log(row.iter().map(|&x| libm::exp(x - m)).sum::<f64>())
}
