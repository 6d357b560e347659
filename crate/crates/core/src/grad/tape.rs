//! Tape-based reverse-mode differentiation over [`FeatureMatrix`] values.
//!
//! Operations are appended to a [`Tape`] as they are evaluated; every node
//! only refers to nodes recorded before it, so the tape order is already a
//! topological order and [`Tape::backward`] walks it once in reverse.
//! Scalars are `1 x 1` matrices.

use crate::error::{Error, Result};
use crate::numeric::FeatureMatrix;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    SubRow(Var, Var),
    MulRow(Var, Var),
    DivRow(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Log(Var),
    Square(Var),
    ConcatCols(Var, Var),
    RowNormalize(Var),
    LogSoftmaxRows(Var),
    MeanNegDiag(Var),
    ColMean(Var),
    ColStd(Var, f64),
    MeanAll(Var),
    Sum(Var),
    StopGrad,
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match *self {
            Leaf => vec![],
            MatMul(a, b)
            | Add(a, b)
            | Sub(a, b)
            | Mul(a, b)
            | Div(a, b)
            | AddRow(a, b)
            | SubRow(a, b)
            | MulRow(a, b)
            | DivRow(a, b)
            | ConcatCols(a, b) => vec![a, b],
            Transpose(a)
            | Scale(a, _)
            | Offset(a)
            | Tanh(a)
            | Log(a)
            | Square(a)
            | RowNormalize(a)
            | LogSoftmaxRows(a)
            | MeanNegDiag(a)
            | ColMean(a)
            | ColStd(a, _)
            | MeanAll(a)
            | Sum(a) => vec![a],
            // gradient stops here
            StopGrad => vec![],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: FeatureMatrix,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Single-threaded; build one per evaluation.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Values substituted for `stop_grad` outputs, in recording order.
    pinned: Option<std::collections::VecDeque<FeatureMatrix>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<FeatureMatrix>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if any flowed into it.
    pub fn get(&self, v: Var) -> Option<&FeatureMatrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
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

    /// Trainable leaf.
    pub fn param(&mut self, value: FeatureMatrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: FeatureMatrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.constant(FeatureMatrix::scalar(value))
    }

    pub fn value(&self, v: Var) -> &FeatureMatrix {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let m = self.value(v);
        m.scalar_value().ok_or(Error::NotScalar {
            rows: m.rows(),
            cols: m.cols(),
        })
    }

    fn push(&mut self, value: FeatureMatrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::Cycle {
                node: self.nodes.len(),
                parent: v.0,
            })
        }
    }

    fn record(&mut self, value: FeatureMatrix, op: Op) -> Result<Var> {
        let parents = op.parents();
        for &p in &parents {
            self.check(p)?;
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let v = self.value(a).matmul(self.value(b))?;
        self.record(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).transpose();
        self.record(v, Op::Transpose(a))
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let v = self.value(a).zip_map(self.value(b), f)?;
        self.record(v, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    fn row_op(&mut self, a: Var, row: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.check(a)?;
        self.check(row)?;
        let v = self.value(a).zip_row(self.value(row), f)?;
        self.record(v, op)
    }

    /// `a + row`, broadcasting a `1 x D` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_op(a, row, Op::AddRow(a, row), |x, r| x + r)
    }

    pub fn sub_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_op(a, row, Op::SubRow(a, row), |x, r| x - r)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_op(a, row, Op::MulRow(a, row), |x, r| x * r)
    }

    pub fn div_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_op(a, row, Op::DivRow(a, row), |x, r| x / r)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).map(|x| c * x);
        self.record(v, Op::Scale(a, c))
    }

    /// `a + c` elementwise.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).map(|x| x + c);
        self.record(v, Op::Offset(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).map(f64::tanh);
        self.record(v, Op::Tanh(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).map(f64::ln);
        self.record(v, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).map(|x| x * x);
        self.record(v, Op::Square(a))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let v = self.value(a).concat_cols(self.value(b))?;
        self.record(v, Op::ConcatCols(a, b))
    }

    /// Scales every row to unit Euclidean norm. Zero rows are an error.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let n = crate::numeric::norm(row);
            if n == 0.0 {
                return Err(Error::ZeroNorm {
                    context: format!("row {r}"),
                });
            }
            row.iter_mut().for_each(|x| *x /= n);
        }
        self.record(v, Op::RowNormalize(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let src = self.value(a);
        let mut v = src.clone();
        for r in 0..src.rows() {
            let out = crate::numeric::log_softmax_row(src.row(r))?;
            v.row_mut(r).copy_from_slice(&out);
        }
        self.record(v, Op::LogSoftmaxRows(a))
    }

    /// `-(1/B) * sum_i a[i, i]` for a square `B x B` input.
    pub fn mean_neg_diag(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let m = self.value(a);
        if m.rows() != m.cols() {
            return Err(Error::mismatch(
                "diagonal mean",
                "square matrix",
                m.shape_str(),
            ));
        }
        let n = m.rows();
        let s: f64 = (0..n).map(|i| m.get(i, i)).sum();
        self.record(FeatureMatrix::scalar(-s / n as f64), Op::MeanNegDiag(a))
    }

    /// Column means as a `1 x D` row.
    pub fn col_mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let m = self.value(a);
        let n = m.rows() as f64;
        let v = m.col_sums().map(|s| s / n);
        self.record(v, Op::ColMean(a))
    }

    /// Population column standard deviation, floored at `floor`. The floored
    /// entries carry zero gradient.
    pub fn col_std(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.check(a)?;
        let m = self.value(a);
        if m.rows() < 2 {
            return Err(Error::DegenerateBatch { rows: m.rows() });
        }
        let v = raw_col_std(m).map(|s| s.max(floor));
        self.record(v, Op::ColStd(a, floor))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = FeatureMatrix::scalar(self.value(a).mean());
        self.record(v, Op::MeanAll(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = FeatureMatrix::scalar(self.value(a).sum());
        self.record(v, Op::Sum(a))
    }

    /// Same value, no gradient flow back into `a`.
    pub fn stop_grad(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = match self.pinned.as_mut().and_then(|q| q.pop_front()) {
            Some(p) => {
                if p.shape() != self.value(a).shape() {
                    return Err(Error::mismatch(
                        "pinned stop_grad value",
                        self.value(a).shape_str(),
                        p.shape_str(),
                    ));
                }
                p
            }
            None => self.value(a).clone(),
        };
        Ok(self.push(v, Op::StopGrad, false))
    }

    /// A tape whose `stop_grad` calls return `values` (in order) instead of
    /// their input. Finite differences on such a tape see detached
    /// subexpressions as constants, which is what the analytic gradient sees.
    pub fn with_pinned(values: Vec<FeatureMatrix>) -> Self {
        Self {
            nodes: Vec::new(),
            pinned: Some(values.into()),
        }
    }

    /// Outputs of every `stop_grad` call so far, in recording order.
    pub fn detached_values(&self) -> Vec<FeatureMatrix> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::StopGrad))
            .map(|n| n.value.clone())
            .collect()
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let lv = self.value(loss);
        if lv.scalar_value().is_none() {
            return Err(Error::NotScalar {
                rows: lv.rows(),
                cols: lv.cols(),
            });
        }
        let mut grads: Vec<Option<FeatureMatrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(FeatureMatrix::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for p in node.op.parents() {
                if p.0 >= i {
                    return Err(Error::Cycle {
                        node: i,
                        parent: p.0,
                    });
                }
            }
            for (p, contrib) in self.local_grads(i, &g)? {
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                match &mut grads[p.0] {
                    Some(acc) => acc.axpy(1.0, &contrib)?,
                    slot => *slot = Some(contrib),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Contributions of node `i`'s upstream gradient `g` to each parent.
    fn local_grads(&self, i: usize, g: &FeatureMatrix) -> Result<Vec<(Var, FeatureMatrix)>> {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let out = match node.op {
            Op::Leaf | Op::StopGrad => vec![],
            Op::MatMul(a, b) => vec![
                (a, g.matmul(&val(b).transpose())?),
                (b, val(a).transpose().matmul(g)?),
            ],
            Op::Transpose(a) => vec![(a, g.transpose())],
            Op::Add(a, b) => vec![(a, g.clone()), (b, g.clone())],
            Op::Sub(a, b) => vec![(a, g.clone()), (b, g.map(|x| -x))],
            Op::Mul(a, b) => vec![
                (a, g.zip_map(val(b), |g, y| g * y)?),
                (b, g.zip_map(val(a), |g, x| g * x)?),
            ],
            Op::Div(a, b) => {
                let da = g.zip_map(val(b), |g, d| g / d)?;
                let db = g
                    .zip_map(y, |g, q| g * q)?
                    .zip_map(val(b), |gq, d| -gq / d)?;
                vec![(a, da), (b, db)]
            }
            Op::AddRow(a, r) => vec![(a, g.clone()), (r, g.col_sums())],
            Op::SubRow(a, r) => vec![(a, g.clone()), (r, g.col_sums().map(|x| -x))],
            Op::MulRow(a, r) => vec![
                (a, g.zip_row(val(r), |g, r| g * r)?),
                (r, g.zip_map(val(a), |g, x| g * x)?.col_sums()),
            ],
            Op::DivRow(a, r) => {
                let da = g.zip_row(val(r), |g, r| g / r)?;
                // d(x/r)/dr = -(x/r)/r
                let dr = g
                    .zip_map(y, |g, q| g * q)?
                    .zip_row(val(r), |gq, r| -gq / r)?
                    .col_sums();
                vec![(a, da), (r, dr)]
            }
            Op::Scale(a, c) => vec![(a, g.map(|x| c * x))],
            Op::Offset(a) => vec![(a, g.clone())],
            Op::Tanh(a) => vec![(a, g.zip_map(y, |g, t| g * (1.0 - t * t))?)],
            Op::Log(a) => vec![(a, g.zip_map(val(a), |g, x| g / x)?)],
            Op::Square(a) => vec![(a, g.zip_map(val(a), |g, x| 2.0 * g * x)?)],
            Op::ConcatCols(a, b) => {
                let ca = val(a).cols();
                let cb = val(b).cols();
                let ga = FeatureMatrix::from_fn(g.rows(), ca, |r, c| g.get(r, c));
                let gb = FeatureMatrix::from_fn(g.rows(), cb, |r, c| g.get(r, ca + c));
                vec![(a, ga), (b, gb)]
            }
            Op::RowNormalize(a) => {
                // y = x/|x|  =>  dx = (g - (g.y) y) / |x|
                let x = val(a);
                let mut dx = g.clone();
                for r in 0..x.rows() {
                    let n = crate::numeric::norm(x.row(r));
                    let yr = y.row(r);
                    let gy = crate::numeric::dot(g.row(r), yr);
                    for (d, &yv) in dx.row_mut(r).iter_mut().zip(yr) {
                        *d = (*d - gy * yv) / n;
                    }
                }
                vec![(a, dx)]
            }
            Op::LogSoftmaxRows(a) => {
                // dx = g - softmax * rowsum(g)
                let mut dx = g.clone();
                for r in 0..y.rows() {
                    let gs: f64 = g.row(r).iter().sum();
                    for (d, &ly) in dx.row_mut(r).iter_mut().zip(y.row(r)) {
                        *d -= ly.exp() * gs;
                    }
                }
                vec![(a, dx)]
            }
            Op::MeanNegDiag(a) => {
                let n = val(a).rows();
                let gs = g.as_slice()[0];
                let dx =
                    FeatureMatrix::from_fn(n, n, |r, c| if r == c { -gs / n as f64 } else { 0.0 });
                vec![(a, dx)]
            }
            Op::ColMean(a) => {
                let x = val(a);
                let n = x.rows() as f64;
                let dx = FeatureMatrix::from_fn(x.rows(), x.cols(), |_, c| g.get(0, c) / n);
                vec![(a, dx)]
            }
            Op::ColStd(a, floor) => {
                let x = val(a);
                let n = x.rows() as f64;
                let mean = x.col_sums().map(|s| s / n);
                let raw = raw_col_std(x);
                // ds/dx_b = (x_b - m) / (n s); the mean term cancels.
                let dx = FeatureMatrix::from_fn(x.rows(), x.cols(), |r, c| {
                    if raw.get(0, c) < floor {
                        0.0
                    } else {
                        g.get(0, c) * (x.get(r, c) - mean.get(0, c)) / (n * y.get(0, c))
                    }
                });
                vec![(a, dx)]
            }
            Op::MeanAll(a) => {
                let x = val(a);
                let gs = g.as_slice()[0] / x.len() as f64;
                vec![(a, FeatureMatrix::filled(x.rows(), x.cols(), gs))]
            }
            Op::Sum(a) => {
                let x = val(a);
                vec![(
                    a,
                    FeatureMatrix::filled(x.rows(), x.cols(), g.as_slice()[0]),
                )]
            }
        };
        Ok(out)
    }
}

fn raw_col_std(x: &FeatureMatrix) -> FeatureMatrix {
    let n = x.rows() as f64;
    let mean = x.col_sums().map(|s| s / n);
    let mut var = FeatureMatrix::zeros(1, x.cols());
    for row in x.iter_rows() {
        for (c, &v) in row.iter().enumerate() {
            let d = v - mean.get(0, c);
            var.as_mut_slice()[c] += d * d;
        }
    }
    var.map(|v| (v / n).sqrt())
}
