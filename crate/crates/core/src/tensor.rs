//! Reverse-mode automatic differentiation over dense 2-D arrays.
//!
//! A [`Tape`] records every operation applied to its [`Tensor`] handles in
//! evaluation order. [`Tape::backward`] walks the record once in reverse and
//! returns a [`Gradients`] table holding the adjoint of every tensor that
//! depends on a trainable leaf, intermediates included (GradCAM reads the
//! adjoints of hidden layers).
//!
//! One tape serves one training step or one attribution query and is dropped
//! afterwards. Tapes are `!Sync`; independent tapes run on different threads.
//!
//! ```
//! use grattr::matrix::Matrix;
//! use grattr::tensor::Tape;
//!
//! let tape = Tape::new();
//! let w = tape.param(Matrix::from_rows(&[[3.0, 4.0]]));
//! let loss = w.frobenius().unwrap();
//! assert_eq!(loss.item(), 5.0);
//! let grads = tape.backward(loss).unwrap();
//! let g = grads.wrt(w);
//! assert!((g.get(0, 0) - 0.6).abs() < 1e-12 && (g.get(0, 1) - 0.8).abs() < 1e-12);
//! ```

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Norms below this are treated as zero: the Frobenius-norm gradient is
/// defined as 0 there.
pub const NORM_FLOOR: f64 = 1e-12;

/// Operation kinds the engine can differentiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Scale,
    Tanh,
    Abs,
    Sigmoid,
    GroupMean,
    SumAll,
    Frobenius,
    ScalarDiv,
    Pow,
    RowSlice,
    MaskedSquaredError,
    LogisticLoss,
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Abs(usize),
    Sigmoid(usize),
    GroupMean {
        input: usize,
        membership: Rc<[usize]>,
        counts: Vec<usize>,
    },
    SumAll(usize),
    Frobenius(usize),
    ScalarDiv(usize, usize),
    Pow(usize, f64),
    RowSlice {
        input: usize,
        start: usize,
    },
    MaskedSquaredError {
        pred: usize,
        target: Matrix,
        mask: Matrix,
    },
    LogisticLoss {
        logits: usize,
        target: Matrix,
        mask: Matrix,
    },
}

struct Node {
    op: Op,
    value: Matrix,
    requires_grad: bool,
}

/// Append-only computation record.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Tensor<'t> {
    tape: &'t Tape,
    id: usize,
    rows: usize,
    cols: usize,
}

impl fmt::Debug for Tensor<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor#{}({}x{})", self.id, self.rows, self.cols)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a trainable leaf.
    pub fn param(&self, value: Matrix) -> Tensor<'_> {
        self.push(Op::Leaf, value, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&self, value: Matrix) -> Tensor<'_> {
        self.push(Op::Leaf, value, false)
    }

    fn push(&self, op: Op, value: Matrix, requires_grad: bool) -> Tensor<'_> {
        let (rows, cols) = value.shape();
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Tensor {
            tape: self,
            id,
            rows,
            cols,
        }
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Gradients of the scalar `loss` with respect to every recorded tensor.
    pub fn backward(&self, loss: Tensor<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::contract("loss belongs to a different tape"));
        }
        if loss.shape() != (1, 1) {
            return Err(Error::contract(format!(
                "backward needs a 1x1 loss, got {}x{}",
                loss.rows, loss.cols
            )));
        }
        let nodes = self.nodes.borrow();
        let mut adj: Vec<Option<Matrix>> = Vec::new();
        adj.resize_with(loss.id + 1, || None);
        if nodes[loss.id].requires_grad {
            adj[loss.id] = Some(Matrix::scalar(1.0));
        }

        for id in (0..=loss.id).rev() {
            // Inputs always precede their consumer, so every write lands below `id`.
            let (below, here) = adj.split_at_mut(id);
            let Some(g) = here[0].as_ref() else { continue };
            let node = &nodes[id];
            let mut send = |target: usize, grad: Matrix| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut below[target] {
                    Some(acc) => acc.add_assign(&grad),
                    slot => *slot = Some(grad),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    if nodes[*a].requires_grad {
                        send(*a, g.matmul_nt(vb));
                    }
                    if nodes[*b].requires_grad {
                        send(*b, va.matmul_tn(g));
                    }
                }
                Op::Transpose(a) => send(*a, g.transpose()),
                Op::Add(a, b) => {
                    if nodes[*b].requires_grad {
                        send(*b, g.clone());
                    }
                    send(*a, g.clone());
                }
                Op::Sub(a, b) => {
                    if nodes[*b].requires_grad {
                        send(*b, g.scale(-1.0));
                    }
                    send(*a, g.clone());
                }
                Op::Scale(a, c) => send(*a, g.scale(*c)),
                Op::Tanh(a) => send(*a, g.zip_map(&node.value, |g, y| g * (1.0 - y * y))),
                Op::Abs(a) => send(*a, g.zip_map(&nodes[*a].value, |g, x| g * sign(x))),
                Op::Sigmoid(a) => send(*a, g.zip_map(&node.value, |g, y| g * y * (1.0 - y))),
                Op::GroupMean {
                    input,
                    membership,
                    counts,
                } => {
                    let cols = node.value.cols();
                    let mut out = Matrix::zeros(membership.len(), cols);
                    for (r, &grp) in membership.iter().enumerate() {
                        let inv = 1.0 / counts[grp] as f64;
                        for (o, gv) in out.row_mut(r).iter_mut().zip(g.row(grp)) {
                            *o = gv * inv;
                        }
                    }
                    send(*input, out);
                }
                Op::SumAll(a) => {
                    let (r, c) = nodes[*a].value.shape();
                    send(*a, Matrix::filled(r, c, g.get(0, 0)));
                }
                Op::Frobenius(a) => {
                    let norm = node.value.get(0, 0);
                    let x = &nodes[*a].value;
                    if norm < NORM_FLOOR {
                        send(*a, Matrix::zeros(x.rows(), x.cols()));
                    } else {
                        send(*a, x.scale(g.get(0, 0) / norm));
                    }
                }
                Op::ScalarDiv(a, s) if a == s => {
                    // x / x
                    send(*a, Matrix::zeros(1, 1));
                }
                Op::ScalarDiv(a, s) => {
                    let sv = nodes[*s].value.get(0, 0);
                    if nodes[*s].requires_grad {
                        let dot: f64 = g
                            .as_slice()
                            .iter()
                            .zip(nodes[*a].value.as_slice())
                            .map(|(g, x)| g * x)
                            .sum();
                        send(*s, Matrix::scalar(-dot / (sv * sv)));
                    }
                    send(*a, g.scale(1.0 / sv));
                }
                Op::Pow(a, p) => {
                    let p = *p;
                    send(
                        *a,
                        g.zip_map(&nodes[*a].value, |g, x| g * p * x.powf(p - 1.0)),
                    );
                }
                Op::RowSlice { input, start } => {
                    let x = &nodes[*input].value;
                    let mut out = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..g.rows() {
                        out.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    send(*input, out);
                }
                Op::MaskedSquaredError { pred, target, mask } => {
                    let scale = g.get(0, 0);
                    let p = &nodes[*pred].value;
                    let mut out = Matrix::zeros(p.rows(), p.cols());
                    for (i, o) in out.as_mut_slice().iter_mut().enumerate() {
                        let m = mask.as_slice()[i];
                        if m != 0.0 {
                            *o = scale * m * 2.0 * (p.as_slice()[i] - target.as_slice()[i]);
                        }
                    }
                    send(*pred, out);
                }
                Op::LogisticLoss {
                    logits,
                    target,
                    mask,
                } => {
                    let scale = g.get(0, 0);
                    let z = &nodes[*logits].value;
                    let mut out = Matrix::zeros(z.rows(), z.cols());
                    for (i, o) in out.as_mut_slice().iter_mut().enumerate() {
                        let m = mask.as_slice()[i];
                        if m != 0.0 {
                            *o = scale * m * (sigmoid(z.as_slice()[i]) - target.as_slice()[i]);
                        }
                    }
                    send(*logits, out);
                }
            }
        }

        Ok(Gradients { grads: adj })
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient with respect to `t`; zero when the loss does not depend on it.
    pub fn wrt(&self, t: Tensor<'_>) -> Matrix {
        self.get(t)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(t.rows, t.cols))
    }

    /// Gradient with respect to `t`, if any flowed back to it.
    pub fn get(&self, t: Tensor<'_>) -> Option<&Matrix> {
        self.grads.get(t.id).and_then(Option::as_ref)
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl<'t> Tensor<'t> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Copy of the recorded value.
    pub fn value(&self) -> Matrix {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// The single entry of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.get(0, 0)
    }

    fn same_tape(&self, other: &Tensor<'_>, op: OpKind) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::contract(format!("{op:?}: operands live on different tapes")))
        }
    }

    fn unary(&self, op: Op, f: impl FnOnce(&Matrix) -> Matrix) -> Tensor<'t> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (f(&n.value), n.requires_grad)
        };
        self.tape.push(op, value, rg)
    }

    fn binary(
        &self,
        other: &Tensor<'t>,
        op: Op,
        f: impl FnOnce(&Matrix, &Matrix) -> Result<Matrix>,
    ) -> Result<Tensor<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            (f(&a.value, &b.value)?, a.requires_grad || b.requires_grad)
        };
        Ok(self.tape.push(op, value, rg))
    }

    fn check_same_shape(&self, other: &Tensor<'_>, op: OpKind) -> Result<()> {
        self.same_tape(other, op)?;
        if self.shape() != other.shape() {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Tensor<'t>) -> Result<Tensor<'t>> {
        self.same_tape(other, OpKind::MatMul)?;
        self.binary(other, Op::MatMul(self.id, other.id), |a, b| a.matmul(b))
    }

    pub fn t(&self) -> Tensor<'t> {
        self.unary(Op::Transpose(self.id), Matrix::transpose)
    }

    pub fn add(&self, other: &Tensor<'t>) -> Result<Tensor<'t>> {
        self.check_same_shape(other, OpKind::Add)?;
        self.binary(other, Op::Add(self.id, other.id), |a, b| {
            Ok(a.zip_map(b, |x, y| x + y))
        })
    }

    pub fn sub(&self, other: &Tensor<'t>) -> Result<Tensor<'t>> {
        self.check_same_shape(other, OpKind::Sub)?;
        self.binary(other, Op::Sub(self.id, other.id), |a, b| {
            Ok(a.zip_map(b, |x, y| x - y))
        })
    }

    pub fn scale(&self, c: f64) -> Tensor<'t> {
        self.unary(Op::Scale(self.id, c), |m| m.scale(c))
    }

    pub fn tanh(&self) -> Tensor<'t> {
        self.unary(Op::Tanh(self.id), |m| m.map(f64::tanh))
    }

    /// Elementwise absolute value; the subgradient at 0 is 0.
    pub fn abs(&self) -> Tensor<'t> {
        self.unary(Op::Abs(self.id), |m| m.map(f64::abs))
    }

    pub fn sigmoid(&self) -> Tensor<'t> {
        self.unary(Op::Sigmoid(self.id), |m| m.map(sigmoid))
    }

    /// Per-group row means: row `g` of the result is the mean of the rows
    /// whose `membership` entry is `g`. Every group must be non-empty.
    pub fn group_mean(&self, membership: &[usize], groups: usize) -> Result<Tensor<'t>> {
        if membership.len() != self.rows {
            return Err(Error::Dimension {
                op: OpKind::GroupMean,
                lhs: self.shape(),
                rhs: (membership.len(), 1),
            });
        }
        let mut counts = vec![0usize; groups];
        for &g in membership {
            if g >= groups {
                return Err(Error::contract(format!(
                    "group index {g} out of range for {groups} groups"
                )));
            }
            counts[g] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::contract(format!("group {empty} has no rows")));
        }
        let value = {
            let nodes = self.tape.nodes.borrow();
            pool_mean(&nodes[self.id].value, membership, &counts)
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(
            Op::GroupMean {
                input: self.id,
                membership: membership.into(),
                counts,
            },
            value,
            rg,
        ))
    }

    pub fn sum(&self) -> Tensor<'t> {
        self.unary(Op::SumAll(self.id), |m| Matrix::scalar(m.sum()))
    }

    /// 2-norm of the flattened matrix.
    pub fn frobenius(&self) -> Result<Tensor<'t>> {
        Ok(self.unary(Op::Frobenius(self.id), |m| {
            Matrix::scalar(m.frobenius_norm())
        }))
    }

    /// Divides every entry by the 1x1 tensor `s`.
    pub fn div_scalar(&self, s: &Tensor<'t>) -> Result<Tensor<'t>> {
        self.same_tape(s, OpKind::ScalarDiv)?;
        if s.shape() != (1, 1) {
            return Err(Error::Dimension {
                op: OpKind::ScalarDiv,
                lhs: self.shape(),
                rhs: s.shape(),
            });
        }
        self.binary(s, Op::ScalarDiv(self.id, s.id), |a, b| {
            let d = b.get(0, 0);
            Ok(a.map(|x| x / d))
        })
    }

    /// Elementwise `x^p`.
    pub fn powf(&self, p: f64) -> Tensor<'t> {
        self.unary(Op::Pow(self.id, p), |m| m.map(|x| x.powf(p)))
    }

    /// Rows `start..end`.
    pub fn rows_range(&self, start: usize, end: usize) -> Result<Tensor<'t>> {
        if start > end || end > self.rows {
            return Err(Error::Dimension {
                op: OpKind::RowSlice,
                lhs: self.shape(),
                rhs: (start, end),
            });
        }
        Ok(self.unary(Op::RowSlice { input: self.id, start }, |m| {
            m.slice_rows(start, end)
        }))
    }

    /// `Σ mask·(self − target)²` as a 1x1 tensor.
    pub fn masked_squared_error(&self, target: &Matrix, mask: &Matrix) -> Result<Tensor<'t>> {
        self.check_loss_operands(target, mask, OpKind::MaskedSquaredError)?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            let p = nodes[self.id].value.as_slice();
            let mut s = 0.0;
            for ((&p, &t), &m) in p.iter().zip(target.as_slice()).zip(mask.as_slice()) {
                if m != 0.0 {
                    s += m * (p - t) * (p - t);
                }
            }
            s
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(
            Op::MaskedSquaredError {
                pred: self.id,
                target: target.clone(),
                mask: mask.clone(),
            },
            Matrix::scalar(value),
            rg,
        ))
    }

    /// `Σ mask·(softplus(z) − t·z)` over logits `z`, the binary cross-entropy
    /// of `sigmoid(z)` against targets in [0, 1].
    pub fn logistic_loss(&self, target: &Matrix, mask: &Matrix) -> Result<Tensor<'t>> {
        self.check_loss_operands(target, mask, OpKind::LogisticLoss)?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            let z = nodes[self.id].value.as_slice();
            let mut s = 0.0;
            for ((&z, &t), &m) in z.iter().zip(target.as_slice()).zip(mask.as_slice()) {
                if m != 0.0 {
                    s += m * (softplus(z) - t * z);
                }
            }
            s
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(
            Op::LogisticLoss {
                logits: self.id,
                target: target.clone(),
                mask: mask.clone(),
            },
            Matrix::scalar(value),
            rg,
        ))
    }

    fn check_loss_operands(&self, target: &Matrix, mask: &Matrix, op: OpKind) -> Result<()> {
        for other in [target, mask] {
            if other.shape() != self.shape() {
                return Err(Error::Dimension {
                    op,
                    lhs: self.shape(),
                    rhs: other.shape(),
                });
            }
        }
        Ok(())
    }
}

pub(crate) fn pool_mean(x: &Matrix, membership: &[usize], counts: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(counts.len(), x.cols());
    for (r, &g) in membership.iter().enumerate() {
        for (o, v) in out.row_mut(g).iter_mut().zip(x.row(r)) {
            *o += v;
        }
    }
    for (g, &c) in counts.iter().enumerate() {
        let inv = 1.0 / c as f64;
        for o in out.row_mut(g) {
            *o *= inv;
        }
    }
    out
}

/// Compares the tape gradient of the scalar function `f` at `x` against
/// central finite differences and returns the largest relative error
/// `|analytic − numeric| / max(1e-8, |numeric|)` over all coordinates.
pub fn grad_check<F>(f: F, x: &Matrix, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Tensor<'t>) -> Result<Tensor<'t>>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::contract("grad_check needs eps > 0"));
    }
    let analytic = {
        let tape = Tape::new();
        let xt = tape.param(x.clone());
        let y = f(&tape, xt)?;
        if !y.item().is_finite() {
            return Err(Error::NonFinite {
                context: "grad_check at the base point".into(),
                coordinate: 0,
            });
        }
        tape.backward(y)?.wrt(xt)
    };
    let eval = |probe: Matrix, coordinate: usize| -> Result<f64> {
        let tape = Tape::new();
        let xt = tape.param(probe);
        let v = f(&tape, xt)?.item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite {
                context: "grad_check probe".into(),
                coordinate,
            })
        }
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.as_mut_slice()[i] += eps;
        let mut minus = x.clone();
        minus.as_mut_slice()[i] -= eps;
        let numeric = (eval(plus, i)? - eval(minus, i)?) / (2.0 * eps);
        let err = (analytic.as_slice()[i] - numeric).abs() / numeric.abs().max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
