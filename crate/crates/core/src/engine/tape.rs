//! Append-only Wengert tape.
//!
//! Every op evaluates eagerly and, when any input requires a gradient, records
//! its kind and input ids. `backward` walks the recorded nodes once in reverse
//! id order, which is a valid reverse topological order because inputs always
//! precede the node that consumes them.

use std::cell::RefCell;
use std::rc::Rc;

use super::kernels;
use super::{Scalar, Tensor, TensorError};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// Right operand is a `[1, n]` row repeated over the left's rows.
    RowRight,
    RowLeft,
    ScalarRight,
    ScalarLeft,
}

impl Bcast {
    #[inline]
    fn index(self, i: usize, cols: usize) -> (usize, usize) {
        match self {
            Bcast::Same => (i, i),
            Bcast::RowRight => (i, i % cols),
            Bcast::RowLeft => (i % cols, i),
            Bcast::ScalarRight => (i, 0),
            Bcast::ScalarLeft => (0, i),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Binary(BinKind, usize, usize, Bcast),
    Scale(usize, f64),
    LeakyRelu(usize),
    Tanh(usize),
    Sigmoid(usize),
    LogSigmoid(usize),
    Mean(usize),
    Sum(usize),
    L2Normalize(usize, f64),
    Gather(usize, Rc<[usize]>),
    Clamp(usize, f64, f64),
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op,
    requires_grad: bool,
}

/// Recording context for one forward/backward pass.
#[derive(Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

/// Leaf gradients produced by [`Tape::backward`], indexed by node id.
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros when the loss did not depend on it.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&var.shape()),
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Result<Var<'_, T>, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    pub fn constant(&self, value: Tensor<T>) -> Result<Var<'_, T>, TensorError> {
        self.leaf(value, false)
    }

    pub fn param(&self, value: Tensor<T>) -> Result<Var<'_, T>, TensorError> {
        self.leaf(value, true)
    }

    fn push(&self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        // Nothing downstream can ask for a gradient through a constant node.
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var { tape: self, id }
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn record(
        &self,
        op_name: &'static str,
        value: Tensor<T>,
        op: Op,
        inputs: &[usize],
    ) -> Result<Var<'_, T>, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let rg = inputs.iter().any(|&i| self.requires(i));
        Ok(self.push(value, op, rg))
    }

    /// Reverse-mode sweep from a scalar `loss`; returns gradients for every leaf
    /// that requires one.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>, TensorError> {
        let nodes = self.nodes.borrow();
        if !std::ptr::eq(loss.tape, self) || loss.id >= nodes.len() {
            return Err(TensorError::NotOnTape);
        }
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(TensorError::NotScalar(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(TensorError::NotOnTape);
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![T::one()]);
        let mut leaf_grads: Vec<Option<Tensor<T>>> = vec![None; loss.id + 1];

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let out = &node.value;
            let val = |i: usize| -> &Tensor<T> { &nodes[i].value };
            let needs = |i: usize| nodes[i].requires_grad;
            match &node.op {
                Op::Leaf => {
                    leaf_grads[id] = Some(Tensor::new(out.shape().to_vec(), g)?);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    if needs(*a) {
                        accumulate(&mut grads, *a, kernels::matmul_bt(&g, bv.data(), m, k, n));
                    }
                    if needs(*b) {
                        accumulate(&mut grads, *b, kernels::matmul_at(av.data(), &g, m, k, n));
                    }
                }
                Op::MatMulT(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, n, k) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
                    if needs(*a) {
                        accumulate(&mut grads, *a, kernels::matmul(&g, bv.data(), m, k, n));
                    }
                    if needs(*b) {
                        accumulate(&mut grads, *b, kernels::matmul_at(&g, av.data(), m, k, n));
                    }
                }
                Op::Binary(kind, a, b, bc) => {
                    let (av, bv) = (val(*a), val(*b));
                    let cols = out.cols();
                    let mut ga = needs(*a).then(|| vec![T::zero(); av.numel()]);
                    let mut gb = needs(*b).then(|| vec![T::zero(); bv.numel()]);
                    for (i, &gi) in g.iter().enumerate() {
                        let (ia, ib) = bc.index(i, cols);
                        let (da, db) = match kind {
                            BinKind::Add => (gi, gi),
                            BinKind::Sub => (gi, -gi),
                            BinKind::Mul => (gi * bv.data()[ib], gi * av.data()[ia]),
                        };
                        if let Some(ga) = ga.as_mut() {
                            ga[ia] = ga[ia] + da;
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb[ib] = gb[ib] + db;
                        }
                    }
                    if let Some(ga) = ga {
                        accumulate(&mut grads, *a, ga);
                    }
                    if let Some(gb) = gb {
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Scale(a, c) => {
                    let c = T::from_f64(*c);
                    accumulate(&mut grads, *a, g.iter().map(|&v| v * c).collect());
                }
                Op::LeakyRelu(a) => {
                    let slope = T::from_f64(LEAKY_SLOPE);
                    let x = val(*a).data();
                    let d = g
                        .iter()
                        .zip(x)
                        .map(|(&gi, &xi)| if xi > T::zero() { gi } else { gi * slope })
                        .collect();
                    accumulate(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let d = g
                        .iter()
                        .zip(out.data())
                        .map(|(&gi, &y)| gi * (T::one() - y * y))
                        .collect();
                    accumulate(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let d = g
                        .iter()
                        .zip(out.data())
                        .map(|(&gi, &y)| gi * y * (T::one() - y))
                        .collect();
                    accumulate(&mut grads, *a, d);
                }
                Op::LogSigmoid(a) => {
                    let x = val(*a).data();
                    let d = g
                        .iter()
                        .zip(x)
                        .map(|(&gi, &xi)| gi * kernels::sigmoid(-xi))
                        .collect();
                    accumulate(&mut grads, *a, d);
                }
                Op::Mean(a) => {
                    let n = val(*a).numel();
                    let d = T::from_f64(g[0].as_f64() / n as f64);
                    accumulate(&mut grads, *a, vec![d; n]);
                }
                Op::Sum(a) => {
                    let n = val(*a).numel();
                    accumulate(&mut grads, *a, vec![g[0]; n]);
                }
                Op::L2Normalize(a, scale) => {
                    let x = val(*a);
                    let cols = x.cols();
                    let mut d = vec![T::zero(); x.numel()];
                    for r in 0..x.rows() {
                        let xr = x.row(r);
                        let gr = &g[r * cols..(r + 1) * cols];
                        let ss: f64 = xr.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>()
                            + L2_EPS;
                        let n = ss.sqrt();
                        let xg: f64 = xr.iter().zip(gr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                        for j in 0..cols {
                            let v = scale
                                * (gr[j].as_f64() / n - xr[j].as_f64() * xg / (n * n * n));
                            d[r * cols + j] = T::from_f64(v);
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Gather(a, index) => {
                    let mut d = vec![T::zero(); val(*a).numel()];
                    for (&src, &gi) in index.iter().zip(&g) {
                        d[src] = d[src] + gi;
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (T::from_f64(*lo), T::from_f64(*hi));
                    let x = val(*a).data();
                    let d = g
                        .iter()
                        .zip(x)
                        .map(|(&gi, &xi)| if xi >= lo && xi <= hi { gi } else { T::zero() })
                        .collect();
                    accumulate(&mut grads, *a, d);
                }
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }
}

/// Added to the squared norm before the square root in `l2_normalize`.
pub const L2_EPS: f64 = 1e-8;

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], id: usize, contribution: Vec<T>) {
    match &mut grads[id] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e = *e + c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Bcast, Vec<usize>), TensorError> {
    let numel = |s: &[usize]| s.iter().product::<usize>();
    let is_row_of = |row: &[usize], full: &[usize]| {
        full.len() == 2
            && ((row.len() == 2 && row[0] == 1 && row[1] == full[1])
                || (row.len() == 1 && row[0] == full[1]))
    };
    if a == b {
        Ok((Bcast::Same, a.to_vec()))
    } else if numel(b) == 1 {
        Ok((Bcast::ScalarRight, a.to_vec()))
    } else if numel(a) == 1 {
        Ok((Bcast::ScalarLeft, b.to_vec()))
    } else if is_row_of(b, a) {
        Ok((Bcast::RowRight, a.to_vec()))
    } else if is_row_of(a, b) {
        Ok((Bcast::RowLeft, b.to_vec()))
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            left: a.to_vec(),
            right: b.to_vec(),
        })
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    fn same_tape(&self, other: &Var<'t, T>) -> Result<(), TensorError> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(TensorError::NotOnTape)
        }
    }

    fn unary(
        self,
        name: &'static str,
        op: Op,
        f: impl Fn(T) -> T,
    ) -> Result<Var<'t, T>, TensorError> {
        let x = self.value();
        let data = x.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.tape.record(name, out, op, &[self.id])
    }

    fn binary(self, kind: BinKind, rhs: Var<'t, T>, name: &'static str) -> Result<Var<'t, T>, TensorError> {
        self.same_tape(&rhs)?;
        let (a, b) = (self.value(), rhs.value());
        let (bc, shape) = broadcast(name, a.shape(), b.shape())?;
        let n: usize = shape.iter().product();
        let cols = if shape.len() == 2 { shape[1] } else { n };
        let (ad, bd) = (a.data(), b.data());
        let data = (0..n)
            .map(|i| {
                let (ia, ib) = bc.index(i, cols);
                match kind {
                    BinKind::Add => ad[ia] + bd[ib],
                    BinKind::Sub => ad[ia] - bd[ib],
                    BinKind::Mul => ad[ia] * bd[ib],
                }
            })
            .collect();
        let out = Tensor::new(shape, data)?;
        self.tape
            .record(name, out, Op::Binary(kind, self.id, rhs.id, bc), &[self.id, rhs.id])
    }

    /// `[m,k] x [k,n]`
    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.same_tape(&rhs)?;
        let (a, b) = (self.value(), rhs.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = Tensor::new(vec![m, n], kernels::matmul(a.data(), b.data(), m, k, n))?;
        self.tape
            .record("matmul", out, Op::MatMul(self.id, rhs.id), &[self.id, rhs.id])
    }

    /// `[m,n] x [k,n]^T -> [m,k]`
    pub fn matmul_t(self, rhs: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.same_tape(&rhs)?;
        let (a, b) = (self.value(), rhs.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_t",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sb[0], sa[1]);
        let out = Tensor::new(vec![m, k], kernels::matmul_bt(a.data(), b.data(), m, k, n))?;
        self.tape
            .record("matmul_t", out, Op::MatMulT(self.id, rhs.id), &[self.id, rhs.id])
    }

    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.binary(BinKind::Add, rhs, "add")
    }

    /// Adds a `[1, n]` row (e.g. a bias) to every row of a `[m, n]` matrix.
    pub fn broadcast_add(self, row: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.binary(BinKind::Add, row, "broadcast_add")
    }

    pub fn sub(self, rhs: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.binary(BinKind::Sub, rhs, "sub")
    }

    pub fn mul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.binary(BinKind::Mul, rhs, "mul_elem")
    }

    pub fn scale(self, c: f64) -> Result<Var<'t, T>, TensorError> {
        let ct = T::from_f64(c);
        self.unary("scale", Op::Scale(self.id, c), |v| v * ct)
    }

    pub fn neg(self) -> Result<Var<'t, T>, TensorError> {
        self.scale(-1.0)
    }

    pub fn leaky_relu(self) -> Result<Var<'t, T>, TensorError> {
        let slope = T::from_f64(LEAKY_SLOPE);
        self.unary("leaky_relu", Op::LeakyRelu(self.id), |v| {
            if v > T::zero() {
                v
            } else {
                v * slope
            }
        })
    }

    pub fn tanh(self) -> Result<Var<'t, T>, TensorError> {
        self.unary("tanh", Op::Tanh(self.id), |v| v.tanh())
    }

    pub fn sigmoid(self) -> Result<Var<'t, T>, TensorError> {
        self.unary("sigmoid", Op::Sigmoid(self.id), kernels::sigmoid)
    }

    pub fn log_sigmoid(self) -> Result<Var<'t, T>, TensorError> {
        self.unary("log_sigmoid", Op::LogSigmoid(self.id), kernels::log_sigmoid)
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Result<Var<'t, T>, TensorError> {
        let (l, h) = (T::from_f64(lo), T::from_f64(hi));
        self.unary("clamp", Op::Clamp(self.id, lo, hi), |v| v.max(l).min(h))
    }

    pub fn mean(self) -> Result<Var<'t, T>, TensorError> {
        let x = self.value();
        let m = kernels::sum_f64(x.data()) / x.numel() as f64;
        self.tape
            .record("mean", Tensor::scalar(T::from_f64(m)), Op::Mean(self.id), &[self.id])
    }

    pub fn sum(self) -> Result<Var<'t, T>, TensorError> {
        let x = self.value();
        let s = kernels::sum_f64(x.data());
        self.tape
            .record("sum", Tensor::scalar(T::from_f64(s)), Op::Sum(self.id), &[self.id])
    }

    /// Rescales each row to Euclidean norm `scale` (up to the `L2_EPS` guard).
    pub fn l2_normalize(self, scale: f64) -> Result<Var<'t, T>, TensorError> {
        let x = self.value();
        let cols = x.cols();
        let mut data = Vec::with_capacity(x.numel());
        for r in 0..x.rows() {
            let row = x.row(r);
            let ss: f64 = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() + L2_EPS;
            let f = scale / ss.sqrt();
            data.extend(row.iter().map(|v| T::from_f64(v.as_f64() * f)));
        }
        debug_assert_eq!(data.len(), x.rows() * cols);
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.tape
            .record("l2_normalize", out, Op::L2Normalize(self.id, scale), &[self.id])
    }

    /// `out[i] = self[index[i]]` over the flattened tensor; `shape` gives the output shape.
    pub fn gather(self, index: Rc<[usize]>, shape: Vec<usize>) -> Result<Var<'t, T>, TensorError> {
        let x = self.value();
        let numel: usize = shape.iter().product();
        if numel != index.len() || index.iter().any(|&i| i >= x.numel()) {
            return Err(TensorError::ShapeMismatch {
                op: "gather",
                left: x.shape().to_vec(),
                right: shape,
            });
        }
        let data = index.iter().map(|&i| x.data()[i]).collect();
        let out = Tensor::new(shape, data)?;
        self.tape
            .record("gather", out, Op::Gather(self.id, index), &[self.id])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(shape, v).unwrap()
    }

    #[test]
    fn mul_elem_definition() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let b = tape.constant(t(&[3], &[4.0, 5.0, 6.0])).unwrap();
        assert_eq!(a.mul(b).unwrap().value().data(), &[4.0, 10.0, 18.0]);
    }

    #[test]
    fn log_sigmoid_and_leaky_relu_values() {
        let tape = Tape::<f64>::new();
        let z = tape.constant(t(&[1], &[0.0])).unwrap();
        assert!((z.log_sigmoid().unwrap().value().item() + 0.693147).abs() < 1e-6);
        let m = tape.constant(t(&[1], &[-1.0])).unwrap();
        assert!((m.leaky_relu().unwrap().value().item() + 0.2).abs() < 1e-15);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0])).unwrap();
        let loss = x.mul(x).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_of_mean() {
        let tape = Tape::<f64>::new();
        let x = tape.param(t(&[4], &[1.0, -2.0, 3.0, 0.5])).unwrap();
        let g = tape.backward(x.mean().unwrap()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn log_sigmoid_of_dot_at_zero_weights() {
        // d/dw log σ(w·x) = σ(-w·x) x = 0.5 x at w = 0
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3, 1], &[1.0, -2.0, 0.5])).unwrap();
        let w = tape.param(t(&[1, 3], &[0.0, 0.0, 0.0])).unwrap();
        let loss = w.matmul(x).unwrap().log_sigmoid().unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[0.5, -1.0, 0.25]);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let err = a.matmul(b).err().unwrap().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        let c = tape.constant(Tensor::zeros(&[4, 2])).unwrap();
        assert!(a.add(c).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        let tape = Tape::<f32>::new();
        assert!(matches!(
            tape.constant(Tensor::from_vec(vec![f32::NAN])),
            Err(TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn backward_requires_scalar_on_tape() {
        let tape = Tape::<f32>::new();
        let x = tape.param(Tensor::zeros(&[2])).unwrap();
        assert!(matches!(tape.backward(x), Err(TensorError::NotScalar(_))));
        let c = tape.constant(Tensor::zeros(&[1])).unwrap();
        assert!(matches!(tape.backward(c), Err(TensorError::NotOnTape)));
        let other = Tape::<f32>::new();
        let y = other.param(Tensor::zeros(&[1])).unwrap();
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn row_broadcast_reduces_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = tape.param(t(&[1, 2], &[0.5, -0.5])).unwrap();
        let y = x.broadcast_add(b).unwrap();
        assert_eq!(y.value().data(), &[1.5, 1.5, 3.5, 3.5]);
        let g = tape.backward(y.sum().unwrap()).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn reused_leaf_accumulates() {
        let tape = Tape::<f64>::new();
        let x = tape.param(t(&[1], &[3.0])).unwrap();
        let y = x.mul(x).unwrap().add(x).unwrap();
        let g = tape.backward(y.sum().unwrap()).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 7.0);
    }
}
