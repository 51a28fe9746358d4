//! Reverse-mode automatic differentiation on a recorded tape.
//!
//! Every primitive records a node holding its forward value and parent
//! links. The backward pass is itself expressed with recorded primitives, so
//! the gradients it returns are ordinary [`Var`]s on the same tape and can be
//! differentiated again (double backpropagation, used by the gradient
//! penalty). When `create_graph` is false the returned gradients are detached
//! constants.

use std::cell::RefCell;
use std::rc::Rc;

use super::{EngineError, Tensor};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    /// `[m, n] + [n]` broadcast over rows.
    AddRow(usize, usize),
    /// `[m, n] -> [n]`
    SumRows(usize),
    /// `[n] -> [m, n]`
    BroadcastRows(usize),
    /// `[m, n] -> [m]`
    SumCols(usize),
    /// `[m] -> [m, n]`
    BroadcastCols(usize),
    Sum(usize),
    Mean(usize),
    /// scalar -> shape
    Expand(usize),
    /// tensor times a scalar node
    MulScalar(usize, usize),
    LeakyRelu(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    Log(usize),
    Exp(usize),
    Square(usize),
    Sqrt(usize),
    Recip(usize),
    Clamp(usize, f64, f64),
    Reshape(usize),
}

impl Op {
    fn parents(&self) -> ([usize; 2], usize) {
        use Op::*;
        match *self {
            Leaf | Const => ([0, 0], 0),
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | AddRow(a, b) | MulScalar(a, b) => ([a, b], 2),
            Neg(a) | Scale(a, _) | AddScalar(a) | Transpose(a) | SumRows(a) | BroadcastRows(a) | SumCols(a)
            | BroadcastCols(a) | Sum(a) | Mean(a) | Expand(a) | LeakyRelu(a, _) | Sigmoid(a) | Tanh(a)
            | Log(a) | Exp(a) | Square(a) | Sqrt(a) | Recip(a) | Clamp(a, _, _) | Reshape(a) => ([a, 0], 1),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// A recording of primitive operations. Cheap to clone (shared handle).
#[derive(Clone, Default)]
pub struct Tape {
    nodes: Rc<RefCell<Vec<Node>>>,
}

/// A handle to a node on a [`Tape`].
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var { tape: self.clone(), id: nodes.len() - 1 }
    }

    /// A differentiable input (parameter or data the caller wants gradients for).
    pub fn var(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A non-differentiable constant.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Const)
    }

    fn same_tape(&self, v: &Var) -> bool {
        Rc::ptr_eq(&self.nodes, &v.tape.nodes)
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// Inputs that did not participate receive zeros. With `create_graph`
    /// the gradients stay attached and may be differentiated again.
    pub fn grad(&self, output: &Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>, EngineError> {
        if !self.same_tape(output) || wrt.iter().any(|w| !self.same_tape(w)) {
            return Err(EngineError::DetachedTape);
        }
        if output.with_value(|t| t.len()) != 1 {
            return Err(EngineError::NonScalarOutput { shape: output.shape() });
        }
        let out = output.id;
        let mut needs = vec![false; out + 1];
        for w in wrt {
            if w.id <= out {
                needs[w.id] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for i in 0..=out {
                if needs[i] {
                    continue;
                }
                let (ps, n) = nodes[i].op.parents();
                needs[i] = ps[..n].iter().any(|&p| needs[p]);
            }
        }

        let mut grads: Vec<Option<Var>> = vec![None; out + 1];
        if needs[out] {
            let shape = output.shape();
            grads[out] = Some(self.constant(Tensor::full(&shape, 1.0)));
        }
        for i in (0..=out).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !needs[i] {
                continue;
            }
            let op = self.nodes.borrow()[i].op.clone();
            let here = Var { tape: self.clone(), id: i };
            for (p, contrib) in self.vjp(&op, &here, &g, &needs)? {
                if !needs[p] {
                    continue;
                }
                grads[p] = Some(match grads[p].take() {
                    Some(acc) => acc.add(&contrib)?,
                    None => contrib,
                });
            }
            // Keep gradients of requested inputs for the result.
            if wrt.iter().any(|w| w.id == i) {
                grads[i] = Some(g);
            }
        }

        wrt.iter()
            .map(|w| {
                let g = if w.id <= out { grads[w.id].clone() } else { None };
                Ok(match g {
                    Some(g) if create_graph => g,
                    Some(g) => self.constant(g.value()),
                    None => self.constant(Tensor::zeros(&w.shape())),
                })
            })
            .collect()
    }

    /// Vector-Jacobian products of `op` (whose output node is `y`) for upstream `g`.
    /// Only parents flagged in `needs` receive a contribution.
    fn vjp(&self, op: &Op, y: &Var, g: &Var, needs: &[bool]) -> Result<Vec<(usize, Var)>, EngineError> {
        let v = |id: usize| Var { tape: self.clone(), id };
        let value = |id: usize| self.nodes.borrow()[id].value.clone();
        let pair = |a: usize,
                    b: usize,
                    fa: &dyn Fn() -> Result<Var, EngineError>,
                    fb: &dyn Fn() -> Result<Var, EngineError>|
         -> Result<Vec<(usize, Var)>, EngineError> {
            let mut out = Vec::with_capacity(2);
            if needs[a] {
                out.push((a, fa()?));
            }
            if needs[b] {
                out.push((b, fb()?));
            }
            Ok(out)
        };
        Ok(match *op {
            Op::Leaf | Op::Const => vec![],
            Op::Add(a, b) => pair(a, b, &|| Ok(g.clone()), &|| Ok(g.clone()))?,
            Op::Sub(a, b) => pair(a, b, &|| Ok(g.clone()), &|| g.neg())?,
            Op::Mul(a, b) => pair(a, b, &|| g.mul(&v(b)), &|| g.mul(&v(a)))?,
            Op::Neg(a) => vec![(a, g.neg()?)],
            Op::Scale(a, c) => vec![(a, g.scale(c)?)],
            Op::AddScalar(a) => vec![(a, g.clone())],
            Op::MatMul(a, b) => pair(a, b, &|| g.matmul(&v(b).transpose()?), &|| v(a).transpose()?.matmul(g))?,
            Op::Transpose(a) => vec![(a, g.transpose()?)],
            Op::AddRow(a, r) => pair(a, r, &|| Ok(g.clone()), &|| g.sum_rows())?,
            Op::SumRows(a) => {
                let m = v(a).shape()[0];
                vec![(a, g.broadcast_rows(m)?)]
            }
            Op::BroadcastRows(a) => vec![(a, g.sum_rows()?)],
            Op::SumCols(a) => {
                let n = v(a).shape()[1];
                vec![(a, g.broadcast_cols(n)?)]
            }
            Op::BroadcastCols(a) => vec![(a, g.sum_cols()?)],
            Op::Sum(a) => vec![(a, g.expand(&v(a).shape())?)],
            Op::Mean(a) => {
                let shape = v(a).shape();
                let n = shape.iter().product::<usize>() as f64;
                vec![(a, g.expand(&shape)?.scale(1.0 / n)?)]
            }
            Op::Expand(a) => vec![(a, g.sum()?)],
            Op::MulScalar(a, s) => pair(a, s, &|| g.mul_scalar(&v(s)), &|| g.mul(&v(a))?.sum())?,
            Op::LeakyRelu(a, slope) => {
                let mask = value(a).map(|x| if x > 0.0 { 1.0 } else { slope });
                vec![(a, g.mul(&self.constant(mask))?)]
            }
            Op::Sigmoid(a) => {
                // σ' = y (1 - y)
                let dy = y.mul(&y.neg()?.add_scalar(1.0)?)?;
                vec![(a, g.mul(&dy)?)]
            }
            Op::Tanh(a) => {
                let dy = y.square()?.neg()?.add_scalar(1.0)?;
                vec![(a, g.mul(&dy)?)]
            }
            Op::Log(a) => vec![(a, g.mul(&v(a).recip()?)?)],
            Op::Exp(a) => vec![(a, g.mul(y)?)],
            Op::Square(a) => vec![(a, g.mul(&v(a))?.scale(2.0)?)],
            Op::Sqrt(a) => vec![(a, g.mul(&y.recip()?)?.scale(0.5)?)],
            Op::Recip(a) => vec![(a, g.mul(&y.square()?)?.neg()?)],
            Op::Clamp(a, lo, hi) => {
                let mask = value(a).map(|x| if x >= lo && x <= hi { 1.0 } else { 0.0 });
                vec![(a, g.mul(&self.constant(mask))?)]
            }
            Op::Reshape(a) => vec![(a, g.reshape(&v(a).shape())?)],
        })
    }
}

impl Var {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// A copy of the forward value.
    pub fn value(&self) -> Tensor {
        self.with_value(Tensor::clone)
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    /// Value of a one-element node.
    pub fn item(&self) -> f64 {
        self.with_value(|t| t.item())
    }

    fn check_other(&self, other: &Var) -> Result<(), EngineError> {
        if Rc::ptr_eq(&self.tape.nodes, &other.tape.nodes) {
            Ok(())
        } else {
            Err(EngineError::DetachedTape)
        }
    }

    fn unary(&self, name: &'static str, op: Op, f: impl FnOnce(&Tensor) -> Result<Tensor, EngineError>) -> Result<Var, EngineError> {
        let out = self.with_value(f)?;
        out.check_finite(name)?;
        Ok(self.tape.push(out, op))
    }

    fn binary(
        &self,
        other: &Var,
        name: &'static str,
        op: Op,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor, EngineError>,
    ) -> Result<Var, EngineError> {
        self.check_other(other)?;
        let out = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value, &nodes[other.id].value)?
        };
        out.check_finite(name)?;
        Ok(self.tape.push(out, op))
    }

    pub fn add(&self, other: &Var) -> Result<Var, EngineError> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a.zip_map(b, "add", |x, y| x + y))
    }

    pub fn sub(&self, other: &Var) -> Result<Var, EngineError> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a.zip_map(b, "sub", |x, y| x - y))
    }

    pub fn mul(&self, other: &Var) -> Result<Var, EngineError> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a.zip_map(b, "mul", |x, y| x * y))
    }

    pub fn neg(&self) -> Result<Var, EngineError> {
        self.unary("neg", Op::Neg(self.id), |a| Ok(a.map(|x| -x)))
    }

    pub fn scale(&self, c: f64) -> Result<Var, EngineError> {
        self.unary("scale", Op::Scale(self.id, c), |a| Ok(a.map(|x| c * x)))
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var, EngineError> {
        self.unary("add_scalar", Op::AddScalar(self.id), |a| Ok(a.map(|x| x + c)))
    }

    pub fn matmul(&self, other: &Var) -> Result<Var, EngineError> {
        self.binary(other, "matmul", Op::MatMul(self.id, other.id), |a, b| a.matmul(b))
    }

    pub fn transpose(&self) -> Result<Var, EngineError> {
        self.unary("transpose", Op::Transpose(self.id), |a| a.transpose())
    }

    /// Adds a `[n]` row vector to every row of a `[m, n]` matrix.
    pub fn add_row(&self, row: &Var) -> Result<Var, EngineError> {
        self.binary(row, "add_row", Op::AddRow(self.id, row.id), |a, r| {
            if a.shape().len() != 2 || r.shape() != [a.shape()[1]] {
                return Err(EngineError::ShapeMismatch {
                    op: "add_row",
                    detail: format!("{:?} + {:?}", a.shape(), r.shape()),
                });
            }
            let n = a.shape()[1];
            let data = a.data().iter().enumerate().map(|(k, &x)| x + r.data()[k % n]).collect();
            Ok(Tensor::from_parts(a.shape().to_vec(), data))
        })
    }

    pub fn sum_rows(&self) -> Result<Var, EngineError> {
        self.unary("sum_rows", Op::SumRows(self.id), |a| {
            let (m, n) = matrix_dims(a, "sum_rows")?;
            let mut out = vec![0.0; n];
            for i in 0..m {
                for (o, &x) in out.iter_mut().zip(&a.data()[i * n..(i + 1) * n]) {
                    *o += x;
                }
            }
            Ok(Tensor::from_parts(vec![n], out))
        })
    }

    pub fn broadcast_rows(&self, m: usize) -> Result<Var, EngineError> {
        self.unary("broadcast_rows", Op::BroadcastRows(self.id), |a| {
            if a.shape().len() != 1 {
                return Err(EngineError::ShapeMismatch { op: "broadcast_rows", detail: format!("{:?}", a.shape()) });
            }
            let n = a.len();
            Ok(Tensor::from_parts(vec![m, n], a.data().repeat(m)))
        })
    }

    pub fn sum_cols(&self) -> Result<Var, EngineError> {
        self.unary("sum_cols", Op::SumCols(self.id), |a| {
            let (m, n) = matrix_dims(a, "sum_cols")?;
            let out = (0..m).map(|i| a.data()[i * n..(i + 1) * n].iter().sum()).collect();
            Ok(Tensor::from_parts(vec![m], out))
        })
    }

    pub fn broadcast_cols(&self, n: usize) -> Result<Var, EngineError> {
        self.unary("broadcast_cols", Op::BroadcastCols(self.id), |a| {
            if a.shape().len() != 1 {
                return Err(EngineError::ShapeMismatch { op: "broadcast_cols", detail: format!("{:?}", a.shape()) });
            }
            let m = a.len();
            let data = a.data().iter().flat_map(|&x| std::iter::repeat_n(x, n)).collect();
            Ok(Tensor::from_parts(vec![m, n], data))
        })
    }

    pub fn sum(&self) -> Result<Var, EngineError> {
        self.unary("sum", Op::Sum(self.id), |a| Ok(Tensor::scalar(a.sum())))
    }

    pub fn mean(&self) -> Result<Var, EngineError> {
        self.unary("mean", Op::Mean(self.id), |a| {
            if a.is_empty() {
                return Err(EngineError::ShapeMismatch { op: "mean", detail: "empty tensor".into() });
            }
            Ok(Tensor::scalar(a.mean()))
        })
    }

    /// Broadcasts a one-element node to `shape`.
    pub fn expand(&self, shape: &[usize]) -> Result<Var, EngineError> {
        self.unary("expand", Op::Expand(self.id), |a| {
            if a.len() != 1 {
                return Err(EngineError::ShapeMismatch { op: "expand", detail: format!("{:?}", a.shape()) });
            }
            Ok(Tensor::full(shape, a.item()))
        })
    }

    /// Multiplies every entry by the one-element node `s`.
    pub fn mul_scalar(&self, s: &Var) -> Result<Var, EngineError> {
        self.binary(s, "mul_scalar", Op::MulScalar(self.id, s.id), |a, s| {
            if s.len() != 1 {
                return Err(EngineError::ShapeMismatch { op: "mul_scalar", detail: format!("{:?}", s.shape()) });
            }
            let c = s.item();
            Ok(a.map(|x| x * c))
        })
    }

    pub fn leaky_relu(&self, slope: f64) -> Result<Var, EngineError> {
        self.unary("leaky_relu", Op::LeakyRelu(self.id, slope), |a| Ok(a.map(|x| if x > 0.0 { x } else { slope * x })))
    }

    pub fn sigmoid(&self) -> Result<Var, EngineError> {
        self.unary("sigmoid", Op::Sigmoid(self.id), |a| Ok(a.map(sigmoid)))
    }

    pub fn tanh(&self) -> Result<Var, EngineError> {
        self.unary("tanh", Op::Tanh(self.id), |a| Ok(a.map(f64::tanh)))
    }

    pub fn log(&self) -> Result<Var, EngineError> {
        self.unary("log", Op::Log(self.id), |a| {
            if let Some(&bad) = a.data().iter().find(|&&x| x <= 0.0) {
                return Err(EngineError::LogDomain { value: bad });
            }
            Ok(a.map(f64::ln))
        })
    }

    pub fn exp(&self) -> Result<Var, EngineError> {
        self.unary("exp", Op::Exp(self.id), |a| Ok(a.map(f64::exp)))
    }

    pub fn square(&self) -> Result<Var, EngineError> {
        self.unary("square", Op::Square(self.id), |a| Ok(a.map(|x| x * x)))
    }

    pub fn sqrt(&self) -> Result<Var, EngineError> {
        self.unary("sqrt", Op::Sqrt(self.id), |a| {
            if let Some(&bad) = a.data().iter().find(|&&x| x < 0.0) {
                return Err(EngineError::SqrtDomain { value: bad });
            }
            Ok(a.map(f64::sqrt))
        })
    }

    pub fn recip(&self) -> Result<Var, EngineError> {
        self.unary("recip", Op::Recip(self.id), |a| Ok(a.map(|x| 1.0 / x)))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Var, EngineError> {
        self.unary("clamp", Op::Clamp(self.id, lo, hi), |a| Ok(a.map(|x| x.clamp(lo, hi))))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var, EngineError> {
        self.unary("reshape", Op::Reshape(self.id), |a| a.reshape(shape))
    }

    /// Euclidean norm of all entries, as a scalar node.
    pub fn l2_norm(&self) -> Result<Var, EngineError> {
        self.square()?.sum()?.sqrt()
    }

    /// Affine layer `x Wᵀ + b` for `x: [m, in]`, `W: [out, in]`, `b: [out]`.
    pub fn affine(&self, weight: &Var, bias: &Var) -> Result<Var, EngineError> {
        self.matmul(&weight.transpose()?)?.add_row(bias)
    }
}

fn matrix_dims(a: &Tensor, op: &'static str) -> Result<(usize, usize), EngineError> {
    match *a.shape() {
        [m, n] => Ok((m, n)),
        _ => Err(EngineError::ShapeMismatch { op, detail: format!("expected a matrix, got {:?}", a.shape()) }),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_var(t: &Tape, x: f64) -> Var {
        t.var(Tensor::scalar(x))
    }

    #[test]
    fn square_derivative() {
        let t = Tape::new();
        let x = scalar_var(&t, 3.0);
        let y = x.mul(&x).unwrap();
        let g = t.grad(&y, &[x], false).unwrap();
        assert_eq!(g[0].item(), 6.0);
    }

    #[test]
    fn second_derivative_of_cube() {
        let t = Tape::new();
        let x = scalar_var(&t, 2.0);
        let y = x.mul(&x).unwrap().mul(&x).unwrap();
        let dy = t.grad(&y, std::slice::from_ref(&x), true).unwrap().remove(0);
        assert_eq!(dy.item(), 12.0);
        let d2y = t.grad(&dy, &[x], false).unwrap().remove(0);
        assert!((d2y.item() - 12.0).abs() < 1e-12);
    }

    #[test]
    fn forward_examples() {
        let t = Tape::new();
        assert_eq!(t.constant(Tensor::scalar(0.0)).sigmoid().unwrap().item(), 0.5);
        let m = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0])).mean().unwrap();
        assert_eq!(m.item(), 2.5);
    }

    #[test]
    fn log_of_nonpositive_is_error() {
        let t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(x.log(), Err(EngineError::LogDomain { .. })));
    }

    #[test]
    fn non_finite_is_error() {
        let t = Tape::new();
        let x = t.constant(Tensor::scalar(1000.0));
        assert!(matches!(x.exp(), Err(EngineError::NonFinite { op: "exp" })));
    }

    #[test]
    fn unused_input_gets_zero_gradient() {
        let t = Tape::new();
        let x = scalar_var(&t, 1.0);
        let unused = t.var(Tensor::vector(vec![1.0, 2.0]));
        let y = x.square().unwrap();
        let g = t.grad(&y, &[x, unused], false).unwrap();
        assert_eq!(g[1].value(), Tensor::zeros(&[2]));
    }

    #[test]
    fn foreign_tape_and_non_scalar_rejected() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let x = t1.var(Tensor::vector(vec![1.0, 2.0]));
        let y = t2.var(Tensor::scalar(1.0));
        assert!(matches!(t1.grad(&y, std::slice::from_ref(&x), false), Err(EngineError::DetachedTape)));
        assert!(matches!(t1.grad(&x, std::slice::from_ref(&x), false), Err(EngineError::NonScalarOutput { .. })));
        assert!(x.add(&y).is_err());
    }
}
