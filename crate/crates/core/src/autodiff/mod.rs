//! Reverse-mode differentiation over flat `f64` tensors.
//!
//! A [`Tape`] records every operation as a node holding its forward value.
//! Node ids are assigned in creation order, so inputs always precede their
//! consumers and [`Tape::backward`] can sweep the node list once in reverse.
//!
//! Besides the elementwise and linear-algebra primitives, heavy kernels
//! (skinning, projection, splatting) register themselves through
//! [`CustomOp`] with hand-written vector-Jacobian products.

pub mod check;
mod ops;

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

pub use ops::CustomOp;
use ops::Kind;

static NEXT_GENERATION: AtomicU64 = AtomicU64::new(1);

/// Logical shape of a node value. Storage is always a flat row-major slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Scalar,
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Scalar => 1,
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows and columns, treating vectors as columns.
    pub fn dims(&self) -> (usize, usize) {
        match *self {
            Shape::Scalar => (1, 1),
            Shape::Vector(n) => (n, 1),
            Shape::Matrix(r, c) => (r, c),
        }
    }
}

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    id: usize,
    shape: Shape,
    generation: u64,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shape.is_empty()
    }
}

struct Node {
    kind: Kind,
    inputs: Vec<usize>,
    value: Vec<f64>,
    needs_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    generation: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            generation: NEXT_GENERATION.fetch_add(1, Ordering::Relaxed),
        }
    }

    /// Drops every node. Vars created before the reset become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.generation = NEXT_GENERATION.fetch_add(1, Ordering::Relaxed);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf.
    pub fn var(&mut self, value: Vec<f64>, shape: Shape) -> Result<Var> {
        self.leaf(value, shape, true)
    }

    /// Leaf that never receives an adjoint.
    pub fn constant(&mut self, value: Vec<f64>, shape: Shape) -> Result<Var> {
        self.leaf(value, shape, false)
    }

    pub fn scalar_var(&mut self, value: f64) -> Var {
        self.leaf(vec![value], Shape::Scalar, true).expect("scalar leaf")
    }

    pub fn scalar_const(&mut self, value: f64) -> Var {
        self.leaf(vec![value], Shape::Scalar, false).expect("scalar leaf")
    }

    fn leaf(&mut self, value: Vec<f64>, shape: Shape, needs_grad: bool) -> Result<Var> {
        if value.len() != shape.len() {
            return Err(Error::Shape(format!(
                "leaf value of length {} does not fit shape {shape:?}",
                value.len()
            )));
        }
        Ok(self.push(Kind::Leaf, Vec::new(), value, shape, needs_grad))
    }

    fn push(&mut self, kind: Kind, inputs: Vec<usize>, value: Vec<f64>, shape: Shape, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.len());
        let id = self.nodes.len();
        self.nodes.push(Node {
            kind,
            inputs,
            value,
            needs_grad,
        });
        Var {
            id,
            shape,
            generation: self.generation,
        }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.generation != self.generation || v.id >= self.nodes.len() {
            return Err(Error::Invalid(format!("var #{} does not belong to this tape", v.id)));
        }
        Ok(())
    }

    pub fn value(&self, v: Var) -> &[f64] {
        assert!(self.check(v).is_ok(), "var #{} does not belong to this tape", v.id);
        &self.nodes[v.id].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    /// Records a user-defined op whose forward value was computed by the caller.
    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var], value: Vec<f64>, shape: Shape) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        if value.len() != shape.len() {
            return Err(Error::Shape(format!(
                "custom op `{}` produced {} values for shape {shape:?}",
                op.name(),
                value.len()
            )));
        }
        if value.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("custom op `{}` output", op.name())));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.id].needs_grad);
        Ok(self.push(Kind::Custom(op), inputs.iter().map(|v| v.id).collect(), value, shape, needs_grad))
    }

    /// Computes adjoints of every node with respect to the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        if loss.shape != Shape::Scalar {
            return Err(Error::Shape(format!("backward needs a scalar loss, got {:?}", loss.shape)));
        }
        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adjoints[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &self.nodes[id];
            if node.inputs.is_empty() || !node.needs_grad {
                continue;
            }
            let Some(grad) = adjoints[id].take() else {
                continue;
            };
            let inputs: Vec<&Node> = node.inputs.iter().map(|&i| &self.nodes[i]).collect();
            let input_values: Vec<&[f64]> = inputs.iter().map(|n| n.value.as_slice()).collect();
            let mut contributions: Vec<Option<Vec<f64>>> = inputs
                .iter()
                .map(|n| n.needs_grad.then(|| vec![0.0; n.value.len()]))
                .collect();
            ops::backward(&node.kind, &input_values, &node.value, &grad, &mut contributions);
            for (&input, contribution) in node.inputs.iter().zip(contributions) {
                let Some(c) = contribution else { continue };
                match &mut adjoints[input] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(c),
                }
            }
            adjoints[id] = Some(grad);
        }
        Ok(Gradients {
            adjoints,
            generation: self.generation,
        })
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    adjoints: Vec<Option<Vec<f64>>>,
    generation: u64,
}

impl Gradients {
    /// Adjoint of `v`; zeros when `v` did not influence the loss.
    pub fn get(&self, v: Var) -> Vec<f64> {
        assert_eq!(v.generation, self.generation, "var from a different tape");
        match self.adjoints.get(v.id) {
            Some(Some(g)) => g.clone(),
            _ => vec![0.0; v.len()],
        }
    }

    /// Borrowing variant of [`Gradients::get`]; `None` means all zeros.
    pub fn try_get(&self, v: Var) -> Option<&[f64]> {
        assert_eq!(v.generation, self.generation, "var from a different tape");
        self.adjoints.get(v.id).and_then(|g| g.as_deref())
    }
}

fn broadcast_shape(a: Var, b: Var, op: &str) -> Result<Shape> {
    if a.shape == b.shape {
        Ok(a.shape)
    } else if a.len() == 1 {
        Ok(b.shape)
    } else if b.len() == 1 {
        Ok(a.shape)
    } else {
        Err(Error::Shape(format!("{op}: incompatible shapes {:?} and {:?}", a.shape, b.shape)))
    }
}

fn zip_broadcast(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| f(a[if a.len() == 1 { 0 } else { i }], b[if b.len() == 1 { 0 } else { i }]))
        .collect()
}

impl Tape {
    fn binary(&mut self, kind: Kind, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let shape = broadcast_shape(a, b, name)?;
        let value = zip_broadcast(&self.nodes[a.id].value, &self.nodes[b.id].value, f);
        let needs = self.nodes[a.id].needs_grad || self.nodes[b.id].needs_grad;
        Ok(self.push(kind, vec![a.id, b.id], value, shape, needs))
    }

    fn unary(&mut self, kind: Kind, a: Var, shape: Shape, value: Vec<f64>) -> Result<Var> {
        self.check(a)?;
        let needs = self.nodes[a.id].needs_grad;
        Ok(self.push(kind, vec![a.id], value, shape, needs))
    }

    fn map(&mut self, kind: Kind, a: Var, f: impl Fn(f64) -> f64) -> Result<Var> {
        self.check(a)?;
        let value = self.nodes[a.id].value.iter().map(|&x| f(x)).collect();
        self.unary(kind, a, a.shape, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Kind::Add, a, b, "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Kind::Sub, a, b, "sub", |x, y| x - y)
    }

    /// Elementwise product (one side may be a scalar).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Kind::Mul, a, b, "mul", |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(b)?;
        if self.nodes[b.id].value.iter().any(|&x| x == 0.0) {
            return Err(Error::Domain("division by zero".into()));
        }
        self.binary(Kind::Div, a, b, "div", |x, y| x / y)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map(Kind::Scale(c), a, |x| c * x)
    }

    /// `a + offset` for a constant offset of matching length.
    pub fn add_const(&mut self, a: Var, offset: &[f64]) -> Result<Var> {
        self.check(a)?;
        if offset.len() != a.len() {
            return Err(Error::Shape(format!(
                "add_const: offset of length {} for {:?}",
                offset.len(),
                a.shape
            )));
        }
        let value = self.nodes[a.id].value.iter().zip(offset).map(|(x, o)| x + o).collect();
        self.unary(Kind::AddConst, a, a.shape, value)
    }

    /// Matrix product. Vectors are treated as columns.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (m, k) = a.shape.dims();
        let (k2, n) = b.shape.dims();
        if k != k2 {
            return Err(Error::Shape(format!("matmul: {:?} x {:?}", a.shape, b.shape)));
        }
        let (av, bv) = (&self.nodes[a.id].value, &self.nodes[b.id].value);
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                for j in 0..n {
                    value[i * n + j] += x * bv[p * n + j];
                }
            }
        }
        let shape = match b.shape {
            Shape::Vector(_) | Shape::Scalar if n == 1 => Shape::Vector(m),
            _ => Shape::Matrix(m, n),
        };
        let needs = self.nodes[a.id].needs_grad || self.nodes[b.id].needs_grad;
        Ok(self.push(Kind::MatMul { m, k, n }, vec![a.id, b.id], value, shape, needs))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        if a.len() != b.len() {
            return Err(Error::Shape(format!("dot: {:?} . {:?}", a.shape, b.shape)));
        }
        let value = self.nodes[a.id].value.iter().zip(&self.nodes[b.id].value).map(|(x, y)| x * y).sum();
        let needs = self.nodes[a.id].needs_grad || self.nodes[b.id].needs_grad;
        Ok(self.push(Kind::Dot, vec![a.id, b.id], vec![value], Shape::Scalar, needs))
    }

    /// Euclidean norm of the whole value.
    pub fn norm(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let n = self.nodes[a.id].value.iter().map(|x| x * x).sum::<f64>().sqrt();
        self.unary(Kind::Norm, a, Shape::Scalar, vec![n])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(Kind::Exp, a, f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        if let Some(x) = self.nodes[a.id].value.iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain(format!("log of nonpositive value {x}")));
        }
        self.map(Kind::Log, a, f64::ln)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(Kind::Sigmoid, a, sigmoid)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.map(Kind::Abs, a, f64::abs)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.map(Kind::Square, a, |x| x * x)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.nodes[a.id].value.iter().sum();
        self.unary(Kind::Sum, a, Shape::Scalar, vec![s])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        if a.is_empty() {
            return Err(Error::Shape("mean of empty value".into()));
        }
        let s = self.nodes[a.id].value.iter().sum::<f64>() / a.len() as f64;
        self.unary(Kind::Mean, a, Shape::Scalar, vec![s])
    }

    /// Batched axis-angle to rotation: `n x 3` rows to `n x 9` row-major matrices.
    pub fn rodrigues(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        if a.len() % 3 != 0 {
            return Err(Error::Shape(format!("rodrigues expects rows of 3, got {:?}", a.shape)));
        }
        let rows = a.len() / 3;
        let value = self.nodes[a.id]
            .value
            .chunks_exact(3)
            .flat_map(|w| crate::math::rodrigues([w[0], w[1], w[2]]))
            .collect();
        self.unary(Kind::Rodrigues, a, Shape::Matrix(rows, 9), value)
    }

    /// Batched quaternion normalization over rows of 4.
    pub fn normalize_quat(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        if a.len() % 4 != 0 {
            return Err(Error::Shape(format!("normalize_quat expects rows of 4, got {:?}", a.shape)));
        }
        let mut value = self.nodes[a.id].value.clone();
        for q in value.chunks_exact_mut(4) {
            let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::Domain("zero quaternion".into()));
            }
            q.iter_mut().for_each(|x| *x /= n);
        }
        self.unary(Kind::NormalizeQuat, a, a.shape, value)
    }

    /// Smooth surrogate of `clamp(x, lo, hi)` built from two softplus ramps
    /// of sharpness `k`.
    pub fn clamp_smooth(&mut self, a: Var, lo: f64, hi: f64, k: f64) -> Result<Var> {
        if !(lo < hi) || !(k > 0.0) {
            return Err(Error::Invalid(format!("clamp_smooth: lo={lo} hi={hi} k={k}")));
        }
        self.map(Kind::ClampSmooth { lo, hi, k }, a, |x| {
            lo + softplus(k * (x - lo)) / k - softplus(k * (x - hi)) / k
        })
    }

    /// `out[i] = a[indices[i]]`.
    pub fn gather(&mut self, a: Var, indices: Vec<usize>, shape: Shape) -> Result<Var> {
        self.check(a)?;
        if indices.len() != shape.len() {
            return Err(Error::Shape(format!("gather: {} indices for {shape:?}", indices.len())));
        }
        let src = &self.nodes[a.id].value;
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(Error::Shape(format!("gather index {bad} out of range {}", src.len())));
        }
        let value = indices.iter().map(|&i| src[i]).collect();
        self.unary(Kind::Gather(indices), a, shape, value)
    }

    /// Contiguous sub-range as a vector.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.check(a)?;
        if start + len > a.len() {
            return Err(Error::Shape(format!("slice {start}..{} of {:?}", start + len, a.shape)));
        }
        let value = self.nodes[a.id].value[start..start + len].to_vec();
        self.unary(Kind::Slice { start }, a, Shape::Vector(len), value)
    }

    /// Concatenation of flat values.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut value = Vec::new();
        let mut needs = false;
        for &p in parts {
            self.check(p)?;
            value.extend_from_slice(&self.nodes[p.id].value);
            needs |= self.nodes[p.id].needs_grad;
        }
        let n = value.len();
        Ok(self.push(Kind::Concat, parts.iter().map(|p| p.id).collect(), value, Shape::Vector(n), needs))
    }

    /// Same values under a new shape of equal length.
    pub fn reshape(&mut self, a: Var, shape: Shape) -> Result<Var> {
        self.check(a)?;
        if shape.len() != a.len() {
            return Err(Error::Shape(format!("reshape {:?} -> {shape:?}", a.shape)));
        }
        let value = self.nodes[a.id].value.clone();
        self.unary(Kind::Slice { start: 0 }, a, shape, value)
    }

    /// Weighted sum `sum_i w_i * t_i` of scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(w, t) in terms {
            if w == 0.0 {
                continue;
            }
            let scaled = self.scale(t, w)?;
            acc = Some(match acc {
                Some(a) => self.add(a, scaled)?,
                None => scaled,
            });
        }
        Ok(match acc {
            Some(a) => a,
            None => self.scalar_const(0.0),
        })
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}
