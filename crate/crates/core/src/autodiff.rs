//! Tape-based reverse-mode differentiation over small dense `f64` tensors.
//!
//! Every primitive application is appended to a [`Tape`] together with the
//! handles of its inputs. [`Tape::backward`] walks the tape in reverse and
//! accumulates gradients additively, so a value that fans out to several
//! consumers receives the sum of their contributions.
//!
//! Tensors are at most two-dimensional in practice (vectors and matrices),
//! except for row lookups, which treat every leading axis as a flattened row
//! index. There is no broadcasting: shapes must agree exactly.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    Shape {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("{op}: index {index} out of range for length {len}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("tensor with shape {shape:?} has {values} values")]
    ValueCount { shape: Vec<usize>, values: usize },
    #[error("non-finite value in tensor")]
    NonFinite,
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("loss is not finite: {0}")]
    NonFiniteLoss(f64),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major tensor of finite `f64` values.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let count: usize = shape.iter().product();
        if count != values.len() {
            return Err(AutodiffError::ValueCount {
                shape,
                values: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFinite);
        }
        Ok(Self { shape, values })
    }

    pub fn vector(values: Vec<f64>) -> Result<Self> {
        Self::new(vec![values.len()], values)
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(vec![1], vec![value])
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let count = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; count],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Length of the trailing axis; rows are everything before it.
    fn row_len(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("values", &self.values)
            .finish()
    }
}

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
    MatVec(Var, Var),
    MatMul(Var, Var),
    VecMat(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Row(Var, usize),
    Element(Var, usize),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Dot(Var, Var),
    WeightedSum(Var, Vec<Var>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive applications. Nodes only reference earlier
/// nodes, so the tape is topologically sorted by construction.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Gradients {
    /// Gradient for `var`; all zeros when the output does not depend on it.
    pub fn get(&self, var: Var) -> Vec<f64> {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.lens[var.0]],
        }
    }

    /// Borrowing form of [`Gradients::get`]; `None` means identically zero.
    pub fn get_ref(&self, var: Var) -> Option<&[f64]> {
        self.grads[var.0].as_deref()
    }
}

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> AutodiffError {
    AutodiffError::Shape {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax; outputs are strictly positive and sum to 1.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Log-softmax with max subtraction.
pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    xs.iter().map(|x| x - lse).collect()
}

fn add_into(dst: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = dst.get_or_insert_with(|| vec![0.0; len]);
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn values(&self, var: Var) -> &[f64] {
        &self.nodes[var.0].value.values
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        &self.nodes[var.0].value.shape
    }

    /// Scalar value of a one-element node.
    pub fn scalar_value(&self, var: Var) -> f64 {
        self.nodes[var.0].value.values[0]
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Non-differentiable constant vector; values must be finite.
    pub fn constant(&mut self, values: Vec<f64>) -> Result<Var> {
        Ok(self.leaf(Tensor::vector(values)?, false))
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = &self.nodes[x.0].value;
        let value = Tensor {
            shape: src.shape.clone(),
            values: src.values.iter().map(|&v| f(v)).collect(),
        };
        let ng = self.ng(&[x]);
        self.push(value, op, ng)
    }

    fn binary_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape != vb.shape {
            return Err(shape_err(name, &[&va.shape, &vb.shape]));
        }
        let value = Tensor {
            shape: va.shape.clone(),
            values: va
                .values
                .iter()
                .zip(&vb.values)
                .map(|(&x, &y)| f(x, y))
                .collect(),
        };
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, op, ng))
    }

    /// Matrix `[r, c]` times vector `[c]`.
    pub fn matvec(&mut self, m: Var, x: Var) -> Result<Var> {
        let (vm, vx) = (&self.nodes[m.0].value, &self.nodes[x.0].value);
        if vm.shape.len() != 2 || vx.shape.len() != 1 || vm.shape[1] != vx.shape[0] {
            return Err(shape_err("matvec", &[&vm.shape, &vx.shape]));
        }
        let (r, c) = (vm.shape[0], vm.shape[1]);
        let mut out = vec![0.0; r];
        for (k, o) in out.iter_mut().enumerate() {
            let row = &vm.values[k * c..(k + 1) * c];
            *o = row.iter().zip(&vx.values).map(|(a, b)| a * b).sum();
        }
        let ng = self.ng(&[m, x]);
        Ok(self.push(
            Tensor {
                shape: vec![r],
                values: out,
            },
            Op::MatVec(m, x),
            ng,
        ))
    }

    /// Matrix `[r, k]` times matrix `[k, c]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape.len() != 2 || vb.shape.len() != 2 || va.shape[1] != vb.shape[0] {
            return Err(shape_err("matmul", &[&va.shape, &vb.shape]));
        }
        let (r, k, c) = (va.shape[0], va.shape[1], vb.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for p in 0..k {
                let a_ip = va.values[i * k + p];
                for j in 0..c {
                    out[i * c + j] += a_ip * vb.values[p * c + j];
                }
            }
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(
            Tensor {
                shape: vec![r, c],
                values: out,
            },
            Op::MatMul(a, b),
            ng,
        ))
    }

    /// Row vector `[r]` times matrix `[r, c]`, i.e. a weighted sum of rows.
    pub fn vecmat(&mut self, x: Var, m: Var) -> Result<Var> {
        let (vx, vm) = (&self.nodes[x.0].value, &self.nodes[m.0].value);
        if vm.shape.len() != 2 || vx.shape.len() != 1 || vm.shape[0] != vx.shape[0] {
            return Err(shape_err("vecmat", &[&vx.shape, &vm.shape]));
        }
        let (r, c) = (vm.shape[0], vm.shape[1]);
        let mut out = vec![0.0; c];
        for k in 0..r {
            let w = vx.values[k];
            for (o, v) in out.iter_mut().zip(&vm.values[k * c..(k + 1) * c]) {
                *o += w * v;
            }
        }
        let ng = self.ng(&[x, m]);
        Ok(self.push(
            Tensor {
                shape: vec![c],
                values: out,
            },
            Op::VecMat(x, m),
            ng,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    /// Multiplies every element of `x` by the one-element node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let vs = &self.nodes[s.0].value;
        if vs.values.len() != 1 {
            return Err(shape_err("scale_by", &[&self.nodes[x.0].value.shape, &vs.shape]));
        }
        let c = vs.values[0];
        let src = &self.nodes[x.0].value;
        let value = Tensor {
            shape: src.shape.clone(),
            values: src.values.iter().map(|v| v * c).collect(),
        };
        let ng = self.ng(&[x, s]);
        Ok(self.push(value, Op::ScaleBy(x, s), ng))
    }

    /// Concatenates vectors end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut values = Vec::new();
        for &p in parts {
            let v = &self.nodes[p.0].value;
            if v.shape.len() != 1 {
                return Err(shape_err("concat", &[&v.shape]));
            }
            values.extend_from_slice(&v.values);
        }
        let ng = self.ng(parts);
        Ok(self.push(
            Tensor {
                shape: vec![values.len()],
                values,
            },
            Op::Concat(parts.to_vec()),
            ng,
        ))
    }

    /// Contiguous sub-vector `x[start..start + len]`.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if v.shape.len() != 1 || start + len > v.values.len() {
            return Err(shape_err("slice", &[&v.shape, &[start, len]]));
        }
        let value = Tensor {
            shape: vec![len],
            values: v.values[start..start + len].to_vec(),
        };
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::Slice(x, start), ng))
    }

    /// Row `index` of a tensor, flattening every axis but the last.
    pub fn row(&mut self, m: Var, index: usize) -> Result<Var> {
        let v = &self.nodes[m.0].value;
        if v.shape.len() < 2 {
            return Err(shape_err("row", &[&v.shape]));
        }
        let c = v.row_len();
        let rows = v.values.len() / c;
        if index >= rows {
            return Err(AutodiffError::Index {
                op: "row",
                index,
                len: rows,
            });
        }
        let value = Tensor {
            shape: vec![c],
            values: v.values[index * c..(index + 1) * c].to_vec(),
        };
        let ng = self.ng(&[m]);
        Ok(self.push(value, Op::Row(m, index), ng))
    }

    /// Single element of a vector as a one-element node.
    pub fn element(&mut self, x: Var, index: usize) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if index >= v.values.len() {
            return Err(AutodiffError::Index {
                op: "element",
                index,
                len: v.values.len(),
            });
        }
        let value = Tensor {
            shape: vec![1],
            values: vec![v.values[index]],
        };
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::Element(x, index), ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if v.shape.len() != 1 || v.values.is_empty() {
            return Err(shape_err("softmax", &[&v.shape]));
        }
        let value = Tensor {
            shape: v.shape.clone(),
            values: softmax(&v.values),
        };
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::Softmax(x), ng))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if v.shape.len() != 1 || v.values.is_empty() {
            return Err(shape_err("log_softmax", &[&v.shape]));
        }
        let value = Tensor {
            shape: v.shape.clone(),
            values: log_softmax(&v.values),
        };
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::LogSoftmax(x), ng))
    }

    /// Sum of all elements as a one-element node.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.nodes[x.0].value.values.iter().sum();
        let ng = self.ng(&[x]);
        self.push(
            Tensor {
                shape: vec![1],
                values: vec![total],
            },
            Op::Sum(x),
            ng,
        )
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape.len() != 1 || va.shape != vb.shape {
            return Err(shape_err("dot", &[&va.shape, &vb.shape]));
        }
        let d = va.values.iter().zip(&vb.values).map(|(x, y)| x * y).sum();
        let ng = self.ng(&[a, b]);
        Ok(self.push(
            Tensor {
                shape: vec![1],
                values: vec![d],
            },
            Op::Dot(a, b),
            ng,
        ))
    }

    /// `Σ_k weights[k] · items[k]` for equally shaped vectors.
    pub fn weighted_sum(&mut self, weights: Var, items: &[Var]) -> Result<Var> {
        let w = &self.nodes[weights.0].value;
        if w.shape.len() != 1 || w.values.len() != items.len() || items.is_empty() {
            return Err(shape_err("weighted_sum", &[&w.shape, &[items.len()]]));
        }
        let shape = self.nodes[items[0].0].value.shape.clone();
        let mut out = vec![0.0; shape.iter().product()];
        for (k, &item) in items.iter().enumerate() {
            let v = &self.nodes[item.0].value;
            if v.shape != shape {
                return Err(shape_err("weighted_sum", &[&shape, &v.shape]));
            }
            let wk = w.values[k];
            for (o, x) in out.iter_mut().zip(&v.values) {
                *o += wk * x;
            }
        }
        let mut deps = items.to_vec();
        deps.push(weights);
        let ng = self.ng(&deps);
        Ok(self.push(
            Tensor { shape, values: out },
            Op::WeightedSum(weights, items.to_vec()),
            ng,
        ))
    }

    /// Reverse sweep from a one-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0].value;
        if out.values.len() != 1 {
            return Err(AutodiffError::NonScalarOutput(out.shape.clone()));
        }
        if !out.values[0].is_finite() {
            return Err(AutodiffError::NonFiniteLoss(out.values[0]));
        }
        let lens: Vec<usize> = self.nodes.iter().map(|n| n.value.values.len()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);

        for k in (0..=output.0).rev() {
            let node = &self.nodes[k];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[k].take() else { continue };
            self.propagate(k, &g, &mut grads, &lens);
            grads[k] = Some(g);
        }
        Ok(Gradients { grads, lens })
    }

    fn propagate(&self, k: usize, g: &[f64], grads: &mut [Option<Vec<f64>>], lens: &[usize]) {
        let node = &self.nodes[k];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatVec(m, x) => {
                let (vm, vx) = (val(*m), val(*x));
                let c = vm.shape[1];
                if wants(*m) {
                    add_into(&mut grads[m.0], lens[m.0], |dm| {
                        for (r, gr) in g.iter().enumerate() {
                            for (d, xv) in dm[r * c..(r + 1) * c].iter_mut().zip(&vx.values) {
                                *d += gr * xv;
                            }
                        }
                    });
                }
                if wants(*x) {
                    add_into(&mut grads[x.0], lens[x.0], |dx| {
                        for (r, gr) in g.iter().enumerate() {
                            for (d, mv) in dx.iter_mut().zip(&vm.values[r * c..(r + 1) * c]) {
                                *d += gr * mv;
                            }
                        }
                    });
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (r, kk, c) = (va.shape[0], va.shape[1], vb.shape[1]);
                if wants(*a) {
                    add_into(&mut grads[a.0], lens[a.0], |da| {
                        for i in 0..r {
                            for p in 0..kk {
                                let mut s = 0.0;
                                for j in 0..c {
                                    s += g[i * c + j] * vb.values[p * c + j];
                                }
                                da[i * kk + p] += s;
                            }
                        }
                    });
                }
                if wants(*b) {
                    add_into(&mut grads[b.0], lens[b.0], |db| {
                        for i in 0..r {
                            for p in 0..kk {
                                let a_ip = va.values[i * kk + p];
                                for j in 0..c {
                                    db[p * c + j] += a_ip * g[i * c + j];
                                }
                            }
                        }
                    });
                }
            }
            Op::VecMat(x, m) => {
                let (vx, vm) = (val(*x), val(*m));
                let c = vm.shape[1];
                if wants(*x) {
                    add_into(&mut grads[x.0], lens[x.0], |dx| {
                        for (r, d) in dx.iter_mut().enumerate() {
                            *d += vm.values[r * c..(r + 1) * c]
                                .iter()
                                .zip(g)
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                        }
                    });
                }
                if wants(*m) {
                    add_into(&mut grads[m.0], lens[m.0], |dm| {
                        for (r, xv) in vx.values.iter().enumerate() {
                            for (d, gv) in dm[r * c..(r + 1) * c].iter_mut().zip(g) {
                                *d += xv * gv;
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(*a) {
                    add_into(&mut grads[a.0], lens[a.0], |d| {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g)
                    });
                }
                if wants(*b) {
                    add_into(&mut grads[b.0], lens[b.0], |d| {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += sign * g)
                    });
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if wants(*a) {
                    add_into(&mut grads[a.0], lens[a.0], |d| {
                        for ((d, g), y) in d.iter_mut().zip(g).zip(&vb.values) {
                            *d += g * y;
                        }
                    });
                }
                if wants(*b) {
                    add_into(&mut grads[b.0], lens[b.0], |d| {
                        for ((d, g), x) in d.iter_mut().zip(g).zip(&va.values) {
                            *d += g * x;
                        }
                    });
                }
            }
            Op::Scale(x, c) => {
                add_into(&mut grads[x.0], lens[x.0], |d| {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g)
                });
            }
            Op::ScaleBy(x, s) => {
                let c = val(*s).values[0];
                if wants(*x) {
                    add_into(&mut grads[x.0], lens[x.0], |d| {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g)
                    });
                }
                if wants(*s) {
                    let dot: f64 = g.iter().zip(&val(*x).values).map(|(a, b)| a * b).sum();
                    add_into(&mut grads[s.0], 1, |d| d[0] += dot);
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = lens[p.0];
                    if wants(*p) {
                        add_into(&mut grads[p.0], len, |d| {
                            d.iter_mut()
                                .zip(&g[offset..offset + len])
                                .for_each(|(d, g)| *d += g)
                        });
                    }
                    offset += len;
                }
            }
            Op::Slice(x, start) => {
                add_into(&mut grads[x.0], lens[x.0], |d| {
                    d[*start..*start + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, g)| *d += g)
                });
            }
            Op::Row(m, index) => {
                let c = g.len();
                add_into(&mut grads[m.0], lens[m.0], |d| {
                    d[index * c..(index + 1) * c]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, g)| *d += g)
                });
            }
            Op::Element(x, index) => {
                add_into(&mut grads[x.0], lens[x.0], |d| d[*index] += g[0]);
            }
            Op::Relu(x) => {
                let vx = val(*x);
                add_into(&mut grads[x.0], lens[x.0], |d| {
                    for ((d, g), xv) in d.iter_mut().zip(g).zip(&vx.values) {
                        if *xv > 0.0 {
                            *d += g;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                add_into(&mut grads[x.0], lens[x.0], |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(&node.value.values) {
                        *d += g * y * (1.0 - y);
                    }
                });
            }
            Op::Tanh(x) => {
                add_into(&mut grads[x.0], lens[x.0], |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(&node.value.values) {
                        *d += g * (1.0 - y * y);
                    }
                });
            }
            Op::Square(x) => {
                let vx = val(*x);
                add_into(&mut grads[x.0], lens[x.0], |d| {
                    for ((d, g), xv) in d.iter_mut().zip(g).zip(&vx.values) {
                        *d += 2.0 * g * xv;
                    }
                });
            }
            Op::Softmax(x) => {
                let y = &node.value.values;
                let gy: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                add_into(&mut grads[x.0], lens[x.0], |d| {
                    for ((d, g), yv) in d.iter_mut().zip(g).zip(y) {
                        *d += yv * (g - gy);
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let gsum: f64 = g.iter().sum();
                add_into(&mut grads[x.0], lens[x.0], |d| {
                    for ((d, g), ly) in d.iter_mut().zip(g).zip(&node.value.values) {
                        *d += g - ly.exp() * gsum;
                    }
                });
            }
            Op::Sum(x) => {
                add_into(&mut grads[x.0], lens[x.0], |d| {
                    d.iter_mut().for_each(|d| *d += g[0])
                });
            }
            Op::Dot(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if wants(*a) {
                    add_into(&mut grads[a.0], lens[a.0], |d| {
                        d.iter_mut()
                            .zip(&vb.values)
                            .for_each(|(d, y)| *d += g[0] * y)
                    });
                }
                if wants(*b) {
                    add_into(&mut grads[b.0], lens[b.0], |d| {
                        d.iter_mut()
                            .zip(&va.values)
                            .for_each(|(d, x)| *d += g[0] * x)
                    });
                }
            }
            Op::WeightedSum(w, items) => {
                let vw = val(*w);
                for (kk, item) in items.iter().enumerate() {
                    if wants(*item) {
                        let wk = vw.values[kk];
                        add_into(&mut grads[item.0], lens[item.0], |d| {
                            d.iter_mut().zip(g).for_each(|(d, g)| *d += wk * g)
                        });
                    }
                }
                if wants(*w) {
                    let dots: Vec<f64> = items
                        .iter()
                        .map(|it| g.iter().zip(&val(*it).values).map(|(a, b)| a * b).sum())
                        .collect();
                    add_into(&mut grads[w.0], lens[w.0], |d| {
                        d.iter_mut().zip(dots).for_each(|(d, s)| *d += s)
                    });
                }
            }
        }
    }
}

/// Result of [`finite_diff_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Flattened coordinate (across all parameter tensors) of the worst error.
    pub worst_coordinate: usize,
    /// Analytic and numeric values at the worst coordinate.
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coordinates: usize,
}

/// Gradients smaller than this are at the finite-difference noise level and
/// are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Compares analytic gradients against fourth-order central differences.
///
/// `loss_fn` evaluates the loss at the given parameters; `grad_fn` returns
/// the analytic gradient for every tensor in `params`. For every coordinate
/// the relative error `|a − n| / max(|a|, |n|, 1e-6)` is computed and the
/// maximum is reported.
pub fn finite_diff_check<L, G>(
    mut loss_fn: L,
    grad_fn: G,
    params: &[Tensor],
    step: f64,
) -> Result<GradCheckReport>
where
    L: FnMut(&[Tensor]) -> Result<f64>,
    G: FnOnce(&[Tensor]) -> Result<Vec<Vec<f64>>>,
{
    let base = loss_fn(params)?;
    if !base.is_finite() {
        return Err(AutodiffError::NonFiniteLoss(base));
    }
    let analytic = grad_fn(params)?;
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_coordinate: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coordinates: 0,
    };
    let mut flat = 0;
    for t in 0..work.len() {
        for c in 0..work[t].len() {
            let orig = work[t].values[c];
            let mut at = |offset: f64| -> Result<f64> {
                work[t].values[c] = orig + offset;
                let l = loss_fn(&work)?;
                if l.is_finite() {
                    Ok(l)
                } else {
                    Err(AutodiffError::NonFiniteLoss(l))
                }
            };
            let (p1, m1, p2, m2) = (at(step)?, at(-step)?, at(2.0 * step)?, at(-2.0 * step)?);
            work[t].values[c] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step);
            let a = analytic[t][c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst_coordinate = flat;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
            flat += 1;
        }
    }
    report.coordinates = flat;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_leaf(tape: &mut Tape, v: &[f64]) -> Var {
        tape.leaf(Tensor::vector(v.to_vec()).unwrap(), true)
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[0.0, 0.0, 0.0]);
        let y = tape.softmax(x).unwrap();
        for v in tape.values(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[-1.0, 2.0]);
        let y = tape.relu(x);
        assert_eq!(tape.values(y), &[0.0, 2.0]);
    }

    #[test]
    fn identity_matvec() {
        let mut tape = Tape::new();
        let eye = tape.leaf(
            Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap(),
            false,
        );
        let x = vec_leaf(&mut tape, &[0.5, -2.0, 3.25]);
        let y = tape.matvec(eye, x).unwrap();
        assert_eq!(tape.values(y), tape.values(x));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[1.0, -4.0, 2.5]);
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn self_product_gradient_is_twice_input() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[1.5, -0.5]);
        let xx = tape.mul(x, x).unwrap();
        let s = tape.sum(xx);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x), vec![3.0, -1.0]);
    }

    #[test]
    fn untouched_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[1.0, 2.0]);
        let unused = vec_leaf(&mut tape, &[3.0, 4.0, 5.0]);
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(unused), vec![0.0; 3]);
        assert!(g.get_ref(unused).is_none());
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[1.0, 2.0]);
        assert!(matches!(
            tape.backward(x),
            Err(AutodiffError::NonScalarOutput(_))
        ));
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut tape = Tape::new();
        let m = tape.leaf(Tensor::zeros(vec![2, 3]), true);
        let x = vec_leaf(&mut tape, &[1.0, 2.0]);
        let err = tape.matvec(m, x).unwrap_err();
        assert_eq!(
            err,
            AutodiffError::Shape {
                op: "matvec",
                shapes: vec![vec![2, 3], vec![2]]
            }
        );
        assert!(tape.add(x, m).is_err());
    }

    #[test]
    fn non_finite_tensor_rejected() {
        assert_eq!(
            Tensor::vector(vec![1.0, f64::NAN]),
            Err(AutodiffError::NonFinite)
        );
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![0.0; 3]),
            Err(AutodiffError::ValueCount { .. })
        ));
    }

    #[test]
    fn quadratic_gradcheck_is_exact() {
        let params = vec![Tensor::vector(vec![0.3, -1.2, 2.0, 0.7]).unwrap()];
        let loss = |p: &[Tensor]| Ok(0.5 * p[0].values().iter().map(|v| v * v).sum::<f64>());
        let grad = |p: &[Tensor]| Ok(vec![p[0].values().to_vec()]);
        let report = finite_diff_check(loss, grad, &params, 1e-5).unwrap();
        assert!(report.max_relative_error < 1e-9, "{report:?}");
        assert_eq!(report.coordinates, 4);
    }

    #[test]
    fn gradcheck_rejects_non_finite_loss() {
        let params = vec![Tensor::vector(vec![1.0]).unwrap()];
        let res = finite_diff_check(|_| Ok(f64::INFINITY), |_| Ok(vec![vec![0.0]]), &params, 1e-5);
        assert!(matches!(res, Err(AutodiffError::NonFiniteLoss(_))));
    }

    /// Linear layer, softmax cross-entropy and every remaining primitive in one
    /// expression, checked against central differences.
    #[test]
    fn composite_expression_matches_finite_differences() {
        let w = Tensor::new(
            vec![3, 4],
            vec![0.1, -0.3, 0.5, 0.2, -0.4, 0.6, 0.05, -0.2, 0.3, 0.1, -0.7, 0.4],
        )
        .unwrap();
        let x = Tensor::vector(vec![0.9, -0.4, 0.3, 1.1]).unwrap();
        let m = Tensor::new(vec![4, 2], vec![0.2, -0.1, 0.4, 0.3, -0.5, 0.7, 0.1, 0.2]).unwrap();
        let params = vec![w, x, m];

        let build = |p: &[Tensor]| -> Result<(Tape, Var, Vec<Var>)> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = p.iter().map(|t| tape.leaf(t.clone(), true)).collect();
            let (w, x, m) = (vars[0], vars[1], vars[2]);
            let h = tape.matvec(w, x)?;
            let hs = tape.sigmoid(h);
            let ht = tape.tanh(h);
            let hr = tape.relu(h);
            let mix = tape.mul(hs, ht)?;
            let mix = tape.add(mix, hr)?;
            let lsm = tape.log_softmax(mix)?;
            let nll = tape.element(lsm, 1)?;
            let xe = tape.scale(nll, -1.0);
            let sm = tape.softmax(h)?;
            let c = tape.concat(&[sm, x])?;
            let sl = tape.slice(c, 2, 4)?;
            let proj = tape.vecmat(sl, m)?;
            let sq = tape.square(proj);
            let sq_sum = tape.sum(sq);
            let r0 = tape.row(m, 2)?;
            let d = tape.dot(r0, proj)?;
            let e0 = tape.element(x, 0)?;
            let scaled = tape.scale_by(r0, e0)?;
            let ws = tape.weighted_sum(proj, &[r0, scaled])?;
            let ws_sum = tape.sum(ws);
            let mm = tape.matmul(w, m)?;
            let mm_row = tape.row(mm, 1)?;
            let mm_sum = tape.sum(mm_row);
            let diff = tape.sub(d, mm_sum)?;
            let mut total = tape.add(xe, sq_sum)?;
            total = tape.add(total, diff)?;
            total = tape.add(total, ws_sum)?;
            Ok((tape, total, vars))
        };
        let loss = |p: &[Tensor]| {
            let (tape, out, _) = build(p)?;
            Ok(tape.scalar_value(out))
        };
        let grad = |p: &[Tensor]| {
            let (tape, out, vars) = build(p)?;
            let g = tape.backward(out)?;
            Ok(vars.iter().map(|&v| g.get(v)).collect())
        };
        let report = finite_diff_check(loss, grad, &params, 1e-5).unwrap();
        assert!(report.max_relative_error < 1e-6, "{report:?}");
    }

    #[test]
    fn backward_is_linear_in_the_output() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[0.4, -1.3, 0.8]);
        let f = {
            let s = tape.square(x);
            tape.sum(s)
        };
        let g = {
            let sm = tape.log_softmax(x).unwrap();
            tape.element(sm, 2).unwrap()
        };
        let af = tape.scale(f, 2.5);
        let bg = tape.scale(g, -0.75);
        let combo = tape.add(af, bg).unwrap();
        let gf = tape.backward(f).unwrap().get(x);
        let gg = tape.backward(g).unwrap().get(x);
        let gc = tape.backward(combo).unwrap().get(x);
        for k in 0..3 {
            assert!((gc[k] - (2.5 * gf[k] - 0.75 * gg[k])).abs() < 1e-12);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_is_positive_and_normalized(xs in prop::collection::vec(-30.0f64..30.0, 1..12)) {
                let p = softmax(&xs);
                let total: f64 = p.iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
                prop_assert!(p.iter().all(|&v| v > 0.0));
            }

            #[test]
            fn log_softmax_matches_log_of_softmax(xs in prop::collection::vec(-20.0f64..20.0, 1..8)) {
                let a = log_softmax(&xs);
                let b = softmax(&xs);
                for (l, p) in a.iter().zip(b) {
                    prop_assert!((l - p.ln()).abs() < 1e-9);
                }
            }
        }
    }
}
