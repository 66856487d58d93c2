//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Parameters
//! are referenced from a borrowed [`ParamStore`] instead of being copied, so
//! one store can back many graphs (one per room) at the same time. All
//! tensors are two-dimensional; row vectors are `1 x n`.
//!
//! Binary elementwise ops broadcast their *right* operand along any axis of
//! length one (`1 x n` row, `m x 1` column, `1 x 1` scalar).

use std::cell::RefCell;

use ndarray::{s, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::params::{Gradients, Matrix, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Value {
    Owned(Matrix),
    Param(ParamId),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Matrix,
        inv_std: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    SumAll(Var),
    MeanRows(Var),
    BceWithLogits(Var, f64),
}

struct Node {
    value: Value,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: RefCell<Vec<Node>>,
    dropout_rng: Option<RefCell<ChaCha8Rng>>,
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Exact (erf-based) GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    gelu(x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable logistic function.
pub fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}

/// Reduces a gradient of the broadcast output shape back to `shape`.
fn reduce_to(grad: &Matrix, shape: (usize, usize)) -> Matrix {
    let (r, c) = grad.dim();
    let mut g = grad.clone();
    if shape.0 == 1 && r != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && c != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

impl<'p> Graph<'p> {
    /// A graph in evaluation mode: dropout is the identity.
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: RefCell::new(Vec::with_capacity(512)),
            dropout_rng: None,
        }
    }

    /// A graph in training mode; dropout masks are drawn from `rng`.
    pub fn training(params: &'p ParamStore, rng: ChaCha8Rng) -> Self {
        Self {
            params,
            nodes: RefCell::new(Vec::with_capacity(512)),
            dropout_rng: Some(RefCell::new(rng)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn view<'a>(&'a self, nodes: &'a [Node], v: Var) -> ArrayView2<'a, f64> {
        match &nodes[v.0].value {
            Value::Owned(m) => m.view(),
            Value::Param(id) => self.params.get(*id).view(),
        }
    }

    fn push(&self, value: Matrix, op: Op) -> Var {
        debug_assert!(value.iter().all(|v| !v.is_nan()), "NaN produced in graph");
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(nodes.len() - 1)
    }

    fn compute<F>(&self, f: F, op: Op) -> Var
    where
        F: for<'a> FnOnce(&'a dyn Fn(Var) -> ArrayView2<'a, f64>) -> Matrix,
    {
        let value = {
            let nodes = self.nodes.borrow();
            let get = |v: Var| self.view(&nodes, v);
            f(&get)
        };
        self.push(value, op)
    }

    /// Copy of a node's current value.
    pub fn value(&self, v: Var) -> Matrix {
        let nodes = self.nodes.borrow();
        self.view(&nodes, v).to_owned()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let nodes = self.nodes.borrow();
        self.view(&nodes, v).dim()
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let nodes = self.nodes.borrow();
        let m = self.view(&nodes, v);
        assert_eq!(m.dim(), (1, 1), "scalar() on non-scalar node");
        m[[0, 0]]
    }

    pub fn constant(&self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&self, id: ParamId) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
        });
        Var(nodes.len() - 1)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.compute(|v| v(a).dot(&v(b)), Op::MatMul(a, b))
    }

    pub fn transpose(&self, a: Var) -> Var {
        self.compute(|v| v(a).t().to_owned(), Op::Transpose(a))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.compute(
            |v| {
                let x = v(a);
                let y = v(b);
                let y = y.broadcast(x.dim()).expect("add: incompatible shapes");
                &x + &y
            },
            Op::Add(a, b),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.compute(
            |v| {
                let x = v(a);
                let y = v(b);
                let y = y.broadcast(x.dim()).expect("sub: incompatible shapes");
                &x - &y
            },
            Op::Sub(a, b),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.compute(
            |v| {
                let x = v(a);
                let y = v(b);
                let y = y.broadcast(x.dim()).expect("mul: incompatible shapes");
                &x * &y
            },
            Op::Mul(a, b),
        )
    }

    pub fn scale(&self, a: Var, factor: f64) -> Var {
        self.compute(|v| v(a).mapv(|x| x * factor), Op::Scale(a, factor))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.compute(|v| v(a).mapv(sigmoid), Op::Sigmoid(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.compute(|v| v(a).mapv(f64::tanh), Op::Tanh(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.compute(|v| v(a).mapv(|x| x.max(0.0)), Op::Relu(a))
    }

    pub fn gelu(&self, a: Var) -> Var {
        self.compute(|v| v(a).mapv(gelu), Op::Gelu(a))
    }

    /// Row-wise softmax. Entries equal to `-inf` receive zero probability;
    /// every row must contain at least one finite entry.
    pub fn softmax_rows(&self, a: Var) -> Var {
        self.compute(|v| softmax_rows(v(a)), Op::SoftmaxRows(a))
    }

    /// Row-wise layer normalization with learned `1 x n` gain and bias.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let (value, normalized, inv_std) = {
            let nodes = self.nodes.borrow();
            let xv = self.view(&nodes, x);
            let gv = self.view(&nodes, gain);
            let bv = self.view(&nodes, bias);
            let (rows, cols) = xv.dim();
            let mut normalized = Matrix::zeros((rows, cols));
            let mut inv_std = Vec::with_capacity(rows);
            for (r, row) in xv.rows().into_iter().enumerate() {
                let mean = row.sum() / cols as f64;
                let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<f64>() / cols as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std.push(inv);
                for (c, &e) in row.iter().enumerate() {
                    normalized[[r, c]] = (e - mean) * inv;
                }
            }
            let g = gv.broadcast((rows, cols)).expect("layer_norm gain shape");
            let b = bv.broadcast((rows, cols)).expect("layer_norm bias shape");
            let value = &normalized * &g + b;
            (value, normalized, inv_std)
        };
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
        )
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        if parts.len() == 1 {
            return parts[0];
        }
        self.compute(
            |v| {
                let views: Vec<_> = parts.iter().map(|&p| v(p)).collect();
                ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch")
            },
            Op::ConcatRows(parts.to_vec()),
        )
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        if parts.len() == 1 {
            return parts[0];
        }
        self.compute(
            |v| {
                let views: Vec<_> = parts.iter().map(|&p| v(p)).collect();
                ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch")
            },
            Op::ConcatCols(parts.to_vec()),
        )
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Var {
        self.compute(
            |v| v(a).slice(s![start..start + len, ..]).to_owned(),
            Op::SliceRows(a, start),
        )
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        self.compute(
            |v| v(a).slice(s![.., start..start + len]).to_owned(),
            Op::SliceCols(a, start),
        )
    }

    pub fn row(&self, a: Var, index: usize) -> Var {
        self.slice_rows(a, index, 1)
    }

    /// Selects rows by index; indices may repeat.
    pub fn gather_rows(&self, a: Var, indices: &[usize]) -> Var {
        self.compute(
            |v| v(a).select(Axis(0), indices),
            Op::Gather(a, indices.to_vec()),
        )
    }

    pub fn sum_all(&self, a: Var) -> Var {
        self.compute(|v| Matrix::from_elem((1, 1), v(a).sum()), Op::SumAll(a))
    }

    /// Column means as a `1 x n` row.
    pub fn mean_rows(&self, a: Var) -> Var {
        self.compute(
            |v| {
                let x = v(a);
                let n = x.nrows() as f64;
                (x.sum_axis(Axis(0)) / n).insert_axis(Axis(0))
            },
            Op::MeanRows(a),
        )
    }

    /// Binary cross-entropy of a `1 x 1` logit against `label` in {0, 1},
    /// evaluated as `softplus(z) - y z`.
    pub fn bce_with_logits(&self, logit: Var, label: f64) -> Var {
        self.compute(
            |v| {
                let z = v(logit)[[0, 0]];
                Matrix::from_elem((1, 1), softplus(z) - label * z)
            },
            Op::BceWithLogits(logit, label),
        )
    }

    /// Inverted dropout. The identity unless the graph is in training mode.
    pub fn dropout(&self, a: Var, p: f64) -> Var {
        let Some(rng) = &self.dropout_rng else {
            return a;
        };
        if p <= 0.0 {
            return a;
        }
        let (rows, cols) = self.shape(a);
        let keep = 1.0 - p;
        let mask = {
            let mut rng = rng.borrow_mut();
            Matrix::from_shape_fn((rows, cols), |_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
        };
        let mask = self.constant(mask);
        self.mul(a, mask)
    }

    /// Back-propagates from a `1 x 1` node, returning gradients for every
    /// parameter that influenced it.
    pub fn backward(&self, root: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            self.view(&nodes, root).dim(),
            (1, 1),
            "backward from non-scalar"
        );
        let mut grads: Vec<Option<Matrix>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::from_elem((1, 1), 1.0));
        let mut param_grads = Gradients::zeros_like(self.params);

        fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let node = &nodes[idx];
            let out = match &node.value {
                Value::Owned(m) => m.view(),
                Value::Param(id) => self.params.get(*id).view(),
            };
            match &node.op {
                Op::Leaf => {
                    if let Value::Param(id) = node.value {
                        param_grads.accumulate(id, &grad);
                    }
                }
                Op::MatMul(a, b) => {
                    let av = self.view(&nodes, *a);
                    let bv = self.view(&nodes, *b);
                    acc(&mut grads, *a, grad.dot(&bv.t()));
                    acc(&mut grads, *b, av.t().dot(&grad));
                }
                Op::Transpose(a) => acc(&mut grads, *a, grad.t().to_owned()),
                Op::Add(a, b) => {
                    let bshape = self.view(&nodes, *b).dim();
                    acc(&mut grads, *b, reduce_to(&grad, bshape));
                    acc(&mut grads, *a, grad);
                }
                Op::Sub(a, b) => {
                    let bshape = self.view(&nodes, *b).dim();
                    acc(&mut grads, *b, -reduce_to(&grad, bshape));
                    acc(&mut grads, *a, grad);
                }
                Op::Mul(a, b) => {
                    let av = self.view(&nodes, *a);
                    let bv = self.view(&nodes, *b);
                    let bb = bv.broadcast(av.dim()).expect("mul shapes");
                    let ga = &grad * &bb;
                    let gb = reduce_to(&(&grad * &av), bv.dim());
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, f) => acc(&mut grads, *a, grad.mapv(|g| g * f)),
                Op::Sigmoid(a) => {
                    let mut g = grad;
                    Zip::from(&mut g)
                        .and(&out)
                        .for_each(|g, &y| *g *= y * (1.0 - y));
                    acc(&mut grads, *a, g);
                }
                Op::Tanh(a) => {
                    let mut g = grad;
                    Zip::from(&mut g)
                        .and(&out)
                        .for_each(|g, &y| *g *= 1.0 - y * y);
                    acc(&mut grads, *a, g);
                }
                Op::Relu(a) => {
                    let x = self.view(&nodes, *a);
                    let mut g = grad;
                    Zip::from(&mut g).and(&x).for_each(|g, &x| {
                        if x <= 0.0 {
                            *g = 0.0
                        }
                    });
                    acc(&mut grads, *a, g);
                }
                Op::Gelu(a) => {
                    let x = self.view(&nodes, *a);
                    let mut g = grad;
                    Zip::from(&mut g)
                        .and(&x)
                        .for_each(|g, &x| *g *= gelu_grad(x));
                    acc(&mut grads, *a, g);
                }
                Op::SoftmaxRows(a) => {
                    let mut g = grad;
                    for (mut grow, yrow) in g.rows_mut().into_iter().zip(out.rows()) {
                        let dot: f64 = grow.iter().zip(yrow.iter()).map(|(g, y)| g * y).sum();
                        Zip::from(&mut grow)
                            .and(&yrow)
                            .for_each(|g, &y| *g = y * (*g - dot));
                    }
                    acc(&mut grads, *a, g);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normalized,
                    inv_std,
                } => {
                    let gv = self.view(&nodes, *gain);
                    let (rows, cols) = normalized.dim();
                    let gb = grad.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gg = (&grad * normalized).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gain_b = gv.broadcast((rows, cols)).expect("gain shape");
                    let dn = &grad * &gain_b;
                    let mut dx = Matrix::zeros((rows, cols));
                    for r in 0..rows {
                        let dnr = dn.row(r);
                        let nr = normalized.row(r);
                        let mean_dn = dnr.sum() / cols as f64;
                        let mean_dn_n = dnr.iter().zip(nr.iter()).map(|(a, b)| a * b).sum::<f64>()
                            / cols as f64;
                        for c in 0..cols {
                            dx[[r, c]] = inv_std[r] * (dnr[c] - mean_dn - nr[c] * mean_dn_n);
                        }
                    }
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gain, gg);
                    acc(&mut grads, *bias, gb);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = self.view(&nodes, p).nrows();
                        acc(
                            &mut grads,
                            p,
                            grad.slice(s![start..start + n, ..]).to_owned(),
                        );
                        start += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = self.view(&nodes, p).ncols();
                        acc(
                            &mut grads,
                            p,
                            grad.slice(s![.., start..start + n]).to_owned(),
                        );
                        start += n;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut g = Matrix::zeros(self.view(&nodes, *a).dim());
                    let n = grad.nrows();
                    g.slice_mut(s![*start..*start + n, ..]).assign(&grad);
                    acc(&mut grads, *a, g);
                }
                Op::SliceCols(a, start) => {
                    let mut g = Matrix::zeros(self.view(&nodes, *a).dim());
                    let n = grad.ncols();
                    g.slice_mut(s![.., *start..*start + n]).assign(&grad);
                    acc(&mut grads, *a, g);
                }
                Op::Gather(a, indices) => {
                    let mut g = Matrix::zeros(self.view(&nodes, *a).dim());
                    for (r, &i) in indices.iter().enumerate() {
                        let mut dst = g.row_mut(i);
                        dst += &grad.row(r);
                    }
                    acc(&mut grads, *a, g);
                }
                Op::SumAll(a) => {
                    let shape = self.view(&nodes, *a).dim();
                    acc(&mut grads, *a, Matrix::from_elem(shape, grad[[0, 0]]));
                }
                Op::MeanRows(a) => {
                    let shape = self.view(&nodes, *a).dim();
                    let g = grad
                        .broadcast(shape)
                        .expect("mean grad")
                        .mapv(|g| g / shape.0 as f64);
                    acc(&mut grads, *a, g);
                }
                Op::BceWithLogits(logit, label) => {
                    let z = self.view(&nodes, *logit)[[0, 0]];
                    let d = (sigmoid(z) - label) * grad[[0, 0]];
                    acc(&mut grads, *logit, Matrix::from_elem((1, 1), d));
                }
            }
        }
        param_grads
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Row-wise softmax on a plain matrix.
pub fn softmax_rows(x: ArrayView2<'_, f64>) -> Matrix {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}
