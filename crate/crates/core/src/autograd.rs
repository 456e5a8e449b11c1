//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! Every value in a [`Graph`] is a 2-D matrix; vectors are `1×n` rows or `n×1`
//! columns and scalars are `1×1`. Elementwise binary ops broadcast singleton
//! axes on either side, and the backward pass sums gradients back down to the
//! operand shape.
//!
//! Parameters are borrowed from a [`ParamStore`] rather than copied, so large
//! weight matrices are never cloned per step.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis, Zip};

use crate::params::{ParamId, ParamStore};

pub type Mat = Array2<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Affine(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var, f64),
    Sqrt(Var),
    Abs(Var),
    SoftmaxRows(Var),
    Im2Col(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    TopKMeanCols(Var, Vec<Vec<usize>>),
}

enum Value {
    Owned(Mat),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// A single forward pass recorded for differentiation.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
    detached: Vec<Mat>,
    frozen: Option<Vec<Mat>>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            detached: Vec::new(),
            frozen: None,
        }
    }

    /// A graph whose `detach` calls return `values` in order instead of the
    /// live values. Finite differences under this graph hold every stopped
    /// gradient fixed, which is what the analytic gradient differentiates.
    pub fn with_frozen_detach(store: &'p ParamStore, values: Vec<Mat>) -> Self {
        Self {
            frozen: Some(values),
            ..Self::new(store)
        }
    }

    /// Values produced by `detach` so far, in call order.
    pub fn detached_values(&self) -> &[Mat] {
        &self.detached
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Param(id) => self.store.get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input leaf whose gradient is tracked (used for input-sensitivity checks).
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn scalar_const(&mut self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    /// Parameter node. Each parameter maps to exactly one node per graph, so
    /// every use accumulates into the same gradient slot.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    /// Stop-gradient: a constant copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let k = self.detached.len();
        let value = match &self.frozen {
            Some(values) => values[k].clone(),
            None => self.value(v).clone(),
        };
        self.detached.push(value.clone());
        self.constant(value)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(&Mat, &Mat) -> Mat, op: Op) -> Var {
        let value = f(self.value(a), self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(value, op, needs)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).mapv(f);
        let needs = self.needs(a);
        self.push(value, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x.dot(y), Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let needs = self.needs(a);
        self.push(value, Op::Transpose(a), needs)
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        self.unary(a, |x| scale * x + shift, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Var {
        self.affine(a, scale, 0.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// `ln(max(a, floor))`; gradient is zero where the clamp is active.
    pub fn ln_clamped(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, move |x| x.max(floor).ln(), Op::Ln(a, floor))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let needs = self.needs(a);
        self.push(value, Op::SoftmaxRows(a), needs)
    }

    /// Unfolds a `T×C` sequence into `T×(k·C)` rows of zero-padded temporal
    /// windows centred on each step (odd `k`).
    pub fn im2col(&mut self, a: Var, kernel: usize) -> Var {
        let value = im2col(self.value(a), kernel);
        let needs = self.needs(a);
        self.push(value, Op::Im2Col(a, kernel), needs)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let needs = parts.iter().any(|v| self.needs(*v));
        self.push(value, Op::ConcatCols(parts.to_vec()), needs)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value =
            ndarray::concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        let needs = parts.iter().any(|v| self.needs(*v));
        self.push(value, Op::ConcatRows(parts.to_vec()), needs)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let needs = self.needs(a);
        self.push(value, Op::SliceCols(a, start), needs)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        let needs = self.needs(a);
        self.push(value, Op::SliceRows(a, start), needs)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let needs = self.needs(a);
        self.push(value, Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let total = self.sum(a);
        self.scale(total, 1.0 / n)
    }

    /// Column sums as a `1×n` row.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        let needs = self.needs(a);
        self.push(value, Op::SumRows(a), needs)
    }

    /// Row sums as an `m×1` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let needs = self.needs(a);
        self.push(value, Op::SumCols(a), needs)
    }

    /// For each column, the mean of its `k` largest entries (`1×n` output).
    /// Ties are broken towards the earlier row.
    pub fn topk_mean_cols(&mut self, a: Var, k: usize) -> Var {
        let m = self.value(a);
        let (rows, cols) = m.dim();
        assert!(
            k >= 1 && k <= rows,
            "topk_mean_cols: k={k} outside 1..={rows}"
        );
        let mut picks = Vec::with_capacity(cols);
        let mut out = Array2::zeros((1, cols));
        for j in 0..cols {
            let col = m.column(j);
            let idx = topk_indices(&col.to_vec(), k);
            out[[0, j]] = idx.iter().map(|&i| m[[i, j]]).sum::<f64>() / k as f64;
            picks.push(idx);
        }
        let needs = self.needs(a);
        self.push(out, Op::TopKMeanCols(a, picks), needs)
    }

    /// Reverse pass from a `1×1` output.
    pub fn backward(&self, out: Var) -> Grads {
        assert_eq!(self.shape(out), (1, 1), "backward requires a scalar output");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = Some(g);
                continue;
            }
            let y = match &node.value {
                Value::Owned(m) => m,
                Value::Param(id) => self.store.get(*id),
            };
            match &node.op {
                Op::Leaf | Op::Param => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, || reduce_to(&g, self.shape(*a)));
                    self.accumulate(&mut grads, *b, || reduce_to(&g, self.shape(*b)));
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, || reduce_to(&g, self.shape(*a)));
                    self.accumulate(&mut grads, *b, || -reduce_to(&g, self.shape(*b)));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    self.accumulate(&mut grads, *a, || reduce_to(&(&g * vb), va.dim()));
                    self.accumulate(&mut grads, *b, || reduce_to(&(&g * va), vb.dim()));
                }
                Op::Div(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    self.accumulate(&mut grads, *a, || reduce_to(&(&g / vb), va.dim()));
                    self.accumulate(&mut grads, *b, || {
                        let t = &g * y / vb;
                        -reduce_to(&t, vb.dim())
                    });
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    self.accumulate(&mut grads, *a, || g.dot(&vb.t()));
                    self.accumulate(&mut grads, *b, || va.t().dot(&g));
                }
                Op::Transpose(a) => {
                    self.accumulate(&mut grads, *a, || g.t().to_owned());
                }
                Op::Affine(a, scale) => {
                    self.accumulate(&mut grads, *a, || &g * *scale);
                }
                Op::Relu(a) => {
                    let va = self.value(*a);
                    self.accumulate(&mut grads, *a, || {
                        let mut d = g.clone();
                        Zip::from(&mut d).and(va).for_each(|d, &x| {
                            if x <= 0.0 {
                                *d = 0.0
                            }
                        });
                        d
                    });
                }
                Op::Sigmoid(a) => {
                    self.accumulate(&mut grads, *a, || {
                        let mut d = g.clone();
                        Zip::from(&mut d)
                            .and(y)
                            .for_each(|d, &s| *d *= s * (1.0 - s));
                        d
                    });
                }
                Op::Tanh(a) => {
                    self.accumulate(&mut grads, *a, || {
                        let mut d = g.clone();
                        Zip::from(&mut d).and(y).for_each(|d, &t| *d *= 1.0 - t * t);
                        d
                    });
                }
                Op::Exp(a) => {
                    self.accumulate(&mut grads, *a, || &g * y);
                }
                Op::Ln(a, floor) => {
                    let va = self.value(*a);
                    let floor = *floor;
                    self.accumulate(&mut grads, *a, || {
                        let mut d = g.clone();
                        Zip::from(&mut d)
                            .and(va)
                            .for_each(|d, &x| *d = if x > floor { *d / x } else { 0.0 });
                        d
                    });
                }
                Op::Sqrt(a) => {
                    self.accumulate(&mut grads, *a, || {
                        let mut d = g.clone();
                        Zip::from(&mut d).and(y).for_each(|d, &r| *d *= 0.5 / r);
                        d
                    });
                }
                Op::Abs(a) => {
                    let va = self.value(*a);
                    self.accumulate(&mut grads, *a, || {
                        let mut d = g.clone();
                        Zip::from(&mut d).and(va).for_each(|d, &x| *d *= sign(x));
                        d
                    });
                }
                Op::SoftmaxRows(a) => {
                    self.accumulate(&mut grads, *a, || {
                        let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                        y * &(&g - &dot)
                    });
                }
                Op::Im2Col(a, k) => {
                    let shape = self.shape(*a);
                    self.accumulate(&mut grads, *a, || col2im(&g, shape, *k));
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        let st = start;
                        self.accumulate(&mut grads, *p, || g.slice(s![.., st..st + w]).to_owned());
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let h = self.shape(*p).0;
                        let st = start;
                        self.accumulate(&mut grads, *p, || g.slice(s![st..st + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let shape = self.shape(*a);
                    let w = g.ncols();
                    self.accumulate(&mut grads, *a, || {
                        let mut d = Array2::zeros(shape);
                        d.slice_mut(s![.., *start..*start + w]).assign(&g);
                        d
                    });
                }
                Op::SliceRows(a, start) => {
                    let shape = self.shape(*a);
                    let h = g.nrows();
                    self.accumulate(&mut grads, *a, || {
                        let mut d = Array2::zeros(shape);
                        d.slice_mut(s![*start..*start + h, ..]).assign(&g);
                        d
                    });
                }
                Op::Sum(a) => {
                    let shape = self.shape(*a);
                    let gv = g[[0, 0]];
                    self.accumulate(&mut grads, *a, || Array2::from_elem(shape, gv));
                }
                Op::SumRows(a) => {
                    let shape = self.shape(*a);
                    self.accumulate(&mut grads, *a, || g.broadcast(shape).unwrap().to_owned());
                }
                Op::SumCols(a) => {
                    let shape = self.shape(*a);
                    self.accumulate(&mut grads, *a, || g.broadcast(shape).unwrap().to_owned());
                }
                Op::TopKMeanCols(a, picks) => {
                    let shape = self.shape(*a);
                    self.accumulate(&mut grads, *a, || {
                        let mut d = Array2::zeros(shape);
                        for (j, idx) in picks.iter().enumerate() {
                            let share = g[[0, j]] / idx.len() as f64;
                            for &i in idx {
                                d[[i, j]] += share;
                            }
                        }
                        d
                    });
                }
            }
            grads[idx] = Some(g);
        }

        let mut params = HashMap::new();
        for (id, v) in &self.param_nodes {
            if let Some(g) = grads[v.0].take() {
                params.insert(*id, g);
                grads[v.0] = None;
            }
        }
        Grads {
            nodes: grads,
            params,
        }
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], target: Var, f: impl FnOnce() -> Mat) {
        if !self.needs(target) {
            return;
        }
        let d = f();
        match &mut grads[target.0] {
            Some(existing) => *existing += &d,
            slot @ None => *slot = Some(d),
        }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads {
    nodes: Vec<Option<Mat>>,
    params: HashMap<ParamId, Mat>,
}

impl Grads {
    /// Gradient with respect to a tracked input leaf.
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to a parameter; `None` when the parameter did not
    /// take part in the differentiated expression.
    pub fn param(&self, id: ParamId) -> Option<&Mat> {
        self.params.get(&id)
    }

    pub fn into_params(self) -> HashMap<ParamId, Mat> {
        self.params
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

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|x| (x - max).exp());
        let total = row.sum();
        row.mapv_inplace(|x| x / total);
    }
    out
}

/// Indices of the `k` largest entries, descending by value, earlier index first on ties.
pub fn topk_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn reduce_to(g: &Mat, shape: (usize, usize)) -> Mat {
    if g.dim() == shape {
        return g.clone();
    }
    let mut r = g.clone();
    if shape.0 == 1 && r.nrows() != 1 {
        r = r.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && r.ncols() != 1 {
        r = r.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    debug_assert_eq!(r.dim(), shape);
    r
}

pub fn im2col(x: &Mat, kernel: usize) -> Mat {
    assert!(kernel % 2 == 1, "im2col: kernel must be odd");
    let (t, c) = x.dim();
    let half = (kernel / 2) as isize;
    let mut out = Array2::zeros((t, kernel * c));
    for row in 0..t {
        for j in 0..kernel {
            let src = row as isize + j as isize - half;
            if src < 0 || src >= t as isize {
                continue;
            }
            out.slice_mut(s![row, j * c..(j + 1) * c])
                .assign(&x.row(src as usize));
        }
    }
    out
}

fn col2im(g: &Mat, shape: (usize, usize), kernel: usize) -> Mat {
    let (t, c) = shape;
    let half = (kernel / 2) as isize;
    let mut out = Array2::zeros(shape);
    for row in 0..t {
        for j in 0..kernel {
            let src = row as isize + j as isize - half;
            if src < 0 || src >= t as isize {
                continue;
            }
            let mut dst = out.row_mut(src as usize);
            dst += &g.slice(s![row, j * c..(j + 1) * c]);
        }
    }
    out
}
