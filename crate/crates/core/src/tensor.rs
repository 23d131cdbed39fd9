//! Dense tensors and a minimal reverse-mode tape.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles during the
//! forward pass; [`Tape::backward`] then walks the record in reverse and
//! returns a fresh [`Gradients`] table. Recording and backward never
//! interleave: build the loss, call `backward`, read the gradients.
//!
//! Only the operations needed by the whitening and DCW losses are provided:
//! matrix product, transpose, reshape, elementwise arithmetic against a
//! tensor or a scalar, sum/mean reductions, flat gathers, and
//! [`ColumnMix`], a sparse column resampling that carries bilinear
//! interpolation and pixel selection.

use std::cell::RefCell;
use std::rc::Rc;

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::Dimension("tensor rank must be at least 1".into()));
    }
    shape.iter().try_fold(1usize, |acc, &d| {
        if d == 0 {
            return Err(Error::Dimension(format!(
                "zero-sized dimension in shape {shape:?}"
            )));
        }
        acc.checked_mul(d)
            .ok_or_else(|| Error::Dimension(format!("shape {shape:?} overflows")))
    })
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len = check_shape(&shape)?;
        if len != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Panics on an invalid shape.
    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = check_shape(shape).expect("invalid tensor shape");
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let len = check_shape(shape).expect("invalid tensor shape");
        Self {
            shape: shape.to_vec(),
            data: (0..len).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// A tensor holding exactly one value.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// First element; the value of a scalar tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    fn matrix_dims(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Dimension(format!(
                "{what} expects a rank-2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.matrix_dims("matmul")?;
        let (k2, n) = other.matrix_dims("matmul")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, &b) in row.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.matrix_dims("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
        })
    }

    pub fn has_nan(&self) -> bool {
        self.data.iter().any(|x| x.is_nan())
    }
}

/// Output shape and per-input output index for a reduction over `axes`.
fn reduction_plan(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let rank = shape.len();
    let mut reduced = vec![false; rank];
    for &a in axes {
        if a >= rank {
            return Err(Error::Dimension(format!(
                "axis {a} out of range for rank {rank}"
            )));
        }
        if reduced[a] {
            return Err(Error::Dimension(format!("axis {a} listed twice")));
        }
        reduced[a] = true;
    }
    let mut out_shape: Vec<usize> = (0..rank)
        .filter(|&a| !reduced[a])
        .map(|a| shape[a])
        .collect();
    if out_shape.is_empty() {
        out_shape.push(1);
    }
    let len: usize = shape.iter().product();
    let mut index = Vec::with_capacity(len);
    let mut coord = vec![0usize; rank];
    for _ in 0..len {
        let mut o = 0;
        for a in 0..rank {
            if !reduced[a] {
                o = o * shape[a] + coord[a];
            }
        }
        index.push(o);
        for a in (0..rank).rev() {
            coord[a] += 1;
            if coord[a] < shape[a] {
                break;
            }
            coord[a] = 0;
        }
    }
    Ok((out_shape, index))
}

/// Sparse linear resampling of the columns of a `[rows, in_cols]` matrix.
///
/// Output column `j` is `sum_t weight_t * input[:, source_t]` over the taps
/// pushed for `j`. A column with no taps is all zeros.
#[derive(Clone, Debug, Default)]
pub struct ColumnMix {
    input_columns: usize,
    offsets: Vec<usize>,
    sources: Vec<usize>,
    weights: Vec<f64>,
}

impl ColumnMix {
    pub fn new(input_columns: usize) -> Self {
        Self {
            input_columns,
            offsets: vec![0],
            sources: Vec::new(),
            weights: Vec::new(),
        }
    }

    /// Selects the given input columns in order, with unit weight.
    pub fn select(input_columns: usize, columns: impl IntoIterator<Item = usize>) -> Self {
        let mut mix = Self::new(input_columns);
        for c in columns {
            mix.push_column(&[(c, 1.0)]);
        }
        mix
    }

    /// Panics if a source index is out of range.
    pub fn push_column(&mut self, taps: &[(usize, f64)]) {
        for &(s, w) in taps {
            assert!(s < self.input_columns, "column tap {s} out of range");
            self.sources.push(s);
            self.weights.push(w);
        }
        self.offsets.push(self.sources.len());
    }

    pub fn output_columns(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn input_columns(&self) -> usize {
        self.input_columns
    }

    pub fn taps(&self, column: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.offsets[column]..self.offsets[column + 1];
        self.sources[range.clone()]
            .iter()
            .copied()
            .zip(self.weights[range].iter().copied())
    }

    pub fn apply(&self, input: &Tensor) -> Result<Tensor> {
        let (rows, cols) = input.matrix_dims("column mix")?;
        if cols != self.input_columns {
            return Err(Error::Dimension(format!(
                "column mix built for {} columns, input has {cols}",
                self.input_columns
            )));
        }
        let out_cols = self.output_columns();
        if out_cols == 0 {
            return Err(Error::Dimension("column mix has no output columns".into()));
        }
        let mut out = vec![0.0; rows * out_cols];
        for j in 0..out_cols {
            for (s, w) in self.taps(j) {
                for r in 0..rows {
                    out[r * out_cols + j] += w * input.data[r * cols + s];
                }
            }
        }
        Tensor::new(vec![rows, out_cols], out)
    }

    fn apply_transpose(&self, rows: usize, grad: &[f64], acc: &mut [f64]) {
        let out_cols = self.output_columns();
        let cols = self.input_columns;
        for j in 0..out_cols {
            for (s, w) in self.taps(j) {
                for r in 0..rows {
                    acc[r * cols + s] += w * grad[r * out_cols + j];
                }
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize),
    Scale(usize, f64),
    Abs(usize),
    ClampMin(usize, f64),
    Sum {
        input: usize,
        index: Vec<usize>,
    },
    Mean {
        input: usize,
        index: Vec<usize>,
        count: usize,
    },
    Gather {
        input: usize,
        indices: Vec<usize>,
    },
    Mix {
        input: usize,
        mix: Rc<ColumnMix>,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
///
/// Single-threaded by construction; run independent tapes on separate
/// threads.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value().shape())
            .finish()
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
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Constant, false)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Gradients of a scalar `loss` with respect to every recorded node.
    ///
    /// Each call starts from zeroed accumulators, so repeated calls return
    /// identical tables.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        assert!(
            std::ptr::eq(self, loss.tape),
            "loss recorded on another tape"
        );
        let nodes = self.nodes.borrow();
        if !nodes[loss.id].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                propagate(&nodes, node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }

        let out = nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (g, node.requires_grad) {
                (Some(g), true) => Some(Tensor {
                    shape: node.value.shape.clone(),
                    data: g,
                }),
                (None, true) => Some(Tensor::zeros(node.value.shape())),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: out })
    }
}

fn accumulate(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: usize,
    f: impl FnOnce(&mut [f64]),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    f(slot);
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match &node.op {
        Op::Leaf | Op::Constant => {}
        Op::MatMul(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (m, k) = (av.shape[0], av.shape[1]);
            let n = bv.shape[1];
            // dA = G · Bᵀ
            accumulate(grads, nodes, *a, |acc| {
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g[i * n + j] * bv.data[p * n + j];
                        }
                        acc[i * k + p] += s;
                    }
                }
            });
            // dB = Aᵀ · G
            accumulate(grads, nodes, *b, |acc| {
                for i in 0..m {
                    for p in 0..k {
                        let a_ip = av.data[i * k + p];
                        for j in 0..n {
                            acc[p * n + j] += a_ip * g[i * n + j];
                        }
                    }
                }
            });
        }
        Op::Transpose(a) => {
            let (r, c) = (nodes[*a].value.shape[0], nodes[*a].value.shape[1]);
            accumulate(grads, nodes, *a, |acc| {
                for i in 0..r {
                    for j in 0..c {
                        acc[i * c + j] += g[j * r + i];
                    }
                }
            });
        }
        Op::Reshape(a) | Op::AddScalar(a) => {
            accumulate(grads, nodes, *a, |acc| add_into(acc, g));
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, |acc| add_into(acc, g));
            accumulate(grads, nodes, *b, |acc| add_into(acc, g));
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, |acc| add_into(acc, g));
            accumulate(grads, nodes, *b, |acc| {
                for (o, &x) in acc.iter_mut().zip(g) {
                    *o -= x;
                }
            });
        }
        Op::Mul(a, b) => {
            let av = nodes[*a].value.clone();
            let bv = nodes[*b].value.clone();
            accumulate(grads, nodes, *a, |acc| {
                for ((o, &x), &y) in acc.iter_mut().zip(g).zip(&bv.data) {
                    *o += x * y;
                }
            });
            accumulate(grads, nodes, *b, |acc| {
                for ((o, &x), &y) in acc.iter_mut().zip(g).zip(&av.data) {
                    *o += x * y;
                }
            });
        }
        Op::Scale(a, s) => {
            accumulate(grads, nodes, *a, |acc| {
                for (o, &x) in acc.iter_mut().zip(g) {
                    *o += s * x;
                }
            });
        }
        Op::Abs(a) => {
            let av = nodes[*a].value.clone();
            accumulate(grads, nodes, *a, |acc| {
                for ((o, &x), &v) in acc.iter_mut().zip(g).zip(&av.data) {
                    *o += x * sign(v);
                }
            });
        }
        Op::ClampMin(a, floor) => {
            let av = nodes[*a].value.clone();
            accumulate(grads, nodes, *a, |acc| {
                for ((o, &x), &v) in acc.iter_mut().zip(g).zip(&av.data) {
                    if v > *floor {
                        *o += x;
                    }
                }
            });
        }
        Op::Sum { input, index } => {
            accumulate(grads, nodes, *input, |acc| {
                for (o, &i) in acc.iter_mut().zip(index) {
                    *o += g[i];
                }
            });
        }
        Op::Mean {
            input,
            index,
            count,
        } => {
            let inv = 1.0 / *count as f64;
            accumulate(grads, nodes, *input, |acc| {
                for (o, &i) in acc.iter_mut().zip(index) {
                    *o += g[i] * inv;
                }
            });
        }
        Op::Gather { input, indices } => {
            accumulate(grads, nodes, *input, |acc| {
                for (&i, &x) in indices.iter().zip(g) {
                    acc[i] += x;
                }
            });
        }
        Op::Mix { input, mix } => {
            let rows = nodes[*input].value.shape[0];
            accumulate(grads, nodes, *input, |acc| {
                mix.apply_transpose(rows, g, acc)
            });
        }
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (o, &x) in acc.iter_mut().zip(g) {
        *o += x;
    }
}

/// `sign(0) = 0`, the L1 subgradient convention used throughout.
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.tape.requires_grad(self.id);
        self.tape.push(value, op, rg)
    }

    fn binary(&self, other: Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
        let rg = self.tape.requires_grad(self.id) || self.tape.requires_grad(other.id);
        self.tape.push(value, op, rg)
    }

    fn zip_with(&self, other: Var<'t>, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let a = self.value();
        let b = other.value();
        if a.shape != b.shape {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                a.shape, b.shape
            )));
        }
        Ok(Tensor {
            shape: a.shape.clone(),
            data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
        })
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.value().matmul(&other.value())?;
        Ok(self.binary(other, value, Op::MatMul(self.id, other.id)))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let value = self.value().transpose()?;
        Ok(self.unary(value, Op::Transpose(self.id)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().reshape(shape)?;
        Ok(self.unary(value, Op::Reshape(self.id)))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.zip_with(other, "add", |x, y| x + y)?;
        Ok(self.binary(other, value, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.zip_with(other, "sub", |x, y| x - y)?;
        Ok(self.binary(other, value, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.zip_with(other, "mul", |x, y| x * y)?;
        Ok(self.binary(other, value, Op::Mul(self.id, other.id)))
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t> {
        let value = self.value().map(|x| x + s);
        self.unary(value, Op::AddScalar(self.id))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        let value = self.value().map(|x| x * s);
        self.unary(value, Op::Scale(self.id, s))
    }

    pub fn abs(&self) -> Var<'t> {
        let value = self.value().map(f64::abs);
        self.unary(value, Op::Abs(self.id))
    }

    pub fn clamp_min(&self, floor: f64) -> Var<'t> {
        let value = self.value().map(|x| x.max(floor));
        self.unary(value, Op::ClampMin(self.id, floor))
    }

    pub fn sum(&self, axes: &[usize]) -> Result<Var<'t>> {
        let (value, index) = reduce(&self.value(), axes)?;
        Ok(self.unary(
            value,
            Op::Sum {
                input: self.id,
                index,
            },
        ))
    }

    pub fn mean(&self, axes: &[usize]) -> Result<Var<'t>> {
        let input = self.value();
        let (mut value, index) = reduce(&input, axes)?;
        let count = input.len() / value.len();
        for v in &mut value.data {
            *v /= count as f64;
        }
        Ok(self.unary(
            value,
            Op::Mean {
                input: self.id,
                index,
                count,
            },
        ))
    }

    pub fn sum_all(&self) -> Var<'t> {
        let axes: Vec<usize> = (0..self.value().rank()).collect();
        self.sum(&axes).expect("all axes are valid")
    }

    pub fn mean_all(&self) -> Var<'t> {
        let axes: Vec<usize> = (0..self.value().rank()).collect();
        self.mean(&axes).expect("all axes are valid")
    }

    /// Picks flat (row-major) elements into a rank-1 tensor.
    pub fn gather(&self, indices: &[usize]) -> Result<Var<'t>> {
        let input = self.value();
        if indices.is_empty() {
            return Err(Error::Dimension("gather needs at least one index".into()));
        }
        let data = indices
            .iter()
            .map(|&i| {
                input.data.get(i).copied().ok_or_else(|| {
                    Error::Dimension(format!("gather index {i} out of range for {}", input.len()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let value = Tensor {
            shape: vec![indices.len()],
            data,
        };
        Ok(self.unary(
            value,
            Op::Gather {
                input: self.id,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn mix_columns(&self, mix: Rc<ColumnMix>) -> Result<Var<'t>> {
        let value = mix.apply(&self.value())?;
        Ok(self.unary(
            value,
            Op::Mix {
                input: self.id,
                mix,
            },
        ))
    }
}

fn reduce(input: &Tensor, axes: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    let (shape, index) = reduction_plan(input.shape(), axes)?;
    let len = shape.iter().product();
    let mut data = vec![0.0; len];
    for (&x, &o) in input.data.iter().zip(&index) {
        data[o] += x;
    }
    Ok((Tensor { shape, data }, index))
}

/// Gradient table returned by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for any node that requires one; leaves that the loss does
    /// not depend on get zeros of their own shape.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Owned gradient, zeros when the node has none.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }
}

/// Outcome of [`finite_diff_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Flat index of the coordinate with the largest relative error.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub pass: bool,
    /// Set when the function itself failed to evaluate.
    pub error: Option<String>,
}

/// Compares the tape gradient of `f` at `x` against central differences.
///
/// `f` records a scalar function of its input on the tape it is given; it is
/// evaluated once for the analytic gradient and twice per coordinate for the
/// numeric one. The relative error per coordinate is
/// `|a - n| / max(|a|, |n|, 1e-12)` and the check passes when the maximum is
/// at most `tol`. Failures are reported, never returned as errors.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> GradCheckReport
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let failed = |msg: String| GradCheckReport {
        max_rel_err: f64::INFINITY,
        worst_index: 0,
        analytic: Vec::new(),
        numeric: Vec::new(),
        pass: false,
        error: Some(msg),
    };
    if !(h > 0.0) {
        return failed(format!("step must be positive, got {h}"));
    }

    let analytic = {
        let tape = Tape::new();
        let input = tape.leaf(x.clone());
        match f(&tape, input).and_then(|loss| tape.backward(loss)) {
            Ok(grads) => grads.wrt(input).into_data(),
            Err(e) => return failed(e.to_string()),
        }
    };

    let eval = |data: Vec<f64>| -> Result<f64> {
        let tape = Tape::new();
        let input = tape.constant(Tensor::new(x.shape().to_vec(), data)?);
        let out = f(&tape, input)?;
        let v = out.value();
        if !v.is_scalar() {
            return Err(Error::Contract(
                "gradient check needs a scalar function".into(),
            ));
        }
        Ok(v.item())
    };

    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut plus = x.data().to_vec();
        let mut minus = x.data().to_vec();
        plus[i] += h;
        minus[i] -= h;
        match (eval(plus), eval(minus)) {
            (Ok(fp), Ok(fm)) => numeric.push((fp - fm) / (2.0 * h)),
            (Err(e), _) | (_, Err(e)) => return failed(e.to_string()),
        }
    }

    let mut max_rel_err = 0.0f64;
    let mut worst_index = 0;
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-12);
        if rel > max_rel_err || rel.is_nan() {
            max_rel_err = if rel.is_nan() { f64::INFINITY } else { rel };
            worst_index = i;
        }
    }
    GradCheckReport {
        max_rel_err,
        worst_index,
        analytic,
        numeric,
        pass: max_rel_err <= tol,
        error: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::new(vec![], vec![]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn identity_matmul() {
        let m = random(&[3, 3], 1);
        assert_eq!(Tensor::eye(3).matmul(&m).unwrap(), m);
    }

    #[test]
    fn small_matmul() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[3.0, 7.0]);
        assert!(matches!(b.matmul(&b), Err(Error::Dimension(_))));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let b = random(&[5, 3], 3);
        let report = finite_diff_check(
            |tape, x| {
                let b = tape.constant(b.clone());
                Ok(x.matmul(b)?.sum_all())
            },
            &random(&[4, 5], 2),
            1e-5,
            1e-6,
        );
        assert!(report.pass, "{report:?}");

        let a = random(&[4, 5], 4);
        let report = finite_diff_check(
            |tape, x| {
                let a = tape.constant(a.clone());
                Ok(a.matmul(x)?.sum_all())
            },
            &b,
            1e-5,
            1e-6,
        );
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn abs_and_mask() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = x.abs();
        assert_eq!(y.value().data(), &[1.0, 0.0, 2.0]);
        let g = tape.backward(y.sum_all()).unwrap();
        assert_eq!(g.wrt(x).data(), &[-1.0, 0.0, 1.0]);

        let tape = Tape::new();
        let x = tape.leaf(random(&[4], 9));
        let mask = tape.constant(Tensor::zeros(&[4]));
        let y = x.mul(mask).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
        let g = tape.backward(y.sum_all()).unwrap();
        assert!(g.wrt(x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2]));
        let b = tape.leaf(Tensor::zeros(&[3]));
        assert!(matches!(a.add(b), Err(Error::Dimension(_))));
        assert!(matches!(a.mul(b), Err(Error::Dimension(_))));
    }

    #[test]
    fn clamp_min_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![-1.0, 0.5, 2.0]).unwrap());
        let y = x.clamp_min(0.0);
        assert_eq!(y.value().data(), &[0.0, 0.5, 2.0]);
        let g = tape.backward(y.sum_all()).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn reductions() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::full(&[2, 3, 4], 1.75));
        assert_eq!(c.mean_all().item(), 1.75);
        let x = tape.constant(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        assert_eq!(x.sum(&[0]).unwrap().item(), 6.0);

        let m = tape.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        assert_eq!(m.sum(&[0]).unwrap().value().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(m.mean(&[1]).unwrap().value().data(), &[2.0, 5.0]);
        assert!(matches!(m.sum(&[2]), Err(Error::Dimension(_))));
        assert!(matches!(m.sum(&[0, 0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let x = random(&[3, 4], 11);
        let tape = Tape::new();
        let v = tape.leaf(x.clone());
        let g = tape.backward(v.mean_all()).unwrap();
        assert!(g
            .wrt(v)
            .data()
            .iter()
            .all(|&d| (d - 1.0 / 12.0).abs() < 1e-15));

        let w = random(&[4], 12);
        let report = finite_diff_check(
            |tape, x| {
                let w = tape.constant(w.clone());
                let m = x.mean(&[0])?;
                Ok(m.mul(w)?.sum_all())
            },
            &x,
            1e-5,
            1e-8,
        );
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn backward_basics() {
        let x0 = random(&[6], 5);
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = tape.leaf(random(&[2], 6));
        let loss = x.mul(x).unwrap().sum_all();
        let g = tape.backward(loss).unwrap();
        for (d, v) in g.wrt(x).data().iter().zip(x0.data()) {
            assert!((d - 2.0 * v).abs() < 1e-15);
        }
        assert_eq!(g.get(y).unwrap().data(), &[0.0, 0.0]);
        let again = tape.backward(loss).unwrap();
        assert_eq!(again.wrt(x), g.wrt(x));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn gather_transpose_reshape_mix() {
        let x = random(&[3, 4], 21);
        let mut mix = ColumnMix::new(4);
        mix.push_column(&[(0, 0.25), (3, 0.75)]);
        mix.push_column(&[]);
        mix.push_column(&[(2, 1.0)]);
        let mix = Rc::new(mix);
        let w = random(&[4, 3], 22);
        let report = finite_diff_check(
            |tape, x| {
                let mixed = x.mix_columns(mix.clone())?;
                let w = tape.constant(w.clone());
                let t = x.transpose()?.mul(w)?;
                let r = x.reshape(&[12])?.gather(&[0, 5, 5, 11])?;
                mixed.sum_all().add(t.abs().sum_all())?.add(r.sum_all())
            },
            &x,
            1e-6,
            1e-7,
        );
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn finite_diff_reports_instead_of_failing() {
        let r = finite_diff_check(|_, x| Ok(x.sum_all()), &random(&[5], 1), 1e-5, 1e-9);
        assert!(r.pass);
        assert!(r.max_rel_err < 1e-9);

        let x = Tensor::new(vec![4], vec![0.5, -0.3, 1.2, -2.0]).unwrap();
        let r = finite_diff_check(|_, x| Ok(x.abs().sum_all()), &x, 1e-5, 1e-8);
        assert!(r.pass, "{r:?}");

        let r = finite_diff_check(|_, x| Ok(x), &random(&[3], 1), 1e-5, 1e-4);
        assert!(!r.pass);
        assert!(r.error.is_some());
    }
}
