//! Define-by-run tape: every op appends a node holding its value and enough
//! saved state to run its backward rule.

use std::sync::Arc;

use super::kernels::{gemm, View};
use super::NdArray;
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Tensor {
    id: usize,
}

impl Tensor {
    pub fn id(self) -> usize {
        self.id
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRowBias { x: usize, bias: usize },
    Relu(usize),
    Concat { inputs: Vec<usize>, widths: Vec<usize> },
    ConcatRows(Vec<usize>),
    SliceCols { x: usize, start: usize },
    GatherRows { x: usize, index: Arc<[usize]> },
    Reshape(usize),
    ReduceMax { x: usize, argmax: Vec<usize> },
    Softmax(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    NormalizeRows { x: usize, norms: Vec<f64> },
    CrossNormRows { x: usize, target: Vec<f64> },
    Sum(usize),
    Mean(usize),
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// Record of operations, in creation order.
///
/// One tape serves one forward/backward pass; build a fresh tape per sample.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `t`, if `t` influenced it and
    /// requires gradients.
    pub fn get(&self, t: Tensor) -> Option<&[f64]> {
        self.grads.get(t.id).and_then(|g| g.as_deref())
    }
}

fn shape_str(s: &[usize]) -> String {
    format!("{s:?}")
}

fn as_matrix(shape: &[usize]) -> Option<(usize, usize)> {
    match *shape {
        [r, c] => Some((r, c)),
        _ => None,
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

    pub fn value(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.id].value
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.id].shape
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.id].requires_grad
    }

    /// Copies a value off the tape.
    pub fn to_array(&self, t: Tensor) -> NdArray {
        NdArray {
            shape: self.shape(t).to_vec(),
            data: self.value(t).to_vec(),
        }
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Result<Tensor> {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        if let Some(bad) = value.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{op_name} produced {} at element {bad}",
                value[bad],
                op_name = op_name(&op)
            )));
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Ok(Tensor { id })
    }

    fn leaf(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "{} values for shape {}",
                data.len(),
                shape_str(&shape)
            )));
        }
        self.push(data, shape, Op::Leaf, requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, array: &NdArray) -> Result<Tensor> {
        self.leaf(array.shape.clone(), array.data.clone(), true)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        self.leaf(shape, data, false)
    }

    /// A leaf that receives a gradient (for inputs under test).
    pub fn variable(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        self.leaf(shape, data, true)
    }

    fn matrix(&self, t: Tensor, what: &str) -> Result<(usize, usize)> {
        as_matrix(self.shape(t)).ok_or_else(|| {
            Error::Shape(format!("{what} expects a matrix, got {}", shape_str(self.shape(t))))
        })
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// `a (m×k) · b (k×n)`.
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, View::rows(self.value(a), k), View::rows(self.value(b), n), 0.0, &mut out);
        let rg = self.rg(&[a.id, b.id]);
        self.push(out, vec![m, n], Op::MatMul { a: a.id, b: b.id, m, k, n, trans_b: false }, rg)
    }

    /// `a (m×k) · bᵀ` where `b` is `n×k`.
    pub fn matmul_transposed(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (m, k) = self.matrix(a, "matmul_transposed")?;
        let (n, k2) = self.matrix(b, "matmul_transposed")?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul {m}x{k} by ({n}x{k2})ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, View::rows(self.value(a), k), View::transposed(self.value(b), k), 0.0, &mut out);
        let rg = self.rg(&[a.id, b.id]);
        self.push(out, vec![m, n], Op::MatMul { a: a.id, b: b.id, m, k, n, trans_b: true }, rg)
    }

    fn same_shape(&self, a: Tensor, b: Tensor, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {} vs {}",
                shape_str(self.shape(a)),
                shape_str(self.shape(b))
            )));
        }
        Ok(())
    }

    fn binary(&mut self, a: Tensor, b: Tensor, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Tensor> {
        self.same_shape(a, b, what)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.rg(&[a.id, b.id]);
        self.push(out, self.shape(a).to_vec(), op, rg)
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a.id, b.id))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a.id, b.id))
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a.id, b.id))
    }

    pub fn scale(&mut self, a: Tensor, c: f64) -> Result<Tensor> {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let rg = self.rg(&[a.id]);
        self.push(out, self.shape(a).to_vec(), Op::Scale(a.id, c), rg)
    }

    /// Adds a length-`f` row vector to every row of an `n×f` matrix.
    pub fn add_row_bias(&mut self, x: Tensor, bias: Tensor) -> Result<Tensor> {
        let (n, f) = self.matrix(x, "add_row_bias")?;
        if self.value(bias).len() != f {
            return Err(Error::Shape(format!(
                "bias {} for {n}x{f} input",
                shape_str(self.shape(bias))
            )));
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks_exact(f)
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        let rg = self.rg(&[x.id, bias.id]);
        self.push(out, vec![n, f], Op::AddRowBias { x: x.id, bias: bias.id }, rg)
    }

    pub fn relu(&mut self, x: Tensor) -> Result<Tensor> {
        let out = self.value(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let rg = self.rg(&[x.id]);
        self.push(out, self.shape(x).to_vec(), Op::Relu(x.id), rg)
    }

    /// Feature-axis concatenation of `n×fᵢ` matrices.
    pub fn concat(&mut self, inputs: &[Tensor]) -> Result<Tensor> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let (n, _) = self.matrix(first, "concat")?;
        let mut widths = Vec::with_capacity(inputs.len());
        for &t in inputs {
            let (r, c) = self.matrix(t, "concat")?;
            if r != n {
                return Err(Error::Shape(format!("concat leading dims {n} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for row in 0..n {
            for (&t, &w) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(t)[row * w..(row + 1) * w]);
            }
        }
        let ids: Vec<usize> = inputs.iter().map(|t| t.id).collect();
        let rg = self.rg(&ids);
        self.push(out, vec![n, total], Op::Concat { inputs: ids, widths }, rg)
    }

    /// Row-axis concatenation of matrices with equal column counts.
    pub fn concat_rows(&mut self, inputs: &[Tensor]) -> Result<Tensor> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Shape("concat_rows of zero tensors".into()))?;
        let (_, f) = self.matrix(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &t in inputs {
            let (r, c) = self.matrix(t, "concat_rows")?;
            if c != f {
                return Err(Error::Shape(format!("concat_rows widths {f} vs {c}")));
            }
            rows += r;
            out.extend_from_slice(self.value(t));
        }
        let ids: Vec<usize> = inputs.iter().map(|t| t.id).collect();
        let rg = self.rg(&ids);
        self.push(out, vec![rows, f], Op::ConcatRows(ids), rg)
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, x: Tensor, start: usize, width: usize) -> Result<Tensor> {
        let (n, f) = self.matrix(x, "slice_cols")?;
        if start + width > f {
            return Err(Error::Shape(format!("slice {start}..{} of {f} columns", start + width)));
        }
        let out = self
            .value(x)
            .chunks_exact(f)
            .flat_map(|row| row[start..start + width].iter().copied())
            .collect();
        let rg = self.rg(&[x.id]);
        self.push(out, vec![n, width], Op::SliceCols { x: x.id, start }, rg)
    }

    /// Rows of `x` selected (with repetition allowed) by `index`.
    pub fn gather_rows(&mut self, x: Tensor, index: Arc<[usize]>) -> Result<Tensor> {
        let (n, f) = self.matrix(x, "gather_rows")?;
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::Shape(format!("gather index {bad} out of range for {n} rows")));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(index.len() * f);
        for &i in index.iter() {
            out.extend_from_slice(&src[i * f..(i + 1) * f]);
        }
        let rg = self.rg(&[x.id]);
        self.push(out, vec![index.len(), f], Op::GatherRows { x: x.id, index }, rg)
    }

    pub fn reshape(&mut self, x: Tensor, shape: Vec<usize>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::Shape(format!(
                "reshape {} to {}",
                shape_str(self.shape(x)),
                shape_str(&shape)
            )));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(&[x.id]);
        self.push(out, shape, Op::Reshape(x.id), rg)
    }

    /// Max over the middle axis of an `n×k×f` tensor, giving `n×f`.
    ///
    /// The subgradient goes to the first maximal entry.
    pub fn reduce_max(&mut self, x: Tensor) -> Result<Tensor> {
        let (n, k, f) = match *self.shape(x) {
            [n, k, f] => (n, k, f),
            _ => {
                return Err(Error::Shape(format!(
                    "reduce_max expects n×k×f, got {}",
                    shape_str(self.shape(x))
                )))
            }
        };
        if k == 0 {
            return Err(Error::Shape("reduce_max over an empty axis".into()));
        }
        let src = self.value(x);
        let mut out = vec![0.0; n * f];
        let mut argmax = vec![0usize; n * f];
        for i in 0..n {
            let base = i * k * f;
            out[i * f..(i + 1) * f].copy_from_slice(&src[base..base + f]);
            for (c, a) in argmax[i * f..(i + 1) * f].iter_mut().enumerate() {
                *a = base + c;
            }
            for j in 1..k {
                let row = &src[base + j * f..base + (j + 1) * f];
                for c in 0..f {
                    if row[c] > out[i * f + c] {
                        out[i * f + c] = row[c];
                        argmax[i * f + c] = base + j * f + c;
                    }
                }
            }
        }
        let rg = self.rg(&[x.id]);
        self.push(out, vec![n, f], Op::ReduceMax { x: x.id, argmax }, rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Tensor) -> Result<Tensor> {
        self.softmax_impl(x, None)
    }

    /// Row-wise softmax restricted to entries where `mask` is true; masked
    /// entries come out exactly zero. An all-true mask reproduces
    /// [`softmax_rows`](Self::softmax_rows) bit for bit.
    pub fn softmax_rows_masked(&mut self, x: Tensor, mask: &[bool]) -> Result<Tensor> {
        if mask.len() != self.value(x).len() {
            return Err(Error::Shape("softmax mask size differs from input".into()));
        }
        self.softmax_impl(x, Some(mask))
    }

    fn softmax_impl(&mut self, x: Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
        let (n, m) = self.matrix(x, "softmax_rows")?;
        let src = self.value(x);
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            let row = &src[r * m..(r + 1) * m];
            let keep = |j: usize| mask.is_none_or(|mk| mk[r * m + j]);
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if keep(j) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::Shape(format!("softmax row {r} has no unmasked entry")));
            }
            let dst = &mut out[r * m..(r + 1) * m];
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if keep(j) {
                    let e = (v - max).exp();
                    dst[j] = e;
                    sum += e;
                }
            }
            for d in dst.iter_mut() {
                *d /= sum;
            }
        }
        let rg = self.rg(&[x.id]);
        self.push(out, vec![n, m], Op::Softmax(x.id), rg)
    }

    /// Per-row standardization followed by `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Tensor, gamma: Tensor, beta: Tensor, eps: f64) -> Result<Tensor> {
        let (n, f) = self.matrix(x, "layer_norm")?;
        if f == 0 || self.value(gamma).len() != f || self.value(beta).len() != f {
            return Err(Error::Shape(format!("layer_norm affine size for width {f}")));
        }
        let src = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; n * f];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * f];
        for r in 0..n {
            let row = &src[r * f..(r + 1) * f];
            let mean = row.iter().sum::<f64>() / f as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / f as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..f {
                let h = (row[c] - mean) * inv;
                xhat[r * f + c] = h;
                out[r * f + c] = g[c] * h + b[c];
            }
        }
        let rg = self.rg(&[x.id, gamma.id, beta.id]);
        self.push(
            out,
            vec![n, f],
            Op::LayerNorm { x: x.id, gamma: gamma.id, beta: beta.id, xhat, inv_std },
            rg,
        )
    }

    /// Divides each row by `max(‖row‖, floor)`.
    pub fn normalize_rows(&mut self, x: Tensor, floor: f64) -> Result<Tensor> {
        let (n, f) = self.matrix(x, "normalize_rows")?;
        let src = self.value(x);
        let mut norms = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * f);
        for row in src.chunks_exact(f) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(floor);
            norms.push(norm);
            out.extend(row.iter().map(|v| v / norm));
        }
        let rg = self.rg(&[x.id]);
        self.push(out, vec![n, f], Op::NormalizeRows { x: x.id, norms }, rg)
    }

    /// `‖xᵢ × tᵢ‖` for each row of an `n×3` input against a constant target.
    pub fn cross_norm_rows(&mut self, x: Tensor, target: &[f64]) -> Result<Tensor> {
        let (n, f) = self.matrix(x, "cross_norm_rows")?;
        if f != 3 || target.len() != n * 3 {
            return Err(Error::Shape(format!(
                "cross_norm_rows needs n×3 inputs, got {n}x{f} and {} target values",
                target.len()
            )));
        }
        let out = self
            .value(x)
            .chunks_exact(3)
            .zip(target.chunks_exact(3))
            .map(|(a, b)| {
                let c = cross(a, b);
                (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt()
            })
            .collect();
        let rg = self.rg(&[x.id]);
        self.push(out, vec![n, 1], Op::CrossNormRows { x: x.id, target: target.to_vec() }, rg)
    }

    pub fn sum(&mut self, x: Tensor) -> Result<Tensor> {
        let s = self.value(x).iter().sum();
        let rg = self.rg(&[x.id]);
        self.push(vec![s], vec![1], Op::Sum(x.id), rg)
    }

    pub fn mean(&mut self, x: Tensor) -> Result<Tensor> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(Error::Shape("mean of an empty tensor".into()));
        }
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[x.id]);
        self.push(vec![s], vec![1], Op::Mean(x.id), rg)
    }

    /// Smallest distance of any relu input from its kink, and of any max
    /// reduction from a tie, over the whole tape. Finite-difference checks
    /// are only meaningful when this comfortably exceeds the step size.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for v in &self.nodes[*x].value {
                        margin = margin.min(v.abs());
                    }
                }
                Op::ReduceMax { x, .. } => {
                    let (n, k, f) = match self.nodes[*x].shape[..] {
                        [n, k, f] => (n, k, f),
                        _ => unreachable!("reduce_max input is 3-D"),
                    };
                    let src = &self.nodes[*x].value;
                    for i in 0..n {
                        for c in 0..f {
                            let (mut best, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
                            for j in 0..k {
                                let v = src[i * k * f + j * f + c];
                                if v > best {
                                    second = best;
                                    best = v;
                                } else if v > second {
                                    second = v;
                                }
                            }
                            if k > 1 {
                                margin = margin.min(best - second);
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Reverse sweep from a scalar `loss`, visiting nodes in exact reverse
    /// creation order.
    pub fn backward(&self, loss: Tensor) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {}",
                shape_str(self.shape(loss))
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if self.nodes[id].requires_grad {
                self.propagate(id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |target: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[target].requires_grad {
                return;
            }
            let slot = grads[target].get_or_insert_with(|| vec![0.0; nodes[target].value.len()]);
            f(slot);
        };
        match &nodes[id].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n, trans_b } => {
                let (av, bv) = (&nodes[a].value, &nodes[b].value);
                if trans_b {
                    // C = A·Bᵀ: dA = dC·B, dB = dCᵀ·A
                    acc(a, &mut |da| gemm(m, n, k, View::rows(g, n), View::rows(bv, k), 1.0, da));
                    acc(b, &mut |db| gemm(n, m, k, View::transposed(g, n), View::rows(av, k), 1.0, db));
                } else {
                    // C = A·B: dA = dC·Bᵀ, dB = Aᵀ·dC
                    acc(a, &mut |da| gemm(m, n, k, View::rows(g, n), View::transposed(bv, n), 1.0, da));
                    acc(b, &mut |db| gemm(k, m, n, View::transposed(av, k), View::rows(g, n), 1.0, db));
                }
            }
            &Op::Add(a, b) => {
                acc(a, &mut |d| add_into(d, g));
                acc(b, &mut |d| add_into(d, g));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |d| add_into(d, g));
                acc(b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a].value, &nodes[b].value);
                acc(a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                acc(b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            &Op::Scale(a, c) => acc(a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g)),
            &Op::AddRowBias { x, bias } => {
                acc(x, &mut |d| add_into(d, g));
                let f = nodes[bias].value.len();
                acc(bias, &mut |d| {
                    for row in g.chunks_exact(f) {
                        add_into(d, row);
                    }
                });
            }
            &Op::Relu(x) => {
                let xv = &nodes[x].value;
                acc(x, &mut |d| {
                    for i in 0..d.len() {
                        if xv[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Concat { inputs, widths } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&t, &w) in inputs.iter().zip(widths) {
                    acc(t, &mut |d| {
                        for (dr, gr) in d.chunks_exact_mut(w).zip(g.chunks_exact(total)) {
                            add_into(dr, &gr[offset..offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(inputs) => {
                let mut offset = 0;
                for &t in inputs {
                    let len = nodes[t].value.len();
                    acc(t, &mut |d| add_into(d, &g[offset..offset + len]));
                    offset += len;
                }
            }
            &Op::SliceCols { x, start } => {
                let f = nodes[x].shape[1];
                let w = nodes[id].shape[1];
                acc(x, &mut |d| {
                    for (dr, gr) in d.chunks_exact_mut(f).zip(g.chunks_exact(w)) {
                        add_into(&mut dr[start..start + w], gr);
                    }
                });
            }
            Op::GatherRows { x, index } => {
                let f = nodes[*x].shape[1];
                acc(*x, &mut |d| {
                    for (r, &src) in index.iter().enumerate() {
                        add_into(&mut d[src * f..(src + 1) * f], &g[r * f..(r + 1) * f]);
                    }
                });
            }
            &Op::Reshape(x) => acc(x, &mut |d| add_into(d, g)),
            Op::ReduceMax { x, argmax } => acc(*x, &mut |d| {
                for (o, &src) in argmax.iter().enumerate() {
                    d[src] += g[o];
                }
            }),
            &Op::Softmax(x) => {
                let y = &nodes[id].value;
                let m = nodes[id].shape[1];
                acc(x, &mut |d| {
                    for ((dr, yr), gr) in d.chunks_exact_mut(m).zip(y.chunks_exact(m)).zip(g.chunks_exact(m)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..m {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let f = nodes[*gamma].value.len();
                let gv = &nodes[*gamma].value;
                acc(*x, &mut |d| {
                    let mut dxh = vec![0.0; f];
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let gr = &g[r * f..(r + 1) * f];
                        let xr = &xhat[r * f..(r + 1) * f];
                        for c in 0..f {
                            dxh[c] = gr[c] * gv[c];
                        }
                        let s1: f64 = dxh.iter().sum();
                        let s2: f64 = dxh.iter().zip(xr).map(|(a, b)| a * b).sum();
                        let fl = f as f64;
                        for c in 0..f {
                            d[r * f + c] += inv / fl * (fl * dxh[c] - s1 - xr[c] * s2);
                        }
                    }
                });
                acc(*gamma, &mut |d| {
                    for (gr, xr) in g.chunks_exact(f).zip(xhat.chunks_exact(f)) {
                        for c in 0..f {
                            d[c] += gr[c] * xr[c];
                        }
                    }
                });
                acc(*beta, &mut |d| {
                    for gr in g.chunks_exact(f) {
                        add_into(d, gr);
                    }
                });
            }
            Op::NormalizeRows { x, norms } => {
                let f = nodes[*x].shape[1];
                let xv = &nodes[*x].value;
                let y = &nodes[id].value;
                acc(*x, &mut |d| {
                    for (r, &norm) in norms.iter().enumerate() {
                        let gr = &g[r * f..(r + 1) * f];
                        let yr = &y[r * f..(r + 1) * f];
                        // Same expression as the forward pass, so equality is exact
                        // unless the floor kicked in.
                        let raw: f64 = xv[r * f..(r + 1) * f].iter().map(|v| v * v).sum::<f64>().sqrt();
                        let floored = raw < norm;
                        let dot: f64 = if floored { 0.0 } else { yr.iter().zip(gr).map(|(a, b)| a * b).sum() };
                        for c in 0..f {
                            d[r * f + c] += (gr[c] - yr[c] * dot) / norm;
                        }
                    }
                });
            }
            Op::CrossNormRows { x, target } => {
                let xv = &nodes[*x].value;
                let out = &nodes[id].value;
                acc(*x, &mut |d| {
                    for r in 0..out.len() {
                        let norm = out[r];
                        if norm == 0.0 {
                            continue;
                        }
                        let a = &xv[r * 3..r * 3 + 3];
                        let t = &target[r * 3..r * 3 + 3];
                        let c = cross(a, t);
                        let u = [c[0] / norm, c[1] / norm, c[2] / norm];
                        // ∂‖a×t‖/∂a = t × (a×t)/‖a×t‖
                        let gradient = cross(t, &u);
                        for k in 0..3 {
                            d[r * 3 + k] += g[r] * gradient[k];
                        }
                    }
                });
            }
            &Op::Sum(x) => acc(x, &mut |d| d.iter_mut().for_each(|v| *v += g[0])),
            &Op::Mean(x) => {
                let n = nodes[x].value.len() as f64;
                acc(x, &mut |d| d.iter_mut().for_each(|v| *v += g[0] / n));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn cross(a: &[f64], b: &[f64]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddRowBias { .. } => "add_row_bias",
        Op::Relu(_) => "relu",
        Op::Concat { .. } => "concat",
        Op::ConcatRows(_) => "concat_rows",
        Op::SliceCols { .. } => "slice_cols",
        Op::GatherRows { .. } => "gather_rows",
        Op::Reshape(_) => "reshape",
        Op::ReduceMax { .. } => "reduce_max",
        Op::Softmax(_) => "softmax_rows",
        Op::LayerNorm { .. } => "layer_norm",
        Op::NormalizeRows { .. } => "normalize_rows",
        Op::CrossNormRows { .. } => "cross_norm_rows",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
    }
}
