//! Differentiable building blocks. Each takes weights already registered on
//! the tape, so the same code serves training and inference.

use std::sync::Arc;

use crate::autodiff::{Tape, Tensor};
use crate::geometry::{KnnIndex, Vec3};
use crate::{Error, Result};

use super::GraphFeatures;

/// Layer-norm epsilon used throughout the encoder.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Fixed-width neighbor lists over the rows of a patch, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborLists {
    rows: usize,
    width: usize,
    indices: Arc<[usize]>,
}

impl NeighborLists {
    pub fn new(rows: usize, width: usize, indices: Vec<usize>) -> Result<Self> {
        if width == 0 || indices.len() != rows * width {
            return Err(Error::Shape(format!(
                "{} neighbor indices for {rows} rows of width {width}",
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidInput(format!(
                "neighbor index {bad} out of range for {rows} points"
            )));
        }
        Ok(Self {
            rows,
            width,
            indices: indices.into(),
        })
    }

    /// The `width` nearest points of every point, itself first, then by
    /// distance with ties to the lower index.
    pub fn knn(positions: &[Vec3], width: usize) -> Result<Self> {
        if width == 0 || width > positions.len() {
            return Err(Error::InvalidInput(format!(
                "{width} neighbors requested from {} points",
                positions.len()
            )));
        }
        let index = KnnIndex::from_points(positions)?;
        let mut indices = Vec::with_capacity(positions.len() * width);
        for (i, p) in positions.iter().enumerate() {
            indices.push(i);
            indices.extend(index.query(p, width).into_iter().filter(|&j| j != i).take(width - 1));
        }
        Self::new(positions.len(), width, indices)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.width..(i + 1) * self.width]
    }

    pub fn indices(&self) -> &Arc<[usize]> {
        &self.indices
    }

    /// `rows × rows` membership mask: entry `(i, j)` is true iff `j` is in
    /// row `i`.
    pub fn mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.rows * self.rows];
        for i in 0..self.rows {
            for &j in self.row(i) {
                mask[i * self.rows + j] = true;
            }
        }
        mask
    }
}

/// `relu(x·w1 + b1)·w2 + b2`.
pub fn mlp2(tape: &mut Tape, x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Result<Tensor> {
    let h = tape.matmul(x, w1)?;
    let h = tape.add_row_bias(h, b1)?;
    let h = tape.relu(h)?;
    let o = tape.matmul(h, w2)?;
    tape.add_row_bias(o, b2)
}

/// Weights of one enhanced graph convolution. The first layer of the edge
/// MLP is stored as one block per edge input so unused inputs carry no
/// parameters.
#[derive(Debug, Clone, Copy)]
pub struct GraphConvWeights {
    /// Rows for `x_j − x_c` (3×H).
    pub w_delta_xyz: Option<Tensor>,
    /// Rows for `x_c` (3×H).
    pub w_xc: Option<Tensor>,
    /// Rows for `x_j` (3×H).
    pub w_xj: Option<Tensor>,
    /// Rows for `f_j` (F×H).
    pub w_f: Option<Tensor>,
    /// Rows for `f_j − f_c` (F×H).
    pub w_delta_f: Option<Tensor>,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl GraphConvWeights {
    pub fn features(&self) -> GraphFeatures {
        GraphFeatures {
            xyz: self.w_xc.is_some() && self.w_xj.is_some(),
            delta_xyz: self.w_delta_xyz.is_some(),
            f: self.w_f.is_some(),
            delta_f: self.w_delta_f.is_some(),
        }
    }
}

fn add_opt(tape: &mut Tape, acc: Option<Tensor>, term: Option<Tensor>) -> Result<Option<Tensor>> {
    Ok(match (acc, term) {
        (Some(a), Some(t)) => Some(tape.add(a, t)?),
        (a, t) => a.or(t),
    })
}

fn matmul_opt(tape: &mut Tape, x: Tensor, w: Option<Tensor>) -> Result<Option<Tensor>> {
    w.map(|w| tape.matmul(x, w)).transpose()
}

/// Max-pooled edge MLP over each point's neighbors:
/// `f′_c = max_j φ([x_j − x_c, x_c, x_j, f_j, f_j − f_c])`.
///
/// The first linear layer is linear in the concatenated edge input, so it is
/// split into a neighbor term `A[j]` and a center term `B[c]` computed once
/// per point:
/// `A = X(W_Δx + W_xj) + F(W_f + W_Δf)`, `B = X(W_xc − W_Δx) − F·W_Δf`.
/// Only the second layer runs per edge.
pub fn enhanced_graph_conv(
    tape: &mut Tape,
    w: &GraphConvWeights,
    positions: Tensor,
    features: Tensor,
    neighbors: &NeighborLists,
) -> Result<Tensor> {
    let k = tape.shape(positions)[0];
    if tape.shape(features)[0] != k || neighbors.rows() != k {
        return Err(Error::Shape(format!(
            "graph conv: {k} positions, {} feature rows, {} neighbor rows",
            tape.shape(features)[0],
            neighbors.rows()
        )));
    }
    let g = neighbors.width();

    let wx_j = add_opt(tape, w.w_delta_xyz, w.w_xj)?;
    let wf_j = add_opt(tape, w.w_f, w.w_delta_f)?;
    let neg_delta = w.w_delta_xyz.map(|t| tape.scale(t, -1.0)).transpose()?;
    let wx_c = add_opt(tape, w.w_xc, neg_delta)?;
    let wf_c = w.w_delta_f.map(|t| tape.scale(t, -1.0)).transpose()?;

    let a_x = matmul_opt(tape, positions, wx_j)?;
    let a_f = matmul_opt(tape, features, wf_j)?;
    let a = add_opt(tape, a_x, a_f)?
        .ok_or_else(|| Error::InvalidInput("graph conv has no edge inputs".into()))?;
    let b_x = matmul_opt(tape, positions, wx_c)?;
    let b_f = matmul_opt(tape, features, wf_c)?;
    let b = add_opt(tape, b_x, b_f)?;

    let mut edges = tape.gather_rows(a, neighbors.indices().clone())?;
    if let Some(b) = b {
        let centers: Arc<[usize]> = (0..k).flat_map(|c| std::iter::repeat_n(c, g)).collect();
        let bc = tape.gather_rows(b, centers)?;
        edges = tape.add(edges, bc)?;
    }
    let h = tape.add_row_bias(edges, w.b1)?;
    let h = tape.relu(h)?;
    let e = tape.matmul(h, w.w2)?;
    let e = tape.add_row_bias(e, w.b2)?;
    let out_dim = tape.shape(e)[1];
    let e = tape.reshape(e, vec![k, g, out_dim])?;
    tape.reduce_max(e)
}

/// Weights of one post-norm encoder layer.
#[derive(Debug, Clone, Copy)]
pub struct EncoderWeights {
    pub wq: Tensor,
    pub bq: Tensor,
    /// Keys carry no bias; see the parameter layout.
    pub wk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
}

/// Encoder output together with the per-head attention distributions.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub output: Tensor,
    /// One `k×k` row-stochastic matrix per head.
    pub attention: Vec<Tensor>,
}

fn linear(tape: &mut Tape, x: Tensor, w: Tensor, b: Tensor) -> Result<Tensor> {
    let y = tape.matmul(x, w)?;
    tape.add_row_bias(y, b)
}

/// Encoder layer with attention restricted by `mask` (`k×k`, row = query);
/// `None` attends globally.
pub fn encoder_layer(
    tape: &mut Tape,
    w: &EncoderWeights,
    x: Tensor,
    num_heads: usize,
    mask: Option<&[bool]>,
) -> Result<EncoderOutput> {
    let f = match *tape.shape(x) {
        [_, f] => f,
        _ => return Err(Error::Shape("encoder input must be k×F".into())),
    };
    if num_heads == 0 || f % num_heads != 0 {
        return Err(Error::Shape(format!("width {f} not divisible into {num_heads} heads")));
    }
    let dk = f / num_heads;
    let q = linear(tape, x, w.wq, w.bq)?;
    let kk = tape.matmul(x, w.wk)?;
    let v = linear(tape, x, w.wv, w.bv)?;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut heads = Vec::with_capacity(num_heads);
    let mut attention = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let qh = tape.slice_cols(q, h * dk, dk)?;
        let kh = tape.slice_cols(kk, h * dk, dk)?;
        let vh = tape.slice_cols(v, h * dk, dk)?;
        let scores = tape.matmul_transposed(qh, kh)?;
        let scores = tape.scale(scores, scale)?;
        let p = match mask {
            Some(m) => tape.softmax_rows_masked(scores, m)?,
            None => tape.softmax_rows(scores)?,
        };
        heads.push(tape.matmul(p, vh)?);
        attention.push(p);
    }
    let concat = if heads.len() == 1 { heads[0] } else { tape.concat(&heads)? };
    let attn = linear(tape, concat, w.wo, w.bo)?;
    let r1 = tape.add(x, attn)?;
    let n1 = tape.layer_norm(r1, w.ln1_gamma, w.ln1_beta, LAYER_NORM_EPS)?;
    let ff = mlp2(tape, n1, w.ffn_w1, w.ffn_b1, w.ffn_w2, w.ffn_b2)?;
    let r2 = tape.add(n1, ff)?;
    let output = tape.layer_norm(r2, w.ln2_gamma, w.ln2_beta, LAYER_NORM_EPS)?;
    Ok(EncoderOutput { output, attention })
}

/// Multi-head self-attention over all rows, then the feed-forward sublayer,
/// each with residual and layer norm (post-norm). No positional encoding.
pub fn transformer_encoder_layer(
    tape: &mut Tape,
    w: &EncoderWeights,
    x: Tensor,
    num_heads: usize,
) -> Result<Tensor> {
    Ok(encoder_layer(tape, w, x, num_heads, None)?.output)
}

/// As [`transformer_encoder_layer`], but each row attends only to the rows
/// in its neighbor list.
pub fn local_attention_layer(
    tape: &mut Tape,
    w: &EncoderWeights,
    x: Tensor,
    num_heads: usize,
    neighbors: &NeighborLists,
) -> Result<Tensor> {
    if neighbors.rows() != tape.shape(x)[0] {
        return Err(Error::Shape(format!(
            "{} neighbor rows for {} features",
            neighbors.rows(),
            tape.shape(x)[0]
        )));
    }
    let mask = neighbors.mask();
    Ok(encoder_layer(tape, w, x, num_heads, Some(&mask))?.output)
}

/// Weights of one cascaded-scale-aggregation layer.
#[derive(Debug, Clone, Copy)]
pub struct CsaWeights {
    /// ψ: single linear layer + relu on the pooled large-scale summary.
    pub psi_w: Tensor,
    pub psi_b: Tensor,
    /// φ: two-layer MLP on `[ψ(summary), f]` (2F → F → F).
    pub phi_w1: Tensor,
    pub phi_b1: Tensor,
    pub phi_w2: Tensor,
    pub phi_b2: Tensor,
}

/// `f_small ← φ([ψ(max over large-scale rows), f_small])`.
///
/// `large_rows` and `small_rows` index rows of `features`; the small set must
/// be contained in the large one. Returns `|small_rows|×F`.
pub fn csa_layer(
    tape: &mut Tape,
    w: &CsaWeights,
    features: Tensor,
    large_rows: &[usize],
    small_rows: &[usize],
) -> Result<Tensor> {
    if large_rows.is_empty() || small_rows.is_empty() {
        return Err(Error::InvalidInput("CSA scales must be non-empty".into()));
    }
    if let Some(s) = small_rows.iter().find(|s| !large_rows.contains(s)) {
        return Err(Error::InvalidInput(format!(
            "CSA small-scale row {s} is not in the large-scale set"
        )));
    }
    let f = tape.shape(features)[1];
    let large = tape.gather_rows(features, large_rows.to_vec().into())?;
    let large = tape.reshape(large, vec![1, large_rows.len(), f])?;
    let pooled = tape.reduce_max(large)?;
    let summary = linear(tape, pooled, w.psi_w, w.psi_b)?;
    let summary = tape.relu(summary)?;
    let broadcast = tape.gather_rows(summary, vec![0; small_rows.len()].into())?;
    let small = tape.gather_rows(features, small_rows.to_vec().into())?;
    let joined = tape.concat(&[broadcast, small])?;
    mlp2(tape, joined, w.phi_w1, w.phi_b1, w.phi_w2, w.phi_b2)
}
