//! Scaled dot-product multi-head attention.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use super::{NumericsError, Result};

/// Boolean `[rows, cols]` mask; `true` marks an allowed query/key pair.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(NumericsError::DataLength {
                shape: vec![rows, cols],
                len: allowed.len(),
            });
        }
        Ok(Self { rows, cols, allowed })
    }

    /// Lower-triangular mask: position `i` sees keys `0..=i`.
    pub fn causal(t: usize) -> Self {
        let allowed = (0..t * t).map(|k| k % t <= k / t).collect();
        Self {
            rows: t,
            cols: t,
            allowed,
        }
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    fn additive(&self) -> Result<Tensor> {
        let mut out = vec![0.0; self.rows * self.cols];
        for i in 0..self.rows {
            let row = &self.allowed[i * self.cols..(i + 1) * self.cols];
            if !row.iter().any(|&a| a) {
                return Err(NumericsError::MaskedRow(i));
            }
            for (o, &a) in out[i * self.cols..(i + 1) * self.cols].iter_mut().zip(row) {
                if !a {
                    *o = f64::NEG_INFINITY;
                }
            }
        }
        Tensor::new(vec![self.rows, self.cols], out)
    }
}

/// Projection weights `[d, d]` and biases `[d]` bound to a graph.
#[derive(Copy, Clone, Debug)]
pub struct AttentionParams {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Per-head `softmax(q k^T / sqrt(d_k) + mask) v`, heads concatenated.
/// `q: [Tq, d]`, `k, v: [Tk, d]`.
pub fn scaled_dot_product_attention(
    g: &Graph,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<&AttentionMask>,
) -> Result<Var> {
    let qs = g.shape(q);
    let ks = g.shape(k);
    let d = *qs.last().unwrap_or(&0);
    if heads == 0 || d % heads != 0 {
        return Err(NumericsError::Config(format!(
            "model width {d} is not divisible by {heads} heads"
        )));
    }
    if ks.last() != Some(&d) || g.shape(v) != ks {
        return Err(NumericsError::Shape {
            op: "attention",
            lhs: qs,
            rhs: ks,
        });
    }
    let additive = match mask {
        Some(m) => {
            if m.rows != qs[0] || m.cols != ks[0] {
                return Err(NumericsError::Shape {
                    op: "attention mask",
                    lhs: vec![qs[0], ks[0]],
                    rhs: vec![m.rows, m.cols],
                });
            }
            Some(g.constant(m.additive()?))
        }
        None => None,
    };
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dk, dk)?;
        let kh = g.slice_cols(k, h * dk, dk)?;
        let vh = g.slice_cols(v, h * dk, dk)?;
        let mut scores = g.scale(g.matmul_nt(qh, kh)?, scale);
        if let Some(m) = additive {
            scores = g.add(scores, m)?;
        }
        let w = g.softmax(scores, 1)?;
        outs.push(g.matmul(w, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        g.concat_cols(&outs)
    }
}

/// Projected multi-head attention.
pub fn multi_head_attention(
    g: &Graph,
    q: Var,
    k: Var,
    v: Var,
    p: &AttentionParams,
    heads: usize,
    mask: Option<&AttentionMask>,
) -> Result<Var> {
    let qp = g.linear(q, p.wq, Some(p.bq))?;
    let kp = g.linear(k, p.wk, Some(p.bk))?;
    let vp = g.linear(v, p.wv, Some(p.bv))?;
    let ctx = scaled_dot_product_attention(g, qp, kp, vp, heads, mask)?;
    g.linear(ctx, p.wo, Some(p.bo))
}
