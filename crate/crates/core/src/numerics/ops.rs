//! Differentiable primitives recorded on a [`Graph`].

use std::rc::Rc;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use super::{NumericsError, Result};

/// `c = alpha * a @ b + beta * c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices covering the strided extents of m*k, k*n and
    // m*n row-major matrices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(NumericsError::Rank {
            op,
            expected: 2,
            shape: s.to_vec(),
        }),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(NumericsError::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn axis_split(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(NumericsError::Axis {
            op,
            axis,
            shape: shape.to_vec(),
        });
    }
    let n = shape[axis];
    if n == 0 {
        return Err(NumericsError::EmptyAxis { op, axis });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, n, inner))
}

pub(crate) fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    fn unary<F, D>(&self, x: Var, f: F, df: D) -> Var
    where
        F: Fn(f64) -> f64,
        D: Fn(f64, f64) -> f64 + 'static,
    {
        let xv = self.value(x);
        let out: Vec<f64> = xv.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        let yv = Rc::new(out.clone());
        self.custom_op(out, &[x], move |g, sink| {
            if let Some(gx) = sink.slot(x) {
                for (((gx, &gv), &xi), &yi) in gx.iter_mut().zip(g.data()).zip(xv.data()).zip(yv.data()) {
                    *gx += gv * df(xi, yi);
                }
            }
        })
    }

    /// Matrix product `[m,k] @ [k,n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Matrix product with the second operand transposed: `[m,k] @ [n,k]^T`.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&self, a: Var, b: Var, bt: bool) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let (m, k) = dims2("matmul", &av)?;
        let (br, bc) = dims2("matmul", &bv)?;
        let (kb, n) = if bt { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(NumericsError::Shape {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        // Strides of b viewed as a [k, n] operand.
        let bs: (isize, isize) = if bt { (1, k as isize) } else { (n as isize, 1) };
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), (k as isize, 1), bv.data(), bs, &mut out, 0.0);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.custom_op(out, &[a, b], move |g, sink| {
            let gd = g.data();
            if let Some(ga) = sink.slot(a) {
                // dA[m,k] = G[m,n] @ B^T  (B^T as [n,k])
                let bts: (isize, isize) = if bt { (k as isize, 1) } else { (1, n as isize) };
                gemm(m, n, k, gd, (n as isize, 1), bv.data(), bts, ga, 1.0);
            }
            if let Some(gb) = sink.slot(b) {
                if bt {
                    // dB[n,k] = G^T @ A
                    gemm(n, m, k, gd, (1, n as isize), av.data(), (k as isize, 1), gb, 1.0);
                } else {
                    // dB[k,n] = A^T @ G
                    gemm(k, m, n, av.data(), (1, k as isize), gd, (n as isize, 1), gb, 1.0);
                }
            }
        }))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = dims2("transpose", &av)?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av.data()[i * c + j];
            }
        }
        let out = Tensor::new(vec![c, r], out)?;
        Ok(self.custom_op(out, &[a], move |g, sink| {
            if let Some(ga) = sink.slot(a) {
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g.data()[j * r + i];
                    }
                }
            }
        }))
    }

    fn binary<F>(&self, op: &'static str, a: Var, b: Var, f: F) -> Result<(Rc<Tensor>, Rc<Tensor>, Tensor)>
    where
        F: Fn(f64, f64) -> f64,
    {
        let av = self.value(a);
        let bv = self.value(b);
        same_shape(op, &av, &bv)?;
        let out: Vec<f64> = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape().to_vec(), out)?;
        Ok((av, bv, out))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (_, _, out) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.custom_op(out, &[a, b], move |g, sink| {
            for v in [a, b] {
                if let Some(gv) = sink.slot(v) {
                    gv.iter_mut().zip(g.data()).for_each(|(s, &d)| *s += d);
                }
            }
        }))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (_, _, out) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.custom_op(out, &[a, b], move |g, sink| {
            if let Some(ga) = sink.slot(a) {
                ga.iter_mut().zip(g.data()).for_each(|(s, &d)| *s += d);
            }
            if let Some(gb) = sink.slot(b) {
                gb.iter_mut().zip(g.data()).for_each(|(s, &d)| *s -= d);
            }
        }))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv, out) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.custom_op(out, &[a, b], move |g, sink| {
            if let Some(ga) = sink.slot(a) {
                for ((s, &d), &y) in ga.iter_mut().zip(g.data()).zip(bv.data()) {
                    *s += d * y;
                }
            }
            if let Some(gb) = sink.slot(b) {
                for ((s, &d), &x) in gb.iter_mut().zip(g.data()).zip(av.data()) {
                    *s += d * x;
                }
            }
        }))
    }

    /// Sum of any number of same-shaped tensors.
    pub fn add_n(&self, vars: &[Var]) -> Result<Var> {
        let first = *vars.first().ok_or(NumericsError::Empty("add_n"))?;
        let shape = self.shape(first);
        let mut acc = vec![0.0; shape.iter().product()];
        for &v in vars {
            let t = self.value(v);
            if t.shape() != shape.as_slice() {
                return Err(NumericsError::Shape {
                    op: "add_n",
                    lhs: shape,
                    rhs: t.shape().to_vec(),
                });
            }
            acc.iter_mut().zip(t.data()).for_each(|(s, &x)| *s += x);
        }
        let out = Tensor::new(shape, acc)?;
        let vs = vars.to_vec();
        Ok(self.custom_op(out, vars, move |g, sink| {
            for &v in &vs {
                if let Some(gv) = sink.slot(v) {
                    gv.iter_mut().zip(g.data()).for_each(|(s, &d)| *s += d);
                }
            }
        }))
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let out: Vec<f64> = xv.data().iter().map(|v| v * c).collect();
        let out = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        self.custom_op(out, &[x], move |g, sink| {
            if let Some(gx) = sink.slot(x) {
                gx.iter_mut().zip(g.data()).for_each(|(s, &d)| *s += d * c);
            }
        })
    }

    /// Adds a vector along the last axis.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let c = xv.last_dim();
        if bv.len() != c {
            return Err(NumericsError::Shape {
                op: "add_bias",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            row.iter_mut().zip(bv.data()).for_each(|(o, &b)| *o += b);
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.custom_op(out, &[x, bias], move |g, sink| {
            if let Some(gx) = sink.slot(x) {
                gx.iter_mut().zip(g.data()).for_each(|(s, &d)| *s += d);
            }
            if let Some(gb) = sink.slot(bias) {
                for row in g.data().chunks(c.max(1)) {
                    gb.iter_mut().zip(row).for_each(|(s, &d)| *s += d);
                }
            }
        }))
    }

    /// Multiplies each row `i` of `x: [n, c]` by the scalar `w[i]`.
    pub fn mul_col(&self, x: Var, w: Var) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let c = xv.last_dim();
        let n = xv.rows();
        if wv.len() != n {
            return Err(NumericsError::Shape {
                op: "mul_col",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let mut out = xv.data().to_vec();
        for (row, &s) in out.chunks_mut(c.max(1)).zip(wv.data()) {
            row.iter_mut().for_each(|o| *o *= s);
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.custom_op(out, &[x, w], move |g, sink| {
            if let Some(gx) = sink.slot(x) {
                for ((gr, dr), &s) in gx.chunks_mut(c.max(1)).zip(g.data().chunks(c.max(1))).zip(wv.data()) {
                    gr.iter_mut().zip(dr).for_each(|(o, &d)| *o += d * s);
                }
            }
            if let Some(gw) = sink.slot(w) {
                for (i, (dr, xr)) in g.data().chunks(c.max(1)).zip(xv.data().chunks(c.max(1))).enumerate() {
                    gw[i] += dr.iter().zip(xr).map(|(d, x)| d * x).sum::<f64>();
                }
            }
        }))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, sigmoid_f, |_, y| y * (1.0 - y))
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&self, x: Var) -> Var {
        self.unary(
            x,
            |v| v * sigmoid_f(v),
            |x, _| {
                let s = sigmoid_f(x);
                s + x * s * (1.0 - s)
            },
        )
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, f64::exp, |_, y| y)
    }

    pub fn ln(&self, x: Var) -> Var {
        self.unary(x, f64::ln, |x, _| 1.0 / x)
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary(x, |v| v * v, |x, _| 2.0 * x)
    }

    /// Sum of all entries as a `[1]` tensor.
    pub fn sum(&self, x: Var) -> Var {
        let xv = self.value(x);
        let s: f64 = xv.data().iter().sum();
        self.custom_op(Tensor::scalar(s), &[x], move |g, sink| {
            let d = g.item();
            if let Some(gx) = sink.slot(x) {
                gx.iter_mut().for_each(|v| *v += d);
            }
        })
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let (outer, n, inner) = axis_split("softmax", xv.shape(), axis)?;
        let mut out = vec![0.0; xv.len()];
        let d = xv.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let m = (0..n).map(|j| d[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (d[at(j)] - m).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[at(j)] /= z;
                }
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let yv = Rc::new(out.clone());
        Ok(self.custom_op(out, &[x], move |g, sink| {
            if let Some(gx) = sink.slot(x) {
                let y = yv.data();
                let gd = g.data();
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * n * inner + j * inner + i;
                        let dot: f64 = (0..n).map(|j| y[at(j)] * gd[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] += y[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
            }
        }))
    }

    /// Log-softmax along `axis`, computed in the log domain.
    pub fn log_softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let (outer, n, inner) = axis_split("log_softmax", xv.shape(), axis)?;
        let mut out = vec![0.0; xv.len()];
        let d = xv.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let m = (0..n).map(|j| d[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..n).map(|j| (d[at(j)] - m).exp()).sum::<f64>().ln();
                for j in 0..n {
                    out[at(j)] = d[at(j)] - lse;
                }
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let yv = Rc::new(out.clone());
        Ok(self.custom_op(out, &[x], move |g, sink| {
            if let Some(gx) = sink.slot(x) {
                let y = yv.data();
                let gd = g.data();
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * n * inner + j * inner + i;
                        let gs: f64 = (0..n).map(|j| gd[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] += gd[at(j)] - y[at(j)].exp() * gs;
                        }
                    }
                }
            }
        }))
    }

    /// Layer normalisation over the last axis followed by `gain * x + bias`.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let gv = self.value(gain);
        let bv = self.value(bias);
        let d = xv.last_dim();
        if d == 0 {
            return Err(NumericsError::EmptyAxis {
                op: "layer_norm",
                axis: xv.rank().saturating_sub(1),
            });
        }
        if gv.len() != d || bv.len() != d {
            return Err(NumericsError::Shape {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.custom_op(out, &[x, gain, bias], move |g, sink| {
            let gd = g.data();
            if let Some(gg) = sink.slot(gain) {
                for r in 0..rows {
                    for j in 0..d {
                        gg[j] += gd[r * d + j] * xhat[r * d + j];
                    }
                }
            }
            if let Some(gb) = sink.slot(bias) {
                for r in 0..rows {
                    for j in 0..d {
                        gb[j] += gd[r * d + j];
                    }
                }
            }
            if let Some(gx) = sink.slot(x) {
                let gain = gv.data();
                for r in 0..rows {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..d {
                        let dh = gd[r * d + j] * gain[j];
                        s1 += dh;
                        s2 += dh * xhat[r * d + j];
                    }
                    let dn = d as f64;
                    for j in 0..d {
                        let dh = gd[r * d + j] * gain[j];
                        gx[r * d + j] += inv_std[r] * (dh - s1 / dn - xhat[r * d + j] * s2 / dn);
                    }
                }
            }
        }))
    }

    /// Columns `[start, start + len)` of a 2-D tensor.
    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = dims2("slice_cols", &xv)?;
        if start + len > c {
            return Err(NumericsError::Range {
                op: "slice_cols",
                start,
                len,
                size: c,
            });
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv.data()[i * c + start..i * c + start + len]);
        }
        let out = Tensor::new(vec![r, len], out)?;
        Ok(self.custom_op(out, &[x], move |g, sink| {
            if let Some(gx) = sink.slot(x) {
                for i in 0..r {
                    for j in 0..len {
                        gx[i * c + start + j] += g.data()[i * len + j];
                    }
                }
            }
        }))
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(NumericsError::Empty("concat_cols"))?;
        let rows = dims2("concat_cols", &self.value(first))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        let mut vals = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            let (r, c) = dims2("concat_cols", &v)?;
            if r != rows {
                return Err(NumericsError::Shape {
                    op: "concat_cols",
                    lhs: self.shape(first),
                    rhs: v.shape().to_vec(),
                });
            }
            widths.push(c);
            vals.push(v);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (v, &w) in vals.iter().zip(&widths) {
            for i in 0..rows {
                out[i * total + off..i * total + off + w].copy_from_slice(&v.data()[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let out = Tensor::new(vec![rows, total], out)?;
        let parts = parts.to_vec();
        Ok(self.custom_op(out, &parts.clone(), move |g, sink| {
            let mut off = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                if let Some(gp) = sink.slot(p) {
                    for i in 0..rows {
                        for j in 0..w {
                            gp[i * w + j] += g.data()[i * total + off + j];
                        }
                    }
                }
                off += w;
            }
        }))
    }

    /// Gathers flat elements: `out[i] = x[indices[i]]`, reshaped to `shape`.
    pub fn take(&self, x: Var, indices: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if shape.iter().product::<usize>() != indices.len() {
            return Err(NumericsError::DataLength {
                shape,
                len: indices.len(),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= xv.len()) {
            return Err(NumericsError::Index {
                op: "take",
                index: bad,
                size: xv.len(),
            });
        }
        let out: Vec<f64> = indices.iter().map(|&i| xv.data()[i]).collect();
        let out = Tensor::new(shape, out)?;
        Ok(self.custom_op(out, &[x], move |g, sink| {
            if let Some(gx) = sink.slot(x) {
                for (&i, &d) in indices.iter().zip(g.data()) {
                    gx[i] += d;
                }
            }
        }))
    }

    /// Whole rows of a 2-D tensor: `out[i] = x[rows[i]]`.
    pub fn take_rows(&self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = dims2("take_rows", &xv)?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(NumericsError::Index {
                op: "take_rows",
                index: bad,
                size: r,
            });
        }
        let idx = rows.iter().flat_map(|&i| (i * c)..(i * c + c)).collect();
        self.take(x, idx, vec![rows.len(), c])
    }

    /// Inverse of [`Graph::take`]: zeros of `shape` with `x[i]` added at
    /// `indices[i]`.
    pub fn scatter_add(&self, x: Var, indices: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let n: usize = shape.iter().product();
        if indices.len() != xv.len() {
            return Err(NumericsError::DataLength {
                shape: xv.shape().to_vec(),
                len: indices.len(),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(NumericsError::Index {
                op: "scatter_add",
                index: bad,
                size: n,
            });
        }
        let mut out = vec![0.0; n];
        for (&i, &v) in indices.iter().zip(xv.data()) {
            out[i] += v;
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.custom_op(out, &[x], move |g, sink| {
            if let Some(gx) = sink.slot(x) {
                for (s, &i) in gx.iter_mut().zip(&indices) {
                    *s += g.data()[i];
                }
            }
        }))
    }

    /// Depthwise temporal convolution of `x: [T, d]` with `kernel: [k, d]`,
    /// zero "same" padding. `k` must be odd.
    pub fn conv1d_depthwise(&self, x: Var, kernel: Var) -> Result<Var> {
        let xv = self.value(x);
        let kv = self.value(kernel);
        let (t, d) = dims2("conv1d_depthwise", &xv)?;
        let (k, kd) = dims2("conv1d_depthwise", &kv)?;
        if kd != d {
            return Err(NumericsError::Shape {
                op: "conv1d_depthwise",
                lhs: xv.shape().to_vec(),
                rhs: kv.shape().to_vec(),
            });
        }
        if k % 2 == 0 {
            return Err(NumericsError::Config(format!(
                "depthwise kernel size must be odd for same padding, got {k}"
            )));
        }
        let pad = k / 2;
        let mut out = vec![0.0; t * d];
        let xd = xv.data();
        let kdata = kv.data();
        for ti in 0..t {
            for j in 0..k {
                let src = ti as isize + j as isize - pad as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let src = src as usize;
                let orow = &mut out[ti * d..(ti + 1) * d];
                let xrow = &xd[src * d..(src + 1) * d];
                let krow = &kdata[j * d..(j + 1) * d];
                for c in 0..d {
                    orow[c] += xrow[c] * krow[c];
                }
            }
        }
        let out = Tensor::new(vec![t, d], out)?;
        Ok(self.custom_op(out, &[x, kernel], move |g, sink| {
            let gd = g.data();
            let wants_x = sink.wants(x);
            let wants_k = sink.wants(kernel);
            for ti in 0..t {
                for j in 0..k {
                    let src = ti as isize + j as isize - pad as isize;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    let src = src as usize;
                    if wants_x {
                        let gx = sink.slot(x).expect("wants");
                        for c in 0..d {
                            gx[src * d + c] += gd[ti * d + c] * kv.data()[j * d + c];
                        }
                    }
                    if wants_k {
                        let gk = sink.slot(kernel).expect("wants");
                        for c in 0..d {
                            gk[j * d + c] += gd[ti * d + c] * xv.data()[src * d + c];
                        }
                    }
                }
            }
        }))
    }

    /// Gated linear unit over the last axis: `a * sigmoid(b)` where `[a, b]`
    /// are the two column halves.
    pub fn glu(&self, x: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        if c % 2 != 0 {
            return Err(NumericsError::Config(format!("glu needs an even width, got {c}")));
        }
        let a = self.slice_cols(x, 0, c / 2)?;
        let b = self.slice_cols(x, c / 2, c / 2)?;
        let s = self.sigmoid(b);
        self.mul(a, s)
    }

    /// Affine map `x @ w + b`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }
}
