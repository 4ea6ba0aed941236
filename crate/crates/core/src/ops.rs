//! Forward operations and their backward rules.
//!
//! Every op validates shapes, computes the forward value, rejects non-finite
//! outputs, and (when recording and any input requires grad) registers a
//! closure implementing the local vector-Jacobian product. The op set is the
//! minimum needed to express the model: matrix products, elementwise
//! arithmetic, GELU, softmax, layer norm, dropout, concatenation/slicing,
//! reductions and squared error. Everything else is composed.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Mode, Tape};
use crate::tensor::Tensor;

/// Row-major matrix product: `a` is m×k, `b` is k×n.
pub(crate) fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (l, &a_il) in a_row.iter().enumerate() {
            let b_row = &b[l * n..(l + 1) * n];
            for (o, &b_lj) in out_row.iter_mut().zip(b_row) {
                *o += a_il * b_lj;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

fn dims_2d(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let shape = t.shape();
    match shape.as_slice() {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::Shape {
            op,
            left: shape,
            right: vec![],
        }),
    }
}

fn require_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

fn require_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if let Some(bad) = t.values().iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            op,
            detail: format!("input contains {bad}"),
        });
    }
    Ok(())
}

/// Stable softmax of one row, writing into `out`.
fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(row) {
        let e = (z - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

impl Tape {
    /// Matrix product. Accepts `[m,k]×[k,n] -> [m,n]` and `[k]×[k,n] -> [n]`.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (kb, n) = dims_2d(b, "matmul")?;
        let a_shape = a.shape();
        let (m, k, vector_lhs) = match a_shape.as_slice() {
            [m, k] => (*m, *k, false),
            [k] => (1, *k, true),
            _ => {
                return Err(Error::Shape {
                    op: "matmul",
                    left: a_shape,
                    right: b.shape(),
                })
            }
        };
        if k != kb {
            return Err(Error::Shape {
                op: "matmul",
                left: a.shape(),
                right: b.shape(),
            });
        }
        let values = mm(&a.values(), &b.values(), m, k, n);
        let out_shape = if vector_lhs { vec![n] } else { vec![m, n] };
        self.emit("matmul", &[a, b], values, out_shape, |out| {
            let (a, b) = (a.clone(), b.clone());
            move || {
                let g = match out.grad() {
                    Some(g) => g,
                    None => return,
                };
                if a.requires_grad() {
                    // dA = dC · Bᵀ
                    let bt = transpose_raw(&b.values(), k, n);
                    a.accumulate_grad(&mm(&g, &bt, m, n, k));
                }
                if b.requires_grad() {
                    // dB = Aᵀ · dC
                    let at = transpose_raw(&a.values(), m, k);
                    b.accumulate_grad(&mm(&at, &g, k, m, n));
                }
            }
        })
    }

    pub fn transpose(&mut self, x: &Tensor) -> Result<Tensor> {
        let (r, c) = dims_2d(x, "transpose")?;
        let values = transpose_raw(&x.values(), r, c);
        self.emit("transpose", &[x], values, vec![c, r], |out| {
            let x = x.clone();
            move || {
                if let Some(g) = out.grad() {
                    x.accumulate_grad(&transpose_raw(&g, c, r));
                }
            }
        })
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        require_same_shape("add", a, b)?;
        let values = a.values().iter().zip(b.values().iter()).map(|(x, y)| x + y).collect();
        self.emit("add", &[a, b], values, a.shape(), |out| {
            let (a, b) = (a.clone(), b.clone());
            move || {
                if let Some(g) = out.grad() {
                    if a.requires_grad() {
                        a.accumulate_grad(&g);
                    }
                    if b.requires_grad() {
                        b.accumulate_grad(&g);
                    }
                }
            }
        })
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        require_same_shape("sub", a, b)?;
        let values = a.values().iter().zip(b.values().iter()).map(|(x, y)| x - y).collect();
        self.emit("sub", &[a, b], values, a.shape(), |out| {
            let (a, b) = (a.clone(), b.clone());
            move || {
                if let Some(g) = out.grad() {
                    if a.requires_grad() {
                        a.accumulate_grad(&g);
                    }
                    if b.requires_grad() {
                        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                        b.accumulate_grad(&neg);
                    }
                }
            }
        })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        require_same_shape("mul", a, b)?;
        let values = a.values().iter().zip(b.values().iter()).map(|(x, y)| x * y).collect();
        self.emit("mul", &[a, b], values, a.shape(), |out| {
            let (a, b) = (a.clone(), b.clone());
            move || {
                if let Some(g) = out.grad() {
                    if a.requires_grad() {
                        let da: Vec<f64> = g.iter().zip(b.values().iter()).map(|(gi, bi)| gi * bi).collect();
                        a.accumulate_grad(&da);
                    }
                    if b.requires_grad() {
                        let db: Vec<f64> = g.iter().zip(a.values().iter()).map(|(gi, ai)| gi * ai).collect();
                        b.accumulate_grad(&db);
                    }
                }
            }
        })
    }

    /// Multiply by a compile-time-known constant.
    pub fn scale(&mut self, x: &Tensor, factor: f64) -> Result<Tensor> {
        let values = x.values().iter().map(|v| v * factor).collect();
        self.emit("scale", &[x], values, x.shape(), |out| {
            let x = x.clone();
            move || {
                if let Some(g) = out.grad() {
                    let dx: Vec<f64> = g.iter().map(|v| v * factor).collect();
                    x.accumulate_grad(&dx);
                }
            }
        })
    }

    /// Broadcast-add a length-d vector to every row of an `[S,d]` matrix.
    pub fn add_row(&mut self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (s, d) = dims_2d(x, "add_row")?;
        if bias.shape() != vec![d] {
            return Err(Error::Shape {
                op: "add_row",
                left: x.shape(),
                right: bias.shape(),
            });
        }
        let bv = bias.values();
        let values = x
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv[i % d])
            .collect();
        drop(bv);
        self.emit("add_row", &[x, bias], values, vec![s, d], |out| {
            let (x, bias) = (x.clone(), bias.clone());
            move || {
                if let Some(g) = out.grad() {
                    if x.requires_grad() {
                        x.accumulate_grad(&g);
                    }
                    if bias.requires_grad() {
                        let mut db = vec![0.0; d];
                        for row in g.chunks_exact(d) {
                            for (acc, v) in db.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        bias.accumulate_grad(&db);
                    }
                }
            }
        })
    }

    /// GELU, tanh form: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, x: &Tensor) -> Result<Tensor> {
        let c = (2.0 / std::f64::consts::PI).sqrt();
        let values = x
            .values()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (c * (v + 0.044715 * v * v * v)).tanh()))
            .collect();
        self.emit("gelu", &[x], values, x.shape(), |out| {
            let x = x.clone();
            move || {
                if let Some(g) = out.grad() {
                    let dx: Vec<f64> = x
                        .values()
                        .iter()
                        .zip(&g)
                        .map(|(&v, gi)| {
                            let u = c * (v + 0.044715 * v * v * v);
                            let t = u.tanh();
                            let du = c * (1.0 + 3.0 * 0.044715 * v * v);
                            gi * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                        })
                        .collect();
                    x.accumulate_grad(&dx);
                }
            }
        })
    }

    /// Softmax over the last axis (each row of a 2-D input, or a whole 1-D
    /// input). Max-subtraction keeps large logits from overflowing.
    pub fn softmax(&mut self, x: &Tensor) -> Result<Tensor> {
        require_finite("softmax", x)?;
        let cols = x.cols();
        let xv = x.values();
        let mut values = vec![0.0; xv.len()];
        for (row, out) in xv.chunks_exact(cols).zip(values.chunks_exact_mut(cols)) {
            softmax_row(row, out);
        }
        drop(xv);
        self.emit("softmax", &[x], values, x.shape(), |out| {
            let x = x.clone();
            move || {
                if let Some(g) = out.grad() {
                    let p = out.values();
                    let mut dx = vec![0.0; p.len()];
                    for ((p_row, g_row), dx_row) in p
                        .chunks_exact(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(dx.chunks_exact_mut(cols))
                    {
                        let dot: f64 = p_row.iter().zip(g_row).map(|(pi, gi)| pi * gi).sum();
                        for ((d, &pi), &gi) in dx_row.iter_mut().zip(p_row).zip(g_row) {
                            *d = pi * (gi - dot);
                        }
                    }
                    drop(p);
                    x.accumulate_grad(&dx);
                }
            }
        })
    }

    /// Layer normalization over the last axis with learnt gain and bias.
    pub fn layer_norm(&mut self, x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        if eps <= 0.0 {
            return Err(Error::config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let d = x.cols();
        if gain.shape() != vec![d] || bias.shape() != vec![d] {
            return Err(Error::Shape {
                op: "layer_norm",
                left: x.shape(),
                right: gain.shape(),
            });
        }
        require_finite("layer_norm", x)?;
        let xv = x.values();
        let gv = gain.values();
        let bv = bias.values();
        let n_rows = xv.len() / d;
        let mut values = vec![0.0; xv.len()];
        // Normalized rows and 1/std are saved for the backward rule.
        let mut normed = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; n_rows];
        for (r, (row, out_row)) in xv
            .chunks_exact(d)
            .zip(values.chunks_exact_mut(d))
            .enumerate()
        {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for (j, &v) in row.iter().enumerate() {
                let xn = (v - mean) * istd;
                normed[r * d + j] = xn;
                out_row[j] = gv[j] * xn + bv[j];
            }
        }
        drop(xv);
        drop(gv);
        drop(bv);
        self.emit("layer_norm", &[x, gain, bias], values, x.shape(), |out| {
            let (x, gain, bias) = (x.clone(), gain.clone(), bias.clone());
            move || {
                let g = match out.grad() {
                    Some(g) => g,
                    None => return,
                };
                if gain.requires_grad() {
                    let mut dg = vec![0.0; d];
                    for (g_row, n_row) in g.chunks_exact(d).zip(normed.chunks_exact(d)) {
                        for ((acc, gi), ni) in dg.iter_mut().zip(g_row).zip(n_row) {
                            *acc += gi * ni;
                        }
                    }
                    gain.accumulate_grad(&dg);
                }
                if bias.requires_grad() {
                    let mut db = vec![0.0; d];
                    for g_row in g.chunks_exact(d) {
                        for (acc, gi) in db.iter_mut().zip(g_row) {
                            *acc += gi;
                        }
                    }
                    bias.accumulate_grad(&db);
                }
                if x.requires_grad() {
                    let gv = gain.values();
                    let mut dx = vec![0.0; g.len()];
                    for (r, (g_row, n_row)) in
                        g.chunks_exact(d).zip(normed.chunks_exact(d)).enumerate()
                    {
                        // h = dOut ∘ gain; dx = istd·(h − mean(h) − x̂·mean(h∘x̂))
                        let h: Vec<f64> = g_row.iter().zip(gv.iter()).map(|(gi, wi)| gi * wi).collect();
                        let mean_h = h.iter().sum::<f64>() / d as f64;
                        let mean_hn = h.iter().zip(n_row).map(|(hi, ni)| hi * ni).sum::<f64>() / d as f64;
                        let istd = inv_std[r];
                        for j in 0..d {
                            dx[r * d + j] = istd * (h[j] - mean_h - n_row[j] * mean_hn);
                        }
                    }
                    drop(gv);
                    x.accumulate_grad(&dx);
                }
            }
        })
    }

    /// Inverted dropout: in train mode each element is zeroed with
    /// probability `p` and survivors are scaled by 1/(1−p), so eval mode is
    /// exactly the identity (the input tensor is returned unchanged).
    pub fn dropout(&mut self, x: &Tensor, p: f64, mode: &mut Mode) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout probability must be in [0,1), got {p}")));
        }
        let rng = match mode {
            Mode::Eval => return Ok(x.clone()),
            Mode::Train { rng } => rng,
        };
        if p == 0.0 {
            return Ok(x.clone());
        }
        let keep_scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep_scale })
            .collect();
        let values = x.values().iter().zip(&mask).map(|(v, m)| v * m).collect();
        self.emit("dropout", &[x], values, x.shape(), |out| {
            let x = x.clone();
            move || {
                if let Some(g) = out.grad() {
                    let dx: Vec<f64> = g.iter().zip(&mask).map(|(gi, m)| gi * m).collect();
                    x.accumulate_grad(&dx);
                }
            }
        })
    }

    /// Vertically concatenate 2-D blocks sharing a column count.
    pub fn concat_rows(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows: empty input list".to_string()));
        }
        let (_, d) = dims_2d(parts[0], "concat_rows")?;
        let mut total_rows = 0;
        let mut values = Vec::new();
        let mut row_counts = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = dims_2d(p, "concat_rows")?;
            if c != d {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: parts[0].shape(),
                    right: p.shape(),
                });
            }
            values.extend_from_slice(&p.values());
            row_counts.push(r);
            total_rows += r;
        }
        self.emit("concat_rows", parts, values, vec![total_rows, d], |out| {
            let parts: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
            move || {
                if let Some(g) = out.grad() {
                    let mut offset = 0;
                    for (p, &r) in parts.iter().zip(&row_counts) {
                        let block = &g[offset..offset + r * d];
                        if p.requires_grad() {
                            p.accumulate_grad(block);
                        }
                        offset += r * d;
                    }
                }
            }
        })
    }

    /// Horizontally concatenate 2-D blocks sharing a row count.
    pub fn concat_cols(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols: empty input list".to_string()));
        }
        let (s, _) = dims_2d(parts[0], "concat_cols")?;
        let mut col_counts = Vec::with_capacity(parts.len());
        let mut total_cols = 0;
        for p in parts {
            let (r, c) = dims_2d(p, "concat_cols")?;
            if r != s {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: parts[0].shape(),
                    right: p.shape(),
                });
            }
            col_counts.push(c);
            total_cols += c;
        }
        let mut values = vec![0.0; s * total_cols];
        let mut col_offset = 0;
        for (p, &c) in parts.iter().zip(&col_counts) {
            let pv = p.values();
            for i in 0..s {
                values[i * total_cols + col_offset..i * total_cols + col_offset + c]
                    .copy_from_slice(&pv[i * c..(i + 1) * c]);
            }
            col_offset += c;
        }
        self.emit("concat_cols", parts, values, vec![s, total_cols], |out| {
            let parts: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
            move || {
                if let Some(g) = out.grad() {
                    let mut col_offset = 0;
                    for (p, &c) in parts.iter().zip(&col_counts) {
                        if p.requires_grad() {
                            let mut dp = vec![0.0; s * c];
                            for i in 0..s {
                                dp[i * c..(i + 1) * c].copy_from_slice(
                                    &g[i * total_cols + col_offset..i * total_cols + col_offset + c],
                                );
                            }
                            p.accumulate_grad(&dp);
                        }
                        col_offset += c;
                    }
                }
            }
        })
    }

    /// Column slice `[lo, hi)` of a 2-D tensor.
    pub fn col_slice(&mut self, x: &Tensor, lo: usize, hi: usize) -> Result<Tensor> {
        let (s, d) = dims_2d(x, "col_slice")?;
        if lo >= hi || hi > d {
            return Err(Error::contract(format!(
                "col_slice range {lo}..{hi} invalid for {d} columns"
            )));
        }
        let w = hi - lo;
        let xv = x.values();
        let mut values = vec![0.0; s * w];
        for i in 0..s {
            values[i * w..(i + 1) * w].copy_from_slice(&xv[i * d + lo..i * d + hi]);
        }
        drop(xv);
        self.emit("col_slice", &[x], values, vec![s, w], |out| {
            let x = x.clone();
            move || {
                if let Some(g) = out.grad() {
                    let mut dx = vec![0.0; s * d];
                    for i in 0..s {
                        dx[i * d + lo..i * d + hi].copy_from_slice(&g[i * w..(i + 1) * w]);
                    }
                    x.accumulate_grad(&dx);
                }
            }
        })
    }

    /// Extract row `i` of a 2-D tensor as a 1-D tensor.
    pub fn row(&mut self, x: &Tensor, i: usize) -> Result<Tensor> {
        let (s, d) = dims_2d(x, "row")?;
        if i >= s {
            return Err(Error::contract(format!("row index {i} out of range for {s} rows")));
        }
        let values = x.values()[i * d..(i + 1) * d].to_vec();
        self.emit("row", &[x], values, vec![d], |out| {
            let x = x.clone();
            move || {
                if let Some(g) = out.grad() {
                    let mut dx = vec![0.0; s * d];
                    dx[i * d..(i + 1) * d].copy_from_slice(&g);
                    x.accumulate_grad(&dx);
                }
            }
        })
    }

    /// Stack 1-D tensors of equal length into an `[N,d]` matrix.
    pub fn stack_rows(&mut self, rows: &[&Tensor]) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(Error::contract("stack_rows: empty input list".to_string()));
        }
        let d = rows[0].len();
        let mut values = Vec::with_capacity(rows.len() * d);
        for r in rows {
            if r.ndim() != 1 || r.len() != d {
                return Err(Error::Shape {
                    op: "stack_rows",
                    left: rows[0].shape(),
                    right: r.shape(),
                });
            }
            values.extend_from_slice(&r.values());
        }
        self.emit("stack_rows", rows, values, vec![rows.len(), d], |out| {
            let rows: Vec<Tensor> = rows.iter().map(|r| (*r).clone()).collect();
            move || {
                if let Some(g) = out.grad() {
                    for (i, r) in rows.iter().enumerate() {
                        if r.requires_grad() {
                            r.accumulate_grad(&g[i * d..(i + 1) * d]);
                        }
                    }
                }
            }
        })
    }

    /// Mean over the rows of an `[S,d]` matrix, yielding a length-d vector.
    pub fn mean_rows(&mut self, x: &Tensor) -> Result<Tensor> {
        let (s, d) = dims_2d(x, "mean_rows")?;
        let xv = x.values();
        let mut values = vec![0.0; d];
        for row in xv.chunks_exact(d) {
            for (acc, v) in values.iter_mut().zip(row) {
                *acc += v;
            }
        }
        for v in values.iter_mut() {
            *v /= s as f64;
        }
        drop(xv);
        self.emit("mean_rows", &[x], values, vec![d], |out| {
            let x = x.clone();
            move || {
                if let Some(g) = out.grad() {
                    let inv = 1.0 / s as f64;
                    let mut dx = vec![0.0; s * d];
                    for row in dx.chunks_exact_mut(d) {
                        for (dv, gi) in row.iter_mut().zip(&g) {
                            *dv = gi * inv;
                        }
                    }
                    x.accumulate_grad(&dx);
                }
            }
        })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: &Tensor) -> Result<Tensor> {
        let total = x.values().iter().sum();
        self.emit("sum", &[x], vec![total], vec![1], |out| {
            let x = x.clone();
            move || {
                if let Some(g) = out.grad() {
                    x.accumulate_grad(&vec![g[0]; x.len()]);
                }
            }
        })
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: &Tensor) -> Result<Tensor> {
        let n = x.len() as f64;
        let total: f64 = x.values().iter().sum();
        self.emit("mean", &[x], vec![total / n], vec![1], |out| {
            let x = x.clone();
            move || {
                if let Some(g) = out.grad() {
                    x.accumulate_grad(&vec![g[0] / n; x.len()]);
                }
            }
        })
    }

    /// Sum of squared differences, as a scalar.
    pub fn squared_error(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        require_same_shape("squared_error", a, b)?;
        let total = a
            .values()
            .iter()
            .zip(b.values().iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.emit("squared_error", &[a, b], vec![total], vec![1], |out| {
            let (a, b) = (a.clone(), b.clone());
            move || {
                if let Some(g) = out.grad() {
                    let diffs: Vec<f64> = a
                        .values()
                        .iter()
                        .zip(b.values().iter())
                        .map(|(x, y)| 2.0 * g[0] * (x - y))
                        .collect();
                    if a.requires_grad() {
                        a.accumulate_grad(&diffs);
                    }
                    if b.requires_grad() {
                        let neg: Vec<f64> = diffs.iter().map(|v| -v).collect();
                        b.accumulate_grad(&neg);
                    }
                }
            }
        })
    }

    /// Broadcast difference `out[i][c] = row[c] − col[i]` where `row` is a
    /// length-C vector and `col` is an `[N,1]` column.
    pub fn row_minus_col(&mut self, row: &Tensor, col: &Tensor) -> Result<Tensor> {
        if row.ndim() != 1 {
            return Err(Error::Shape {
                op: "row_minus_col",
                left: row.shape(),
                right: col.shape(),
            });
        }
        let (n, one) = dims_2d(col, "row_minus_col")?;
        if one != 1 {
            return Err(Error::Shape {
                op: "row_minus_col",
                left: row.shape(),
                right: col.shape(),
            });
        }
        let c = row.len();
        let rv = row.values();
        let cv = col.values();
        let mut values = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..c {
                values[i * c + j] = rv[j] - cv[i];
            }
        }
        drop(rv);
        drop(cv);
        self.emit("row_minus_col", &[row, col], values, vec![n, c], |out| {
            let (row, col) = (row.clone(), col.clone());
            move || {
                if let Some(g) = out.grad() {
                    if row.requires_grad() {
                        let mut dr = vec![0.0; c];
                        for g_row in g.chunks_exact(c) {
                            for (acc, gi) in dr.iter_mut().zip(g_row) {
                                *acc += gi;
                            }
                        }
                        row.accumulate_grad(&dr);
                    }
                    if col.requires_grad() {
                        let dc: Vec<f64> = g.chunks_exact(c).map(|r| -r.iter().sum::<f64>()).collect();
                        col.accumulate_grad(&dc);
                    }
                }
            }
        })
    }

    /// Gather one element per row: `out[i] = x[i, indices[i]]`.
    pub fn gather_cols(&mut self, x: &Tensor, indices: &[usize]) -> Result<Tensor> {
        let (n, c) = dims_2d(x, "gather_cols")?;
        if indices.len() != n {
            return Err(Error::contract(format!(
                "gather_cols: {} indices for {} rows",
                indices.len(),
                n
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= c) {
            return Err(Error::contract(format!(
                "gather_cols: index {bad} out of range for {c} columns"
            )));
        }
        let xv = x.values();
        let values: Vec<f64> = indices.iter().enumerate().map(|(i, &j)| xv[i * c + j]).collect();
        drop(xv);
        let idx = indices.to_vec();
        self.emit("gather_cols", &[x], values, vec![n], |out| {
            let x = x.clone();
            move || {
                if let Some(g) = out.grad() {
                    let mut dx = vec![0.0; n * c];
                    for (i, &j) in idx.iter().enumerate() {
                        dx[i * c + j] = g[i];
                    }
                    x.accumulate_grad(&dx);
                }
            }
        })
    }

    /// Mean cross-entropy of `[N,C]` logits against one target bin per row,
    /// in the log-sum-exp form: `(1/N)·Σᵢ (logΣⱼ exp(zᵢⱼ) − zᵢ,yᵢ)`.
    pub fn cross_entropy_mean(&mut self, logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
        let (n, c) = dims_2d(logits, "cross_entropy_mean")?;
        if targets.len() != n {
            return Err(Error::contract(format!(
                "cross_entropy_mean: {} targets for {} rows",
                targets.len(),
                n
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::contract(format!(
                "cross_entropy_mean: target {bad} out of range for {c} classes"
            )));
        }
        require_finite("cross_entropy_mean", logits)?;
        let lv = logits.values();
        let mut total = 0.0;
        for (row, &y) in lv.chunks_exact(c).zip(targets) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        drop(lv);
        let idx = targets.to_vec();
        self.emit(
            "cross_entropy_mean",
            &[logits],
            vec![total / n as f64],
            vec![1],
            |out| {
                let logits = logits.clone();
                move || {
                    if let Some(g) = out.grad() {
                        let scale = g[0] / n as f64;
                        let lv = logits.values();
                        let mut dz = vec![0.0; n * c];
                        for (i, (row, &y)) in lv.chunks_exact(c).zip(&idx).enumerate() {
                            let dz_row = &mut dz[i * c..(i + 1) * c];
                            softmax_row(row, dz_row);
                            dz_row[y] -= 1.0;
                            for v in dz_row.iter_mut() {
                                *v *= scale;
                            }
                        }
                        drop(lv);
                        logits.accumulate_grad(&dz);
                    }
                }
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(values: Vec<f64>, shape: Vec<usize>) -> Tensor {
        Tensor::new(values, shape).unwrap()
    }

    fn param(values: Vec<f64>, shape: Vec<usize>) -> Tensor {
        Tensor::param(values, shape).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::inactive();
        let i2 = tensor(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]);
        let m = tensor(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]);
        let out = tape.matmul(&i2, &m).unwrap();
        assert_eq!(out.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_selection() {
        let mut tape = Tape::inactive();
        let a = tensor(vec![1.0, 0.0], vec![1, 2]);
        let b = tensor(vec![2.0, 3.0], vec![2, 1]);
        let out = tape.matmul(&a, &b).unwrap();
        assert_eq!(out.shape(), vec![1, 1]);
        assert_eq!(out.to_vec(), vec![2.0]);
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let mut tape = Tape::inactive();
        let a = tensor(vec![0.0; 6], vec![2, 3]);
        let b = tensor(vec![0.0; 8], vec![4, 2]);
        let err = tape.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn matmul_vector_lhs() {
        let mut tape = Tape::inactive();
        let a = tensor(vec![1.0, 2.0], vec![2]);
        let b = tensor(vec![3.0, 4.0, 5.0, 6.0], vec![2, 2]);
        let out = tape.matmul(&a, &b).unwrap();
        assert_eq!(out.shape(), vec![2]);
        assert_eq!(out.to_vec(), vec![13.0, 16.0]);
    }

    #[test]
    fn softmax_symmetry() {
        let mut tape = Tape::inactive();
        let z = tensor(vec![0.0, 0.0, 0.0], vec![3]);
        let p = tape.softmax(&z).unwrap();
        for v in p.to_vec() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        let mut tape = Tape::inactive();
        let z = tensor(vec![1000.0, 0.0], vec![2]);
        let p = tape.softmax(&z).unwrap().to_vec();
        assert!((p[0] - 1.0).abs() < 1e-12);
        assert!(p[1] >= 0.0 && p[1] < 1e-12);
        assert!((p[0] + p[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_reference_values() {
        // softmax([1,2,3]) evaluated independently with 40-digit arithmetic.
        let mut tape = Tape::inactive();
        let z = tensor(vec![1.0, 2.0, 3.0], vec![3]);
        let p = tape.softmax(&z).unwrap().to_vec();
        let expected = [
            0.09003057317038046,
            0.24472847105479764,
            0.6652409557748219,
        ];
        for (a, e) in p.iter().zip(expected) {
            assert!((a - e).abs() < 1e-15, "{a} vs {e}");
        }
    }

    #[test]
    fn softmax_rejects_non_finite_input() {
        let mut tape = Tape::inactive();
        let z = tensor(vec![f64::INFINITY, 0.0], vec![2]);
        assert!(matches!(
            tape.softmax(&z),
            Err(Error::NonFinite { op: "softmax", .. })
        ));
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::inactive();
        let x = tensor(vec![5.0; 4], vec![4]);
        let gain = tensor(vec![1.0; 4], vec![4]);
        let bias = tensor(vec![0.0; 4], vec![4]);
        let out = tape.layer_norm(&x, &gain, &bias, 1e-5).unwrap();
        for v in out.to_vec() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_unit_variance_pair() {
        let mut tape = Tape::inactive();
        let x = tensor(vec![1.0, -1.0], vec![2]);
        let gain = tensor(vec![1.0; 2], vec![2]);
        let bias = tensor(vec![0.0; 2], vec![2]);
        let out = tape.layer_norm(&x, &gain, &bias, 1e-12).unwrap().to_vec();
        assert!((out[0] - 1.0).abs() < 1e-6);
        assert!((out[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn backward_sum_is_ones() {
        let mut tape = Tape::new();
        let x = param(vec![1.0, 2.0, 3.0], vec![3]);
        let loss = tape.sum(&x).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_quadratic() {
        let mut tape = Tape::new();
        let x = param(vec![1.0, 2.0], vec![2]);
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum(&sq).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = param(vec![1.0, 2.0], vec![2]);
        let y = tape.mul(&x, &x).unwrap();
        assert!(matches!(tape.backward(&y), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_rejects_off_tape_loss() {
        let tape = Tape::new();
        let x = param(vec![1.0], vec![1]);
        assert!(matches!(tape.backward(&x), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = param(vec![3.0], vec![1]);
        let loss = tape.sum(&x).unwrap();
        tape.backward(&loss).unwrap();
        tape.backward(&loss).unwrap();
        // Documented behavior: grads add across backward calls.
        assert_eq!(x.grad().unwrap(), vec![2.0]);
    }

    #[test]
    fn gradient_linearity() {
        // backward of a·f + b·g equals a·grad(f) + b·grad(g) elementwise.
        let xs = vec![0.3, -1.2, 2.5];
        let cs = vec![1.5, -0.5, 2.0];
        let (a, b) = (1.75, -0.6);

        let grad_f = {
            let mut tape = Tape::new();
            let x = param(xs.clone(), vec![3]);
            let sq = tape.mul(&x, &x).unwrap();
            let f = tape.sum(&sq).unwrap();
            tape.backward(&f).unwrap();
            x.grad().unwrap()
        };
        let grad_g = {
            let mut tape = Tape::new();
            let x = param(xs.clone(), vec![3]);
            let c = tensor(cs.clone(), vec![3]);
            let cx = tape.mul(&c, &x).unwrap();
            let g = tape.sum(&cx).unwrap();
            tape.backward(&g).unwrap();
            x.grad().unwrap()
        };
        let grad_combined = {
            let mut tape = Tape::new();
            let x = param(xs.clone(), vec![3]);
            let sq = tape.mul(&x, &x).unwrap();
            let f = tape.sum(&sq).unwrap();
            let c = tensor(cs.clone(), vec![3]);
            let cx = tape.mul(&c, &x).unwrap();
            let g = tape.sum(&cx).unwrap();
            let af = tape.scale(&f, a).unwrap();
            let bg = tape.scale(&g, b).unwrap();
            let loss = tape.add(&af, &bg).unwrap();
            tape.backward(&loss).unwrap();
            x.grad().unwrap()
        };
        for i in 0..3 {
            let expected = a * grad_f[i] + b * grad_g[i];
            assert!((grad_combined[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn inactive_tape_records_nothing() {
        let mut tape = Tape::inactive();
        let x = param(vec![1.0, 2.0], vec![2]);
        let y = tape.mul(&x, &x).unwrap();
        assert_eq!(tape.num_nodes(), 0);
        assert!(!y.requires_grad());
    }

    #[test]
    fn overflow_surfaces_as_error_not_nan() {
        let mut tape = Tape::inactive();
        let big = tensor(vec![1e308], vec![1]);
        let err = tape.mul(&big, &big).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut tape = Tape::new();
        let x = param(vec![1.0, 2.0, 3.0], vec![3]);
        let mut mode = Mode::Eval;
        let y = tape.dropout(&x, 0.5, &mut mode).unwrap();
        assert!(x.same_storage(&y));
    }

    #[test]
    fn dropout_train_masks_and_rescales() {
        let mut tape = Tape::new();
        let x = param(vec![1.0; 1000], vec![1000]);
        let mut mode = Mode::train(7);
        let y = tape.dropout(&x, 0.25, &mut mode).unwrap();
        let yv = y.to_vec();
        let zeros = yv.iter().filter(|v| **v == 0.0).count();
        let kept: Vec<f64> = yv.iter().cloned().filter(|v| *v != 0.0).collect();
        assert!(zeros > 180 && zeros < 330, "zeros = {zeros}");
        for v in kept {
            assert!((v - 1.0 / 0.75).abs() < 1e-15);
        }
        // Deterministic in the seed.
        let mut tape2 = Tape::new();
        let mut mode2 = Mode::train(7);
        let y2 = tape2.dropout(&x, 0.25, &mut mode2).unwrap();
        assert_eq!(y.to_vec(), y2.to_vec());
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let mut tape = Tape::inactive();
        let logits = tensor(vec![0.0; 3], vec![1, 3]);
        let ce = tape.cross_entropy_mean(&logits, &[1]).unwrap();
        assert!((ce.item().unwrap() - 1.0986122886681098).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_saturates_to_zero() {
        let mut tape = Tape::inactive();
        let logits = tensor(vec![50.0, 0.0, 0.0], vec![1, 3]);
        let ce = tape.cross_entropy_mean(&logits, &[0]).unwrap();
        assert!(ce.item().unwrap() < 1e-20);
    }

    #[test]
    fn gather_and_row_ops() {
        let mut tape = Tape::new();
        let x = param(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![2, 3]);
        let g = tape.gather_cols(&x, &[2, 0]).unwrap();
        assert_eq!(g.to_vec(), vec![3.0, 4.0]);
        let loss = tape.sum(&g).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn row_minus_col_values() {
        let mut tape = Tape::inactive();
        let row = tensor(vec![1.0, 2.0, 3.0], vec![3]);
        let col = tensor(vec![10.0, 20.0], vec![2, 1]);
        let out = tape.row_minus_col(&row, &col).unwrap();
        assert_eq!(out.to_vec(), vec![-9.0, -8.0, -7.0, -19.0, -18.0, -17.0]);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut tape = Tape::new();
        let a = param(vec![1.0, 2.0], vec![1, 2]);
        let b = param(vec![3.0, 4.0, 5.0, 6.0], vec![2, 2]);
        let cat = tape.concat_rows(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), vec![3, 2]);
        let top = tape.row(&cat, 0).unwrap();
        assert_eq!(top.to_vec(), vec![1.0, 2.0]);
        let loss = tape.sum(&top).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 1.0]);
        assert_eq!(b.grad().unwrap(), vec![0.0; 4]);
    }
}
