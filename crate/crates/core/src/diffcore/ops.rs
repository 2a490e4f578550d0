//! Forward and backward kernels for every primitive the tape can record.
//!
//! Shape conventions used by the model code:
//! scalar feature blocks are `[rows, channels]`, vector feature blocks are
//! `[rows, 3, channels]` (coordinate-major so that channel mixing is a plain
//! matrix product on the trailing axis).

use std::sync::Arc;

use super::{DiffError, Tensor};

/// Norm below which [`Primitive::SafeNormalize`] returns the zero vector.
pub const NORMALIZE_EPS: f64 = 1e-12;

/// Probability clamp used by [`Primitive::BinaryCrossEntropy`].
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// `a[.., K] x b[K, M] -> [.., M]`.
    MatMul,
    /// Same-shape sum, or `a[.., M] + b[M]` (row bias).
    Add,
    Subtract,
    /// Same-shape product, or gating `a[R, D, C] * b[R, C]`.
    ChannelwiseMultiply,
    /// Normalizes each row along the trailing axis; rows with norm below
    /// [`NORMALIZE_EPS`] map to zero with zero gradient.
    SafeNormalize,
    Relu,
    Sigmoid,
    /// Mean over consecutive groups of leading-axis rows: `[G*group, ..] -> [G, ..]`.
    MeanReduce {
        group: usize,
    },
    /// Max over consecutive groups of rows; ties route to the lowest index.
    MaxReduce {
        group: usize,
    },
    /// Concatenation along the trailing axis.
    Concat,
    /// `out[i] = a[indices[i]]` along the leading axis.
    GatherRows {
        indices: Arc<[usize]>,
    },
    ScalarMultiply(f64),
    /// `a[R, D, C] . u[R, D] -> [R, C]` (a rank-2 `a` is treated as `C = 1`).
    InnerProductRows,
    /// Vector ReLU of `v[R, D, C]` against unit directions `q[R, D]`.
    VecRelu,
    Reshape(Vec<usize>),
    /// Mean clamped binary cross-entropy of `(prediction, target)`; shape `[1]`.
    BinaryCrossEntropy,
    /// The same loss taken on logits `(z, target)` with `p = sigmoid(z)`,
    /// evaluated without forming `1 - p`. The clamp becomes `|z| <= logit(1 - BCE_CLAMP)`.
    LogitBinaryCrossEntropy,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Subtract => "subtract",
            Primitive::ChannelwiseMultiply => "channelwise_multiply",
            Primitive::SafeNormalize => "safe_normalize",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::MeanReduce { .. } => "mean_reduce",
            Primitive::MaxReduce { .. } => "max_reduce",
            Primitive::Concat => "concat",
            Primitive::GatherRows { .. } => "gather_rows",
            Primitive::ScalarMultiply(_) => "scalar_multiply",
            Primitive::InnerProductRows => "inner_product_rows",
            Primitive::VecRelu => "vec_relu",
            Primitive::Reshape(_) => "reshape",
            Primitive::BinaryCrossEntropy => "binary_cross_entropy",
            Primitive::LogitBinaryCrossEntropy => "logit_binary_cross_entropy",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::Concat => None,
            Primitive::MatMul
            | Primitive::Add
            | Primitive::Subtract
            | Primitive::ChannelwiseMultiply
            | Primitive::InnerProductRows
            | Primitive::VecRelu
            | Primitive::BinaryCrossEntropy
            | Primitive::LogitBinaryCrossEntropy => Some(2),
            _ => Some(1),
        }
    }
}

/// Context kept from the forward pass for use in backward.
#[derive(Clone, Debug, Default)]
pub enum Saved {
    #[default]
    Nothing,
    Norms(Vec<f64>),
    Argmax(Vec<usize>),
}

fn mismatch(p: &Primitive, a: &Tensor, b: &Tensor) -> DiffError {
    DiffError::ShapeMismatch { kind: p.name(), lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
}

fn bad_shape(p: &Primitive, a: &Tensor, expected: Vec<usize>) -> DiffError {
    DiffError::ShapeMismatch { kind: p.name(), lhs: a.shape().to_vec(), rhs: expected }
}

fn is_row_bias(a: &Tensor, b: &Tensor) -> bool {
    b.shape().len() == 1 && a.shape().len() > 1 && b.shape()[0] == a.last_dim()
}

fn is_gate(a: &Tensor, b: &Tensor) -> bool {
    let (sa, sb) = (a.shape(), b.shape());
    sa.len() == 3 && sb.len() == 2 && sa[0] == sb[0] && sa[2] == sb[1]
}

/// `(R, D, C)` view for inner products / vector ReLU.
fn rdc(a: &Tensor) -> Option<(usize, usize, usize)> {
    match *a.shape() {
        [r, d] => Some((r, d, 1)),
        [r, d, c] => Some((r, d, c)),
        _ => None,
    }
}

/// `c = a * b` with row-major operands and explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.iter_mut().for_each(|x| *x = 0.0);
        }
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe in-bounds row-major views of slices whose
    // lengths were validated by the callers' shape checks.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Evaluates one primitive. Inputs are assumed finite.
pub fn forward(p: &Primitive, inputs: &[&Tensor]) -> Result<(Tensor, Saved), DiffError> {
    if let Some(n) = p.arity() {
        if inputs.len() != n {
            return Err(DiffError::Arity { kind: p.name(), expected: n, got: inputs.len() });
        }
    } else if inputs.is_empty() {
        return Err(DiffError::Arity { kind: p.name(), expected: 1, got: 0 });
    }
    let a = inputs[0];
    let out = match p {
        Primitive::MatMul => {
            let b = inputs[1];
            if b.shape().len() != 2 || a.shape().is_empty() || a.last_dim() != b.shape()[0] {
                return Err(mismatch(p, a, b));
            }
            let (k, n) = (b.shape()[0], b.shape()[1]);
            let m = if k == 0 { a.rows() } else { a.numel() / k };
            let mut shape = a.shape().to_vec();
            *shape.last_mut().unwrap() = n;
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), &mut out, 0.0);
            Tensor::from_parts(shape, out)
        }
        Primitive::Add => {
            let b = inputs[1];
            if a.shape() == b.shape() {
                let d = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
                Tensor::from_parts(a.shape().to_vec(), d)
            } else if is_row_bias(a, b) {
                let m = b.numel();
                let mut d = a.data().to_vec();
                for row in d.chunks_mut(m) {
                    for (x, y) in row.iter_mut().zip(b.data()) {
                        *x += y;
                    }
                }
                Tensor::from_parts(a.shape().to_vec(), d)
            } else {
                return Err(mismatch(p, a, b));
            }
        }
        Primitive::Subtract => {
            let b = inputs[1];
            if a.shape() != b.shape() {
                return Err(mismatch(p, a, b));
            }
            let d = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
            Tensor::from_parts(a.shape().to_vec(), d)
        }
        Primitive::ChannelwiseMultiply => {
            let b = inputs[1];
            if a.shape() == b.shape() {
                let d = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
                Tensor::from_parts(a.shape().to_vec(), d)
            } else if is_gate(a, b) {
                let (r, dd, c) = (a.shape()[0], a.shape()[1], a.shape()[2]);
                let mut d = a.data().to_vec();
                for i in 0..r {
                    let gate = &b.data()[i * c..(i + 1) * c];
                    for row in d[i * dd * c..(i + 1) * dd * c].chunks_mut(c) {
                        for (x, g) in row.iter_mut().zip(gate) {
                            *x *= g;
                        }
                    }
                }
                Tensor::from_parts(a.shape().to_vec(), d)
            } else {
                return Err(mismatch(p, a, b));
            }
        }
        Primitive::SafeNormalize => {
            if a.shape().is_empty() {
                return Err(bad_shape(p, a, vec![0]));
            }
            let n = a.last_dim();
            let mut d = a.data().to_vec();
            let mut norms = Vec::with_capacity(if n == 0 { 0 } else { d.len() / n });
            if n > 0 {
                for row in d.chunks_mut(n) {
                    let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if norm < NORMALIZE_EPS {
                        row.iter_mut().for_each(|x| *x = 0.0);
                    } else {
                        row.iter_mut().for_each(|x| *x /= norm);
                    }
                    norms.push(norm);
                }
            }
            return Ok((Tensor::from_parts(a.shape().to_vec(), d), Saved::Norms(norms)));
        }
        Primitive::Relu => {
            let d = a.data().iter().map(|&x| if x >= 0.0 { x } else { 0.0 }).collect();
            Tensor::from_parts(a.shape().to_vec(), d)
        }
        Primitive::Sigmoid => {
            let d = a.data().iter().map(|&x| sigmoid(x)).collect();
            Tensor::from_parts(a.shape().to_vec(), d)
        }
        Primitive::MeanReduce { group } | Primitive::MaxReduce { group } => {
            let group = *group;
            if a.shape().is_empty() || group == 0 || a.rows() % group != 0 {
                return Err(bad_shape(p, a, vec![group]));
            }
            let rows = a.rows();
            let m = if rows == 0 { 0 } else { a.numel() / rows };
            let g = rows / group;
            let mut shape = a.shape().to_vec();
            shape[0] = g;
            let mut out = vec![0.0; g * m];
            if matches!(p, Primitive::MeanReduce { .. }) {
                let inv = 1.0 / group as f64;
                for gi in 0..g {
                    let dst = &mut out[gi * m..(gi + 1) * m];
                    for r in 0..group {
                        let src = &a.data()[(gi * group + r) * m..(gi * group + r + 1) * m];
                        for (o, s) in dst.iter_mut().zip(src) {
                            *o += s;
                        }
                    }
                    dst.iter_mut().for_each(|x| *x *= inv);
                }
                Tensor::from_parts(shape, out)
            } else {
                let mut arg = vec![0usize; g * m];
                for gi in 0..g {
                    let base = gi * group;
                    out[gi * m..(gi + 1) * m].copy_from_slice(&a.data()[base * m..(base + 1) * m]);
                    arg[gi * m..(gi + 1) * m].iter_mut().for_each(|x| *x = base);
                    for r in 1..group {
                        let src = &a.data()[(base + r) * m..(base + r + 1) * m];
                        for j in 0..m {
                            if src[j] > out[gi * m + j] {
                                out[gi * m + j] = src[j];
                                arg[gi * m + j] = base + r;
                            }
                        }
                    }
                }
                return Ok((Tensor::from_parts(shape, out), Saved::Argmax(arg)));
            }
        }
        Primitive::Concat => {
            let lead = &a.shape()[..a.shape().len().saturating_sub(1)];
            for t in &inputs[1..] {
                if t.shape().is_empty() || &t.shape()[..t.shape().len() - 1] != lead {
                    return Err(mismatch(p, a, t));
                }
            }
            if a.shape().is_empty() {
                return Err(bad_shape(p, a, vec![0]));
            }
            let widths: Vec<usize> = inputs.iter().map(|t| t.last_dim()).collect();
            let total: usize = widths.iter().sum();
            let rows: usize = lead.iter().product();
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (t, &w) in inputs.iter().zip(&widths) {
                    out.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(total);
            Tensor::from_parts(shape, out)
        }
        Primitive::GatherRows { indices } => {
            if a.shape().is_empty() {
                return Err(bad_shape(p, a, vec![0]));
            }
            let rows = a.rows();
            let m = if rows == 0 { 0 } else { a.numel() / rows };
            let mut out = Vec::with_capacity(indices.len() * m);
            for &i in indices.iter() {
                if i >= rows {
                    return Err(DiffError::IndexOutOfRange { index: i, len: rows });
                }
                out.extend_from_slice(&a.data()[i * m..(i + 1) * m]);
            }
            let mut shape = a.shape().to_vec();
            shape[0] = indices.len();
            Tensor::from_parts(shape, out)
        }
        Primitive::ScalarMultiply(s) => {
            let d = a.data().iter().map(|x| x * s).collect();
            Tensor::from_parts(a.shape().to_vec(), d)
        }
        Primitive::InnerProductRows => {
            let u = inputs[1];
            let (r, dd, c) = rdc(a).ok_or_else(|| mismatch(p, a, u))?;
            if u.shape() != [r, dd] {
                return Err(mismatch(p, a, u));
            }
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let dst = &mut out[i * c..(i + 1) * c];
                for d in 0..dd {
                    let w = u.data()[i * dd + d];
                    let src = &a.data()[(i * dd + d) * c..(i * dd + d + 1) * c];
                    for (o, s) in dst.iter_mut().zip(src) {
                        *o += w * s;
                    }
                }
            }
            Tensor::from_parts(vec![r, c], out)
        }
        Primitive::VecRelu => {
            let q = inputs[1];
            let (r, dd, c) = match *a.shape() {
                [r, d, c] => (r, d, c),
                _ => return Err(mismatch(p, a, q)),
            };
            if q.shape() != [r, dd] {
                return Err(mismatch(p, a, q));
            }
            let mut out = a.data().to_vec();
            let mut dots = vec![0.0; c];
            for i in 0..r {
                let qi = &q.data()[i * dd..(i + 1) * dd];
                let block = &mut out[i * dd * c..(i + 1) * dd * c];
                dots.iter_mut().for_each(|x| *x = 0.0);
                for d in 0..dd {
                    for ch in 0..c {
                        dots[ch] += block[d * c + ch] * qi[d];
                    }
                }
                for d in 0..dd {
                    for ch in 0..c {
                        if dots[ch] < 0.0 {
                            block[d * c + ch] -= dots[ch] * qi[d];
                        }
                    }
                }
            }
            Tensor::from_parts(a.shape().to_vec(), out)
        }
        Primitive::Reshape(shape) => {
            if shape.iter().product::<usize>() != a.numel() {
                return Err(bad_shape(p, a, shape.clone()));
            }
            Tensor::from_parts(shape.clone(), a.data().to_vec())
        }
        Primitive::BinaryCrossEntropy => {
            let y = inputs[1];
            if a.shape() != y.shape() || a.numel() == 0 {
                return Err(mismatch(p, a, y));
            }
            let n = a.numel() as f64;
            let total: f64 = a
                .data()
                .iter()
                .zip(y.data())
                .map(|(&pr, &t)| {
                    let pr = pr.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                    -(t * pr.ln() + (1.0 - t) * (1.0 - pr).ln())
                })
                .sum();
            Tensor::scalar(total / n)
        }
        Primitive::LogitBinaryCrossEntropy => {
            let y = inputs[1];
            if a.shape() != y.shape() || a.numel() == 0 {
                return Err(mismatch(p, a, y));
            }
            let bound = logit_bound();
            let total: f64 = a
                .data()
                .iter()
                .zip(y.data())
                .map(|(&z, &t)| {
                    let z = z.clamp(-bound, bound);
                    z.max(0.0) + (-z.abs()).exp().ln_1p() - t * z
                })
                .sum();
            Tensor::scalar(total / a.numel() as f64)
        }
    };
    Ok((out, Saved::Nothing))
}

fn logit_bound() -> f64 {
    ((1.0 - BCE_CLAMP) / BCE_CLAMP).ln()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gradients with respect to each input; `needs[i] == false` skips input `i`.
pub fn backward(
    p: &Primitive,
    inputs: &[&Tensor],
    output: &Tensor,
    saved: &Saved,
    grad: &Tensor,
    needs: &[bool],
) -> Vec<Option<Tensor>> {
    let a = inputs[0];
    let g = grad.data();
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    match p {
        Primitive::MatMul => {
            let b = inputs[1];
            let (k, n) = (b.shape()[0], b.shape()[1]);
            let m = if k == 0 { a.rows() } else { a.numel() / k };
            let da = want(0).then(|| {
                let mut d = vec![0.0; m * k];
                // g[m, n] x b^T[n, k]
                gemm(m, n, k, g, (n, 1), b.data(), (1, n), &mut d, 0.0);
                Tensor::from_parts(a.shape().to_vec(), d)
            });
            let db = want(1).then(|| {
                let mut d = vec![0.0; k * n];
                // a^T[k, m] x g[m, n]
                gemm(k, m, n, a.data(), (1, k), g, (n, 1), &mut d, 0.0);
                Tensor::from_parts(b.shape().to_vec(), d)
            });
            vec![da, db]
        }
        Primitive::Add => {
            let b = inputs[1];
            let da = want(0).then(|| grad.clone());
            let db = want(1).then(|| {
                if a.shape() == b.shape() {
                    grad.clone()
                } else {
                    let m = b.numel();
                    let mut d = vec![0.0; m];
                    for row in g.chunks(m) {
                        for (x, y) in d.iter_mut().zip(row) {
                            *x += y;
                        }
                    }
                    Tensor::from_parts(b.shape().to_vec(), d)
                }
            });
            vec![da, db]
        }
        Primitive::Subtract => {
            let da = want(0).then(|| grad.clone());
            let db = want(1).then(|| Tensor::from_parts(grad.shape().to_vec(), g.iter().map(|x| -x).collect()));
            vec![da, db]
        }
        Primitive::ChannelwiseMultiply => {
            let b = inputs[1];
            if a.shape() == b.shape() {
                let da = want(0).then(|| {
                    let d = g.iter().zip(b.data()).map(|(x, y)| x * y).collect();
                    Tensor::from_parts(a.shape().to_vec(), d)
                });
                let db = want(1).then(|| {
                    let d = g.iter().zip(a.data()).map(|(x, y)| x * y).collect();
                    Tensor::from_parts(b.shape().to_vec(), d)
                });
                vec![da, db]
            } else {
                let (r, dd, c) = (a.shape()[0], a.shape()[1], a.shape()[2]);
                let da = want(0).then(|| {
                    let mut d = g.to_vec();
                    for i in 0..r {
                        let gate = &b.data()[i * c..(i + 1) * c];
                        for row in d[i * dd * c..(i + 1) * dd * c].chunks_mut(c) {
                            for (x, s) in row.iter_mut().zip(gate) {
                                *x *= s;
                            }
                        }
                    }
                    Tensor::from_parts(a.shape().to_vec(), d)
                });
                let db = want(1).then(|| {
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        let dst = &mut d[i * c..(i + 1) * c];
                        for k in 0..dd {
                            let off = (i * dd + k) * c;
                            for ch in 0..c {
                                dst[ch] += g[off + ch] * a.data()[off + ch];
                            }
                        }
                    }
                    Tensor::from_parts(b.shape().to_vec(), d)
                });
                vec![da, db]
            }
        }
        Primitive::SafeNormalize => {
            let norms = match saved {
                Saved::Norms(n) => n,
                _ => unreachable!("safe_normalize saves norms"),
            };
            let n = a.last_dim();
            let mut d = vec![0.0; a.numel()];
            if n > 0 {
                for (row, ((dx, y), gr)) in d.chunks_mut(n).zip(output.data().chunks(n)).zip(g.chunks(n)).enumerate() {
                    let norm = norms[row];
                    if norm < NORMALIZE_EPS {
                        continue;
                    }
                    let yg: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx[j] = (gr[j] - y[j] * yg) / norm;
                    }
                }
            }
            vec![Some(Tensor::from_parts(a.shape().to_vec(), d))]
        }
        Primitive::Relu => {
            let d = g.iter().zip(a.data()).map(|(gr, &x)| if x >= 0.0 { *gr } else { 0.0 }).collect();
            vec![Some(Tensor::from_parts(a.shape().to_vec(), d))]
        }
        Primitive::Sigmoid => {
            let d = g.iter().zip(output.data()).map(|(gr, y)| gr * y * (1.0 - y)).collect();
            vec![Some(Tensor::from_parts(a.shape().to_vec(), d))]
        }
        Primitive::MeanReduce { group } => {
            let group = *group;
            let rows = a.rows();
            let m = if rows == 0 { 0 } else { a.numel() / rows };
            let inv = 1.0 / group as f64;
            let mut d = vec![0.0; a.numel()];
            for r in 0..rows {
                let gi = r / group;
                for j in 0..m {
                    d[r * m + j] = g[gi * m + j] * inv;
                }
            }
            vec![Some(Tensor::from_parts(a.shape().to_vec(), d))]
        }
        Primitive::MaxReduce { .. } => {
            let arg = match saved {
                Saved::Argmax(a) => a,
                _ => unreachable!("max_reduce saves argmax"),
            };
            let rows = a.rows();
            let m = if rows == 0 { 0 } else { a.numel() / rows };
            let mut d = vec![0.0; a.numel()];
            for (o, &src_row) in arg.iter().enumerate() {
                let j = o % m;
                d[src_row * m + j] += g[o];
            }
            vec![Some(Tensor::from_parts(a.shape().to_vec(), d))]
        }
        Primitive::Concat => {
            let widths: Vec<usize> = inputs.iter().map(|t| t.last_dim()).collect();
            let total: usize = widths.iter().sum();
            let rows = if total == 0 { 0 } else { grad.numel() / total };
            let mut offset = 0;
            let mut grads = Vec::with_capacity(inputs.len());
            for (i, (t, &w)) in inputs.iter().zip(&widths).enumerate() {
                if want(i) {
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    grads.push(Some(Tensor::from_parts(t.shape().to_vec(), d)));
                } else {
                    grads.push(None);
                }
                offset += w;
            }
            grads
        }
        Primitive::GatherRows { indices } => {
            let rows = a.rows();
            let m = if rows == 0 { 0 } else { a.numel() / rows };
            let mut d = vec![0.0; a.numel()];
            for (o, &i) in indices.iter().enumerate() {
                let dst = &mut d[i * m..(i + 1) * m];
                for (x, y) in dst.iter_mut().zip(&g[o * m..(o + 1) * m]) {
                    *x += y;
                }
            }
            vec![Some(Tensor::from_parts(a.shape().to_vec(), d))]
        }
        Primitive::ScalarMultiply(s) => {
            let d = g.iter().map(|x| x * s).collect();
            vec![Some(Tensor::from_parts(a.shape().to_vec(), d))]
        }
        Primitive::InnerProductRows => {
            let u = inputs[1];
            let (r, dd, c) = rdc(a).expect("validated in forward");
            let da = want(0).then(|| {
                let mut d = vec![0.0; a.numel()];
                for i in 0..r {
                    let gr = &g[i * c..(i + 1) * c];
                    for k in 0..dd {
                        let w = u.data()[i * dd + k];
                        let dst = &mut d[(i * dd + k) * c..(i * dd + k + 1) * c];
                        for (x, y) in dst.iter_mut().zip(gr) {
                            *x = w * y;
                        }
                    }
                }
                Tensor::from_parts(a.shape().to_vec(), d)
            });
            let du = want(1).then(|| {
                let mut d = vec![0.0; r * dd];
                for i in 0..r {
                    let gr = &g[i * c..(i + 1) * c];
                    for k in 0..dd {
                        let src = &a.data()[(i * dd + k) * c..(i * dd + k + 1) * c];
                        d[i * dd + k] = src.iter().zip(gr).map(|(x, y)| x * y).sum();
                    }
                }
                Tensor::from_parts(u.shape().to_vec(), d)
            });
            vec![da, du]
        }
        Primitive::VecRelu => {
            let q = inputs[1];
            let (r, dd, c) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let mut dv = if want(0) { g.to_vec() } else { Vec::new() };
            let mut dq = if want(1) { vec![0.0; r * dd] } else { Vec::new() };
            let mut dots = vec![0.0; c];
            let mut gq = vec![0.0; c];
            for i in 0..r {
                let qi = &q.data()[i * dd..(i + 1) * dd];
                let vi = &a.data()[i * dd * c..(i + 1) * dd * c];
                let gi = &g[i * dd * c..(i + 1) * dd * c];
                dots.iter_mut().for_each(|x| *x = 0.0);
                gq.iter_mut().for_each(|x| *x = 0.0);
                for k in 0..dd {
                    for ch in 0..c {
                        dots[ch] += vi[k * c + ch] * qi[k];
                        gq[ch] += gi[k * c + ch] * qi[k];
                    }
                }
                for ch in 0..c {
                    if dots[ch] >= 0.0 {
                        continue;
                    }
                    for k in 0..dd {
                        if want(0) {
                            dv[i * dd * c + k * c + ch] -= qi[k] * gq[ch];
                        }
                        if want(1) {
                            dq[i * dd + k] -= vi[k * c + ch] * gq[ch] + dots[ch] * gi[k * c + ch];
                        }
                    }
                }
            }
            vec![
                want(0).then(|| Tensor::from_parts(a.shape().to_vec(), dv)),
                want(1).then(|| Tensor::from_parts(q.shape().to_vec(), dq)),
            ]
        }
        Primitive::Reshape(_) => {
            vec![Some(Tensor::from_parts(a.shape().to_vec(), g.to_vec()))]
        }
        Primitive::BinaryCrossEntropy => {
            let y = inputs[1];
            let n = a.numel() as f64;
            let scale = g[0] / n;
            let d = a
                .data()
                .iter()
                .zip(y.data())
                .map(|(&pr, &t)| {
                    if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&pr) {
                        0.0
                    } else {
                        scale * (-t / pr + (1.0 - t) / (1.0 - pr))
                    }
                })
                .collect();
            vec![want(0).then(|| Tensor::from_parts(a.shape().to_vec(), d)), None]
        }
        Primitive::LogitBinaryCrossEntropy => {
            let y = inputs[1];
            let scale = g[0] / a.numel() as f64;
            let bound = logit_bound();
            let d = a
                .data()
                .iter()
                .zip(y.data())
                .map(|(&z, &t)| if z.abs() > bound { 0.0 } else { scale * (sigmoid(z) - t) })
                .collect();
            vec![want(0).then(|| Tensor::from_parts(a.shape().to_vec(), d)), None]
        }
    }
}
