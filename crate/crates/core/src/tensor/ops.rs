//! Pure tensor primitives. Every reduction accumulates leftmost-first so that
//! results are bit-stable for a given input.

use super::Tensor;
use crate::error::{Error, Result};

fn expect_rank(op: &'static str, x: &Tensor, rank: usize) -> Result<()> {
    if x.rank() != rank {
        return Err(Error::dim(
            op,
            format!("expected rank {rank}, got shape {:?}", x.shape()),
        ));
    }
    Ok(())
}

fn expect_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// `(outer, extent, inner)` split of a shape around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `out[b,m,n] = Σ_k a[b,m,k] · b[b,k,n]`, summed in ascending `k`.
pub fn matmul_batched(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_rank("matmul_batched", a, 3)?;
    expect_rank("matmul_batched", b, 3)?;
    let (batch, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (batch_b, k_b, n) = (b.shape()[0], b.shape()[1], b.shape()[2]);
    if batch != batch_b {
        return Err(Error::dim(
            "matmul_batched",
            format!("batch axis 0 differs: a has {batch}, b has {batch_b}"),
        ));
    }
    if k != k_b {
        return Err(Error::dim(
            "matmul_batched",
            format!("inner axes differ: a axis 2 has {k}, b axis 1 has {k_b}"),
        ));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        let a_off = bi * m * k;
        let b_off = bi * k * n;
        let o_off = bi * m * n;
        for mi in 0..m {
            let row = &mut out[o_off + mi * n..o_off + (mi + 1) * n];
            for ki in 0..k {
                let av = ad[a_off + mi * k + ki];
                let b_row = &bd[b_off + ki * n..b_off + (ki + 1) * n];
                for (o, &bv) in row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    }
    Tensor::from_op("matmul_batched", vec![batch, m, n], out)
}

/// Swaps the last two axes of a rank-3 tensor.
pub fn transpose_last2(x: &Tensor) -> Result<Tensor> {
    expect_rank("transpose_last2", x, 3)?;
    let (b, m, n) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for bi in 0..b {
        for mi in 0..m {
            for ni in 0..n {
                out[(bi * n + ni) * m + mi] = d[(bi * m + mi) * n + ni];
            }
        }
    }
    Tensor::from_op("transpose_last2", vec![b, n, m], out)
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::dim(
            "softmax",
            format!("axis {axis} out of range for shape {:?}", x.shape()),
        ));
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).map(|k| d[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..len {
                let e = (d[idx(k)] - max).exp();
                out[idx(k)] = e;
                total += e;
            }
            for k in 0..len {
                out[idx(k)] /= total;
            }
        }
    }
    Tensor::from_op("softmax", x.shape().to_vec(), out)
}

/// Vector-Jacobian product of softmax: `y ⊙ (g − ⟨g, y⟩)` along `axis`.
pub fn softmax_backward(y: &Tensor, grad: &Tensor, axis: usize) -> Result<Tensor> {
    expect_same_shape("softmax_backward", y, grad)?;
    if axis >= y.rank() {
        return Err(Error::dim("softmax_backward", format!("axis {axis} out of range")));
    }
    let (outer, len, inner) = axis_split(y.shape(), axis);
    let (yd, gd) = (y.data(), grad.data());
    let mut out = vec![0.0; yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let mut dot = 0.0;
            for k in 0..len {
                dot += gd[idx(k)] * yd[idx(k)];
            }
            for k in 0..len {
                out[idx(k)] = yd[idx(k)] * (gd[idx(k)] - dot);
            }
        }
    }
    Tensor::from_op("softmax_backward", y.shape().to_vec(), out)
}

/// Mean over the H axis of a `C×H×W` tensor, giving `C×1×W`.
pub fn avg_pool_rows(x: &Tensor) -> Result<Tensor> {
    expect_rank("avg_pool_rows", x, 3)?;
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let d = x.data();
    let mut out = vec![0.0; c * w];
    for ci in 0..c {
        for wi in 0..w {
            let mut acc = 0.0;
            for hi in 0..h {
                acc += d[(ci * h + hi) * w + wi];
            }
            out[ci * w + wi] = acc / h as f64;
        }
    }
    Tensor::from_op("avg_pool_rows", vec![c, 1, w], out)
}

/// Mean over the W axis of a `C×H×W` tensor, giving `C×H×1`.
pub fn avg_pool_cols(x: &Tensor) -> Result<Tensor> {
    expect_rank("avg_pool_cols", x, 3)?;
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let d = x.data();
    let mut out = vec![0.0; c * h];
    for ci in 0..c {
        for hi in 0..h {
            let row = &d[(ci * h + hi) * w..(ci * h + hi + 1) * w];
            let acc = row.iter().fold(0.0, |a, &v| a + v);
            out[ci * h + hi] = acc / w as f64;
        }
    }
    Tensor::from_op("avg_pool_cols", vec![c, h, 1], out)
}

/// Spreads a `C×1×W` gradient evenly over `h` rows.
pub fn avg_pool_rows_backward(grad: &Tensor, h: usize) -> Result<Tensor> {
    expect_rank("avg_pool_rows_backward", grad, 3)?;
    let (c, w) = (grad.shape()[0], grad.shape()[2]);
    let g = grad.data();
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        for hi in 0..h {
            for wi in 0..w {
                out[(ci * h + hi) * w + wi] = g[ci * w + wi] / h as f64;
            }
        }
    }
    Tensor::from_op("avg_pool_rows_backward", vec![c, h, w], out)
}

/// Spreads a `C×H×1` gradient evenly over `w` columns.
pub fn avg_pool_cols_backward(grad: &Tensor, w: usize) -> Result<Tensor> {
    expect_rank("avg_pool_cols_backward", grad, 3)?;
    let (c, h) = (grad.shape()[0], grad.shape()[1]);
    let g = grad.data();
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        for hi in 0..h {
            for wi in 0..w {
                out[(ci * h + hi) * w + wi] = g[ci * h + hi] / w as f64;
            }
        }
    }
    Tensor::from_op("avg_pool_cols_backward", vec![c, h, w], out)
}

/// Cuts `C×H×W` along H: `out[h,c,w] = x[c,h,w]`.
pub fn slice_stack_h(x: &Tensor) -> Result<Tensor> {
    expect_rank("slice_stack_h", x, 3)?;
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for ci in 0..c {
        for hi in 0..h {
            for wi in 0..w {
                out[(hi * c + ci) * w + wi] = d[(ci * h + hi) * w + wi];
            }
        }
    }
    Tensor::from_op("slice_stack_h", vec![h, c, w], out)
}

/// Cuts `C×H×W` along W: `out[w,c,h] = x[c,h,w]`.
pub fn slice_stack_w(x: &Tensor) -> Result<Tensor> {
    expect_rank("slice_stack_w", x, 3)?;
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for ci in 0..c {
        for hi in 0..h {
            for wi in 0..w {
                out[(wi * c + ci) * h + hi] = d[(ci * h + hi) * w + wi];
            }
        }
    }
    Tensor::from_op("slice_stack_w", vec![w, c, h], out)
}

/// Inverse of [`slice_stack_h`]: `H×C×W → C×H×W`.
pub fn unstack_h(x: &Tensor) -> Result<Tensor> {
    expect_rank("unstack_h", x, 3)?;
    let (h, c, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for hi in 0..h {
        for ci in 0..c {
            for wi in 0..w {
                out[(ci * h + hi) * w + wi] = d[(hi * c + ci) * w + wi];
            }
        }
    }
    Tensor::from_op("unstack_h", vec![c, h, w], out)
}

/// Inverse of [`slice_stack_w`]: `W×C×H → C×H×W`.
pub fn unstack_w(x: &Tensor) -> Result<Tensor> {
    expect_rank("unstack_w", x, 3)?;
    let (w, c, h) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for wi in 0..w {
        for ci in 0..c {
            for hi in 0..h {
                out[(ci * h + hi) * w + wi] = d[(wi * c + ci) * h + hi];
            }
        }
    }
    Tensor::from_op("unstack_w", vec![c, h, w], out)
}

/// Joins tensors along `axis`; parts keep their order.
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::dim("concat", "no parts given"))?;
    if axis >= first.rank() {
        return Err(Error::dim(
            "concat",
            format!("axis {axis} out of range for shape {:?}", first.shape()),
        ));
    }
    for (i, p) in parts.iter().enumerate().skip(1) {
        let mismatch = p.rank() != first.rank()
            || p
                .shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .any(|(ax, (a, b))| ax != axis && a != b);
        if mismatch {
            return Err(Error::dim(
                "concat",
                format!(
                    "part {i} has shape {:?}, incompatible with {:?} off axis {axis}",
                    p.shape(),
                    first.shape()
                ),
            ));
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::from_op("concat", shape, out)
}

/// The `len` entries starting at `start` along `axis`.
pub fn narrow(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= x.rank() || len == 0 || start + len > x.shape()[axis] {
        return Err(Error::dim(
            "narrow",
            format!(
                "range {start}..{} on axis {axis} invalid for shape {:?}",
                start + len,
                x.shape()
            ),
        ));
    }
    let (outer, extent, inner) = axis_split(x.shape(), axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * extent + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::from_op("narrow", shape, out)
}

/// Stacks `times` copies of `x` along a new leading axis.
pub fn repeat_leading(x: &Tensor, times: usize) -> Result<Tensor> {
    if times == 0 {
        return Err(Error::dim("repeat_leading", "repeat count must be positive"));
    }
    let mut shape = Vec::with_capacity(x.rank() + 1);
    shape.push(times);
    shape.extend_from_slice(x.shape());
    let mut out = Vec::with_capacity(x.len() * times);
    for _ in 0..times {
        out.extend_from_slice(x.data());
    }
    Tensor::from_op("repeat_leading", shape, out)
}

/// Sums over axis 0, dropping it (a rank-1 input reduces to shape `[1]`).
pub fn sum_leading(x: &Tensor) -> Result<Tensor> {
    let n = x.shape()[0];
    let shape = if x.rank() == 1 {
        vec![1]
    } else {
        x.shape()[1..].to_vec()
    };
    let inner = x.len() / n;
    let mut out = vec![0.0; inner];
    for slab in x.data().chunks_exact(inner) {
        for (o, v) in out.iter_mut().zip(slab) {
            *o += v;
        }
    }
    Tensor::from_op("sum_leading", shape, out)
}

fn zip_with(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    expect_same_shape(op, a, b)?;
    let out = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_op(op, a.shape().to_vec(), out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("sub", a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("mul", a, b, |x, y| x * y)
}

pub fn scale(x: &Tensor, factor: f64) -> Result<Tensor> {
    let out = x.data().iter().map(|v| v * factor).collect();
    Tensor::from_op("scale", x.shape().to_vec(), out)
}

/// `x + gamma · ctx`. Terms that are exactly zero are skipped so a zero
/// scale reproduces `x` bit for bit, signed zeros included.
pub fn residual_add(x: &Tensor, ctx: &Tensor, gamma: f64) -> Result<Tensor> {
    expect_same_shape("residual_add", x, ctx)?;
    let out = x
        .data()
        .iter()
        .zip(ctx.data())
        .map(|(&xv, &cv)| {
            let t = gamma * cv;
            if t == 0.0 {
                xv
            } else {
                xv + t
            }
        })
        .collect();
    Tensor::from_op("residual_add", x.shape().to_vec(), out)
}

/// Leftmost-first sum of all scalars.
pub fn sum_all(x: &Tensor) -> f64 {
    x.data().iter().fold(0.0, |a, &v| a + v)
}

/// Leftmost-first sum of squares.
pub fn sum_squares(x: &Tensor) -> f64 {
    x.data().iter().fold(0.0, |a, &v| a + v * v)
}

fn check_linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    if w.rank() != 2 || b.rank() != 1 {
        return Err(Error::dim(
            "linear_channels",
            format!(
                "weight must be rank 2 and bias rank 1, got {:?} and {:?}",
                w.shape(),
                b.shape()
            ),
        ));
    }
    let (c_out, c_in) = (w.shape()[0], w.shape()[1]);
    if x.shape()[0] != c_in {
        return Err(Error::dim(
            "linear_channels",
            format!(
                "input channel axis 0 has {} but weight axis 1 has {c_in}",
                x.shape()[0]
            ),
        ));
    }
    if b.shape()[0] != c_out {
        return Err(Error::dim(
            "linear_channels",
            format!("bias has {} entries but weight axis 0 has {c_out}", b.shape()[0]),
        ));
    }
    Ok((c_out, c_in, x.len() / c_in))
}

/// Channel-axis linear map: `out[o,…] = Σ_k w[o,k] · x[k,…] + b[o]`.
pub fn linear_channels(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (c_out, c_in, rest) = check_linear(x, w, b)?;
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let mut out = vec![0.0; c_out * rest];
    for o in 0..c_out {
        let row = &mut out[o * rest..(o + 1) * rest];
        for k in 0..c_in {
            let wv = wd[o * c_in + k];
            for (r, &xv) in row.iter_mut().zip(&xd[k * rest..(k + 1) * rest]) {
                *r += wv * xv;
            }
        }
        for r in row.iter_mut() {
            *r += bd[o];
        }
    }
    let mut shape = x.shape().to_vec();
    shape[0] = c_out;
    Tensor::from_op("linear_channels", shape, out)
}

/// Input gradient of [`linear_channels`]: `wᵀ · grad` along the channel axis.
pub fn linear_channels_grad_input(grad: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (c_out, c_in) = (w.shape()[0], w.shape()[1]);
    if grad.shape()[0] != c_out {
        return Err(Error::dim("linear_channels_grad_input", "channel mismatch"));
    }
    let rest = grad.len() / c_out;
    let (gd, wd) = (grad.data(), w.data());
    let mut out = vec![0.0; c_in * rest];
    for k in 0..c_in {
        let row = &mut out[k * rest..(k + 1) * rest];
        for o in 0..c_out {
            let wv = wd[o * c_in + k];
            for (r, &gv) in row.iter_mut().zip(&gd[o * rest..(o + 1) * rest]) {
                *r += wv * gv;
            }
        }
    }
    let mut shape = grad.shape().to_vec();
    shape[0] = c_in;
    Tensor::from_op("linear_channels_grad_input", shape, out)
}

/// Weight and bias gradients of [`linear_channels`].
pub fn linear_channels_grad_params(grad: &Tensor, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let c_out = grad.shape()[0];
    let c_in = x.shape()[0];
    let rest = x.len() / c_in;
    if grad.len() / c_out != rest {
        return Err(Error::dim("linear_channels_grad_params", "spatial extent mismatch"));
    }
    let (gd, xd) = (grad.data(), x.data());
    let mut gw = vec![0.0; c_out * c_in];
    let mut gb = vec![0.0; c_out];
    for o in 0..c_out {
        let g_row = &gd[o * rest..(o + 1) * rest];
        for k in 0..c_in {
            let x_row = &xd[k * rest..(k + 1) * rest];
            gw[o * c_in + k] = g_row.iter().zip(x_row).fold(0.0, |a, (g, x)| a + g * x);
        }
        gb[o] = g_row.iter().fold(0.0, |a, &g| a + g);
    }
    Ok((
        Tensor::from_op("linear_channels_grad_params", vec![c_out, c_in], gw)?,
        Tensor::from_op("linear_channels_grad_params", vec![c_out], gb)?,
    ))
}
