//! Forward kernels on plain tensors. Shapes are validated by the caller.

use super::Tensor;

/// Splits `shape` around `axis` into `(outer, n, inner)`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    // SAFETY: slices hold m*k, k*n and m*n elements in row-major order.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `[m,k] @ [k,n]` or batched `[p,m,k] @ [p,k,n]`.
pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let sa = a.shape();
    let sb = b.shape();
    let r = sa.len();
    let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
    let batch: usize = sa[..r - 2].iter().product();
    let mut out = vec![0.0; batch * m * n];
    for p in 0..batch {
        gemm(
            m,
            k,
            n,
            &a.data()[p * m * k..(p + 1) * m * k],
            &b.data()[p * k * n..(p + 1) * k * n],
            &mut out[p * m * n..(p + 1) * m * n],
        );
    }
    let mut shape = sa[..r - 2].to_vec();
    shape.extend([m, n]);
    Tensor::new(shape, out).expect("matmul shape")
}

/// Swaps the last two axes.
pub(crate) fn transpose(a: &Tensor) -> Tensor {
    let s = a.shape();
    let r = s.len();
    let (rows, cols) = (s[r - 2], s[r - 1]);
    let batch: usize = s[..r - 2].iter().product();
    let src = a.data();
    let mut out = vec![0.0; src.len()];
    for p in 0..batch {
        let base = p * rows * cols;
        for i in 0..rows {
            for j in 0..cols {
                out[base + j * rows + i] = src[base + i * cols + j];
            }
        }
    }
    let mut shape = s[..r - 2].to_vec();
    shape.extend([cols, rows]);
    Tensor::new(shape, out).expect("transpose shape")
}

pub(crate) fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip shape")
}

pub(crate) fn sum_axis(a: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = split_axis(a.shape(), axis);
    let src = a.data();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..n {
            let row = &src[(o * n + i) * inner..(o * n + i + 1) * inner];
            for (acc, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                *acc += x;
            }
        }
    }
    let mut shape = a.shape().to_vec();
    shape.remove(axis);
    Tensor::new(shape, out).expect("sum_axis shape")
}

pub(crate) fn expand_axis(a: &Tensor, axis: usize, n: usize) -> Tensor {
    let mut shape = a.shape().to_vec();
    shape.insert(axis, n);
    let (outer, _, inner) = split_axis(&shape, axis);
    let src = a.data();
    let mut out = Vec::with_capacity(outer * n * inner);
    for o in 0..outer {
        let row = &src[o * inner..(o + 1) * inner];
        for _ in 0..n {
            out.extend_from_slice(row);
        }
    }
    Tensor::new(shape, out).expect("expand_axis shape")
}

pub(crate) fn concat(parts: &[&Tensor], axis: usize) -> Tensor {
    let mut shape = parts[0].shape().to_vec();
    shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    let (outer, _, inner) = split_axis(&shape, axis);
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::new(shape, out).expect("concat shape")
}

pub(crate) fn slice(a: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let (outer, n, inner) = split_axis(a.shape(), axis);
    let src = a.data();
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * n + start) * inner;
        out.extend_from_slice(&src[base..base + len * inner]);
    }
    let mut shape = a.shape().to_vec();
    shape[axis] = len;
    Tensor::new(shape, out).expect("slice shape")
}

/// Embeds `a` at `start` along `axis` in a zero tensor of length `full` on that axis.
pub(crate) fn slice_adjoint(a: &Tensor, axis: usize, start: usize, full: usize) -> Tensor {
    let (outer, len, inner) = split_axis(a.shape(), axis);
    let mut shape = a.shape().to_vec();
    shape[axis] = full;
    let mut out = vec![0.0; outer * full * inner];
    let src = a.data();
    for o in 0..outer {
        let dst = (o * full + start) * inner;
        out[dst..dst + len * inner].copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor::new(shape, out).expect("slice_adjoint shape")
}

pub(crate) fn gather_rows(table: &Tensor, idx: &[usize]) -> Tensor {
    let cols = table.shape()[1];
    let mut out = Vec::with_capacity(idx.len() * cols);
    for &r in idx {
        out.extend_from_slice(&table.data()[r * cols..(r + 1) * cols]);
    }
    Tensor::new(vec![idx.len(), cols], out).expect("gather_rows shape")
}

pub(crate) fn scatter_rows(src: &Tensor, idx: &[usize], rows: usize) -> Tensor {
    let cols = src.shape()[1];
    let mut out = vec![0.0; rows * cols];
    for (i, &r) in idx.iter().enumerate() {
        for (acc, &x) in out[r * cols..(r + 1) * cols].iter_mut().zip(&src.data()[i * cols..(i + 1) * cols]) {
            *acc += x;
        }
    }
    Tensor::new(vec![rows, cols], out).expect("scatter_rows shape")
}

pub(crate) fn gather_flat(a: &Tensor, idx: &[usize]) -> Tensor {
    Tensor::vector(idx.iter().map(|&i| a.data()[i]).collect())
}

pub(crate) fn scatter_flat(src: &Tensor, idx: &[usize], shape: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(shape);
    let dst = out.data_mut();
    for (&i, &x) in idx.iter().zip(src.data()) {
        dst[i] += x;
    }
    out
}

/// `[B, L, C]` -> `[B, L_out, kernel*C]` with `L_out = L + 2*pad - kernel + 1`.
pub(crate) fn unfold(a: &Tensor, kernel: usize, pad: usize) -> Tensor {
    let s = a.shape();
    let (b, l, c) = (s[0], s[1], s[2]);
    let l_out = l + 2 * pad + 1 - kernel;
    let mut out = vec![0.0; b * l_out * kernel * c];
    let src = a.data();
    for bi in 0..b {
        for t in 0..l_out {
            for j in 0..kernel {
                let pos = t + j;
                if pos < pad || pos - pad >= l {
                    continue;
                }
                let from = (bi * l + pos - pad) * c;
                let to = ((bi * l_out + t) * kernel + j) * c;
                out[to..to + c].copy_from_slice(&src[from..from + c]);
            }
        }
    }
    Tensor::new(vec![b, l_out, kernel * c], out).expect("unfold shape")
}

/// Adjoint of [`unfold`]: accumulates windows back onto a `[B, L, C]` tensor.
pub(crate) fn fold(a: &Tensor, kernel: usize, pad: usize, len: usize) -> Tensor {
    let s = a.shape();
    let (b, l_out, kc) = (s[0], s[1], s[2]);
    let c = kc / kernel;
    let mut out = vec![0.0; b * len * c];
    let src = a.data();
    for bi in 0..b {
        for t in 0..l_out {
            for j in 0..kernel {
                let pos = t + j;
                if pos < pad || pos - pad >= len {
                    continue;
                }
                let to = (bi * len + pos - pad) * c;
                let from = ((bi * l_out + t) * kernel + j) * c;
                for (acc, &x) in out[to..to + c].iter_mut().zip(&src[from..from + c]) {
                    *acc += x;
                }
            }
        }
    }
    Tensor::new(vec![b, len, c], out).expect("fold shape")
}

/// Row-wise softmax over the last axis, max-subtracted.
pub(crate) fn softmax_last(a: &Tensor) -> Tensor {
    let n = *a.shape().last().unwrap_or(&1);
    let mut out = a.data().to_vec();
    for row in out.chunks_mut(n.max(1)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        for x in row.iter_mut() {
            *x /= total;
        }
    }
    Tensor::new(a.shape().to_vec(), out).expect("softmax shape")
}

pub(crate) fn log_softmax_last(a: &Tensor) -> Tensor {
    let n = *a.shape().last().unwrap_or(&1);
    let mut out = a.data().to_vec();
    for row in out.chunks_mut(n.max(1)) {
        let lse = log_sum_exp(row);
        for x in row.iter_mut() {
            *x -= lse;
        }
    }
    Tensor::new(a.shape().to_vec(), out).expect("log_softmax shape")
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
