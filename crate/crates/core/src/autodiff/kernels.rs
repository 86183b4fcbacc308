//! Slice-level numeric kernels shared by the graph ops and the cached
//! inference path. All reductions run in a fixed sequential order.

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    gemm_acc(a, k, 1, b, c, m, k, n);
}

/// `c[k×n] += aᵀ · g` where `a` is `m×k` and `g` is `m×n`.
pub fn matmul_tn_acc(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    gemm_acc(a, 1, k, g, c, k, m, n);
}

/// `c[m×k] += g · bᵀ` where `g` is `m×n` and `b` is `k×n`.
pub fn matmul_nt_acc(g: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    let bt = transpose(b, k, n);
    matmul_acc(g, &bt, c, m, n, k);
}

const MR: usize = 4;
const NR: usize = 8;
const KC: usize = 128;

/// `c[m×n] += A · b[k×n]` with `A[i][p] = a[i·row_stride + p·inner_stride]`.
///
/// Every output element accumulates its `k` products onto its prior value
/// in ascending `p`, whatever the blocking, so results are independent of
/// the shape of the call.
///
/// The inner dimension is walked in ascending blocks of `KC` to keep the
/// streamed rows of `b` cache resident.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(a: &[f64], row_stride: usize, inner_stride: usize, b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    if n == 0 || m == 0 {
        return;
    }
    let mut p0 = 0;
    while p0 < k {
        let kc = KC.min(k - p0);
        let a_blk = &a[p0 * inner_stride..];
        let b_blk = &b[p0 * n..(p0 + kc) * n];
        #[cfg(target_arch = "x86_64")]
        {
            if std::arch::is_x86_feature_detected!("avx2") {
                // SAFETY: the feature was detected at runtime
                unsafe { gemm_block_avx2(a_blk, row_stride, inner_stride, b_blk, c, m, kc, n) };
                p0 += kc;
                continue;
            }
        }
        gemm_block(a_blk, row_stride, inner_stride, b_blk, c, m, kc, n);
        p0 += kc;
    }
}

/// Wider vectors only; no fused multiply-add, so rounding matches the
/// portable path bit for bit.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_block_avx2(a: &[f64], row_stride: usize, inner_stride: usize, b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_block(a, row_stride, inner_stride, b, c, m, k, n)
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn gemm_block(a: &[f64], row_stride: usize, inner_stride: usize, b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let m_main = m - m % MR;
    let n_main = n - n % NR;
    let mut panel = vec![0.0; k * MR];
    for i in (0..m_main).step_by(MR) {
        for (p, dst) in panel.chunks_exact_mut(MR).enumerate() {
            for (r, d) in dst.iter_mut().enumerate() {
                *d = a[(i + r) * row_stride + p * inner_stride];
            }
        }
        for j in (0..n_main).step_by(NR) {
            let mut acc = [[0.0; NR]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&c[(i + r) * n + j..(i + r) * n + j + NR]);
            }
            for (ap, brow) in panel.chunks_exact(MR).zip(b.chunks_exact(n)) {
                let bv: &[f64; NR] = brow[j..j + NR].try_into().unwrap();
                for (row, &x) in acc.iter_mut().zip(ap) {
                    for (cv, &y) in row.iter_mut().zip(bv) {
                        *cv += x * y;
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                c[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(row);
            }
        }
        if n_main < n {
            for (r, crow) in c[i * n..(i + MR) * n].chunks_exact_mut(n).enumerate() {
                let tail = &mut crow[n_main..];
                for (ap, brow) in panel.chunks_exact(MR).zip(b.chunks_exact(n)) {
                    axpy(ap[r], &brow[n_main..], tail);
                }
            }
        }
    }
    for r in m_main..m {
        let crow = &mut c[r * n..(r + 1) * n];
        for (p, brow) in b.chunks_exact(n).take(k).enumerate() {
            axpy(a[r * row_stride + p * inner_stride], brow, crow);
        }
    }
}

pub fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh approximation of GELU
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

/// `(gelu(x), gelu'(x))` from one tanh evaluation; the value is bitwise
/// equal to [`gelu`].
#[inline]
pub fn gelu_with_grad(x: f64) -> (f64, f64) {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    (0.5 * x * (1.0 + t), 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
}

/// In-place softmax of one row. `-inf` entries come out as exactly zero.
pub fn softmax_in_place(row: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// `ln Σ exp(row)`
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for &v in row {
        if v > max {
            max = v;
        }
    }
    let mut sum = 0.0;
    for &v in row {
        sum += (v - max).exp();
    }
    max + sum.ln()
}

/// Normalizes `x` into `out`, returning `(mean, rstd)`.
pub fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64], eps: f64, out: &mut [f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mut mean = 0.0;
    for &v in x {
        mean += v;
    }
    mean /= n;
    let mut var = 0.0;
    for &v in x {
        let d = v - mean;
        var += d * d;
    }
    var /= n;
    let rstd = 1.0 / (var + eps).sqrt();
    for (((o, &v), &g), &b) in out.iter_mut().zip(x).zip(gain).zip(bias) {
        *o = (v - mean) * rstd * g + b;
    }
    (mean, rstd)
}
