//! Forward and backward kernels on raw row-major slices.
//!
//! These are the numeric bodies behind the tape operations. They take plain
//! slices plus extents and never allocate graph state, so they can be tested
//! against brute-force loops directly.

use super::par;

/// Output rows below which a product is not worth splitting across threads.
const PAR_MIN_ROWS: usize = 64;
const PAR_MIN_WORK: usize = 1 << 17;

/// `c = op(a) · op(b)` (or `c += ...` when `accumulate`), with `op(a)` of
/// extent `m×k` and `op(b)` of extent `k×n`. `trans_*` means the operand is
/// stored transposed.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let c = &mut c[..m * n];
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let workers = par::threads();
    if workers > 1 && m >= PAR_MIN_ROWS && m * n * k >= PAR_MIN_WORK {
        // Row blocks are multiples of 8 so every block packs identically.
        let rows = m.div_ceil(workers).div_ceil(8) * 8;
        par::for_each_chunk(c, rows * n, |blk, c_blk| {
            let r0 = blk * rows;
            let rs = c_blk.len() / n;
            gemm_block(r0, rs, m, k, n, a, trans_a, b, trans_b, c_blk, accumulate);
        });
    } else {
        gemm_block(0, m, m, k, n, a, trans_a, b, trans_b, c, accumulate);
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm_block(
    r0: usize,
    rows: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    let (a_off, rsa, csa) = if trans_a {
        (r0, 1isize, m as isize)
    } else {
        (r0 * k, k as isize, 1isize)
    };
    let (rsb, csb) = if trans_b {
        (1isize, k as isize)
    } else {
        (n as isize, 1isize)
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts in `gemm` guarantee `a` holds m×k values, `b` holds
    // k×n values and `c` holds `rows`×n values; the strides above address only
    // within those bounds for rows r0..r0+rows.
    unsafe {
        matrixmultiply::dgemm(
            rows,
            k,
            n,
            1.0,
            a.as_ptr().add(a_off),
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

/// Swaps the last two axes of a `batch×rows×cols` array.
pub fn transpose12(x: &[f64], batch: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch * rows * cols];
    let plane = rows * cols;
    par::for_each_chunk(&mut out, plane, |b, dst| {
        let src = &x[b * plane..(b + 1) * plane];
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    });
    out
}

/// Extents of a batched same-padded convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub len: usize,
    pub kernel: usize,
}

impl ConvDims {
    fn pad(&self) -> usize {
        (self.kernel - 1) / 2
    }

    fn cols(&self) -> usize {
        self.batch * self.len
    }
}

/// Unfolds `x` (batch×in_ch×len) into a `(in_ch·kernel) × (batch·len)` matrix.
fn im2col(x: &[f64], d: ConvDims) -> Vec<f64> {
    let cols = d.cols();
    let pad = d.pad() as isize;
    let mut out = vec![0.0; d.in_ch * d.kernel * cols];
    par::for_each_chunk(&mut out, cols, |row, dst| {
        let (i, t) = (row / d.kernel, row % d.kernel);
        let shift = t as isize - pad;
        for b in 0..d.batch {
            let src = &x[(b * d.in_ch + i) * d.len..][..d.len];
            let dst = &mut dst[b * d.len..][..d.len];
            for (l, v) in dst.iter_mut().enumerate() {
                let p = l as isize + shift;
                if p >= 0 && (p as usize) < d.len {
                    *v = src[p as usize];
                }
            }
        }
    });
    out
}

/// Same-padded stride-1 convolution: `y[b,o,l] = bias[o] + Σ_i Σ_t w[o,i,t]·x[b,i,l+t-pad]`.
pub fn conv1d_forward(x: &[f64], w: &[f64], bias: &[f64], d: ConvDims) -> Vec<f64> {
    let cols = d.cols();
    let unfolded = im2col(x, d);
    let mut prod = vec![0.0; d.out_ch * cols];
    gemm(
        d.out_ch,
        d.in_ch * d.kernel,
        cols,
        w,
        false,
        &unfolded,
        false,
        &mut prod,
        false,
    );
    let mut y = vec![0.0; d.batch * d.out_ch * d.len];
    par::for_each_chunk(&mut y, d.len, |row, dst| {
        let (b, o) = (row / d.out_ch, row % d.out_ch);
        let src = &prod[o * cols + b * d.len..][..d.len];
        for (v, s) in dst.iter_mut().zip(src) {
            *v = s + bias[o];
        }
    });
    y
}

/// Gradients of [`conv1d_forward`]: `(dx, dw, dbias)`. `dx` is skipped when
/// `want_dx` is false.
pub fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    d: ConvDims,
    want_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let cols = d.cols();
    let ik = d.in_ch * d.kernel;
    // dy (batch×out×len) -> (out × batch·len)
    let mut dmat = vec![0.0; d.out_ch * cols];
    par::for_each_chunk(&mut dmat, cols, |o, dst| {
        for b in 0..d.batch {
            dst[b * d.len..][..d.len].copy_from_slice(&dy[(b * d.out_ch + o) * d.len..][..d.len]);
        }
    });
    let dbias: Vec<f64> = dmat.chunks(cols).map(|r| r.iter().sum()).collect();

    let unfolded = im2col(x, d);
    let mut dw = vec![0.0; d.out_ch * ik];
    gemm(d.out_ch, cols, ik, &dmat, false, &unfolded, true, &mut dw, false);
    drop(unfolded);

    let dx = want_dx.then(|| {
        let mut dcols = vec![0.0; ik * cols];
        gemm(ik, d.out_ch, cols, w, true, &dmat, false, &mut dcols, false);
        let pad = d.pad() as isize;
        let mut dx = vec![0.0; d.batch * d.in_ch * d.len];
        par::for_each_chunk(&mut dx, d.len, |row, dst| {
            let (b, i) = (row / d.in_ch, row % d.in_ch);
            for t in 0..d.kernel {
                let src = &dcols[(i * d.kernel + t) * cols + b * d.len..][..d.len];
                let shift = t as isize - pad;
                for (l, g) in src.iter().enumerate() {
                    let p = l as isize + shift;
                    if p >= 0 && (p as usize) < d.len {
                        dst[p as usize] += g;
                    }
                }
            }
        });
        dx
    });
    (dx, dw, dbias)
}

/// Per-channel mean and biased variance of a `batch×channels×len` array.
pub fn channel_moments(x: &[f64], batch: usize, ch: usize, len: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (batch * len) as f64;
    let stats = par::map_range(ch, |c| {
        let mut sum = 0.0;
        for b in 0..batch {
            sum += x[(b * ch + c) * len..][..len].iter().sum::<f64>();
        }
        let mean = sum / count;
        let mut sq = 0.0;
        for b in 0..batch {
            sq += x[(b * ch + c) * len..][..len]
                .iter()
                .map(|v| (v - mean) * (v - mean))
                .sum::<f64>();
        }
        (mean, sq / count)
    });
    stats.into_iter().unzip()
}

/// `xhat = (x - mean[c]) · inv_std[c]`, `y = gamma[c]·xhat + beta[c]`.
pub fn channel_affine_normalize(
    x: &[f64],
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    beta: &[f64],
    ch: usize,
    len: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0; x.len()];
    par::for_each_chunk(&mut xhat, len, |row, dst| {
        let c = row % ch;
        for (v, s) in dst.iter_mut().zip(&x[row * len..][..len]) {
            *v = (s - mean[c]) * inv_std[c];
        }
    });
    let mut y = vec![0.0; x.len()];
    par::for_each_chunk(&mut y, len, |row, dst| {
        let c = row % ch;
        for (v, s) in dst.iter_mut().zip(&xhat[row * len..][..len]) {
            *v = gamma[c] * s + beta[c];
        }
    });
    (xhat, y)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    par::for_each_chunk(&mut out, cols, |r, dst| {
        let src = &x[r * cols..][..cols];
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, v) in dst.iter_mut().zip(src) {
            *o = (v - max).exp();
            total += *o;
        }
        dst.iter_mut().for_each(|o| *o /= total);
    });
    out
}

/// Backward of [`softmax_rows`] given its output `p`.
pub fn softmax_rows_backward(p: &[f64], dy: &[f64], cols: usize) -> Vec<f64> {
    let mut dx = vec![0.0; p.len()];
    par::for_each_chunk(&mut dx, cols, |r, dst| {
        let pr = &p[r * cols..][..cols];
        let gr = &dy[r * cols..][..cols];
        let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((o, pv), gv) in dst.iter_mut().zip(pr).zip(gr) {
            *o = pv * (gv - dot);
        }
    });
    dx
}

/// Sinusoidal position table, `len×width`.
pub fn positional_table(len: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * width];
    for pos in 0..len {
        for v in 0..width.div_ceil(2) {
            let freq = (10000f64).powf((2 * v) as f64 / width as f64);
            let angle = pos as f64 / freq;
            out[pos * width + 2 * v] = angle.sin();
            if 2 * v + 1 < width {
                out[pos * width + 2 * v + 1] = angle.cos();
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
        transpose12(a, 1, rows, cols)
    }

    fn lcg(seed: u64, n: usize) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn gemm_all_transpose_combinations() {
        let (m, k, n) = (7, 5, 9);
        let a = lcg(1, m * k);
        let b = lcg(2, k * n);
        let expected = naive_matmul(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, ta) in [(&a, false), (&at, true)] {
            for (bb, tb) in [(&b, false), (&bt, true)] {
                let mut c = vec![f64::NAN; m * n];
                gemm(m, k, n, aa, ta, bb, tb, &mut c, false);
                for (x, y) in c.iter().zip(&expected) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gemm_row_blocks_match_whole_product_bitwise() {
        let (m, k, n) = (200, 150, 40);
        let a = lcg(3, m * k);
        let b = lcg(4, k * n);
        let mut whole = vec![0.0; m * n];
        gemm_block(0, m, m, k, n, &a, false, &b, false, &mut whole, false);
        let mut pieces = vec![0.0; m * n];
        for r0 in (0..m).step_by(64) {
            let rows = 64.min(m - r0);
            gemm_block(r0, rows, m, k, n, &a, false, &b, false, &mut pieces[r0 * n..(r0 + rows) * n], false);
        }
        assert_eq!(whole, pieces);
    }

    #[test]
    fn softmax_handles_large_logits() {
        let p = softmax_rows(&[1000.0, 1000.0, -1000.0, 0.0], 2);
        assert_eq!(&p[..2], &[0.5, 0.5]);
        assert!((p[2] - 0.0).abs() < 1e-300 && (p[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn positional_table_first_row() {
        let pe = positional_table(2, 4);
        assert_eq!(&pe[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe[4] - 1f64.sin()).abs() < 1e-15);
    }
}
