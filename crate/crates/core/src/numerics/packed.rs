//! Right-hand operands packed once into column panels, for repeated products
//! against a fixed weight matrix with only a few left-hand rows.

/// Panel width in columns.
const NR: usize = 8;
/// Rows per register tile.
const MR: usize = 6;

/// A `k×n` matrix stored as `ceil(n/8)` panels of `k×8` values, the last
/// panel zero-padded.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedMatrix {
    k: usize,
    n: usize,
    panels: Vec<f64>,
}

impl PackedMatrix {
    /// Packs a row-major `k×n` matrix.
    pub fn from_row_major(b: &[f64], k: usize, n: usize) -> Self {
        assert_eq!(b.len(), k * n, "packed operand extent");
        Self::from_fn(k, n, |p, j| b[p * n + j])
    }

    /// Packs the matrix whose `(p, j)` entry is `at(p, j)`.
    pub fn from_fn(k: usize, n: usize, at: impl Fn(usize, usize) -> f64) -> Self {
        let blocks = n.div_ceil(NR);
        let mut panels = vec![0.0; blocks * k * NR];
        for jb in 0..blocks {
            let cols = NR.min(n - jb * NR);
            for p in 0..k {
                let dst = &mut panels[(jb * k + p) * NR..][..cols];
                for (q, v) in dst.iter_mut().enumerate() {
                    *v = at(p, jb * NR + q);
                }
            }
        }
        Self { k, n, panels }
    }

    pub fn rows(&self) -> usize {
        self.k
    }

    pub fn cols(&self) -> usize {
        self.n
    }
}

/// `c[i, j] = Σ_p a[i, p]·b[p, j]` for `rows` rows of `a` (row stride `k`),
/// writing row `i` of the result at `c[i*ldc..]`.
pub fn gemm_packed(rows: usize, a: &[f64], b: &PackedMatrix, c: &mut [f64], ldc: usize) {
    let (k, n) = (b.k, b.n);
    assert!(a.len() >= rows * k && ldc >= n, "packed product extent");
    if rows == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= (rows - 1) * ldc + n, "packed product output extent");
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
        // SAFETY: the features were detected at run time, and the asserts
        // above bound every row and panel the tiles touch.
        unsafe { simd::gemm(rows, a, b, c, ldc) };
        return;
    }
    portable(rows, a, b, c, ldc);
}

fn portable(rows: usize, a: &[f64], b: &PackedMatrix, c: &mut [f64], ldc: usize) {
    let k = b.k;
    for jb in 0..b.n.div_ceil(NR) {
        let panel = &b.panels[jb * k * NR..][..k * NR];
        let cols = NR.min(b.n - jb * NR);
        for i0 in (0..rows).step_by(MR) {
            let mut acc = [[0.0; NR]; MR];
            let tile = MR.min(rows - i0);
            for (r, acc) in acc.iter_mut().enumerate().take(tile) {
                let arow = &a[(i0 + r) * k..][..k];
                for (av, bp) in arow.iter().zip(panel.chunks_exact(NR)) {
                    for (s, bv) in acc.iter_mut().zip(bp) {
                        *s += av * bv;
                    }
                }
            }
            for (r, acc) in acc.iter().enumerate().take(tile) {
                c[(i0 + r) * ldc + jb * NR..][..cols].copy_from_slice(&acc[..cols]);
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod simd {
    use super::{PackedMatrix, MR, NR};
    use std::arch::x86_64::*;

    // Pointer offsets use `wrapping_add` and loads go through intrinsics so
    // builds with debug assertions do not check every element access.
    #[target_feature(enable = "avx2,fma")]
    unsafe fn tile<const R: usize>(a: *const f64, k: usize, panel: *const f64, c: *mut f64, ldc: usize, cols: usize) {
        let mut lo = [_mm256_setzero_pd(); R];
        let mut hi = [_mm256_setzero_pd(); R];
        let rows: [*const f64; R] = std::array::from_fn(|r| a.wrapping_add(r * k));
        let mut bp = panel;
        for p in 0..k {
            let b0 = _mm256_loadu_pd(bp);
            let b1 = _mm256_loadu_pd(bp.wrapping_add(4));
            bp = bp.wrapping_add(NR);
            for r in 0..R {
                let av = _mm256_broadcastsd_pd(_mm_load_sd(rows[r].wrapping_add(p)));
                lo[r] = _mm256_fmadd_pd(av, b0, lo[r]);
                hi[r] = _mm256_fmadd_pd(av, b1, hi[r]);
            }
        }
        for r in 0..R {
            let dst = c.wrapping_add(r * ldc);
            if cols == NR {
                _mm256_storeu_pd(dst, lo[r]);
                _mm256_storeu_pd(dst.wrapping_add(4), hi[r]);
            } else {
                let mut buf = [0.0; NR];
                _mm256_storeu_pd(buf.as_mut_ptr(), lo[r]);
                _mm256_storeu_pd(buf.as_mut_ptr().wrapping_add(4), hi[r]);
                std::ptr::copy_nonoverlapping(buf.as_ptr(), dst, cols);
            }
        }
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn gemm(rows: usize, a: &[f64], b: &PackedMatrix, c: &mut [f64], ldc: usize) {
        let (k, n) = (b.k, b.n);
        if k == 0 {
            for r in 0..rows {
                c[r * ldc..][..n].iter_mut().for_each(|v| *v = 0.0);
            }
            return;
        }
        for jb in 0..n.div_ceil(NR) {
            let panel = b.panels.as_ptr().wrapping_add(jb * k * NR);
            let cols = NR.min(n - jb * NR);
            for i0 in (0..rows).step_by(MR) {
                let ap = a.as_ptr().wrapping_add(i0 * k);
                let cp = c.as_mut_ptr().wrapping_add(i0 * ldc + jb * NR);
                match rows - i0 {
                    1 => tile::<1>(ap, k, panel, cp, ldc, cols),
                    2 => tile::<2>(ap, k, panel, cp, ldc, cols),
                    3 => tile::<3>(ap, k, panel, cp, ldc, cols),
                    4 => tile::<4>(ap, k, panel, cp, ldc, cols),
                    5 => tile::<5>(ap, k, panel, cp, ldc, cols),
                    _ => tile::<MR>(ap, k, panel, cp, ldc, cols),
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn values(seed: u64, n: usize) -> Vec<f64> {
        (0..n).map(|i| (((i as u64 + seed) * 2654435761) % 1000) as f64 / 500.0 - 1.0).collect()
    }

    #[test]
    fn matches_naive_product_on_ragged_shapes() {
        for (m, k, n) in [(1, 1, 1), (7, 13, 9), (6, 5, 8), (13, 40, 17), (3, 0, 4), (2, 3, 0), (9, 700, 13)] {
            let a = values(1, m * k);
            let b = values(7, k * n);
            let packed = PackedMatrix::from_row_major(&b, k, n);
            let ldc = n + 3;
            let mut c = vec![f64::NAN; m * ldc];
            gemm_packed(m, &a, &packed, &mut c, ldc);
            for i in 0..m {
                for j in 0..n {
                    let want: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                    assert!((c[i * ldc + j] - want).abs() < 1e-12, "{m}x{k}x{n} at ({i},{j})");
                }
                // Padding columns between rows are left alone.
                assert!(c[i * ldc + n..i * ldc + ldc].iter().all(|v| v.is_nan()));
            }
        }
    }

    #[test]
    fn from_fn_matches_row_major() {
        let b = values(3, 5 * 11);
        let p = PackedMatrix::from_fn(5, 11, |r, c| b[r * 11 + c]);
        assert_eq!(p, PackedMatrix::from_row_major(&b, 5, 11));
        assert_eq!((p.rows(), p.cols()), (5, 11));
    }

    #[test]
    fn portable_path_agrees_with_dispatch() {
        let (m, k, n) = (11, 19, 21);
        let a = values(2, m * k);
        let p = PackedMatrix::from_row_major(&values(5, k * n), k, n);
        let (mut x, mut y) = (vec![0.0; m * n], vec![0.0; m * n]);
        gemm_packed(m, &a, &p, &mut x, n);
        portable(m, &a, &p, &mut y, n);
        for (u, v) in x.iter().zip(&y) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}
