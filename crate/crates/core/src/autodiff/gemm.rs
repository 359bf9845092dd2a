//! Small dense matrix-multiply kernels backing convolution and linear layers.
//!
//! Operands are packed into contiguous `MR`-row and `NR`-column panels and multiplied
//! by a register-tiled micro-kernel. Every output element accumulates its products in
//! increasing `p` starting from its previous value, the same order as a naive triple
//! loop, so results do not depend on tiling and are bit-reproducible.

const KC: usize = 256;
const NC: usize = 512;
const MR: usize = 4;
const NR: usize = 8;
const LANES: usize = 8;

#[derive(Clone, Copy)]
enum Layout {
    /// element `(r, p)` at `r * depth + p`
    RowMajor,
    /// element `(r, p)` at `p * rows + r`
    Transposed,
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm(m, k, n, a, Layout::RowMajor, b, Layout::Transposed, c);
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm(m, k, n, a, Layout::Transposed, b, Layout::Transposed, c);
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm(m, k, n, a, Layout::RowMajor, b, Layout::RowMajor, c);
}

/// Packs rows `[r0, r0 + rows)` × depth `[p0, p0 + kc)` of `x` into `width`-row panels,
/// each stored `[kc][width]`, zero-filling rows past `rows`.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn pack(
    x: &[f64],
    layout: Layout,
    total_rows: usize,
    depth: usize,
    r0: usize,
    rows: usize,
    p0: usize,
    kc: usize,
    width: usize,
    out: &mut [f64],
) {
    let panels = rows.div_ceil(width);
    for q in 0..panels {
        let dst = &mut out[q * kc * width..(q + 1) * kc * width];
        let base = r0 + q * width;
        let live = width.min(rows - q * width);
        match layout {
            Layout::RowMajor => {
                for r in 0..width {
                    if r < live {
                        let src = &x[(base + r) * depth + p0..(base + r) * depth + p0 + kc];
                        for (p, &v) in src.iter().enumerate() {
                            dst[p * width + r] = v;
                        }
                    } else {
                        for p in 0..kc {
                            dst[p * width + r] = 0.0;
                        }
                    }
                }
            }
            Layout::Transposed => {
                for p in 0..kc {
                    let src = &x[(p0 + p) * total_rows + base..(p0 + p) * total_rows + base + live];
                    let d = &mut dst[p * width..(p + 1) * width];
                    d[..live].copy_from_slice(src);
                    d[live..].fill(0.0);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], la: Layout, b: &[f64], lb: Layout, c: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        unsafe { gemm_avx2(m, k, n, a, la, b, lb, c) };
        return;
    }
    gemm_body(m, k, n, a, la, b, lb, c);
}

/// Same code as [`gemm_body`] compiled for AVX2. Rust never fuses multiply-add on its
/// own, so both paths produce identical bits.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_avx2(m: usize, k: usize, n: usize, a: &[f64], la: Layout, b: &[f64], lb: Layout, c: &mut [f64]) {
    gemm_body(m, k, n, a, la, b, lb, c);
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn gemm_body(m: usize, k: usize, n: usize, a: &[f64], la: Layout, b: &[f64], lb: Layout, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let mp = m.div_ceil(MR);
    let mut apack = vec![0.0; mp * MR * KC.min(k)];
    let mut bpack = vec![0.0; NC.min(n).div_ceil(NR) * NR * KC.min(k)];
    for p0 in (0..k).step_by(KC) {
        let kc = KC.min(k - p0);
        pack(a, la, m, k, 0, m, p0, kc, MR, &mut apack);
        for j0 in (0..n).step_by(NC) {
            let nc = NC.min(n - j0);
            pack(b, lb, n, k, j0, nc, p0, kc, NR, &mut bpack);
            for q in 0..nc.div_ceil(NR) {
                let bp = &bpack[q * kc * NR..(q + 1) * kc * NR];
                let j = j0 + q * NR;
                let cols = NR.min(n - j);
                for ib in 0..mp {
                    let ap = &apack[ib * kc * MR..(ib + 1) * kc * MR];
                    let i = ib * MR;
                    let rows = MR.min(m - i);
                    let mut acc = [[0.0f64; NR]; MR];
                    for r in 0..rows {
                        acc[r][..cols].copy_from_slice(&c[(i + r) * n + j..(i + r) * n + j + cols]);
                    }
                    micro(kc, ap, bp, &mut acc);
                    for r in 0..rows {
                        c[(i + r) * n + j..(i + r) * n + j + cols].copy_from_slice(&acc[r][..cols]);
                    }
                }
            }
        }
    }
}

#[inline(always)]
fn micro(kc: usize, ap: &[f64], bp: &[f64], acc: &mut [[f64; NR]; MR]) {
    let mut t = *acc;
    for (av, bv) in ap.chunks_exact(MR).zip(bp.chunks_exact(NR)).take(kc) {
        let bv: &[f64; NR] = bv.try_into().expect("panel width");
        for r in 0..MR {
            let x = av[r];
            for l in 0..NR {
                t[r][l] += x * bv[l];
            }
        }
    }
    *acc = t;
}

#[inline]
pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [0.0f64; LANES];
    let xc = x.chunks_exact(LANES);
    let yc = y.chunks_exact(LANES);
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (xs, ys) in xc.zip(yc) {
        for l in 0..LANES {
            acc[l] += xs[l] * ys[l];
        }
    }
    let mut tail = 0.0;
    for (a, b) in xr.iter().zip(yr) {
        tail += a * b;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
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

    fn transpose(r: usize, c: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    fn seq(len: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..len)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            })
            .collect()
    }

    #[test]
    fn kernels_agree_with_naive_product() {
        for &(m, k, n) in &[(1, 1, 1), (5, 7, 3), (9, 13, 300), (4, 33, 257), (3, 9000, 2)] {
            let a = seq(m * k, 1);
            let b = seq(k * n, 2);
            let want = naive(m, k, n, &a, &b);

            let mut c = vec![0.0; m * n];
            gemm_nn(m, k, n, &a, &b, &mut c);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-10);
            }

            let at = transpose(m, k, &a);
            let mut c = vec![0.0; m * n];
            gemm_tn(m, k, n, &at, &b, &mut c);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-10);
            }

            let bt = transpose(k, n, &b);
            let mut c = vec![0.0; m * n];
            gemm_nt(m, k, n, &a, &bt, &mut c);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }
}
