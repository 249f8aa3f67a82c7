// SPDX-License-Identifier: Apache-2.0
//! Dense kernels shared by forward and backward passes.

/// `c = op(a)·op(b) + beta·c` for row-major operands, where `op`
/// transposes when the flag is set. `a` is `m×k` after `op`, `b` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the lengths checked above cover every element the strided
    // views address.
    unsafe { dgemm(m, k, n, a, trans_a, b, trans_b, beta, c.as_mut_ptr()) }
}

/// `op(a)·op(b)` into a fresh `m×n` buffer.
pub fn gemm_new(m: usize, k: usize, n: usize, a: &[f64], trans_a: bool, b: &[f64], trans_b: bool) -> Vec<f64> {
    assert!(a.len() >= m * k && b.len() >= k * n);
    if k == 0 {
        return vec![0.0; m * n];
    }
    let mut c = Vec::with_capacity(m * n);
    // SAFETY: with beta = 0 the kernel writes all `m·n` outputs without
    // reading them, so the buffer is fully initialized before `set_len`.
    unsafe {
        dgemm(m, k, n, a, trans_a, b, trans_b, 0.0, c.as_mut_ptr());
        c.set_len(m * n);
    }
    c
}

/// # Safety
/// `a`, `b` must hold `m·k` and `k·n` values and `c` must be valid for
/// `m·n` writes (and reads unless `beta` is zero).
#[allow(clippy::too_many_arguments)]
unsafe fn dgemm(m: usize, k: usize, n: usize, a: &[f64], trans_a: bool, b: &[f64], trans_b: bool, beta: f64, c: *mut f64) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c, n as isize, 1);
}

/// Output side of a 3×3, padding-1 convolution.
pub fn conv_out(size: usize, stride: usize) -> usize {
    (size - 1) / stride + 1
}

/// Output columns `lo..hi` whose tap `kx` reads inside a row of width `w`.
fn valid_columns(kx: usize, stride: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = usize::from(kx == 0);
    // Need ox·stride + kx − 1 ≤ w − 1.
    let hi = if kx > w { 0 } else { ((w - kx) / stride + 1).min(wo) };
    (lo.min(hi), hi)
}

/// Unfolds `[c, h, w]` into `[c·9, ho·wo]` patch columns.
pub fn im2col(x: &[f64], c: usize, h: usize, w: usize, stride: usize) -> Vec<f64> {
    let (ho, wo) = (conv_out(h, stride), conv_out(w, stride));
    let mut cols = Vec::with_capacity(c * 9 * ho * wo);
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for t in 0..9 {
            let (ky, kx) = (t / 3, t % 3);
            let (lo, hi) = valid_columns(kx, stride, w, wo);
            for oy in 0..ho {
                let iy = (oy * stride + ky) as isize - 1;
                if iy < 0 || iy >= h as isize {
                    cols.resize(cols.len() + wo, 0.0);
                    continue;
                }
                let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                cols.resize(cols.len() + lo, 0.0);
                if stride == 1 {
                    cols.extend_from_slice(&src[lo + kx - 1..hi + kx - 1]);
                } else {
                    cols.extend((lo..hi).map(|ox| src[ox * stride + kx - 1]));
                }
                cols.resize(cols.len() + wo - hi, 0.0);
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates patch columns back into `[c, h, w]`.
pub fn col2im(cols: &[f64], c: usize, h: usize, w: usize, stride: usize, dx: &mut [f64]) {
    let (ho, wo) = (conv_out(h, stride), conv_out(w, stride));
    let p = ho * wo;
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for t in 0..9 {
            let (ky, kx) = (t / 3, t % 3);
            let row = &cols[(ch * 9 + t) * p..(ch * 9 + t + 1) * p];
            for oy in 0..ho {
                let iy = (oy * stride + ky) as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                let src = &row[oy * wo..(oy + 1) * wo];
                let (lo, hi) = valid_columns(kx, stride, w, wo);
                if stride == 1 {
                    for (d, s) in dst[lo + kx - 1..hi + kx - 1].iter_mut().zip(&src[lo..hi]) {
                        *d += s;
                    }
                } else {
                    for (ox, s) in src.iter().enumerate().take(hi).skip(lo) {
                        dst[ox * stride + kx - 1] += s;
                    }
                }
            }
        }
    }
}

/// Low-resolution slot (0 or 1) that tap `k` of a 3×3 kernel reads when
/// applied to a nearest-upsampled grid at output parity `a`.
pub fn upconv_slot(a: usize, k: usize) -> usize {
    (a + k + 1) / 2 - a
}

/// Folds a `[o, c, 3, 3]` kernel into the sixteen 2×2 kernels seen by the
/// output parities of `conv(upsample2(x))`, as a `[16·o, c]` matrix. Block
/// [`upconv_row`]`(a, b, sy, sx)` reads low-res offset `(a − 1 + sy, b − 1 + sx)`
/// at output parity `(a, b)`.
pub fn upconv_taps(w: &[f64], o: usize, c: usize) -> Vec<f64> {
    let rows = upconv_rows();
    let mut out = vec![0.0; 16 * o * c];
    for (oc_c, k) in w.chunks(9).enumerate() {
        let (oc, ch) = (oc_c / c, oc_c % c);
        for par in &rows {
            for (q, v) in par.iter().zip(k) {
                out[(q * o + oc) * c + ch] += v;
            }
        }
    }
    out
}

/// Adjoint of [`upconv_taps`], accumulated into `dw [o, c, 3, 3]`.
pub fn upconv_taps_adjoint(d: &[f64], o: usize, c: usize, dw: &mut [f64]) {
    let rows = upconv_rows();
    for (oc_c, k) in dw.chunks_mut(9).enumerate() {
        let (oc, ch) = (oc_c / c, oc_c % c);
        for par in &rows {
            for (q, v) in par.iter().zip(k.iter_mut()) {
                *v += d[(q * o + oc) * c + ch];
            }
        }
    }
}

/// Folded block of each 3×3 tap, per output parity.
fn upconv_rows() -> [[usize; 9]; 4] {
    let mut rows = [[0; 9]; 4];
    for (ab, row) in rows.iter_mut().enumerate() {
        let (a, b) = (ab / 2, ab % 2);
        for (t, q) in row.iter_mut().enumerate() {
            *q = upconv_row(a, b, upconv_slot(a, t / 3), upconv_slot(b, t % 3));
        }
    }
    rows
}

/// Block index of parity `(a, b)` and slot `(sy, sx)` in [`upconv_taps`].
pub fn upconv_row(a: usize, b: usize, sy: usize, sx: usize) -> usize {
    ((a * 2 + b) * 2 + sy) * 2 + sx
}

/// Columns `j` with `0 ≤ j + dx < w`.
fn valid_shift(dx: isize, w: usize) -> (usize, usize) {
    ((-dx).max(0) as usize, (w as isize).min(w as isize - dx) as usize)
}

/// `dst[i, j] += src[i + dy, j + dx]` on an `h×w` plane, zero outside.
pub fn add_shifted(dst: &mut [f64], src: &[f64], h: usize, w: usize, dy: isize, dx: isize) {
    let (lo, hi) = valid_shift(dx, w);
    let (r0, r1) = valid_shift(dy, h);
    for i in r0..r1 {
        let s0 = (i as isize + dy) as usize * w + (lo as isize + dx) as usize;
        let d = &mut dst[i * w + lo..i * w + hi];
        d.iter_mut().zip(&src[s0..s0 + hi - lo]).for_each(|(a, b)| *a += b);
    }
}

/// Adjoint of [`add_shifted`]: `dst[i + dy, j + dx] += src[i, j]`.
pub fn add_shifted_adjoint(dst: &mut [f64], src: &[f64], h: usize, w: usize, dy: isize, dx: isize) {
    let (lo, hi) = valid_shift(dx, w);
    let (r0, r1) = valid_shift(dy, h);
    for i in r0..r1 {
        let d0 = (i as isize + dy) as usize * w + (lo as isize + dx) as usize;
        let d = &mut dst[d0..d0 + hi - lo];
        d.iter_mut().zip(&src[i * w + lo..i * w + hi]).for_each(|(a, b)| *a += b);
    }
}

/// Which grid cells each node is painted onto.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Footprints {
    pub height: usize,
    pub width: usize,
    /// Row-major cell indices per node; cells belong to at most one node.
    pub cells: Vec<Vec<usize>>,
}

/// Precomputed taps of a 3×3 convolution applied to a painted grid:
/// output pixel `p` receives kernel tap `t` times the embedding of `node`.
#[derive(Clone, Debug)]
pub struct ProjConvPlan {
    pub out_h: usize,
    pub out_w: usize,
    pub nodes: usize,
    pub hits: Vec<(u32, u32, u8)>,
}

impl ProjConvPlan {
    pub fn new(fp: &Footprints, stride: usize) -> Self {
        let (h, w) = (fp.height, fp.width);
        // Owner grid with a one-cell empty border, so taps need no bounds tests.
        let wp = w + 2;
        let mut owner = vec![u32::MAX; (h + 2) * wp];
        for (k, cells) in fp.cells.iter().enumerate() {
            for &c in cells {
                owner[(c / w + 1) * wp + c % w + 1] = k as u32;
            }
        }
        let (out_h, out_w) = (conv_out(h, stride), conv_out(w, stride));
        let mut hits = Vec::with_capacity(fp.cells.iter().map(Vec::len).sum::<usize>() * 9 / (stride * stride));
        for oy in 0..out_h {
            for ox in 0..out_w {
                let px = (oy * out_w + ox) as u32;
                let base = oy * stride * wp + ox * stride;
                for ky in 0..3 {
                    let row = &owner[base + ky * wp..base + ky * wp + 3];
                    for (kx, &k) in row.iter().enumerate() {
                        if k != u32::MAX {
                            hits.push((px, k, (ky * 3 + kx) as u8));
                        }
                    }
                }
            }
        }
        Self {
            out_h,
            out_w,
            nodes: fp.cells.len(),
            hits,
        }
    }
}
