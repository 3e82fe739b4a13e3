//! Plain-slice numeric kernels behind the tape ops. Everything here is
//! deterministic: fixed loop order, no threading, no reassociation.

/// `c = a(m×k) · b(k×n)`, row-major.
pub fn matmul(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // matrixmultiply is single-threaded and uses a fixed blocking schedule,
    // so results are reproducible run to run.
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

/// `c(k×n) (+)= aᵀ · b` for `a(m×k)`, `b(m×n)`; `beta` selects overwrite (0)
/// or accumulate (1).
pub fn matmul_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize, beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    unsafe {
        matrixmultiply::dgemm(
            k,
            m,
            n,
            1.0,
            a.as_ptr(),
            1,
            k as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c(m×k) (+)= a · bᵀ` for `a(m×n)`, `b(k×n)`.
pub fn matmul_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize, beta: f64) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    unsafe {
        matrixmultiply::dgemm(
            m,
            n,
            k,
            1.0,
            a.as_ptr(),
            n as isize,
            1,
            b.as_ptr(),
            1,
            n as isize,
            beta,
            c.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}

/// `dst += src` elementwise.
pub fn axpy(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Output spatial size of a zero-padded 3×3-style convolution.
pub fn conv_out_size(extent: usize, stride: usize) -> usize {
    (extent + stride - 1) / stride
}

/// Unfolds `input` of shape `[h, w, c]` into patch rows of length
/// `kh·kw·c`, one row per output position of a stride-`s` convolution with
/// zero padding `(kh-1)/2`. Patch layout is `(ky, kx, c)`, matching a kernel
/// stored as `[kh, kw, c_in, c_out]`.
pub fn im2col(
    input: &[f64],
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    out: &mut Vec<f64>,
) -> (usize, usize) {
    let oh = conv_out_size(h, stride);
    let ow = conv_out_size(w, stride);
    let pad_y = (kh - 1) / 2;
    let pad_x = (kw - 1) / 2;
    out.clear();
    out.resize(oh * ow * kh * kw * c, 0.0);
    let row_len = kh * kw * c;
    for oy in 0..oh {
        for ox in 0..ow {
            let base = (oy * ow + ox) * row_len;
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad_y as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad_x as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = ((iy as usize * w) + ix as usize) * c;
                    let dst = base + (ky * kw + kx) * c;
                    out[dst..dst + c].copy_from_slice(&input[src..src + c]);
                }
            }
        }
    }
    (oh, ow)
}

/// Adjoint of [`im2col`]: folds patch-row gradients back onto the input grid.
pub fn col2im_accumulate(
    cols: &[f64],
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    grad_input: &mut [f64],
) {
    let oh = conv_out_size(h, stride);
    let ow = conv_out_size(w, stride);
    let pad_y = (kh - 1) / 2;
    let pad_x = (kw - 1) / 2;
    let row_len = kh * kw * c;
    debug_assert_eq!(cols.len(), oh * ow * row_len);
    debug_assert_eq!(grad_input.len(), h * w * c);
    for oy in 0..oh {
        for ox in 0..ow {
            let base = (oy * ow + ox) * row_len;
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad_y as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad_x as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = ((iy as usize * w) + ix as usize) * c;
                    let src = base + (ky * kw + kx) * c;
                    for ch in 0..c {
                        grad_input[dst + ch] += cols[src + ch];
                    }
                }
            }
        }
    }
}

/// Nearest-neighbour 2× upsample of `[h, w, c]`.
pub fn upsample2(input: &[f64], h: usize, w: usize, c: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), 4 * h * w * c);
    let ow = 2 * w;
    for y in 0..2 * h {
        let sy = y / 2;
        for x in 0..ow {
            let sx = x / 2;
            let src = (sy * w + sx) * c;
            let dst = (y * ow + x) * c;
            out[dst..dst + c].copy_from_slice(&input[src..src + c]);
        }
    }
}

/// Adjoint of [`upsample2`]: sums each 2×2 block of output gradient.
pub fn upsample2_backward(grad_out: &[f64], h: usize, w: usize, c: usize, grad_in: &mut [f64]) {
    debug_assert_eq!(grad_out.len(), 4 * h * w * c);
    debug_assert_eq!(grad_in.len(), h * w * c);
    let ow = 2 * w;
    for y in 0..2 * h {
        let sy = y / 2;
        for x in 0..ow {
            let sx = x / 2;
            let dst = (sy * w + sx) * c;
            let src = (y * ow + x) * c;
            for ch in 0..c {
                grad_in[dst + ch] += grad_out[src + ch];
            }
        }
    }
}

/// Sinusoidal positional encoding. Each input coordinate `x` expands to
/// `[sin(2⁰πx), cos(2⁰πx), …, sin(2^{B-1}πx), cos(2^{B-1}πx)]`, coordinates
/// kept coordinate-major. Higher bands come from the double-angle recurrence
/// so only one `sin_cos` pair is evaluated per coordinate.
pub fn posenc_forward(input: &[f64], bands: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), input.len() * 2 * bands);
    for (i, &x) in input.iter().enumerate() {
        let base = i * 2 * bands;
        let (mut s, mut c) = (std::f64::consts::PI * x).sin_cos();
        for b in 0..bands {
            out[base + 2 * b] = s;
            out[base + 2 * b + 1] = c;
            let ns = 2.0 * s * c;
            let nc = c * c - s * s;
            s = ns;
            c = nc;
        }
    }
}

/// Backward of [`posenc_forward`]. Derivatives reuse the stored forward
/// values: d sin(2ᵇπx)/dx = 2ᵇπ·cos(2ᵇπx) and d cos(2ᵇπx)/dx = −2ᵇπ·sin.
pub fn posenc_backward(forward: &[f64], grad_out: &[f64], bands: usize, grad_in: &mut [f64]) {
    debug_assert_eq!(forward.len(), grad_in.len() * 2 * bands);
    for (i, g) in grad_in.iter_mut().enumerate() {
        let base = i * 2 * bands;
        let mut acc = 0.0;
        let mut freq = std::f64::consts::PI;
        for b in 0..bands {
            let s = forward[base + 2 * b];
            let c = forward[base + 2 * b + 1];
            acc += freq * (grad_out[base + 2 * b] * c - grad_out[base + 2 * b + 1] * s);
            freq *= 2.0;
        }
        *g += acc;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += a[i * k + kk] * b[kk * n + j];
                }
                c[i * n + j] = acc;
            }
        }
        c
    }

    #[test]
    fn matmul_matches_naive() {
        let (m, k, n) = (7, 5, 9);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut c = vec![0.0; m * n];
        matmul(&a, &b, &mut c, m, k, n);
        let want = naive_matmul(&a, &b, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_matmuls_match_naive() {
        let (m, k, n) = (6, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.21).sin()).collect();
        let b: Vec<f64> = (0..m * n).map(|i| (i as f64 * 0.13).cos()).collect();
        let mut c = vec![0.0; k * n];
        matmul_tn(&a, &b, &mut c, m, k, n, 0.0);
        // aᵀ·b
        for kk in 0..k {
            for j in 0..n {
                let mut acc = 0.0;
                for i in 0..m {
                    acc += a[i * k + kk] * b[i * n + j];
                }
                assert!((c[kk * n + j] - acc).abs() < 1e-12);
            }
        }

        let bt: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.07).sin()).collect();
        let a2: Vec<f64> = (0..m * n).map(|i| (i as f64 * 0.05).cos()).collect();
        let mut c2 = vec![0.0; m * k];
        matmul_nt(&a2, &bt, &mut c2, m, n, k, 0.0);
        for i in 0..m {
            for kk in 0..k {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += a2[i * n + j] * bt[kk * n + j];
                }
                assert!((c2[i * k + kk] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // ⟨im2col(x), y⟩ == ⟨x, col2im(y)⟩ for random x, y.
        let (h, w, c, kh, kw) = (5, 4, 3, 3, 3);
        for stride in [1usize, 2] {
            let x: Vec<f64> = (0..h * w * c).map(|i| (i as f64 * 0.31).sin()).collect();
            let mut cols = Vec::new();
            let (oh, ow) = im2col(&x, h, w, c, kh, kw, stride, &mut cols);
            let y: Vec<f64> = (0..oh * ow * kh * kw * c)
                .map(|i| (i as f64 * 0.17).cos())
                .collect();
            let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
            let mut back = vec![0.0; h * w * c];
            col2im_accumulate(&y, h, w, c, kh, kw, stride, &mut back);
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "stride {stride}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn posenc_recurrence_matches_direct_eval() {
        let xs = [0.0, 0.5, -1.25, 0.3337, 2.0];
        let bands = 7;
        let mut out = vec![0.0; xs.len() * 2 * bands];
        posenc_forward(&xs, bands, &mut out);
        for (i, &x) in xs.iter().enumerate() {
            for b in 0..bands {
                let arg = (1u64 << b) as f64 * std::f64::consts::PI * x;
                let s = out[i * 2 * bands + 2 * b];
                let c = out[i * 2 * bands + 2 * b + 1];
                assert!((s - arg.sin()).abs() < 1e-9, "sin band {b} at {x}");
                assert!((c - arg.cos()).abs() < 1e-9, "cos band {b} at {x}");
            }
        }
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let (h, w, c) = (3, 2, 2);
        let x: Vec<f64> = (0..h * w * c).map(|i| i as f64).collect();
        let mut up = vec![0.0; 4 * h * w * c];
        upsample2(&x, h, w, c, &mut up);
        let y: Vec<f64> = (0..up.len()).map(|i| (i as f64 * 0.3).sin()).collect();
        let lhs: f64 = up.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        upsample2_backward(&y, h, w, c, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
