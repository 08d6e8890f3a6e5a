//! Raw slice kernels shared by forward ops and their backward rules.
//!
//! All loops run single-threaded with a fixed accumulation order so that
//! repeated runs on identical inputs are bit-identical.

/// out = a · b, a: [m,k], b: [k,n]. Overwrites `out`.
pub fn matmul(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    matmul_acc(a, b, out, m, k, n);
}

/// out += a · b (same layout as `matmul`).
pub fn matmul_acc(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &av) in a_row.iter().enumerate() {
            if av != 0.0 {
                let b_row = &b[kk * n..(kk + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    }
}

/// out = a · bᵀ, a: [m,k], b: [n,k]. Overwrites `out`.
pub fn matmul_nt(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f32;
            for (x, y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
}

/// out += aᵀ · c, a: [m,k], c: [m,n], out: [k,n].
pub fn matmul_tn_acc(a: &[f32], c: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let c_row = &c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &av) in a_row.iter().enumerate() {
            if av != 0.0 {
                let out_row = &mut out[kk * n..(kk + 1) * n];
                for (o, &cv) in out_row.iter_mut().zip(c_row) {
                    *o += av * cv;
                }
            }
        }
    }
}

/// Bilinear sampling weights for one output index (align-corners = false).
/// Returns (i0, i1, w1) with the sample = (1-w1)*src[i0] + w1*src[i1].
#[inline]
pub fn bilinear_taps(out_idx: usize, in_len: usize, out_len: usize) -> (usize, usize, f32) {
    let scale = in_len as f32 / out_len as f32;
    let src = (out_idx as f32 + 0.5) * scale - 0.5;
    let src = src.max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    let w1 = (src - i0 as f32).clamp(0.0, 1.0);
    (i0, i1, w1)
}

/// Bilinear resample of one channel plane. Overwrites `out`.
pub fn bilinear_plane(
    src: &[f32],
    in_h: usize,
    in_w: usize,
    out: &mut [f32],
    out_h: usize,
    out_w: usize,
) {
    debug_assert_eq!(src.len(), in_h * in_w);
    debug_assert_eq!(out.len(), out_h * out_w);
    for oy in 0..out_h {
        let (y0, y1, wy) = bilinear_taps(oy, in_h, out_h);
        for ox in 0..out_w {
            let (x0, x1, wx) = bilinear_taps(ox, in_w, out_w);
            let top = src[y0 * in_w + x0] * (1.0 - wx) + src[y0 * in_w + x1] * wx;
            let bot = src[y1 * in_w + x0] * (1.0 - wx) + src[y1 * in_w + x1] * wx;
            out[oy * out_w + ox] = top * (1.0 - wy) + bot * wy;
        }
    }
}

/// Adjoint of `bilinear_plane`: scatter output-gradients back to the source.
pub fn bilinear_plane_backward(
    d_out: &[f32],
    out_h: usize,
    out_w: usize,
    d_src: &mut [f32],
    in_h: usize,
    in_w: usize,
) {
    for oy in 0..out_h {
        let (y0, y1, wy) = bilinear_taps(oy, in_h, out_h);
        for ox in 0..out_w {
            let (x0, x1, wx) = bilinear_taps(ox, in_w, out_w);
            let g = d_out[oy * out_w + ox];
            d_src[y0 * in_w + x0] += g * (1.0 - wy) * (1.0 - wx);
            d_src[y0 * in_w + x1] += g * (1.0 - wy) * wx;
            d_src[y1 * in_w + x0] += g * wy * (1.0 - wx);
            d_src[y1 * in_w + x1] += g * wy * wx;
        }
    }
}

/// Unfold one image [C,H,W] into columns [C*kh*kw, oh*ow] with zero padding.
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    x: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f32],
) {
    debug_assert_eq!(cols.len(), c * kh * kw * oh * ow);
    cols.fill(0.0);
    let ohw = oh * ow;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut cols[((ci * kh + ky) * kw + kx) * ohw..][..ohw];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        row[oy * ow + ox] = plane[iy * w + ix as usize];
                    }
                }
            }
        }
    }
}

/// Fold columns back into an image, accumulating overlaps (adjoint of im2col).
#[allow(clippy::too_many_arguments)]
pub fn col2im_acc(
    cols: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx: &mut [f32],
) {
    let ohw = oh * ow;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &cols[((ci * kh + ky) * kw + kx) * ohw..][..ohw];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        plane[iy * w + ix as usize] += row[oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// Row-wise softmax with max subtraction. Overwrites `out`.
pub fn softmax_rows(x: &[f32], out: &mut [f32], rows: usize, cols: usize) {
    for r in 0..rows {
        let xi = &x[r * cols..(r + 1) * cols];
        let yo = &mut out[r * cols..(r + 1) * cols];
        let mx = xi.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for (y, &v) in yo.iter_mut().zip(xi) {
            let e = (v - mx).exp();
            *y = e;
            sum += e as f64;
        }
        let inv = (1.0 / sum) as f32;
        for y in yo.iter_mut() {
            *y *= inv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 1.0, 2.0, 3.0]; // 2x3 (interpreted as bᵀ)
        let mut out = [0.0; 4];
        matmul_nt(&a, &b, &mut out, 2, 3, 2);
        // a · bᵀ = [[1*7+2*8+3*9, 1*1+2*2+3*3], [4*7+5*8+6*9, 4*1+5*2+6*3]]
        assert_eq!(out, [50.0, 14.0, 122.0, 32.0]);
    }

    #[test]
    fn bilinear_identity_when_sizes_match() {
        let src = [1.0, 2.0, 3.0, 4.0];
        let mut out = [0.0; 4];
        bilinear_plane(&src, 2, 2, &mut out, 2, 2);
        assert_eq!(out, src);
    }
}
