//! Differentiable tensor operations.
//!
//! Every op validates shapes, computes its forward result, and (when grad
//! tracking is active for any input) records a backward rule on the tape.
//! Reductions accumulate in f64 to keep finite-difference checks tight.

use crate::error::{HartError, Result};
use crate::num::kernels;
use crate::num::macs;
use crate::num::tape;
use crate::num::tensor::{debug_check_finite, Tensor};

type Rule = Box<dyn FnOnce(&[f32])>;

/// Finalize an op: finiteness debug check, then record iff tracking applies.
fn finish(
    op: &'static str,
    inputs: &[&Tensor],
    out: Tensor,
    make_rule: impl FnOnce() -> Rule,
) -> Tensor {
    debug_check_finite(op, &out.data());
    if tape::should_record(inputs) {
        let rule = make_rule();
        tape::record(op, inputs, &out, rule);
    }
    out
}

// ── Linear algebra ───────────────────────────────────────────────────

/// a · b with a: [m,k], b: [k,n].
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(HartError::shape(
            "matmul",
            format!("lhs {sa:?} is not compatible with rhs {sb:?}"),
        ));
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let mut out = vec![0.0f32; m * n];
    kernels::matmul(&a.data(), &b.data(), &mut out, m, k, n);
    macs::add((m * k * n) as u64);
    let out = Tensor::from_vec(out, &[m, n]);
    let (ac, bc) = (a.clone(), b.clone());
    finish("matmul", &[a, b], out, move || {
        Box::new(move |g: &[f32]| {
            // dA = dC · Bᵀ
            let mut da = vec![0.0f32; m * k];
            kernels::matmul_nt(g, &bc.data(), &mut da, m, n, k);
            ac.accumulate_grad(&da);
            // dB = Aᵀ · dC
            let mut db = vec![0.0f32; k * n];
            kernels::matmul_tn_acc(&ac.data(), g, &mut db, m, k, n);
            bc.accumulate_grad(&db);
        })
    })
    .pipe_ok()
}

/// a · bᵀ with a: [m,k], b: [n,k]. Used for attention scores.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(HartError::shape(
            "matmul_nt",
            format!("lhs {sa:?} is not compatible with rhs {sb:?} (transposed)"),
        ));
    }
    let (m, k, n) = (sa[0], sa[1], sb[0]);
    let mut out = vec![0.0f32; m * n];
    kernels::matmul_nt(&a.data(), &b.data(), &mut out, m, k, n);
    macs::add((m * k * n) as u64);
    let out = Tensor::from_vec(out, &[m, n]);
    let (ac, bc) = (a.clone(), b.clone());
    finish("matmul_nt", &[a, b], out, move || {
        Box::new(move |g: &[f32]| {
            // dA = dC · B
            let mut da = vec![0.0f32; m * k];
            kernels::matmul(g, &bc.data(), &mut da, m, n, k);
            ac.accumulate_grad(&da);
            // dB = dCᵀ · A
            let mut db = vec![0.0f32; n * k];
            kernels::matmul_tn_acc(g, &ac.data(), &mut db, m, n, k);
            bc.accumulate_grad(&db);
        })
    })
    .pipe_ok()
}

// ── Convolution and resampling ───────────────────────────────────────

struct ConvDims {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn conv_dims(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<ConvDims> {
    if stride == 0 {
        return Err(HartError::arg("stride", "must be positive".to_string()));
    }
    let xs = x.shape();
    let ws = w.shape();
    let (b, c, h, wd) = match xs.len() {
        3 => (1, xs[0], xs[1], xs[2]),
        4 => (xs[0], xs[1], xs[2], xs[3]),
        _ => {
            return Err(HartError::shape(
                "conv2d",
                format!("input must be [C,H,W] or [B,C,H,W], got {xs:?}"),
            ))
        }
    };
    if ws.len() != 4 || ws[1] != c {
        return Err(HartError::shape(
            "conv2d",
            format!("weight {ws:?} does not match input channels {c} (input {xs:?})"),
        ));
    }
    let (o, kh, kw) = (ws[0], ws[2], ws[3]);
    if kh > h + 2 * pad || kw > wd + 2 * pad {
        return Err(HartError::shape(
            "conv2d",
            format!("kernel {ws:?} larger than padded input {xs:?} (pad {pad})"),
        ));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    if oh == 0 || ow == 0 {
        return Err(HartError::shape(
            "conv2d",
            format!("output extent would be empty for input {xs:?}, weight {ws:?}"),
        ));
    }
    Ok(ConvDims { b, c, h, w: wd, o, kh, kw, oh, ow })
}

/// 2D convolution via im2col. Input rank 3 is treated as batch 1 and the
/// output keeps the input's rank.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let d = conv_dims(x, weight, stride, pad)?;
    let rank3 = x.shape().len() == 3;
    if let Some(bt) = bias {
        if bt.shape() != vec![d.o] {
            return Err(HartError::shape(
                "conv2d",
                format!("bias shape {:?} != [{}]", bt.shape(), d.o),
            ));
        }
    }
    let ckk = d.c * d.kh * d.kw;
    let ohw = d.oh * d.ow;
    let mut out = vec![0.0f32; d.b * d.o * ohw];
    let mut cols = vec![0.0f32; ckk * ohw];
    {
        let xd = x.data();
        let wd = weight.data();
        for bi in 0..d.b {
            kernels::im2col(
                &xd[bi * d.c * d.h * d.w..],
                d.c, d.h, d.w, d.kh, d.kw, stride, pad, d.oh, d.ow, &mut cols,
            );
            kernels::matmul(&wd, &cols, &mut out[bi * d.o * ohw..(bi + 1) * d.o * ohw], d.o, ckk, ohw);
        }
        if let Some(bt) = bias {
            let bd = bt.data();
            for bi in 0..d.b {
                for oi in 0..d.o {
                    let row = &mut out[(bi * d.o + oi) * ohw..][..ohw];
                    for v in row.iter_mut() {
                        *v += bd[oi];
                    }
                }
            }
        }
    }
    macs::add((d.b * d.o * ohw * ckk) as u64);
    let out_shape: Vec<usize> = if rank3 {
        vec![d.o, d.oh, d.ow]
    } else {
        vec![d.b, d.o, d.oh, d.ow]
    };
    let out = Tensor::from_vec(out, &out_shape);

    let mut tracked: Vec<&Tensor> = vec![x, weight];
    if let Some(bt) = bias {
        tracked.push(bt);
    }
    let (xc, wc) = (x.clone(), weight.clone());
    let bc = bias.cloned();
    finish("conv2d", &tracked, out, move || {
        Box::new(move |g: &[f32]| {
            let mut dx = vec![0.0f32; xc.numel()];
            let mut dw = vec![0.0f32; wc.numel()];
            let mut cols = vec![0.0f32; ckk * ohw];
            let mut dcols = vec![0.0f32; ckk * ohw];
            let xd = xc.data();
            let wd = wc.data();
            for bi in 0..d.b {
                let g_b = &g[bi * d.o * ohw..(bi + 1) * d.o * ohw];
                kernels::im2col(
                    &xd[bi * d.c * d.h * d.w..],
                    d.c, d.h, d.w, d.kh, d.kw, stride, pad, d.oh, d.ow, &mut cols,
                );
                // dW += dOut · colsᵀ
                let mut dw_b = vec![0.0f32; d.o * ckk];
                kernels::matmul_nt(g_b, &cols, &mut dw_b, d.o, ohw, ckk);
                for (a, v) in dw.iter_mut().zip(&dw_b) {
                    *a += v;
                }
                // dcols = Wᵀ · dOut, then fold back into the image
                dcols.fill(0.0);
                kernels::matmul_tn_acc(&wd, g_b, &mut dcols, d.o, ckk, ohw);
                kernels::col2im_acc(
                    &dcols,
                    d.c, d.h, d.w, d.kh, d.kw, stride, pad, d.oh, d.ow,
                    &mut dx[bi * d.c * d.h * d.w..(bi + 1) * d.c * d.h * d.w],
                );
            }
            drop(xd);
            drop(wd);
            xc.accumulate_grad(&dx);
            wc.accumulate_grad(&dw);
            if let Some(bt) = &bc {
                let mut db = vec![0.0f32; d.o];
                for bi in 0..d.b {
                    for oi in 0..d.o {
                        let row = &g[(bi * d.o + oi) * ohw..][..ohw];
                        db[oi] += row.iter().sum::<f32>();
                    }
                }
                bt.accumulate_grad(&db);
            }
        })
    })
    .pipe_ok()
}

/// Bilinear resampling (align-corners = false) over the trailing two axes of
/// a [C,h,w] or [B,C,h,w] tensor.
pub fn interpolate_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        return Err(HartError::arg(
            "out extents",
            format!("must be >= 1, got {out_h}x{out_w}"),
        ));
    }
    let xs = x.shape();
    let (planes, h, w) = match xs.len() {
        3 => (xs[0], xs[1], xs[2]),
        4 => (xs[0] * xs[1], xs[2], xs[3]),
        _ => {
            return Err(HartError::shape(
                "interpolate_bilinear",
                format!("input must be rank 3 or 4, got {xs:?}"),
            ))
        }
    };
    let mut out = vec![0.0f32; planes * out_h * out_w];
    {
        let xd = x.data();
        for p in 0..planes {
            kernels::bilinear_plane(
                &xd[p * h * w..(p + 1) * h * w],
                h,
                w,
                &mut out[p * out_h * out_w..(p + 1) * out_h * out_w],
                out_h,
                out_w,
            );
        }
    }
    let mut out_shape = xs.clone();
    let rank = out_shape.len();
    out_shape[rank - 2] = out_h;
    out_shape[rank - 1] = out_w;
    let out = Tensor::from_vec(out, &out_shape);
    let xc = x.clone();
    finish("interpolate_bilinear", &[x], out, move || {
        Box::new(move |g: &[f32]| {
            let mut dx = vec![0.0f32; xc.numel()];
            for p in 0..planes {
                kernels::bilinear_plane_backward(
                    &g[p * out_h * out_w..(p + 1) * out_h * out_w],
                    out_h,
                    out_w,
                    &mut dx[p * h * w..(p + 1) * h * w],
                    h,
                    w,
                );
            }
            xc.accumulate_grad(&dx);
        })
    })
    .pipe_ok()
}

// ── Normalization and activations ────────────────────────────────────

/// Root-mean-square norm over the last axis: y = x / sqrt(mean(x²)+eps) · gain.
pub fn rmsnorm(x: &Tensor, gain: &Tensor, eps: f32) -> Result<Tensor> {
    let xs = x.shape();
    let d = *xs.last().ok_or_else(|| HartError::shape("rmsnorm", "empty shape".to_string()))?;
    if gain.shape() != vec![d] {
        return Err(HartError::shape(
            "rmsnorm",
            format!("gain shape {:?} != [{d}]", gain.shape()),
        ));
    }
    if !(eps >= 0.0) {
        return Err(HartError::arg("eps", "must be non-negative".to_string()));
    }
    let rows = x.numel() / d;
    let mut out = vec![0.0f32; x.numel()];
    let mut inv_rms = vec![0.0f32; rows];
    {
        let xd = x.data();
        let gd = gain.data();
        for r in 0..rows {
            let xi = &xd[r * d..(r + 1) * d];
            let mut ss = 0.0f64;
            for &v in xi {
                ss += (v as f64) * (v as f64);
            }
            let inv = (1.0 / ((ss / d as f64) + eps as f64).sqrt()) as f32;
            inv_rms[r] = inv;
            for (j, &v) in xi.iter().enumerate() {
                out[r * d + j] = v * inv * gd[j];
            }
        }
    }
    let out = Tensor::from_vec(out, &xs);
    let (xc, gc) = (x.clone(), gain.clone());
    finish("rmsnorm", &[x, gain], out, move || {
        Box::new(move |g: &[f32]| {
            let xd = xc.data();
            let gd = gc.data();
            let mut dx = vec![0.0f32; xd.len()];
            let mut dgain = vec![0.0f32; d];
            for r in 0..rows {
                let xi = &xd[r * d..(r + 1) * d];
                let gi = &g[r * d..(r + 1) * d];
                let inv = inv_rms[r];
                let mut dot = 0.0f64;
                for j in 0..d {
                    dot += (gi[j] * gd[j] * xi[j]) as f64;
                    dgain[j] += gi[j] * xi[j] * inv;
                }
                let coef = (inv as f64).powi(3) * dot / d as f64;
                for j in 0..d {
                    dx[r * d + j] = inv * gd[j] * gi[j] - (coef * xi[j] as f64) as f32;
                }
            }
            drop(xd);
            drop(gd);
            xc.accumulate_grad(&dx);
            gc.accumulate_grad(&dgain);
        })
    })
    .pipe_ok()
}

/// Numerically stable softmax over the last axis.
pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    let d = *xs.last().ok_or_else(|| HartError::shape("softmax", "empty shape".to_string()))?;
    let rows = x.numel() / d;
    let mut out = vec![0.0f32; x.numel()];
    kernels::softmax_rows(&x.data(), &mut out, rows, d);
    let out = Tensor::from_vec(out, &xs);
    let xc = x.clone();
    let yc = out.clone();
    finish("softmax_lastdim", &[x], out, move || {
        Box::new(move |g: &[f32]| {
            let yd = yc.data();
            let mut dx = vec![0.0f32; yd.len()];
            for r in 0..rows {
                let yi = &yd[r * d..(r + 1) * d];
                let gi = &g[r * d..(r + 1) * d];
                let mut dot = 0.0f64;
                for j in 0..d {
                    dot += (gi[j] * yi[j]) as f64;
                }
                for j in 0..d {
                    dx[r * d + j] = yi[j] * (gi[j] - dot as f32);
                }
            }
            drop(yd);
            xc.accumulate_grad(&dx);
        })
    })
    .pipe_ok()
}

/// x * sigmoid(x).
pub fn silu(x: &Tensor) -> Result<Tensor> {
    let out: Vec<f32> = x.data().iter().map(|&v| v * sigmoid(v)).collect();
    let out = Tensor::from_vec(out, &x.shape());
    let xc = x.clone();
    finish("silu", &[x], out, move || {
        Box::new(move |g: &[f32]| {
            let xd = xc.data();
            let dx: Vec<f32> = g
                .iter()
                .zip(xd.iter())
                .map(|(&gi, &v)| {
                    let s = sigmoid(v);
                    gi * (s + v * s * (1.0 - s))
                })
                .collect();
            drop(xd);
            xc.accumulate_grad(&dx);
        })
    })
    .pipe_ok()
}

pub fn tanh(x: &Tensor) -> Result<Tensor> {
    let out: Vec<f32> = x.data().iter().map(|v| v.tanh()).collect();
    let out = Tensor::from_vec(out, &x.shape());
    let xc = x.clone();
    let yc = out.clone();
    finish("tanh", &[x], out, move || {
        Box::new(move |g: &[f32]| {
            let yd = yc.data();
            let dx: Vec<f32> = g.iter().zip(yd.iter()).map(|(&gi, &y)| gi * (1.0 - y * y)).collect();
            drop(yd);
            xc.accumulate_grad(&dx);
        })
    })
    .pipe_ok()
}

#[inline]
fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

// ── Elementwise arithmetic ───────────────────────────────────────────

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(HartError::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let out: Vec<f32> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
    let out = Tensor::from_vec(out, &a.shape());
    let (ac, bc) = (a.clone(), b.clone());
    Ok(finish("add", &[a, b], out, move || {
        Box::new(move |g: &[f32]| {
            ac.accumulate_grad(g);
            bc.accumulate_grad(g);
        })
    }))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("sub", a, b)?;
    let out: Vec<f32> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x - y).collect();
    let out = Tensor::from_vec(out, &a.shape());
    let (ac, bc) = (a.clone(), b.clone());
    Ok(finish("sub", &[a, b], out, move || {
        Box::new(move |g: &[f32]| {
            ac.accumulate_grad(g);
            let neg: Vec<f32> = g.iter().map(|v| -v).collect();
            bc.accumulate_grad(&neg);
        })
    }))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    let out: Vec<f32> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).collect();
    let out = Tensor::from_vec(out, &a.shape());
    let (ac, bc) = (a.clone(), b.clone());
    Ok(finish("mul", &[a, b], out, move || {
        Box::new(move |g: &[f32]| {
            let da: Vec<f32> = g.iter().zip(bc.data().iter()).map(|(gi, y)| gi * y).collect();
            let db: Vec<f32> = g.iter().zip(ac.data().iter()).map(|(gi, x)| gi * x).collect();
            ac.accumulate_grad(&da);
            bc.accumulate_grad(&db);
        })
    }))
}

pub fn scale(x: &Tensor, c: f32) -> Tensor {
    let out: Vec<f32> = x.data().iter().map(|v| v * c).collect();
    let out = Tensor::from_vec(out, &x.shape());
    let xc = x.clone();
    finish("scale", &[x], out, move || {
        Box::new(move |g: &[f32]| {
            let dx: Vec<f32> = g.iter().map(|v| v * c).collect();
            xc.accumulate_grad(&dx);
        })
    })
}

/// Add a constant (untracked) offset elementwise, e.g. an attention mask.
pub fn add_const(x: &Tensor, offsets: &Tensor) -> Result<Tensor> {
    same_shape("add_const", x, offsets)?;
    let out: Vec<f32> = x.data().iter().zip(offsets.data().iter()).map(|(a, b)| a + b).collect();
    let out = Tensor::from_vec(out, &x.shape());
    let xc = x.clone();
    Ok(finish("add_const", &[x], out, move || {
        Box::new(move |g: &[f32]| xc.accumulate_grad(g))
    }))
}

/// Broadcast-add a bias vector over the rows of a [n,d] tensor.
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    let d = *xs.last().unwrap_or(&0);
    if bias.shape() != vec![d] {
        return Err(HartError::shape(
            "add_bias",
            format!("bias {:?} vs row width {d}", bias.shape()),
        ));
    }
    let rows = x.numel() / d;
    let mut out = x.to_vec();
    {
        let bd = bias.data();
        for r in 0..rows {
            for j in 0..d {
                out[r * d + j] += bd[j];
            }
        }
    }
    let out = Tensor::from_vec(out, &xs);
    let (xc, bc) = (x.clone(), bias.clone());
    Ok(finish("add_bias", &[x, bias], out, move || {
        Box::new(move |g: &[f32]| {
            xc.accumulate_grad(g);
            let mut db = vec![0.0f32; d];
            for r in 0..rows {
                for j in 0..d {
                    db[j] += g[r * d + j];
                }
            }
            bc.accumulate_grad(&db);
        })
    }))
}

// ── Reductions and losses ────────────────────────────────────────────

pub fn sum_all(x: &Tensor) -> Tensor {
    let s: f64 = x.data().iter().map(|&v| v as f64).sum();
    let out = Tensor::scalar(s as f32);
    let xc = x.clone();
    finish("sum_all", &[x], out, move || {
        Box::new(move |g: &[f32]| {
            let dx = vec![g[0]; xc.numel()];
            xc.accumulate_grad(&dx);
        })
    })
}

pub fn mean_all(x: &Tensor) -> Tensor {
    let n = x.numel() as f64;
    let s: f64 = x.data().iter().map(|&v| v as f64).sum();
    let out = Tensor::scalar((s / n) as f32);
    let xc = x.clone();
    finish("mean_all", &[x], out, move || {
        Box::new(move |g: &[f32]| {
            let gv = g[0] / n as f32;
            let dx = vec![gv; xc.numel()];
            xc.accumulate_grad(&dx);
        })
    })
}

/// Mean squared error between same-shape tensors.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mse", a, b)?;
    let n = a.numel();
    let mut acc = 0.0f64;
    {
        let (ad, bd) = (a.data(), b.data());
        for (x, y) in ad.iter().zip(bd.iter()) {
            let d = (x - y) as f64;
            acc += d * d;
        }
    }
    let out = Tensor::scalar((acc / n as f64) as f32);
    let (ac, bc) = (a.clone(), b.clone());
    Ok(finish("mse", &[a, b], out, move || {
        Box::new(move |g: &[f32]| {
            let coef = 2.0 * g[0] / n as f32;
            let (ad, bd) = (ac.data(), bc.data());
            let da: Vec<f32> = ad.iter().zip(bd.iter()).map(|(x, y)| coef * (x - y)).collect();
            let db: Vec<f32> = da.iter().map(|v| -v).collect();
            drop(ad);
            drop(bd);
            ac.accumulate_grad(&da);
            bc.accumulate_grad(&db);
        })
    }))
}

/// Mean cross-entropy of row logits against integer targets.
pub fn cross_entropy_mean(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let ls = logits.shape();
    if ls.len() != 2 || ls[0] != targets.len() {
        return Err(HartError::shape(
            "cross_entropy",
            format!("logits {ls:?} vs {} targets", targets.len()),
        ));
    }
    let (n, v) = (ls[0], ls[1]);
    if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
        return Err(HartError::arg(
            "targets",
            format!("index {bad} out of vocab range {v}"),
        ));
    }
    let mut loss = 0.0f64;
    {
        let ld = logits.data();
        for (r, &t) in targets.iter().enumerate() {
            let row = &ld[r * v..(r + 1) * v];
            let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for &x in row {
                sum += ((x - mx) as f64).exp();
            }
            loss += sum.ln() + mx as f64 - row[t] as f64;
        }
    }
    let out = Tensor::scalar((loss / n as f64) as f32);
    let lc = logits.clone();
    let tg: Vec<usize> = targets.to_vec();
    Ok(finish("cross_entropy", &[logits], out, move || {
        Box::new(move |g: &[f32]| {
            let ld = lc.data();
            let coef = g[0] / n as f32;
            let mut dl = vec![0.0f32; ld.len()];
            for (r, &t) in tg.iter().enumerate() {
                let row = &ld[r * v..(r + 1) * v];
                let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0f64;
                for &x in row {
                    sum += ((x - mx) as f64).exp();
                }
                let inv = 1.0 / sum as f32;
                for j in 0..v {
                    let p = ((row[j] - mx) as f64).exp() as f32 * inv;
                    dl[r * v + j] = coef * (p - if j == t { 1.0 } else { 0.0 });
                }
            }
            drop(ld);
            lc.accumulate_grad(&dl);
        })
    }))
}

// ── Lookup, layout, and structural ops ───────────────────────────────

/// Gather rows of an embedding table: out[i] = table[ids[i]].
pub fn embedding(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let ts = table.shape();
    if ts.len() != 2 {
        return Err(HartError::shape("embedding", format!("table must be [V,d], got {ts:?}")));
    }
    let (vocab, d) = (ts[0], ts[1]);
    if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
        return Err(HartError::arg("ids", format!("index {bad} out of range {vocab}")));
    }
    let mut out = vec![0.0f32; ids.len() * d];
    {
        let td = table.data();
        for (r, &i) in ids.iter().enumerate() {
            out[r * d..(r + 1) * d].copy_from_slice(&td[i * d..(i + 1) * d]);
        }
    }
    let out = Tensor::from_vec(out, &[ids.len(), d]);
    let tc = table.clone();
    let ids: Vec<usize> = ids.to_vec();
    Ok(finish("embedding", &[table], out, move || {
        Box::new(move |g: &[f32]| {
            let mut dt = vec![0.0f32; tc.numel()];
            for (r, &i) in ids.iter().enumerate() {
                for j in 0..d {
                    dt[i * d + j] += g[r * d + j];
                }
            }
            tc.accumulate_grad(&dt);
        })
    }))
}

/// Concatenate [n,d_i] tensors along the column axis.
pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(HartError::arg("parts", "empty concat".to_string()));
    }
    let n = parts[0].shape()[0];
    let widths: Vec<usize> = parts
        .iter()
        .map(|p| {
            let s = p.shape();
            assert_eq!(s.len(), 2);
            s[1]
        })
        .collect();
    if parts.iter().any(|p| p.shape()[0] != n) {
        return Err(HartError::shape("concat_cols", "row counts differ".to_string()));
    }
    let total: usize = widths.iter().sum();
    let mut out = vec![0.0f32; n * total];
    let mut off = 0;
    for (p, &w) in parts.iter().zip(&widths) {
        let pd = p.data();
        for r in 0..n {
            out[r * total + off..r * total + off + w].copy_from_slice(&pd[r * w..(r + 1) * w]);
        }
        off += w;
    }
    let out = Tensor::from_vec(out, &[n, total]);
    let clones: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
    Ok(finish("concat_cols", parts, out, move || {
        Box::new(move |g: &[f32]| {
            let mut off = 0;
            for (p, &w) in clones.iter().zip(&widths) {
                let mut dp = vec![0.0f32; n * w];
                for r in 0..n {
                    dp[r * w..(r + 1) * w].copy_from_slice(&g[r * total + off..r * total + off + w]);
                }
                p.accumulate_grad(&dp);
                off += w;
            }
        })
    }))
}

/// Column slice of a [n,d] tensor.
pub fn narrow_cols(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let xs = x.shape();
    if xs.len() != 2 || start + len > xs[1] {
        return Err(HartError::shape(
            "narrow_cols",
            format!("slice {start}..{} of {xs:?}", start + len),
        ));
    }
    let (n, d) = (xs[0], xs[1]);
    let mut out = vec![0.0f32; n * len];
    {
        let xd = x.data();
        for r in 0..n {
            out[r * len..(r + 1) * len].copy_from_slice(&xd[r * d + start..r * d + start + len]);
        }
    }
    let out = Tensor::from_vec(out, &[n, len]);
    let xc = x.clone();
    Ok(finish("narrow_cols", &[x], out, move || {
        Box::new(move |g: &[f32]| {
            let mut dx = vec![0.0f32; n * d];
            for r in 0..n {
                dx[r * d + start..r * d + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
            }
            xc.accumulate_grad(&dx);
        })
    }))
}

/// Concatenate [n_i, d] tensors along the row axis.
pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(HartError::arg("parts", "empty concat".to_string()));
    }
    let d = parts[0].shape()[1];
    if parts.iter().any(|p| p.shape().len() != 2 || p.shape()[1] != d) {
        return Err(HartError::shape("concat_rows", "column widths differ".to_string()));
    }
    let heights: Vec<usize> = parts.iter().map(|p| p.shape()[0]).collect();
    let total: usize = heights.iter().sum();
    let mut out = Vec::with_capacity(total * d);
    for p in parts {
        out.extend_from_slice(&p.data());
    }
    let out = Tensor::from_vec(out, &[total, d]);
    let clones: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
    Ok(finish("concat_rows", parts, out, move || {
        Box::new(move |g: &[f32]| {
            let mut off = 0;
            for (p, &h) in clones.iter().zip(&heights) {
                p.accumulate_grad(&g[off * d..(off + h) * d]);
                off += h;
            }
        })
    }))
}

/// Row slice of a [n,d] tensor.
pub fn narrow_rows(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let xs = x.shape();
    if xs.len() != 2 || start + len > xs[0] {
        return Err(HartError::shape(
            "narrow_rows",
            format!("rows {start}..{} of {xs:?}", start + len),
        ));
    }
    let d = xs[1];
    let out = x.data()[start * d..(start + len) * d].to_vec();
    let out = Tensor::from_vec(out, &[len, d]);
    let xc = x.clone();
    let n = xs[0];
    Ok(finish("narrow_rows", &[x], out, move || {
        Box::new(move |g: &[f32]| {
            let mut dx = vec![0.0f32; n * d];
            dx[start * d..(start + len) * d].copy_from_slice(g);
            xc.accumulate_grad(&dx);
        })
    }))
}

/// Differentiable contiguous reshape.
pub fn reshape(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    if n != x.numel() {
        return Err(HartError::shape(
            "reshape",
            format!("{:?} -> {shape:?}", x.shape()),
        ));
    }
    let out = Tensor::from_vec(x.to_vec(), shape);
    let xc = x.clone();
    Ok(finish("reshape", &[x], out, move || {
        Box::new(move |g: &[f32]| xc.accumulate_grad(g))
    }))
}

/// Straight-through estimator: forward takes `value`'s data, backward passes
/// the gradient unchanged to `src`.
pub fn straight_through(src: &Tensor, value: &Tensor) -> Result<Tensor> {
    same_shape("straight_through", src, value)?;
    let out = Tensor::from_vec(value.to_vec(), &src.shape());
    let sc = src.clone();
    Ok(finish("straight_through", &[src], out, move || {
        Box::new(move |g: &[f32]| sc.accumulate_grad(g))
    }))
}

/// Rotate adjacent value pairs of each row by per-pair angles.
/// `angles` has one entry per (row, pair): length n * d/2.
pub fn rotate_pairs(x: &Tensor, angles: &[f32]) -> Result<Tensor> {
    let xs = x.shape();
    if xs.len() != 2 || xs[1] % 2 != 0 {
        return Err(HartError::shape(
            "rotate_pairs",
            format!("input must be [n, even], got {xs:?}"),
        ));
    }
    let (n, d) = (xs[0], xs[1]);
    let pairs = d / 2;
    if angles.len() != n * pairs {
        return Err(HartError::shape(
            "rotate_pairs",
            format!("{} angles for {n}x{pairs} pairs", angles.len()),
        ));
    }
    let mut out = vec![0.0f32; n * d];
    {
        let xd = x.data();
        for r in 0..n {
            for p in 0..pairs {
                let (s, c) = angles[r * pairs + p].sin_cos();
                let a = xd[r * d + 2 * p];
                let b = xd[r * d + 2 * p + 1];
                out[r * d + 2 * p] = a * c - b * s;
                out[r * d + 2 * p + 1] = a * s + b * c;
            }
        }
    }
    let out = Tensor::from_vec(out, &xs);
    let xc = x.clone();
    let ang: Vec<f32> = angles.to_vec();
    Ok(finish("rotate_pairs", &[x], out, move || {
        Box::new(move |g: &[f32]| {
            let mut dx = vec![0.0f32; n * d];
            for r in 0..n {
                for p in 0..pairs {
                    let (s, c) = ang[r * pairs + p].sin_cos();
                    let ga = g[r * d + 2 * p];
                    let gb = g[r * d + 2 * p + 1];
                    // inverse rotation (transpose)
                    dx[r * d + 2 * p] = ga * c + gb * s;
                    dx[r * d + 2 * p + 1] = -ga * s + gb * c;
                }
            }
            xc.accumulate_grad(&dx);
        })
    }))
}

// Small helper so ops returning plain Tensors read uniformly at call sites.
trait PipeOk {
    fn pipe_ok(self) -> Result<Tensor>;
}
impl PipeOk for Tensor {
    fn pipe_ok(self) -> Result<Tensor> {
        Ok(self)
    }
}
