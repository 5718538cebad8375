//! Layer forward/backward passes.
//!
//! Conventions shared by every op here:
//! - convolution is cross-correlation with zero padding,
//! - bilinear upsampling uses the align-corners-false mapping
//!   `src = (dst + 0.5) / factor - 0.5` with edge clamping,
//! - every backward pass is the exact adjoint of its forward pass, so the
//!   composition of backwards is the exact gradient of any scalar loss.

use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::tensor::{LayerGradients, Tensor};

/// Inclusive output-index range `[lo, hi]` such that `o*stride + k - pad`
/// stays inside `[0, in_len)`. Returns `None` when the range is empty.
fn valid_out_range(
    in_len: usize,
    out_len: usize,
    stride: usize,
    k: usize,
    pad: usize,
) -> Option<(usize, usize)> {
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    let span = in_len + pad;
    if span <= k {
        return None;
    }
    let hi = ((span - 1 - k) / stride).min(out_len - 1);
    if lo > hi {
        None
    } else {
        Some((lo, hi))
    }
}

fn conv_shapes(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize, usize)> {
    if kernel.rank() != 4 {
        return Err(Error::shape(
            "conv2d kernel",
            "rank-4 (out_ch, in_ch, kh, kw)",
            format!("rank-{} {:?}", kernel.rank(), kernel.shape()),
        ));
    }
    if input.rank() < 3 {
        return Err(Error::shape(
            "conv2d input",
            "rank-3 or rank-4 (batch, ch, h, w)",
            format!("rank-{} {:?}", input.rank(), input.shape()),
        ));
    }
    let (n, cin, h, w) = input.dims4();
    let (cout, kcin, kh, kw) = kernel.dims4();
    if cin != kcin {
        return Err(Error::shape(
            "conv2d channels",
            format!("input channels = {}", kcin),
            format!("input channels = {}", cin),
        ));
    }
    if bias.len() != cout {
        return Err(Error::shape(
            "conv2d bias",
            format!("{} values", cout),
            format!("{} values", bias.len()),
        ));
    }
    if stride == 0 {
        return Err(Error::InvalidConfig("conv2d stride must be >= 1".into()));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::shape(
            "conv2d spatial",
            format!("padded input at least {}x{}", kh, kw),
            format!("{}x{} with pad {}", h, w, pad),
        ));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    Ok((n, cin, h, w, cout, kh, kw, oh, ow))
}

/// Strided 2-D convolution (cross-correlation) with zero padding.
///
/// `input` is (batch, in_ch, h, w), `kernel` is (out_ch, in_ch, kh, kw),
/// `bias` has one value per output channel.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (n, cin, h, w, cout, kh, kw, oh, ow) = conv_shapes(input, kernel, bias, stride, pad)?;
    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
    let x = input.data();
    let k = kernel.data();
    let b = bias.data();
    let o = out.data_mut();

    for bn in 0..n {
        for co in 0..cout {
            let o_base = (bn * cout + co) * oh * ow;
            o[o_base..o_base + oh * ow].fill(b[co]);
            for ci in 0..cin {
                let x_base = (bn * cin + ci) * h * w;
                for ky in 0..kh {
                    let Some((oy_lo, oy_hi)) = valid_out_range(h, oh, stride, ky, pad) else {
                        continue;
                    };
                    for kx in 0..kw {
                        let Some((ox_lo, ox_hi)) = valid_out_range(w, ow, stride, kx, pad) else {
                            continue;
                        };
                        let wgt = k[((co * cin + ci) * kh + ky) * kw + kx];
                        for oy in oy_lo..=oy_hi {
                            let iy = oy * stride + ky - pad;
                            let ix0 = ox_lo * stride + kx - pad;
                            let x_row = &x[x_base + iy * w + ix0..x_base + (iy + 1) * w];
                            let o_row = &mut o[o_base + oy * ow + ox_lo..o_base + oy * ow + ox_hi + 1];
                            for (ov, xv) in o_row.iter_mut().zip(x_row.iter().step_by(stride)) {
                                *ov += wgt * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Backward pass of [`conv2d`].
///
/// Returns the exact gradients of a scalar loss w.r.t. the input and, when
/// `want_param_grads` is set, w.r.t. the kernel (`"kernel"`) and bias
/// (`"bias"`). The attack path only needs the input gradient and skips the
/// parameter accumulation.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    upstream: &Tensor,
    stride: usize,
    pad: usize,
    want_param_grads: bool,
) -> Result<LayerGradients> {
    let (n, cin, h, w, cout, kh, kw, oh, ow) = conv_shapes(input, kernel, bias, stride, pad)?;
    let (un, ucout, uoh, uow) = upstream.dims4();
    if (un, ucout, uoh, uow) != (n, cout, oh, ow) {
        return Err(Error::shape(
            "conv2d_backward upstream",
            format!("({}, {}, {}, {})", n, cout, oh, ow),
            format!("({}, {}, {}, {})", un, ucout, uoh, uow),
        ));
    }

    let x = input.data();
    let k = kernel.data();
    let up = upstream.data();

    let mut gin = Tensor::zeros(input.shape());
    let gi = gin.data_mut();
    let mut gk = Tensor::zeros(kernel.shape());
    let mut gb = Tensor::zeros(bias.shape());

    for bn in 0..n {
        for co in 0..cout {
            let u_base = (bn * cout + co) * oh * ow;
            if want_param_grads {
                let s: f32 = up[u_base..u_base + oh * ow].iter().sum();
                gb.data_mut()[co] += s;
            }
            for ci in 0..cin {
                let x_base = (bn * cin + ci) * h * w;
                for ky in 0..kh {
                    let Some((oy_lo, oy_hi)) = valid_out_range(h, oh, stride, ky, pad) else {
                        continue;
                    };
                    for kx in 0..kw {
                        let Some((ox_lo, ox_hi)) = valid_out_range(w, ow, stride, kx, pad) else {
                            continue;
                        };
                        let k_idx = ((co * cin + ci) * kh + ky) * kw + kx;
                        let wgt = k[k_idx];
                        let mut k_acc = 0.0f32;
                        for oy in oy_lo..=oy_hi {
                            let iy = oy * stride + ky - pad;
                            let ix0 = ox_lo * stride + kx - pad;
                            let u_row = &up[u_base + oy * ow + ox_lo..u_base + oy * ow + ox_hi + 1];
                            let row0 = x_base + iy * w;
                            if want_param_grads {
                                let x_row = &x[row0 + ix0..row0 + w];
                                for (uv, xv) in u_row.iter().zip(x_row.iter().step_by(stride)) {
                                    k_acc += uv * xv;
                                }
                            }
                            let g_row = &mut gi[row0 + ix0..row0 + w];
                            for (uv, gv) in u_row.iter().zip(g_row.iter_mut().step_by(stride)) {
                                *gv += wgt * uv;
                            }
                        }
                        if want_param_grads {
                            gk.data_mut()[k_idx] += k_acc;
                        }
                    }
                }
            }
        }
    }

    let param_grads = if want_param_grads {
        vec![("kernel".to_string(), gk), ("bias".to_string(), gb)]
    } else {
        Vec::new()
    };
    Ok(LayerGradients {
        input_grad: gin,
        param_grads,
    })
}

/// Elementwise `max(0, v)`.
pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Backward of [`relu`]: passes `upstream` where the input was `> 0`.
pub fn relu_backward(input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    input.zip_map(upstream, |x, g| if x > 0.0 { g } else { 0.0 })
}

/// Elementwise sum of two same-shaped tensors.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, |x, y| x + y)
}

/// Backward of [`add`]: upstream flows to both inputs unchanged.
pub fn add_backward(upstream: &Tensor) -> (Tensor, Tensor) {
    (upstream.clone(), upstream.clone())
}

/// Per-axis sampling table: output index -> (lo neighbor, hi neighbor, frac).
fn bilinear_axis(in_len: usize, factor: usize) -> Vec<(usize, usize, f32)> {
    (0..in_len * factor)
        .map(|o| {
            let src = (o as f32 + 0.5) / factor as f32 - 0.5;
            if src <= 0.0 {
                (0, 0, 0.0)
            } else {
                let i0 = src.floor() as usize;
                let i0 = i0.min(in_len - 1);
                let i1 = (i0 + 1).min(in_len - 1);
                (i0, i1, src - i0 as f32)
            }
        })
        .collect()
}

/// Bilinear upsampling by an integer factor (align-corners-false).
pub fn bilinear_upsample(input: &Tensor, factor: usize) -> Result<Tensor> {
    if factor < 2 {
        return Err(Error::InvalidConfig(format!(
            "bilinear_upsample factor must be >= 2, got {}",
            factor
        )));
    }
    let (n, c, h, w) = input.dims4();
    let (oh, ow) = (h * factor, w * factor);
    let ys = bilinear_axis(h, factor);
    let xs = bilinear_axis(w, factor);
    let x = input.data();
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let o = out.data_mut();

    for plane in 0..n * c {
        let i_base = plane * h * w;
        let o_base = plane * oh * ow;
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let r0 = &x[i_base + y0 * w..i_base + y0 * w + w];
            let r1 = &x[i_base + y1 * w..i_base + y1 * w + w];
            let o_row = &mut o[o_base + oy * ow..o_base + oy * ow + ow];
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = r0[x0] * (1.0 - fx) + r0[x1] * fx;
                let bot = r1[x0] * (1.0 - fx) + r1[x1] * fx;
                o_row[ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Ok(out)
}

/// Backward of [`bilinear_upsample`]: scatters `upstream` back to the input
/// grid with the same interpolation weights (the transpose map).
pub fn bilinear_upsample_backward(
    input_shape: &[usize],
    upstream: &Tensor,
    factor: usize,
) -> Result<Tensor> {
    if factor < 2 {
        return Err(Error::InvalidConfig(format!(
            "bilinear_upsample factor must be >= 2, got {}",
            factor
        )));
    }
    let mut grad = Tensor::zeros(input_shape);
    let (n, c, h, w) = grad.dims4();
    let (un, uc, uoh, uow) = upstream.dims4();
    if (un, uc, uoh, uow) != (n, c, h * factor, w * factor) {
        return Err(Error::shape(
            "bilinear_upsample_backward upstream",
            format!("({}, {}, {}, {})", n, c, h * factor, w * factor),
            format!("({}, {}, {}, {})", un, uc, uoh, uow),
        ));
    }
    let ys = bilinear_axis(h, factor);
    let xs = bilinear_axis(w, factor);
    let up = upstream.data();
    let g = grad.data_mut();

    for plane in 0..n * c {
        let i_base = plane * h * w;
        let o_base = plane * uoh * uow;
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let u_row = &up[o_base + oy * uow..o_base + oy * uow + uow];
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let u = u_row[ox];
                g[i_base + y0 * w + x0] += u * (1.0 - fy) * (1.0 - fx);
                g[i_base + y0 * w + x1] += u * (1.0 - fy) * fx;
                g[i_base + y1 * w + x0] += u * fy * (1.0 - fx);
                g[i_base + y1 * w + x1] += u * fy * fx;
            }
        }
    }
    Ok(grad)
}

/// Weighted per-pixel softmax cross-entropy over the spatial grid.
///
/// Computes `loss = (1/(H*W)) * sum_ij w_ij * (-log softmax(logits)_ij[target_ij])`
/// together with its exact gradient w.r.t. the logits,
/// `w_ij * (softmax - onehot) / (H*W)`.
pub fn softmax_xent_map(
    logits: &Tensor,
    target: &LabelMap,
    pixel_weights: &Tensor,
) -> Result<(f32, Tensor)> {
    let (n, c, h, w) = logits.dims4();
    if n != 1 {
        return Err(Error::shape(
            "softmax_xent_map logits",
            "batch = 1",
            format!("batch = {}", n),
        ));
    }
    if target.height() != h || target.width() != w {
        return Err(Error::shape(
            "softmax_xent_map target",
            format!("{}x{}", h, w),
            format!("{}x{}", target.height(), target.width()),
        ));
    }
    if pixel_weights.len() != h * w {
        return Err(Error::shape(
            "softmax_xent_map weights",
            format!("{} weights", h * w),
            format!("{} weights", pixel_weights.len()),
        ));
    }
    target.ensure_classes(c)?;
    if pixel_weights.data().iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidConfig(
            "pixel weights must be non-negative".into(),
        ));
    }

    let z = logits.data();
    let wts = pixel_weights.data();
    let plane = h * w;
    let inv_area = 1.0f32 / plane as f32;
    let mut grad = Tensor::zeros(logits.shape());
    let g = grad.data_mut();
    let mut loss = 0.0f32;
    let mut probs = vec![0.0f32; c];

    for py in 0..h {
        for px in 0..w {
            let pix = py * w + px;
            let weight = wts[pix];
            let t = target.get(py, px) as usize;

            let mut zmax = f32::NEG_INFINITY;
            for ch in 0..c {
                zmax = zmax.max(z[ch * plane + pix]);
            }
            let mut denom = 0.0f32;
            for ch in 0..c {
                let e = (z[ch * plane + pix] - zmax).exp();
                probs[ch] = e;
                denom += e;
            }
            let inv_denom = 1.0 / denom;

            loss += weight * -(probs[t] * inv_denom).ln();
            let scale = weight * inv_area;
            for ch in 0..c {
                let p = probs[ch] * inv_denom;
                let onehot = if ch == t { 1.0 } else { 0.0 };
                g[ch * plane + pix] = scale * (p - onehot);
            }
        }
    }
    Ok((loss * inv_area, grad))
}
