//! Forward and backward numeric kernels on raw tensors.
//!
//! These are shared by the autodiff tape and the gradient-free inference
//! path, so a tape forward and a plain `predict` produce identical bits.

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, PixelMask, Tensor};

/// Geometry of one `same`-padded convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeom {
    pub fn check(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Self> {
        let [batch, in_ch, height, width] = input.dims4("conv2d input")?;
        let [out_ch, k_in, kh, kw] = kernel.dims4("conv2d kernel")?;
        if k_in != in_ch {
            return Err(Error::Dimension {
                op: "conv2d",
                axis: "in_channels",
                expected: in_ch,
                got: k_in,
            });
        }
        if bias.shape() != [out_ch] {
            return Err(Error::Dimension {
                op: "conv2d",
                axis: "out_channels (bias)",
                expected: out_ch,
                got: bias.numel(),
            });
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid(format!(
                "conv2d: kernel {kh}x{kw} must have odd extents for same padding"
            )));
        }
        Ok(ConvGeom {
            batch,
            in_ch,
            out_ch,
            height,
            width,
            kh,
            kw,
        })
    }

    fn patch(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }
}

/// Unfolds one `[C, H, W]` image into `[C*kh*kw, H*W]` columns (zero padded).
fn im2col(g: &ConvGeom, image: &[f64], cols: &mut [f64]) {
    let (h, w) = (g.height as isize, g.width as isize);
    let (ph, pw) = ((g.kh / 2) as isize, (g.kw / 2) as isize);
    let plane = g.plane();
    let mut row = 0;
    for c in 0..g.in_ch {
        let src = &image[c * plane..(c + 1) * plane];
        for ky in 0..g.kh as isize {
            for kx in 0..g.kw as isize {
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let dx = kx - pw;
                let x_lo = (-dx).clamp(0, w) as usize;
                let x_hi = (w - dx).clamp(0, w) as usize;
                for y in 0..h {
                    let out = &mut dst[(y * w) as usize..((y + 1) * w) as usize];
                    let yy = y + ky - ph;
                    if yy < 0 || yy >= h || x_lo >= x_hi {
                        out.fill(0.0);
                        continue;
                    }
                    let src_row = &src[(yy * w) as usize..((yy + 1) * w) as usize];
                    out[..x_lo].fill(0.0);
                    out[x_hi..].fill(0.0);
                    let s0 = (x_lo as isize + dx) as usize;
                    out[x_lo..x_hi].copy_from_slice(&src_row[s0..s0 + (x_hi - x_lo)]);
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates column gradients back into the image.
fn col2im(g: &ConvGeom, cols: &[f64], image: &mut [f64]) {
    let (h, w) = (g.height as isize, g.width as isize);
    let (ph, pw) = ((g.kh / 2) as isize, (g.kw / 2) as isize);
    let plane = g.plane();
    let mut row = 0;
    for c in 0..g.in_ch {
        let dst = &mut image[c * plane..(c + 1) * plane];
        for ky in 0..g.kh as isize {
            for kx in 0..g.kw as isize {
                let src = &cols[row * plane..(row + 1) * plane];
                let dx = kx - pw;
                let x_lo = (-dx).clamp(0, w) as usize;
                let x_hi = (w - dx).clamp(0, w) as usize;
                for y in 0..h {
                    let yy = y + ky - ph;
                    if yy < 0 || yy >= h || x_lo >= x_hi {
                        continue;
                    }
                    let s = &src[(y * w) as usize..((y + 1) * w) as usize];
                    let d0 = (yy * w) as usize + (x_lo as isize + dx) as usize;
                    for (d, v) in dst[d0..d0 + (x_hi - x_lo)].iter_mut().zip(&s[x_lo..x_hi]) {
                        *d += v;
                    }
                }
                row += 1;
            }
        }
    }
}

/// `c[m×n] = alpha · a[m×k] · b[k×n] + beta · c`, with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    debug_assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the debug assertions above spell out the bounds; every caller
    // passes buffers sized from the same ConvGeom.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Same-padded 2-D cross-correlation. Returns the output and, when
/// `keep_cols`, the unfolded input needed by [`conv2d_backward`].
pub(crate) fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    keep_cols: bool,
) -> Result<(Tensor, Option<Vec<f64>>)> {
    let g = ConvGeom::check(input, kernel, bias)?;
    let (patch, plane) = (g.patch(), g.plane());
    let mut out = vec![0.0; g.batch * g.out_ch * plane];
    let mut cols_all = if keep_cols {
        vec![0.0; g.batch * patch * plane]
    } else {
        Vec::new()
    };
    let mut scratch = if keep_cols { Vec::new() } else { vec![0.0; patch * plane] };
    let in_stride = g.in_ch * plane;
    for b in 0..g.batch {
        let cols: &mut [f64] = if keep_cols {
            &mut cols_all[b * patch * plane..(b + 1) * patch * plane]
        } else {
            &mut scratch
        };
        im2col(&g, &input.data()[b * in_stride..(b + 1) * in_stride], cols);
        let o = &mut out[b * g.out_ch * plane..(b + 1) * g.out_ch * plane];
        for (co, bv) in bias.data().iter().enumerate() {
            o[co * plane..(co + 1) * plane].fill(*bv);
        }
        gemm(g.out_ch, patch, plane, kernel.data(), (patch, 1), cols, (plane, 1), 1.0, o);
    }
    let out = Tensor::new(vec![g.batch, g.out_ch, g.height, g.width], out)?;
    Ok((out, keep_cols.then_some(cols_all)))
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernel: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

/// Gradients of [`conv2d_forward`] given the upstream gradient `grad_out`.
/// Batch contributions to the kernel and bias are reduced in index order.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    kernel: &[f64],
    cols: &[f64],
    grad_out: &[f64],
    need: [bool; 3],
) -> ConvGrads {
    let (patch, plane) = (g.patch(), g.plane());
    let mut grads = ConvGrads {
        input: need[0].then(|| vec![0.0; g.batch * g.in_ch * plane]),
        kernel: need[1].then(|| vec![0.0; g.out_ch * patch]),
        bias: need[2].then(|| vec![0.0; g.out_ch]),
    };
    let mut gcols = if need[0] { vec![0.0; patch * plane] } else { Vec::new() };
    for b in 0..g.batch {
        let go = &grad_out[b * g.out_ch * plane..(b + 1) * g.out_ch * plane];
        if let Some(gb) = grads.bias.as_mut() {
            for (co, acc) in gb.iter_mut().enumerate() {
                *acc += go[co * plane..(co + 1) * plane].iter().sum::<f64>();
            }
        }
        let cb = &cols[b * patch * plane..(b + 1) * patch * plane];
        if let Some(gk) = grads.kernel.as_mut() {
            gemm(g.out_ch, plane, patch, go, (plane, 1), cb, (1, plane), 1.0, gk);
        }
        if let Some(gi) = grads.input.as_mut() {
            gemm(patch, g.out_ch, plane, kernel, (1, patch), go, (plane, 1), 0.0, &mut gcols);
            let stride = g.in_ch * plane;
            col2im(g, &gcols, &mut gi[b * stride..(b + 1) * stride]);
        }
    }
    grads
}

/// Per-pixel softmax over the channel axis of a `[B, C, H, W]` tensor,
/// stabilised by subtracting the per-pixel maximum.
pub fn softmax_channels(logits: &Tensor) -> Result<Tensor> {
    let [batch, classes, h, w] = logits.dims4("softmax_channels")?;
    let plane = h * w;
    let mut out = vec![0.0; logits.numel()];
    let mut maxes = vec![0.0; plane];
    let mut sums = vec![0.0; plane];
    for b in 0..batch {
        let z = &logits.data()[b * classes * plane..(b + 1) * classes * plane];
        let o = &mut out[b * classes * plane..(b + 1) * classes * plane];
        maxes.copy_from_slice(&z[..plane]);
        for c in 1..classes {
            for (m, v) in maxes.iter_mut().zip(&z[c * plane..(c + 1) * plane]) {
                *m = m.max(*v);
            }
        }
        sums.fill(0.0);
        for c in 0..classes {
            let zc = &z[c * plane..(c + 1) * plane];
            let oc = &mut o[c * plane..(c + 1) * plane];
            for p in 0..plane {
                let e = (zc[p] - maxes[p]).exp();
                oc[p] = e;
                sums[p] += e;
            }
        }
        for c in 0..classes {
            for (v, s) in o[c * plane..(c + 1) * plane].iter_mut().zip(&sums) {
                *v /= s;
            }
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Input gradient of the channel softmax: `p ⊙ (g − Σ_c g_c p_c)`.
pub(crate) fn softmax_channels_backward(probs: &Tensor, grad_out: &[f64]) -> Vec<f64> {
    let [batch, classes, h, w] = probs.dims4("softmax_channels").expect("checked in forward");
    let plane = h * w;
    let p = probs.data();
    let mut out = vec![0.0; p.len()];
    let mut dots = vec![0.0; plane];
    for b in 0..batch {
        let base = b * classes * plane;
        dots.fill(0.0);
        for c in 0..classes {
            let o = base + c * plane;
            for q in 0..plane {
                dots[q] += grad_out[o + q] * p[o + q];
            }
        }
        for c in 0..classes {
            let o = base + c * plane;
            for q in 0..plane {
                out[o + q] = p[o + q] * (grad_out[o + q] - dots[q]);
            }
        }
    }
    out
}

pub(crate) fn check_targets(
    op: &'static str,
    scores: &Tensor,
    targets: &LabelMap,
    mask: &PixelMask,
) -> Result<[usize; 4]> {
    let dims = scores.dims4(op)?;
    let [batch, classes, h, w] = dims;
    for (axis, expected, got) in [
        ("batch", batch, targets.batch()),
        ("height", h, targets.height()),
        ("width", w, targets.width()),
        ("batch (mask)", batch, mask.batch()),
        ("height (mask)", h, mask.height()),
        ("width (mask)", w, mask.width()),
    ] {
        if expected != got {
            return Err(Error::Dimension {
                op,
                axis,
                expected,
                got,
            });
        }
    }
    for (i, &t) in targets.data().iter().enumerate() {
        if t as usize >= classes {
            return Err(Error::LabelOutOfRange {
                label: t,
                classes,
                batch: i / (h * w),
                y: (i / w) % h,
                x: i % w,
            });
        }
    }
    Ok(dims)
}

/// Mean of `−log softmax(z)[target]` over masked-in pixels, fused with the
/// softmax for stability. Also returns the probabilities for the backward
/// pass. An empty mask yields exactly zero.
pub(crate) fn masked_ce_logits(
    logits: &Tensor,
    targets: &LabelMap,
    mask: &PixelMask,
) -> Result<(f64, Tensor, usize)> {
    let [_, classes, h, w] = check_targets("masked_cross_entropy", logits, targets, mask)?;
    let plane = h * w;
    let probs = softmax_channels(logits)?;
    let z = logits.data();
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, (&t, &m)) in targets.data().iter().zip(mask.data()).enumerate() {
        if !m {
            continue;
        }
        let (b, q) = (i / plane, i % plane);
        let base = b * classes * plane + q;
        let mut mx = f64::NEG_INFINITY;
        for c in 0..classes {
            mx = mx.max(z[base + c * plane]);
        }
        let mut s = 0.0;
        for c in 0..classes {
            s += (z[base + c * plane] - mx).exp();
        }
        total += mx + s.ln() - z[base + t as usize * plane];
        count += 1;
    }
    let loss = if count == 0 { 0.0 } else { total / count as f64 };
    Ok((loss, probs, count))
}

pub(crate) fn masked_ce_logits_backward(
    probs: &Tensor,
    targets: &LabelMap,
    mask: &PixelMask,
    count: usize,
    upstream: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; probs.numel()];
    if count == 0 {
        return out;
    }
    let [_, classes, h, w] = probs.dims4("masked_cross_entropy").expect("checked in forward");
    let plane = h * w;
    let scale = upstream / count as f64;
    let p = probs.data();
    for (i, (&t, &m)) in targets.data().iter().zip(mask.data()).enumerate() {
        if !m {
            continue;
        }
        let base = (i / plane) * classes * plane + i % plane;
        for c in 0..classes {
            let onehot = if c == t as usize { 1.0 } else { 0.0 };
            out[base + c * plane] = scale * (p[base + c * plane] - onehot);
        }
    }
    out
}

/// Mean of `−log p[target]` over masked-in pixels of a probability tensor.
pub(crate) fn masked_nll_probs(
    probs: &Tensor,
    targets: &LabelMap,
    mask: &PixelMask,
) -> Result<(f64, usize)> {
    let [_, classes, h, w] = check_targets("masked_cross_entropy", probs, targets, mask)?;
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, (&t, &m)) in targets.data().iter().zip(mask.data()).enumerate() {
        if m {
            let idx = (i / plane) * classes * plane + t as usize * plane + i % plane;
            total -= probs.data()[idx].ln();
            count += 1;
        }
    }
    Ok((if count == 0 { 0.0 } else { total / count as f64 }, count))
}

pub(crate) fn masked_nll_probs_backward(
    probs: &Tensor,
    targets: &LabelMap,
    mask: &PixelMask,
    count: usize,
    upstream: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; probs.numel()];
    if count == 0 {
        return out;
    }
    let [_, classes, h, w] = probs.dims4("masked_cross_entropy").expect("checked in forward");
    let plane = h * w;
    for (i, (&t, &m)) in targets.data().iter().zip(mask.data()).enumerate() {
        if m {
            let idx = (i / plane) * classes * plane + t as usize * plane + i % plane;
            out[idx] = -upstream / (count as f64 * probs.data()[idx]);
        }
    }
    out
}

/// Per-pixel argmax over channels (lowest class id wins ties) and the
/// per-pixel maximum probability.
pub fn argmax_channels(probs: &Tensor) -> Result<(LabelMap, Vec<f64>)> {
    let [batch, classes, h, w] = probs.dims4("argmax_channels")?;
    let plane = h * w;
    let p = probs.data();
    let mut labels = vec![0u32; batch * plane];
    let mut conf = vec![0.0; batch * plane];
    for b in 0..batch {
        for q in 0..plane {
            let base = b * classes * plane + q;
            let (mut best, mut best_c) = (p[base], 0u32);
            for c in 1..classes {
                let v = p[base + c * plane];
                if v > best {
                    best = v;
                    best_c = c as u32;
                }
            }
            labels[b * plane + q] = best_c;
            conf[b * plane + q] = best;
        }
    }
    Ok((LabelMap::new(batch, h, w, labels)?, conf))
}
