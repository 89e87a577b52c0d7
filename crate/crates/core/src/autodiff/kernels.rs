//! Forward and backward compute kernels used by the tape.

use crate::error::{Error, Result};
use crate::fft;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

pub fn conv_out_dim(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    (padded >= k && stride > 0).then(|| (padded - k) / stride + 1)
}

fn check_conv<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: ConvSpec,
) -> Result<(usize, usize, usize)> {
    let [_, cin, h, wd] = x.shape();
    let [cout, cg, k, k2] = w.shape();
    if k != k2 || spec.groups == 0 || cin % spec.groups != 0 || cout % spec.groups != 0 {
        return Err(Error::shape(
            "conv2d",
            format!("weight {:?} groups {}", w.shape(), spec.groups),
        ));
    }
    if cg * spec.groups != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input {:?} vs weight {:?}", x.shape(), w.shape()),
        ));
    }
    let ho = conv_out_dim(h, k, spec.stride, spec.pad);
    let wo = conv_out_dim(wd, k, spec.stride, spec.pad);
    match (ho, wo) {
        (Some(ho), Some(wo)) => Ok((k, ho, wo)),
        _ => Err(Error::shape("conv2d", format!("input {:?} too small", x.shape()))),
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    spec: ConvSpec,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let p = spec.pad as isize;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let out = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky) as isize - p;
                    for ox in 0..wo {
                        let ix = (ox * spec.stride + kx) as isize - p;
                        out[oy * wo + ox] =
                            if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                                x[(ci * h + iy as usize) * w + ix as usize]
                            } else {
                                T::zero()
                            };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    spec: ConvSpec,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let p = spec.pad as isize;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky) as isize - p;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * spec.stride + kx) as isize - p;
                        if ix >= 0 && (ix as usize) < w {
                            let i = (ci * h + iy as usize) * w + ix as usize;
                            dx[i] = dx[i] + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(k: usize, spec: ConvSpec) -> bool {
    k == 1 && spec.stride == 1 && spec.pad == 0
}

pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let (k, ho, wo) = check_conv(x, w, spec)?;
    let [b, cin, h, wd] = x.shape();
    let cout = w.shape()[0];
    if let Some(bias) = bias {
        if bias.len() != cout {
            return Err(Error::shape("conv2d", format!("bias {:?}", bias.shape())));
        }
    }
    let g = spec.groups;
    let (cg, og) = (cin / g, cout / g);
    let mut y = Tensor::zeros([b, cout, ho, wo]);
    let ksz = cg * k * k;
    let mut cols = vec![T::zero(); if is_pointwise(k, spec) { 0 } else { ksz * ho * wo }];
    for bi in 0..b {
        for gi in 0..g {
            let xs = &x.data()[(bi * cin + gi * cg) * h * wd..(bi * cin + (gi + 1) * cg) * h * wd];
            let ws = &w.data()[gi * og * ksz..(gi + 1) * og * ksz];
            let off = (bi * cout + gi * og) * ho * wo;
            let ys = &mut y.data_mut()[off..off + og * ho * wo];
            if og == 1 && cg == 1 && !is_pointwise(k, spec) {
                depthwise_plane(xs, ws, h, wd, k, spec, ho, wo, ys);
                continue;
            }
            let src: &[T] = if is_pointwise(k, spec) {
                xs
            } else {
                im2col(xs, cg, h, wd, k, spec, ho, wo, &mut cols);
                &cols
            };
            T::gemm(og, ksz, ho * wo, T::one(), ws, false, src, false, T::zero(), ys);
        }
    }
    if let Some(bias) = bias {
        let hw = ho * wo;
        for bi in 0..b {
            for co in 0..cout {
                let bv = bias.data()[co];
                for v in &mut y.data_mut()[(bi * cout + co) * hw..(bi * cout + co + 1) * hw] {
                    *v = *v + bv;
                }
            }
        }
    }
    Ok(y)
}

#[allow(clippy::too_many_arguments)]
fn depthwise_plane<T: Real>(
    x: &[T],
    w: &[T],
    h: usize,
    wd: usize,
    k: usize,
    spec: ConvSpec,
    ho: usize,
    wo: usize,
    y: &mut [T],
) {
    let p = spec.pad as isize;
    for oy in 0..ho {
        for ox in 0..wo {
            let mut acc = T::zero();
            for ky in 0..k {
                let iy = (oy * spec.stride + ky) as isize - p;
                if iy < 0 || iy as usize >= h {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * spec.stride + kx) as isize - p;
                    if ix >= 0 && (ix as usize) < wd {
                        acc = acc + w[ky * k + kx] * x[iy as usize * wd + ix as usize];
                    }
                }
            }
            y[oy * wo + ox] = acc;
        }
    }
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    spec: ConvSpec,
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let (k, ho, wo) = check_conv(x, w, spec)?;
    let [b, cin, h, wd] = x.shape();
    let cout = w.shape()[0];
    let g = spec.groups;
    let (cg, og) = (cin / g, cout / g);
    let ksz = cg * k * k;
    let hw = ho * wo;
    let mut dx = need[0].then(|| Tensor::zeros(x.shape()));
    let mut dw = need[1].then(|| Tensor::zeros(w.shape()));
    let pointwise = is_pointwise(k, spec);
    let mut cols = vec![T::zero(); if pointwise { 0 } else { ksz * hw }];
    let mut dcols = vec![T::zero(); if pointwise { 0 } else { ksz * hw }];
    for bi in 0..b {
        for gi in 0..g {
            let xs = &x.data()[(bi * cin + gi * cg) * h * wd..(bi * cin + (gi + 1) * cg) * h * wd];
            let ws = &w.data()[gi * og * ksz..(gi + 1) * og * ksz];
            let off = (bi * cout + gi * og) * hw;
            let dys = &dy.data()[off..off + og * hw];
            if let Some(dw) = dw.as_mut() {
                let dws = &mut dw.data_mut()[gi * og * ksz..(gi + 1) * og * ksz];
                let src: &[T] = if pointwise {
                    xs
                } else {
                    im2col(xs, cg, h, wd, k, spec, ho, wo, &mut cols);
                    &cols
                };
                T::gemm(og, hw, ksz, T::one(), dys, false, src, true, T::one(), dws);
            }
            if let Some(dx) = dx.as_mut() {
                let dxs = &mut dx.data_mut()
                    [(bi * cin + gi * cg) * h * wd..(bi * cin + (gi + 1) * cg) * h * wd];
                if pointwise {
                    T::gemm(cg, og, hw, T::one(), ws, true, dys, false, T::one(), dxs);
                } else {
                    T::gemm(ksz, og, hw, T::one(), ws, true, dys, false, T::zero(), &mut dcols);
                    col2im(&dcols, cg, h, wd, k, spec, ho, wo, dxs);
                }
            }
        }
    }
    let db = need[2].then(|| {
        let mut db = Tensor::zeros([1, cout, 1, 1]);
        for bi in 0..b {
            for co in 0..cout {
                let s: T = dy.data()[(bi * cout + co) * hw..(bi * cout + co + 1) * hw]
                    .iter()
                    .copied()
                    .sum();
                db.data_mut()[co] = db.data()[co] + s;
            }
        }
        db
    });
    Ok(ConvGrads { dx, dw, db })
}

/// Layer normalization across channels at every (batch, y, x) position.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.shape();
    if weight.len() != c || bias.len() != c {
        return Err(Error::shape(
            "layer_norm",
            format!("{:?} with affine {:?}", x.shape(), weight.shape()),
        ));
    }
    let hw = h * w;
    let mut y = Tensor::zeros(x.shape());
    let inv_c = T::c(1.0 / c as f64);
    let eps = T::c(eps);
    for bi in 0..b {
        for p in 0..hw {
            let idx = |ci: usize| (bi * c + ci) * hw + p;
            let mean = (0..c).map(|ci| x.data()[idx(ci)]).sum::<T>() * inv_c;
            let var = (0..c)
                .map(|ci| {
                    let d = x.data()[idx(ci)] - mean;
                    d * d
                })
                .sum::<T>()
                * inv_c;
            let rstd = (var + eps).sqrt().recip();
            for ci in 0..c {
                y.data_mut()[idx(ci)] =
                    (x.data()[idx(ci)] - mean) * rstd * weight.data()[ci] + bias.data()[ci];
            }
        }
    }
    Ok(y)
}

pub fn layer_norm_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    eps: f64,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [b, c, h, w] = x.shape();
    let hw = h * w;
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = Tensor::zeros(weight.shape());
    let inv_c = T::c(1.0 / c as f64);
    let eps = T::c(eps);
    let mut xhat = vec![T::zero(); c];
    let mut dxhat = vec![T::zero(); c];
    for bi in 0..b {
        for p in 0..hw {
            let idx = |ci: usize| (bi * c + ci) * hw + p;
            let mean = (0..c).map(|ci| x.data()[idx(ci)]).sum::<T>() * inv_c;
            let var = (0..c)
                .map(|ci| {
                    let d = x.data()[idx(ci)] - mean;
                    d * d
                })
                .sum::<T>()
                * inv_c;
            let rstd = (var + eps).sqrt().recip();
            let mut m1 = T::zero();
            let mut m2 = T::zero();
            for ci in 0..c {
                let g = dy.data()[idx(ci)];
                xhat[ci] = (x.data()[idx(ci)] - mean) * rstd;
                dxhat[ci] = g * weight.data()[ci];
                dw.data_mut()[ci] = dw.data()[ci] + g * xhat[ci];
                db.data_mut()[ci] = db.data()[ci] + g;
                m1 = m1 + dxhat[ci];
                m2 = m2 + dxhat[ci] * xhat[ci];
            }
            m1 = m1 * inv_c;
            m2 = m2 * inv_c;
            for ci in 0..c {
                dx.data_mut()[idx(ci)] = rstd * (dxhat[ci] - m1 - xhat[ci] * m2);
            }
        }
    }
    (dx, dw, db)
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let u = T::c(GELU_K) * (x + T::c(GELU_C) * x * x * x);
    T::c(0.5) * x * (T::one() + u.tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let u = T::c(GELU_K) * (x + T::c(GELU_C) * x * x * x);
    let t = u.tanh();
    let du = T::c(GELU_K) * (T::one() + T::c(3.0 * GELU_C) * x * x);
    T::c(0.5) * (T::one() + t) + T::c(0.5) * x * (T::one() - t * t) * du
}

/// Depth-to-space: (b, c·r², h, w) → (b, c, h·r, w·r).
pub fn pixel_shuffle<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.shape();
    if c % (r * r) != 0 {
        return Err(Error::shape("pixel_shuffle", format!("{:?} r={r}", x.shape())));
    }
    let co = c / (r * r);
    let mut y = Tensor::zeros([b, co, h * r, w * r]);
    for bi in 0..b {
        for ci in 0..co {
            for i in 0..r {
                for j in 0..r {
                    let src_c = ci * r * r + i * r + j;
                    for yy in 0..h {
                        for xx in 0..w {
                            let v = x.at(bi, src_c, yy, xx);
                            y.set(bi, ci, yy * r + i, xx * r + j, v);
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

pub fn pixel_unshuffle<T: Real>(y: &Tensor<T>, r: usize) -> Tensor<T> {
    let [b, co, hr, wr] = y.shape();
    let (h, w) = (hr / r, wr / r);
    let mut x = Tensor::zeros([b, co * r * r, h, w]);
    for bi in 0..b {
        for ci in 0..co {
            for i in 0..r {
                for j in 0..r {
                    let dst_c = ci * r * r + i * r + j;
                    for yy in 0..h {
                        for xx in 0..w {
                            let v = y.at(bi, ci, yy * r + i, xx * r + j);
                            x.set(bi, dst_c, yy, xx, v);
                        }
                    }
                }
            }
        }
    }
    x
}

/// Real FFT over (h, w) of every plane; output stacks real parts then imaginary
/// parts along channels: (b, c, h, w) → (b, 2c, h, w/2+1).
pub fn rfft2_planes<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [b, c, h, w] = x.shape();
    let wf = fft::half_width(w);
    let mut y = Tensor::zeros([b, 2 * c, h, wf]);
    let plane = h * w;
    let fplane = h * wf;
    for bi in 0..b {
        for ci in 0..c {
            let src = &x.data()[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
            let (re, im) = fft::rfft2(src, h, w);
            let re_off = (bi * 2 * c + ci) * fplane;
            let im_off = (bi * 2 * c + c + ci) * fplane;
            y.data_mut()[re_off..re_off + fplane].copy_from_slice(&re);
            y.data_mut()[im_off..im_off + fplane].copy_from_slice(&im);
        }
    }
    y
}

/// Inverse of [`rfft2_planes`]: (b, 2c, h, w/2+1) → (b, c, h, w).
pub fn irfft2_planes<T: Real>(x: &Tensor<T>, w: usize) -> Result<Tensor<T>> {
    let [b, c2, h, wf] = x.shape();
    if c2 % 2 != 0 || wf != fft::half_width(w) {
        return Err(Error::shape("irfft2", format!("{:?} to width {w}", x.shape())));
    }
    let c = c2 / 2;
    let mut y = Tensor::zeros([b, c, h, w]);
    let fplane = h * wf;
    for bi in 0..b {
        for ci in 0..c {
            let re = &x.data()[(bi * c2 + ci) * fplane..(bi * c2 + ci + 1) * fplane];
            let im = &x.data()[(bi * c2 + c + ci) * fplane..(bi * c2 + c + ci + 1) * fplane];
            let out = fft::irfft2(re, im, h, w);
            y.data_mut()[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w].copy_from_slice(&out);
        }
    }
    Ok(y)
}

/// Adjoint of [`rfft2_planes`].
pub fn rfft2_planes_adjoint<T: Real>(g: &Tensor<T>, w: usize) -> Result<Tensor<T>> {
    let [_, _, h, wf] = g.shape();
    let mut scaled = g.clone();
    let hw = (h * w) as f64;
    let data = scaled.data_mut();
    for (i, v) in data.iter_mut().enumerate() {
        let l = i % wf;
        *v = *v * T::c(hw / fft::column_weight(l, w));
    }
    irfft2_planes(&scaled, w)
}

/// Adjoint of [`irfft2_planes`].
pub fn irfft2_planes_adjoint<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let [_, _, h, w] = g.shape();
    let mut y = rfft2_planes(g);
    let wf = fft::half_width(w);
    let hw = (h * w) as f64;
    for (i, v) in y.data_mut().iter_mut().enumerate() {
        let l = i % wf;
        *v = *v * T::c(fft::column_weight(l, w) / hw);
    }
    y
}

/// Mean over real and imaginary parts of `|FFT2(a − b)|`, unnormalized transform.
pub fn fft_l1<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let [bn, c, h, w] = a.shape();
    let d = a.zip_map(b, |x, y| x - y).expect("checked shapes");
    let plane = h * w;
    let mut total = 0.0;
    for p in 0..bn * c {
        let spec = fft::fft2(&d.data()[p * plane..(p + 1) * plane], h, w);
        total += spec
            .iter()
            .map(|z| z.re.abs().f64() + z.im.abs().f64())
            .sum::<f64>();
    }
    total / (2 * bn * c * plane) as f64
}

/// Gradient of [`fft_l1`] with respect to `a` (the gradient for `b` is its negation).
pub fn fft_l1_grad<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    use rustfft::num_complex::Complex;
    let [bn, c, h, w] = a.shape();
    let d = a.zip_map(b, |x, y| x - y).expect("checked shapes");
    let plane = h * w;
    let scale = T::c(1.0 / (2 * bn * c * plane) as f64);
    let sign = |v: T| {
        if v > T::zero() {
            T::one()
        } else if v < T::zero() {
            -T::one()
        } else {
            T::zero()
        }
    };
    let mut g = Tensor::zeros(a.shape());
    for p in 0..bn * c {
        let spec = fft::fft2(&d.data()[p * plane..(p + 1) * plane], h, w);
        let s: Vec<Complex<T>> = spec
            .iter()
            .map(|z| Complex::new(sign(z.re), sign(z.im)))
            .collect();
        let back = fft::ifft2_real(&s, h, w);
        for (o, v) in g.data_mut()[p * plane..(p + 1) * plane]
            .iter_mut()
            .zip(back)
        {
            *o = v * scale;
        }
    }
    g
}

/// Softmax cross-entropy averaged over the batch; logits are (b, classes, 1, 1).
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let [b, c, h, w] = logits.shape();
    if h != 1 || w != 1 || labels.len() != b {
        return Err(Error::shape(
            "cross_entropy",
            format!("logits {:?} labels {}", logits.shape(), labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Invalid(format!("class label {bad} out of range 0..{c}")));
    }
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = 0.0;
    for bi in 0..b {
        let row = &logits.data()[bi * c..(bi + 1) * c];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64()));
        let exps: Vec<f64> = row.iter().map(|v| (v.f64() - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() + max - row[labels[bi]].f64();
        for ci in 0..c {
            let p = exps[ci] / z - if ci == labels[bi] { 1.0 } else { 0.0 };
            grad.data_mut()[bi * c + ci] = T::c(p / b as f64);
        }
    }
    Ok((loss / b as f64, grad))
}
