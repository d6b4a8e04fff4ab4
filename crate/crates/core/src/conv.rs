//! Grouped 3-D convolution kernels (forward and both adjoints).
//!
//! Weight layout is `(C_out, C_in / G, kt, kh, kw)` stored in a [`Tensor5`].
//! Stride-1 convolutions run on a zero-padded copy of each input volume so
//! every kernel tap becomes one contiguous multiply-add over the volume;
//! strided convolutions take a plain per-element path.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Dims, Tensor5};

/// Kernel extents along `(T, H, W)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Kernel3 {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Kernel3 {
    pub const fn new(t: usize, h: usize, w: usize) -> Self {
        Self { t, h, w }
    }

    pub const fn cube(k: usize) -> Self {
        Self::new(k, k, k)
    }

    pub const fn spatial(h: usize, w: usize) -> Self {
        Self::new(1, h, w)
    }

    pub const fn temporal(t: usize) -> Self {
        Self::new(t, 1, 1)
    }

    pub const fn point() -> Self {
        Self::new(1, 1, 1)
    }

    pub fn volume(self) -> usize {
        self.t * self.h * self.w
    }

    pub fn is_odd(self) -> bool {
        self.t % 2 == 1 && self.h % 2 == 1 && self.w % 2 == 1
    }

    /// Zero padding that preserves extents at stride 1.
    pub fn same_padding(self) -> [usize; 3] {
        [self.t / 2, self.h / 2, self.w / 2]
    }

    pub fn as_array(self) -> [usize; 3] {
        [self.t, self.h, self.w]
    }
}

impl std::fmt::Display for Kernel3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.t, self.h, self.w)
    }
}

/// Parses `TxHxW` or a single odd extent `K` meaning `KxKxK`.
impl std::str::FromStr for Kernel3 {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::ConfigInvalid(format!("bad kernel `{s}`, expected TxHxW"));
        let parts: Vec<usize> = s
            .trim()
            .split(['x', 'X', '*'])
            .map(|p| p.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let k = match parts.as_slice() {
            [k] => Self::cube(*k),
            [t, h, w] => Self::new(*t, *h, *w),
            _ => return Err(bad()),
        };
        if k.volume() == 0 || !k.is_odd() {
            return Err(Error::KernelShapeViolation(format!("kernel {k} must have odd positive extents")));
        }
        Ok(k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub groups: usize,
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    /// Stride 1 with "same" zero padding.
    pub fn same(kernel: Kernel3, groups: usize) -> Self {
        Self {
            groups,
            stride: [1, 1, 1],
            padding: kernel.same_padding(),
        }
    }

    pub fn strided(kernel: Kernel3, groups: usize, stride: [usize; 3]) -> Self {
        Self {
            groups,
            stride,
            padding: kernel.same_padding(),
        }
    }

    fn unit_stride(&self) -> bool {
        self.stride == [1, 1, 1]
    }

    /// Validates shapes and returns the output dims.
    pub fn output_dims(&self, input: Dims, weight: Dims) -> Result<Dims> {
        let g = self.groups;
        if g == 0 || input.c % g != 0 || weight.n % g != 0 {
            return Err(Error::InvalidShape(format!(
                "groups {g} incompatible with {} input / {} output channels",
                input.c, weight.n
            )));
        }
        if weight.c * g != input.c {
            return Err(Error::ShapeMismatch {
                op: "conv3d",
                left: input,
                right: weight,
            });
        }
        if self.stride.contains(&0) {
            return Err(Error::InvalidShape("stride must be >= 1".into()));
        }
        let k = [weight.t, weight.h, weight.w];
        let i = [input.t, input.h, input.w];
        let mut o = [0usize; 3];
        for a in 0..3 {
            let padded = i[a] + 2 * self.padding[a];
            if padded < k[a] {
                return Err(Error::InvalidShape(format!(
                    "kernel {:?} larger than padded input {:?}",
                    k, i
                )));
            }
            o[a] = (padded - k[a]) / self.stride[a] + 1;
        }
        Ok(Dims::new(input.n, weight.n, o[0], o[1], o[2]))
    }
}

/// Multiply-accumulates performed by one convolution.
pub fn conv_macs(output: Dims, weight: Dims) -> u64 {
    output.numel() as u64 * (weight.c * weight.t * weight.h * weight.w) as u64
}

/// Padded-volume geometry for the stride-1 path.
struct Padded {
    tp: usize,
    hp: usize,
    wp: usize,
    /// Length of the strip of padded indices that covers every output.
    strip: usize,
}

impl Padded {
    fn new(input: Dims, out: Dims, pad: [usize; 3]) -> Self {
        let tp = input.t + 2 * pad[0];
        let hp = input.h + 2 * pad[1];
        let wp = input.w + 2 * pad[2];
        let strip = ((out.t - 1) * hp + (out.h - 1)) * wp + out.w;
        Self { tp, hp, wp, strip }
    }

    fn len(&self) -> usize {
        self.tp * self.hp * self.wp
    }

    fn offset(&self, dt: usize, dh: usize, dw: usize) -> usize {
        (dt * self.hp + dh) * self.wp + dw
    }

    /// Copies a `(T, H, W)` volume into the interior of a zeroed padded buffer.
    fn embed<S: Scalar>(&self, src: &[S], dims: Dims, pad: [usize; 3], dst: &mut [S]) {
        dst.iter_mut().for_each(|v| *v = S::zero());
        for t in 0..dims.t {
            for h in 0..dims.h {
                let s = (t * dims.h + h) * dims.w;
                let d = ((t + pad[0]) * self.hp + h + pad[1]) * self.wp + pad[2];
                dst[d..d + dims.w].copy_from_slice(&src[s..s + dims.w]);
            }
        }
    }

    /// Inverse of [`Self::embed`]: accumulates the interior into `dst`.
    fn extract_add<S: Scalar>(&self, src: &[S], dims: Dims, pad: [usize; 3], dst: &mut [S]) {
        for t in 0..dims.t {
            for h in 0..dims.h {
                let d = (t * dims.h + h) * dims.w;
                let s = ((t + pad[0]) * self.hp + h + pad[1]) * self.wp + pad[2];
                for (o, &v) in dst[d..d + dims.w].iter_mut().zip(&src[s..s + dims.w]) {
                    *o += v;
                }
            }
        }
    }

    /// Output volume laid out with padded row/frame strides.
    fn spread<S: Scalar>(&self, out: &[S], od: Dims, dst: &mut [S]) {
        dst.iter_mut().for_each(|v| *v = S::zero());
        for t in 0..od.t {
            for h in 0..od.h {
                let s = (t * od.h + h) * od.w;
                let d = (t * self.hp + h) * self.wp;
                dst[d..d + od.w].copy_from_slice(&out[s..s + od.w]);
            }
        }
    }

    fn crop<S: Scalar>(&self, ext: &[S], od: Dims, dst: &mut [S]) {
        for t in 0..od.t {
            for h in 0..od.h {
                let d = (t * od.h + h) * od.w;
                let s = (t * self.hp + h) * self.wp;
                dst[d..d + od.w].copy_from_slice(&ext[s..s + od.w]);
            }
        }
    }
}

#[inline]
fn axpy<S: Scalar>(alpha: S, x: &[S], y: &mut [S]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Grouped 3-D convolution; `w` has dims `(C_out, C_in / G, kt, kh, kw)`.
pub fn conv3d<S: Scalar>(x: &Tensor5<S>, w: &Tensor5<S>, geom: &ConvGeometry) -> Result<Tensor5<S>> {
    let id = x.dims();
    let wd = w.dims();
    let od = geom.output_dims(id, wd)?;
    let mut out = Tensor5::zeros(od);
    if geom.unit_stride() {
        conv_forward_unit(x, w, geom, od, &mut out);
    } else {
        conv_forward_strided(x, w, geom, od, &mut out);
    }
    out.debug_check_finite();
    Ok(out)
}

fn conv_forward_unit<S: Scalar>(x: &Tensor5<S>, w: &Tensor5<S>, geom: &ConvGeometry, od: Dims, out: &mut Tensor5<S>) {
    let id = x.dims();
    let wd = w.dims();
    let pad = geom.padding;
    let pg = Padded::new(id, od, pad);
    let cin_pg = wd.c;
    let cout_pg = wd.n / geom.groups;
    let taps = wd.t * wd.h * wd.w;
    let no_pad = pad == [0, 0, 0];

    let mut padded = vec![S::zero(); if no_pad { 0 } else { pg.len() * id.c }];
    let mut ext = vec![S::zero(); pg.strip];
    for n in 0..id.n {
        if !no_pad {
            for c in 0..id.c {
                pg.embed(x.volume(n, c), id, pad, &mut padded[c * pg.len()..(c + 1) * pg.len()]);
            }
        }
        for co in 0..wd.n {
            let g = co / cout_pg;
            ext.iter_mut().for_each(|v| *v = S::zero());
            for cil in 0..cin_pg {
                let ci = g * cin_pg + cil;
                let src: &[S] = if no_pad {
                    x.volume(n, ci)
                } else {
                    &padded[ci * pg.len()..(ci + 1) * pg.len()]
                };
                let wbase = (co * cin_pg + cil) * taps;
                let wk = &w.data()[wbase..wbase + taps];
                let mut tap = 0;
                for dt in 0..wd.t {
                    for dh in 0..wd.h {
                        for dw in 0..wd.w {
                            let wv = wk[tap];
                            tap += 1;
                            if wv != S::zero() {
                                let off = pg.offset(dt, dh, dw);
                                axpy(wv, &src[off..off + pg.strip], &mut ext);
                            }
                        }
                    }
                }
            }
            pg.crop(&ext, od, out.volume_mut(n, co));
        }
    }
}

/// Valid output range `[lo, hi)` for one axis and kernel offset.
#[inline]
fn out_range(offset: usize, pad: usize, stride: usize, input: usize, output: usize) -> (usize, usize) {
    // o * stride + offset - pad must lie in [0, input)
    let lo = if pad > offset {
        (pad - offset).div_ceil(stride)
    } else {
        0
    };
    let hi = if input + pad > offset {
        ((input + pad - offset - 1) / stride + 1).min(output)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn conv_forward_strided<S: Scalar>(x: &Tensor5<S>, w: &Tensor5<S>, geom: &ConvGeometry, od: Dims, out: &mut Tensor5<S>) {
    let id = x.dims();
    let wd = w.dims();
    let [st, sh, sw] = geom.stride;
    let [pt, ph, pw] = geom.padding;
    let cin_pg = wd.c;
    let cout_pg = wd.n / geom.groups;
    for n in 0..id.n {
        for co in 0..wd.n {
            let g = co / cout_pg;
            for cil in 0..cin_pg {
                let ci = g * cin_pg + cil;
                let src = x.volume(n, ci);
                for dt in 0..wd.t {
                    let (t_lo, t_hi) = out_range(dt, pt, st, id.t, od.t);
                    for dh in 0..wd.h {
                        let (h_lo, h_hi) = out_range(dh, ph, sh, id.h, od.h);
                        for dw in 0..wd.w {
                            let (w_lo, w_hi) = out_range(dw, pw, sw, id.w, od.w);
                            let wv = w.get(co, cil, dt, dh, dw);
                            let dst = out.volume_mut(n, co);
                            for to in t_lo..t_hi {
                                let ti = to * st + dt - pt;
                                for ho in h_lo..h_hi {
                                    let hi = ho * sh + dh - ph;
                                    let orow = (to * od.h + ho) * od.w;
                                    let irow = (ti * id.h + hi) * id.w;
                                    for wo in w_lo..w_hi {
                                        dst[orow + wo] += wv * src[irow + wo * sw + dw - pw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of [`conv3d`] with respect to its input.
pub fn conv3d_grad_input<S: Scalar>(
    grad_out: &Tensor5<S>,
    w: &Tensor5<S>,
    geom: &ConvGeometry,
    input: Dims,
) -> Result<Tensor5<S>> {
    let od = geom.output_dims(input, w.dims())?;
    if od != grad_out.dims() {
        return Err(Error::ShapeMismatch {
            op: "conv3d_grad_input",
            left: od,
            right: grad_out.dims(),
        });
    }
    let mut gin = Tensor5::zeros(input);
    if geom.unit_stride() {
        grad_input_unit(grad_out, w, geom, &mut gin);
    } else {
        grad_input_strided(grad_out, w, geom, &mut gin);
    }
    Ok(gin)
}

fn grad_input_unit<S: Scalar>(gout: &Tensor5<S>, w: &Tensor5<S>, geom: &ConvGeometry, gin: &mut Tensor5<S>) {
    let id = gin.dims();
    let od = gout.dims();
    let wd = w.dims();
    let pad = geom.padding;
    let pg = Padded::new(id, od, pad);
    let cin_pg = wd.c;
    let cout_pg = wd.n / geom.groups;
    let taps = wd.t * wd.h * wd.w;

    let mut spread = vec![S::zero(); pg.len() * wd.n];
    let mut acc = vec![S::zero(); pg.len()];
    for n in 0..id.n {
        for co in 0..wd.n {
            pg.spread(gout.volume(n, co), od, &mut spread[co * pg.len()..(co + 1) * pg.len()]);
        }
        for ci in 0..id.c {
            let g = ci / cin_pg;
            let cil = ci % cin_pg;
            acc.iter_mut().for_each(|v| *v = S::zero());
            for co in g * cout_pg..(g + 1) * cout_pg {
                let go = &spread[co * pg.len()..co * pg.len() + pg.strip];
                let wbase = (co * cin_pg + cil) * taps;
                let wk = &w.data()[wbase..wbase + taps];
                let mut tap = 0;
                for dt in 0..wd.t {
                    for dh in 0..wd.h {
                        for dw in 0..wd.w {
                            let wv = wk[tap];
                            tap += 1;
                            if wv != S::zero() {
                                let off = pg.offset(dt, dh, dw);
                                axpy(wv, go, &mut acc[off..off + pg.strip]);
                            }
                        }
                    }
                }
            }
            pg.extract_add(&acc, id, pad, gin.volume_mut(n, ci));
        }
    }
}

fn grad_input_strided<S: Scalar>(gout: &Tensor5<S>, w: &Tensor5<S>, geom: &ConvGeometry, gin: &mut Tensor5<S>) {
    let id = gin.dims();
    let od = gout.dims();
    let wd = w.dims();
    let [st, sh, sw] = geom.stride;
    let [pt, ph, pw] = geom.padding;
    let cin_pg = wd.c;
    let cout_pg = wd.n / geom.groups;
    for n in 0..id.n {
        for co in 0..wd.n {
            let g = co / cout_pg;
            let go = gout.volume(n, co).to_vec();
            for cil in 0..cin_pg {
                let ci = g * cin_pg + cil;
                for dt in 0..wd.t {
                    let (t_lo, t_hi) = out_range(dt, pt, st, id.t, od.t);
                    for dh in 0..wd.h {
                        let (h_lo, h_hi) = out_range(dh, ph, sh, id.h, od.h);
                        for dw in 0..wd.w {
                            let (w_lo, w_hi) = out_range(dw, pw, sw, id.w, od.w);
                            let wv = w.get(co, cil, dt, dh, dw);
                            let dst = gin.volume_mut(n, ci);
                            for to in t_lo..t_hi {
                                let ti = to * st + dt - pt;
                                for ho in h_lo..h_hi {
                                    let hi = ho * sh + dh - ph;
                                    let orow = (to * od.h + ho) * od.w;
                                    let irow = (ti * id.h + hi) * id.w;
                                    for wo in w_lo..w_hi {
                                        dst[irow + wo * sw + dw - pw] += wv * go[orow + wo];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of [`conv3d`] with respect to its weight.
pub fn conv3d_grad_weight<S: Scalar>(
    grad_out: &Tensor5<S>,
    x: &Tensor5<S>,
    geom: &ConvGeometry,
    weight: Dims,
) -> Result<Tensor5<S>> {
    let od = geom.output_dims(x.dims(), weight)?;
    if od != grad_out.dims() {
        return Err(Error::ShapeMismatch {
            op: "conv3d_grad_weight",
            left: od,
            right: grad_out.dims(),
        });
    }
    let mut gw = Tensor5::zeros(weight);
    if geom.unit_stride() {
        grad_weight_unit(grad_out, x, geom, &mut gw);
    } else {
        grad_weight_strided(grad_out, x, geom, &mut gw);
    }
    Ok(gw)
}

fn grad_weight_unit<S: Scalar>(gout: &Tensor5<S>, x: &Tensor5<S>, geom: &ConvGeometry, gw: &mut Tensor5<S>) {
    let id = x.dims();
    let od = gout.dims();
    let wd = gw.dims();
    let pad = geom.padding;
    let pg = Padded::new(id, od, pad);
    let cin_pg = wd.c;
    let cout_pg = wd.n / geom.groups;
    let taps = wd.t * wd.h * wd.w;

    let mut padded = vec![S::zero(); pg.len() * id.c];
    let mut spread = vec![S::zero(); pg.len()];
    for n in 0..id.n {
        for c in 0..id.c {
            pg.embed(x.volume(n, c), id, pad, &mut padded[c * pg.len()..(c + 1) * pg.len()]);
        }
        for co in 0..wd.n {
            let g = co / cout_pg;
            pg.spread(gout.volume(n, co), od, &mut spread);
            let go = &spread[..pg.strip];
            for cil in 0..cin_pg {
                let ci = g * cin_pg + cil;
                let src = &padded[ci * pg.len()..(ci + 1) * pg.len()];
                let wbase = (co * cin_pg + cil) * taps;
                let mut tap = 0;
                for dt in 0..wd.t {
                    for dh in 0..wd.h {
                        for dw in 0..wd.w {
                            let off = pg.offset(dt, dh, dw);
                            gw.data_mut()[wbase + tap] += dot(go, &src[off..off + pg.strip]);
                            tap += 1;
                        }
                    }
                }
            }
        }
    }
}

fn grad_weight_strided<S: Scalar>(gout: &Tensor5<S>, x: &Tensor5<S>, geom: &ConvGeometry, gw: &mut Tensor5<S>) {
    let id = x.dims();
    let od = gout.dims();
    let wd = gw.dims();
    let [st, sh, sw] = geom.stride;
    let [pt, ph, pw] = geom.padding;
    let cin_pg = wd.c;
    let cout_pg = wd.n / geom.groups;
    for n in 0..id.n {
        for co in 0..wd.n {
            let g = co / cout_pg;
            let go = gout.volume(n, co);
            for cil in 0..cin_pg {
                let src = x.volume(n, g * cin_pg + cil);
                for dt in 0..wd.t {
                    let (t_lo, t_hi) = out_range(dt, pt, st, id.t, od.t);
                    for dh in 0..wd.h {
                        let (h_lo, h_hi) = out_range(dh, ph, sh, id.h, od.h);
                        for dw in 0..wd.w {
                            let (w_lo, w_hi) = out_range(dw, pw, sw, id.w, od.w);
                            let mut acc = S::zero();
                            for to in t_lo..t_hi {
                                let ti = to * st + dt - pt;
                                for ho in h_lo..h_hi {
                                    let hi = ho * sh + dh - ph;
                                    let orow = (to * od.h + ho) * od.w;
                                    let irow = (ti * id.h + hi) * id.w;
                                    for wo in w_lo..w_hi {
                                        acc += go[orow + wo] * src[irow + wo * sw + dw - pw];
                                    }
                                }
                            }
                            let i = wd.index(co, cil, dt, dh, dw);
                            gw.data_mut()[i] += acc;
                        }
                    }
                }
            }
        }
    }
}

/// Spatial max pooling over `(H, W)` with zero-free (`-inf`) padding.
/// Returns the pooled tensor and, per output element, the flat input index of its maximum.
pub fn max_pool_hw<S: Scalar>(x: &Tensor5<S>, kernel: usize, stride: usize, pad: usize) -> Result<(Tensor5<S>, Vec<usize>)> {
    let d = x.dims();
    if kernel == 0 || stride == 0 || d.h + 2 * pad < kernel || d.w + 2 * pad < kernel {
        return Err(Error::InvalidShape(format!("max pool {kernel}/{stride}/{pad} on {d}")));
    }
    let ho = (d.h + 2 * pad - kernel) / stride + 1;
    let wo = (d.w + 2 * pad - kernel) / stride + 1;
    let od = d.with_hw(ho, wo);
    let mut out = Vec::with_capacity(od.numel());
    let mut arg = Vec::with_capacity(od.numel());
    for n in 0..d.n {
        for c in 0..d.c {
            for t in 0..d.t {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut best = S::neg_infinity();
                        let mut best_i = usize::MAX;
                        for kh in 0..kernel {
                            let ih = (oh * stride + kh) as isize - pad as isize;
                            if ih < 0 || ih >= d.h as isize {
                                continue;
                            }
                            for kw in 0..kernel {
                                let iw = (ow * stride + kw) as isize - pad as isize;
                                if iw < 0 || iw >= d.w as isize {
                                    continue;
                                }
                                let i = d.index(n, c, t, ih as usize, iw as usize);
                                if x.data()[i] > best {
                                    best = x.data()[i];
                                    best_i = i;
                                }
                            }
                        }
                        out.push(best);
                        arg.push(best_i);
                    }
                }
            }
        }
    }
    Ok((Tensor5::from_vec(od, out)?, arg))
}
