//! Tensor separable convolutions over a factorized channel axis.
//!
//! A TSConv on sub-dimension `k` mixes only the `C_k` channels that share
//! every other sub-index, i.e. a grouped convolution with `G = C / C_k`
//! groups once the channels are reordered so sub-dimension `k` is innermost.
//! [`tsconv_direct`] is the readable reference; [`tsconv_grouped`] is the
//! permute-and-group realization used everywhere else.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conv::{conv3d, conv_macs, ConvGeometry, Kernel3};
use crate::error::{Error, Result};
use crate::init::{he_uniform, SeededRng};
use crate::scalar::Scalar;
use crate::tensor::{io, ChannelFactorization, Dims, Tensor5};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TSConvSpec {
    pub factorization: ChannelFactorization,
    /// Active sub-dimension, 1-based.
    pub k: usize,
    pub kernel: Kernel3,
    #[serde(default)]
    pub bias: bool,
}

impl TSConvSpec {
    pub fn new(factorization: ChannelFactorization, k: usize, kernel: Kernel3) -> Result<Self> {
        let spec = Self {
            factorization,
            k,
            kernel,
            bias: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > self.factorization.k() {
            return Err(Error::ConfigInvalid(format!(
                "active sub-dimension {} outside 1..={}",
                self.k,
                self.factorization.k()
            )));
        }
        if self.kernel.volume() == 0 || !self.kernel.is_odd() {
            return Err(Error::KernelShapeViolation(format!(
                "kernel {} must have odd positive extents",
                self.kernel
            )));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.factorization.product()
    }

    /// Width `C_k` of each channel group.
    pub fn group_width(&self) -> usize {
        self.factorization.size(self.k)
    }

    pub fn groups(&self) -> usize {
        self.channels() / self.group_width()
    }

    /// Dims of the weight tensor, `(G * C_k, C_k, kt, kh, kw)`.
    pub fn weight_dims(&self) -> Dims {
        let ck = self.group_width();
        Dims::new(self.groups() * ck, ck, self.kernel.t, self.kernel.h, self.kernel.w)
    }

    pub fn with_kernel(&self, kernel: Kernel3) -> Self {
        Self {
            kernel,
            ..self.clone()
        }
    }

    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry::same(self.kernel, self.groups())
    }

    /// Channel order moving sub-dimension `k` innermost; `None` when already so.
    pub fn channel_order(&self) -> Option<Vec<usize>> {
        if self.k == self.factorization.k() {
            None
        } else {
            Some(self.factorization.innermost_order(self.k))
        }
    }

    /// Multiply-accumulates for one application on an input of `dims`.
    pub fn macs(&self, dims: Dims) -> u64 {
        conv_macs(dims, self.weight_dims())
    }

    pub fn params(&self) -> usize {
        self.weight_dims().numel() + if self.bias { self.channels() } else { 0 }
    }
}

/// Weights of one TSConv, conceptually shaped `(G, C_k, C_k, kt, kh, kw)`.
///
/// Stored flattened as a conv weight `(G * C_k, C_k, kt, kh, kw)`; group `g`
/// is the flattened multi-index with the active position removed.
#[derive(Debug, Clone, PartialEq)]
pub struct TSConvWeights<S> {
    pub weight: Tensor5<S>,
    pub bias: Option<Vec<S>>,
}

impl<S: Scalar> TSConvWeights<S> {
    pub fn new(spec: &TSConvSpec, weight: Tensor5<S>, bias: Option<Vec<S>>) -> Result<Self> {
        if weight.dims() != spec.weight_dims() {
            return Err(Error::ShapeMismatch {
                op: "tsconv weights",
                left: spec.weight_dims(),
                right: weight.dims(),
            });
        }
        if let Some(b) = &bias {
            if b.len() != spec.channels() {
                return Err(Error::InvalidShape(format!(
                    "bias of length {} for {} channels",
                    b.len(),
                    spec.channels()
                )));
            }
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(spec: &TSConvSpec) -> Self {
        Self {
            weight: Tensor5::zeros(spec.weight_dims()),
            bias: spec.bias.then(|| vec![S::zero(); spec.channels()]),
        }
    }

    pub fn ones(spec: &TSConvSpec) -> Self {
        Self {
            weight: Tensor5::ones(spec.weight_dims()),
            bias: None,
        }
    }

    /// Centered Dirac kernel with identity channel mixing.
    pub fn identity(spec: &TSConvSpec) -> Self {
        let k = spec.kernel;
        let ck = spec.group_width();
        let weight = Tensor5::from_fn(spec.weight_dims(), |row, ci, t, h, w| {
            let hit = row % ck == ci && t == k.t / 2 && h == k.h / 2 && w == k.w / 2;
            if hit {
                S::one()
            } else {
                S::zero()
            }
        });
        Self { weight, bias: None }
    }

    pub fn he_uniform(spec: &TSConvSpec, rng: &mut SeededRng) -> Self {
        let fan_in = spec.group_width() * spec.kernel.volume();
        Self {
            weight: he_uniform(spec.weight_dims(), fan_in, rng),
            bias: spec.bias.then(|| vec![S::zero(); spec.channels()]),
        }
    }

    /// Entry `w[g, c_out, c_in, dt, dh, dw]`.
    #[inline]
    pub fn at(&self, ck: usize, g: usize, c_out: usize, c_in: usize, dt: usize, dh: usize, dw: usize) -> S {
        self.weight.get(g * ck + c_out, c_in, dt, dh, dw)
    }
}

/// Dense tensorized convolution: full channel mixing, "same" padding, stride 1.
/// `w` has dims `(C, C, kt, kh, kw)`.
pub fn tconv_full<S: Scalar>(x: &Tensor5<S>, w: &Tensor5<S>) -> Result<Tensor5<S>> {
    let wd = w.dims();
    if wd.n != x.dims().c || wd.c != x.dims().c {
        return Err(Error::ShapeMismatch {
            op: "tconv_full",
            left: x.dims(),
            right: wd,
        });
    }
    let kernel = Kernel3::new(wd.t, wd.h, wd.w);
    if !kernel.is_odd() {
        return Err(Error::KernelShapeViolation(format!("kernel {kernel} must be odd")));
    }
    conv3d(x, w, &ConvGeometry::same(kernel, 1))
}

fn check_inputs<S: Scalar>(x: &Tensor5<S>, spec: &TSConvSpec, w: &TSConvWeights<S>) -> Result<()> {
    spec.validate()?;
    spec.factorization.check(x.dims().c)?;
    if w.weight.dims() != spec.weight_dims() {
        return Err(Error::ShapeMismatch {
            op: "tsconv",
            left: spec.weight_dims(),
            right: w.weight.dims(),
        });
    }
    Ok(())
}

/// Reference TSConv as an explicit loop nest over output channels, group
/// members and kernel taps.
pub fn tsconv_direct<S: Scalar>(x: &Tensor5<S>, spec: &TSConvSpec, w: &TSConvWeights<S>) -> Result<Tensor5<S>> {
    check_inputs(x, spec, w)?;
    let d = x.dims();
    let f = &spec.factorization;
    let ck = spec.group_width();
    let kern = spec.kernel;
    let [pt, ph, pw] = kern.same_padding();
    let mut out = Tensor5::zeros(d);
    for n in 0..d.n {
        for c_out in 0..d.c {
            let (g, i_out) = f.group_of(c_out, spec.k);
            for i_in in 0..ck {
                let c_in = f.channel_of(g, i_in, spec.k);
                for t in 0..d.t {
                    for h in 0..d.h {
                        for wo in 0..d.w {
                            let mut acc = S::zero();
                            for dt in 0..kern.t {
                                let ti = t as isize + dt as isize - pt as isize;
                                if ti < 0 || ti >= d.t as isize {
                                    continue;
                                }
                                for dh in 0..kern.h {
                                    let hi = h as isize + dh as isize - ph as isize;
                                    if hi < 0 || hi >= d.h as isize {
                                        continue;
                                    }
                                    for dw in 0..kern.w {
                                        let wi = wo as isize + dw as isize - pw as isize;
                                        if wi < 0 || wi >= d.w as isize {
                                            continue;
                                        }
                                        acc += w.at(ck, g, i_out, i_in, dt, dh, dw)
                                            * x.get(n, c_in, ti as usize, hi as usize, wi as usize);
                                    }
                                }
                            }
                            let idx = d.index(n, c_out, t, h, wo);
                            out.data_mut()[idx] += acc;
                        }
                    }
                }
            }
        }
    }
    add_bias(&mut out, w.bias.as_deref());
    Ok(out)
}

/// TSConv realized as permute, grouped convolution, inverse permute.
pub fn tsconv_grouped<S: Scalar>(x: &Tensor5<S>, spec: &TSConvSpec, w: &TSConvWeights<S>) -> Result<Tensor5<S>> {
    check_inputs(x, spec, w)?;
    tsconv_grouped_with_order(x, spec, w, spec.channel_order())
}

/// Same as [`tsconv_grouped`] but always takes the general permuting path.
pub fn tsconv_grouped_general<S: Scalar>(x: &Tensor5<S>, spec: &TSConvSpec, w: &TSConvWeights<S>) -> Result<Tensor5<S>> {
    check_inputs(x, spec, w)?;
    let order = spec.factorization.innermost_order(spec.k);
    tsconv_grouped_with_order(x, spec, w, Some(order))
}

fn tsconv_grouped_with_order<S: Scalar>(
    x: &Tensor5<S>,
    spec: &TSConvSpec,
    w: &TSConvWeights<S>,
    order: Option<Vec<usize>>,
) -> Result<Tensor5<S>> {
    let geom = spec.geometry();
    let mut out = match order {
        None => conv3d(x, &w.weight, &geom)?,
        Some(order) => {
            let permuted = x.gather_channels(&order)?;
            let y = conv3d(&permuted, &w.weight, &geom)?;
            y.gather_channels(&invert(&order))?
        }
    };
    add_bias(&mut out, w.bias.as_deref());
    Ok(out)
}

pub(crate) fn invert(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (i, &o) in order.iter().enumerate() {
        inv[o] = i;
    }
    inv
}

fn add_bias<S: Scalar>(out: &mut Tensor5<S>, bias: Option<&[S]>) {
    if let Some(b) = bias {
        let d = out.dims();
        for n in 0..d.n {
            for (c, &bv) in b.iter().enumerate() {
                out.volume_mut(n, c).iter_mut().for_each(|v| *v += bv);
            }
        }
    }
}

/// Spatial TSConv: kernel must be `(1, kh, kw)`.
pub fn s_tsconv<S: Scalar>(x: &Tensor5<S>, spec: &TSConvSpec, w: &TSConvWeights<S>) -> Result<Tensor5<S>> {
    if spec.kernel.t != 1 {
        return Err(Error::KernelShapeViolation(format!(
            "spatial TSConv needs kt = 1, got {}",
            spec.kernel
        )));
    }
    tsconv_grouped(x, spec, w)
}

/// Temporal TSConv: kernel must be `(kt, 1, 1)`.
pub fn t_tsconv<S: Scalar>(x: &Tensor5<S>, spec: &TSConvSpec, w: &TSConvWeights<S>) -> Result<Tensor5<S>> {
    if spec.kernel.h != 1 || spec.kernel.w != 1 {
        return Err(Error::KernelShapeViolation(format!(
            "temporal TSConv needs kh = kw = 1, got {}",
            spec.kernel
        )));
    }
    tsconv_grouped(x, spec, w)
}

/// Point-wise TSConv: kernel must be `(1, 1, 1)`.
pub fn pw_tsconv<S: Scalar>(x: &Tensor5<S>, spec: &TSConvSpec, w: &TSConvWeights<S>) -> Result<Tensor5<S>> {
    if spec.kernel != Kernel3::point() {
        return Err(Error::KernelShapeViolation(format!(
            "point-wise TSConv needs a 1x1x1 kernel, got {}",
            spec.kernel
        )));
    }
    tsconv_grouped(x, spec, w)
}

/// Full (ungrouped) 1x1x1 convolution; `w` has dims `(C_out, C_in, 1, 1, 1)`.
pub fn pointwise_conv<S: Scalar>(x: &Tensor5<S>, w: &Tensor5<S>) -> Result<Tensor5<S>> {
    let wd = w.dims();
    if (wd.t, wd.h, wd.w) != (1, 1, 1) || wd.c != x.dims().c {
        return Err(Error::ShapeMismatch {
            op: "pointwise_conv",
            left: x.dims(),
            right: wd,
        });
    }
    conv3d(x, w, &ConvGeometry::same(Kernel3::point(), 1))
}

/// How the spatial and temporal factors of one sub-operation are joined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Connection {
    /// Both factors read the same input and their outputs are summed.
    Parallel,
    /// The temporal factor reads the spatial factor's output.
    Serial,
    /// A single `kt x kh x kw` kernel replaces the pair.
    Coupling,
}

impl std::str::FromStr for Connection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "parallel" => Ok(Self::Parallel),
            "serial" => Ok(Self::Serial),
            "coupling" | "coupled" => Ok(Self::Coupling),
            other => Err(Error::ConfigInvalid(format!("unknown connection `{other}`"))),
        }
    }
}

impl std::fmt::Display for Connection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Parallel => "parallel",
            Self::Serial => "serial",
            Self::Coupling => "coupling",
        })
    }
}

/// Joins the branch outputs of one sub-operation.
///
/// `Parallel` sums `xs` and `xt`. For `Serial` the caller already fed `xs`
/// into the temporal TSConv, so `xt` is the result; for `Coupling` the single
/// coupled output is passed as `xs`.
pub fn combine<S: Scalar>(xs: &Tensor5<S>, xt: &Tensor5<S>, mode: Connection) -> Result<Tensor5<S>> {
    xs.expect_same_dims(xt, "combine")?;
    Ok(match mode {
        Connection::Parallel => xs.add(xt)?,
        Connection::Serial => xt.clone(),
        Connection::Coupling => xs.clone(),
    })
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    spec: TSConvSpec,
    weight_dims: Dims,
    bias: Option<Vec<f64>>,
}

/// Writes `<stem>.ctn` (weights) and `<stem>.json` (spec and bias).
pub fn save_tsconv<S: Scalar>(stem: impl AsRef<Path>, spec: &TSConvSpec, w: &TSConvWeights<S>) -> Result<()> {
    let stem = stem.as_ref();
    io::write_tensor(stem.with_extension("ctn"), &w.weight)?;
    let sidecar = Sidecar {
        spec: spec.clone(),
        weight_dims: w.weight.dims(),
        bias: w.bias.as_ref().map(|b| b.iter().map(|v| v.as_f64()).collect()),
    };
    let json = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(stem.with_extension("json"), json)?;
    Ok(())
}

pub fn load_tsconv<S: Scalar>(stem: impl AsRef<Path>) -> Result<(TSConvSpec, TSConvWeights<S>)> {
    let stem = stem.as_ref();
    let text = fs::read_to_string(stem.with_extension("json"))?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
    sidecar.spec.validate()?;
    let weight = io::read_tensor(stem.with_extension("ctn"))?.to_precision::<S>();
    let bias = sidecar.bias.map(|b| b.into_iter().map(S::lit).collect());
    let w = TSConvWeights::new(&sidecar.spec, weight, bias)?;
    Ok((sidecar.spec, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::rng;
    use rand::Rng;

    fn random(dims: Dims, r: &mut SeededRng) -> Tensor5<f64> {
        Tensor5::from_fn(dims, |_, _, _, _, _| r.gen_range(-1.0..1.0))
    }

    fn fac(s: &[usize]) -> ChannelFactorization {
        ChannelFactorization::new(s.to_vec()).unwrap()
    }

    #[test]
    fn dirac_tconv_is_identity() {
        let mut r = rng(1);
        let x = random(Dims::new(1, 3, 4, 4, 4), &mut r);
        let w = Tensor5::from_fn(Dims::new(3, 3, 3, 3, 3), |co, ci, t, h, w| {
            if co == ci && (t, h, w) == (1, 1, 1) {
                1.0
            } else {
                0.0
            }
        });
        assert!(tconv_full(&x, &w).unwrap().max_abs_diff(&x).unwrap() < 1e-15);
    }

    #[test]
    fn ones_kernel_on_one_hot_fills_neighbourhood() {
        let c = 2;
        let mut x = Tensor5::<f64>::zeros(Dims::new(1, c, 5, 5, 5));
        x.set(0, 0, 2, 2, 2, 1.0);
        let w = Tensor5::ones(Dims::new(c, c, 3, 3, 3));
        let y = tconv_full(&x, &w).unwrap();
        // every output channel sees the impulse across the 3x3x3 neighbourhood
        let mut count = 0;
        for co in 0..c {
            for t in 0..5 {
                for h in 0..5 {
                    for ww in 0..5 {
                        let inside = [t, h, ww].iter().all(|&p| (1..=3).contains(&p));
                        let v = y.get(0, co, t, h, ww);
                        assert_eq!(v, if inside { 1.0 } else { 0.0 });
                        count += v as usize;
                    }
                }
            }
        }
        assert_eq!(count, 27 * c);
    }

    /// Six-nested-loop definition of the dense convolution.
    fn dense_oracle(x: &Tensor5<f64>, w: &Tensor5<f64>) -> Tensor5<f64> {
        let d = x.dims();
        let wd = w.dims();
        let (pt, ph, pw) = (wd.t / 2, wd.h / 2, wd.w / 2);
        Tensor5::from_fn(d, |n, co, t, h, ww| {
            let mut s = 0.0;
            for ci in 0..d.c {
                for dt in 0..wd.t {
                    for dh in 0..wd.h {
                        for dw in 0..wd.w {
                            let (ti, hi, wi) = (t + dt, h + dh, ww + dw);
                            if ti < pt || hi < ph || wi < pw {
                                continue;
                            }
                            let (ti, hi, wi) = (ti - pt, hi - ph, wi - pw);
                            if ti >= d.t || hi >= d.h || wi >= d.w {
                                continue;
                            }
                            s += w.get(co, ci, dt, dh, dw) * x.get(n, ci, ti, hi, wi);
                        }
                    }
                }
            }
            s
        })
    }

    #[test]
    fn tconv_full_matches_loop_oracle() {
        let mut r = rng(2);
        let x = random(Dims::new(1, 4, 3, 5, 5), &mut r);
        let w = random(Dims::new(4, 4, 3, 3, 3), &mut r);
        let diff = tconv_full(&x, &w).unwrap().max_abs_diff(&dense_oracle(&x, &w)).unwrap();
        assert!(diff < 1e-12);
    }

    #[test]
    fn k1_tsconv_is_tconv_full() {
        let mut r = rng(3);
        let spec = TSConvSpec::new(fac(&[5]), 1, Kernel3::cube(3)).unwrap();
        let w = TSConvWeights::he_uniform(&spec, &mut r);
        let x = random(Dims::new(2, 5, 3, 4, 4), &mut r);
        let a = tsconv_direct(&x, &spec, &w).unwrap();
        let b = tconv_full(&x, &w.weight).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn unit_group_is_depthwise() {
        let mut r = rng(4);
        let spec = TSConvSpec::new(fac(&[4, 1]), 2, Kernel3::cube(3)).unwrap();
        assert_eq!(spec.groups(), 4);
        let w = TSConvWeights::he_uniform(&spec, &mut r);
        let x = random(Dims::new(1, 4, 3, 4, 4), &mut r);
        let y = tsconv_direct(&x, &spec, &w).unwrap();
        for c in 0..4 {
            let xc = Tensor5::from_vec(Dims::new(1, 1, 3, 4, 4), x.volume(0, c).to_vec()).unwrap();
            let wc = Tensor5::from_vec(Dims::new(1, 1, 3, 3, 3), w.weight.volume(c, 0).to_vec()).unwrap();
            let yc = dense_oracle(&xc, &wc);
            for (a, b) in yc.data().iter().zip(y.volume(0, c)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    /// Brute-force sum over every input channel, gated by the index predicate.
    fn masked_oracle(x: &Tensor5<f64>, spec: &TSConvSpec, w: &TSConvWeights<f64>) -> Tensor5<f64> {
        let d = x.dims();
        let f = &spec.factorization;
        let ck = spec.group_width();
        let kern = spec.kernel;
        let (pt, ph, pw) = (kern.t / 2, kern.h / 2, kern.w / 2);
        let others: Vec<usize> = (0..f.k()).filter(|&p| p != spec.k - 1).collect();
        Tensor5::from_fn(d, |n, co, t, h, ww| {
            let mo = f.multi_index(co);
            let mut s = 0.0;
            for ci in 0..d.c {
                if !f.agree_on(co, ci, others.iter().copied()) {
                    continue;
                }
                let mi = f.multi_index(ci);
                let (g, _) = f.group_of(co, spec.k);
                for dt in 0..kern.t {
                    for dh in 0..kern.h {
                        for dw in 0..kern.w {
                            let (ti, hi, wi) = (t + dt, h + dh, ww + dw);
                            if ti < pt || hi < ph || wi < pw || ti - pt >= d.t || hi - ph >= d.h || wi - pw >= d.w {
                                continue;
                            }
                            s += w.at(ck, g, mo[spec.k - 1], mi[spec.k - 1], dt, dh, dw)
                                * x.get(n, ci, ti - pt, hi - ph, wi - pw);
                        }
                    }
                }
            }
            s
        })
    }

    #[test]
    fn direct_matches_brute_force_c6() {
        let mut r = rng(5);
        let spec = TSConvSpec::new(fac(&[2, 3]), 2, Kernel3::spatial(3, 3)).unwrap();
        let w = TSConvWeights::he_uniform(&spec, &mut r);
        let x = random(Dims::new(2, 6, 2, 5, 4), &mut r);
        let a = tsconv_direct(&x, &spec, &w).unwrap();
        assert!(a.max_abs_diff(&masked_oracle(&x, &spec, &w)).unwrap() < 1e-12);
        let spec1 = spec.with_kernel(Kernel3::new(3, 1, 3));
        let spec1 = TSConvSpec { k: 1, ..spec1 };
        let w1 = TSConvWeights::he_uniform(&spec1, &mut r);
        let a = tsconv_direct(&x, &spec1, &w1).unwrap();
        assert!(a.max_abs_diff(&masked_oracle(&x, &spec1, &w1)).unwrap() < 1e-12);
    }

    #[test]
    fn grouped_identity_weights() {
        let mut r = rng(6);
        let spec = TSConvSpec::new(fac(&[2, 3, 2]), 2, Kernel3::new(3, 3, 1)).unwrap();
        let x = random(Dims::new(1, 12, 3, 3, 3), &mut r);
        let y = tsconv_grouped(&x, &spec, &TSConvWeights::identity(&spec)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn fast_path_equals_general_path() {
        let mut r = rng(7);
        let spec = TSConvSpec::new(fac(&[3, 4]), 2, Kernel3::cube(3)).unwrap();
        assert!(spec.channel_order().is_none());
        let w = TSConvWeights::he_uniform(&spec, &mut r);
        let x = random(Dims::new(1, 12, 3, 4, 4), &mut r);
        let a = tsconv_grouped(&x, &spec, &w).unwrap();
        let b = tsconv_grouped_general(&x, &spec, &w).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn spatial_on_single_frame_is_framewise_2d() {
        let mut r = rng(8);
        let spec = TSConvSpec::new(fac(&[2, 2]), 1, Kernel3::spatial(3, 3)).unwrap();
        let w = TSConvWeights::he_uniform(&spec, &mut r);
        let x = random(Dims::new(1, 4, 1, 5, 5), &mut r);
        let y = s_tsconv(&x, &spec, &w).unwrap();
        // 2-D loop oracle over groups {0,2} and {1,3}
        for co in 0..4 {
            let (g, io) = spec.factorization.group_of(co, 1);
            for h in 0..5 {
                for ww in 0..5 {
                    let mut s = 0.0;
                    for ii in 0..2 {
                        let ci = spec.factorization.channel_of(g, ii, 1);
                        for dh in 0..3 {
                            for dw in 0..3 {
                                let (hi, wi) = (h as isize + dh as isize - 1, ww as isize + dw as isize - 1);
                                if (0..5).contains(&hi) && (0..5).contains(&wi) {
                                    s += w.at(2, g, io, ii, 0, dh, dw) * x.get(0, ci, 0, hi as usize, wi as usize);
                                }
                            }
                        }
                    }
                    assert!((s - y.get(0, co, 0, h, ww)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn temporal_convex_weights_on_static_input() {
        let mut r = rng(9);
        // one member per group, so every output reads a single channel's frames
        let spec = TSConvSpec::new(fac(&[6, 1]), 2, Kernel3::temporal(3)).unwrap();
        let frame = random(Dims::new(1, 6, 1, 3, 3), &mut r);
        let x = Tensor5::from_fn(Dims::new(1, 6, 5, 3, 3), |n, c, _, h, w| frame.get(n, c, 0, h, w));
        let mut w = TSConvWeights::zeros(&spec);
        for c in 0..6 {
            let raw: Vec<f64> = (0..3).map(|_| r.gen_range(0.1..1.0)).collect();
            let total: f64 = raw.iter().sum();
            for (dt, v) in raw.iter().enumerate() {
                w.weight.set(c, 0, dt, 0, 0, v / total);
            }
        }
        let y = t_tsconv(&x, &spec, &w).unwrap();
        // zero padding removes a tap at the first and last frame
        for c in 0..6 {
            for t in 1..4 {
                for h in 0..3 {
                    for ww in 0..3 {
                        assert!((y.get(0, c, t, h, ww) - x.get(0, c, t, h, ww)).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn temporal_commutes_with_spatial_permutation() {
        let mut r = rng(10);
        let spec = TSConvSpec::new(fac(&[2, 2]), 2, Kernel3::temporal(3)).unwrap();
        let w = TSConvWeights::he_uniform(&spec, &mut r);
        let d = Dims::new(1, 4, 4, 3, 3);
        let x = random(d, &mut r);
        let perm: Vec<usize> = vec![4, 7, 1, 0, 8, 2, 6, 3, 5];
        let shuffle = |t: &Tensor5<f64>| {
            Tensor5::from_fn(d, |n, c, tt, h, ww| {
                let p = perm[h * 3 + ww];
                t.get(n, c, tt, p / 3, p % 3)
            })
        };
        let a = shuffle(&t_tsconv(&x, &spec, &w).unwrap());
        let b = t_tsconv(&shuffle(&x), &spec, &w).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-14);
    }

    #[test]
    fn kernel_shape_enforcement() {
        let mut r = rng(11);
        let spec = TSConvSpec::new(fac(&[2, 2]), 1, Kernel3::cube(3)).unwrap();
        let w = TSConvWeights::he_uniform(&spec, &mut r);
        let x = random(Dims::new(1, 4, 3, 3, 3), &mut r);
        assert!(matches!(s_tsconv(&x, &spec, &w), Err(Error::KernelShapeViolation(_))));
        assert!(matches!(t_tsconv(&x, &spec, &w), Err(Error::KernelShapeViolation(_))));
        assert!(matches!(pw_tsconv(&x, &spec, &w), Err(Error::KernelShapeViolation(_))));
        assert!(TSConvSpec::new(fac(&[2, 2]), 1, Kernel3::new(2, 3, 3)).is_err());
        assert!(TSConvSpec::new(fac(&[2, 2]), 3, Kernel3::point()).is_err());
        let bad = random(Dims::new(1, 5, 3, 3, 3), &mut r);
        assert!(matches!(
            tsconv_grouped(&bad, &spec, &w),
            Err(Error::FactorizationMismatch { .. })
        ));
    }

    #[test]
    fn combine_modes() {
        let mut r = rng(12);
        let d = Dims::new(1, 2, 2, 2, 2);
        let xs = random(d, &mut r);
        let xt = random(d, &mut r);
        let z = Tensor5::zeros(d);
        assert_eq!(combine(&xs, &z, Connection::Parallel).unwrap(), xs);
        assert_eq!(
            combine(&xs, &xt, Connection::Parallel).unwrap(),
            combine(&xt, &xs, Connection::Parallel).unwrap()
        );
        assert_eq!(combine(&xs, &xt, Connection::Serial).unwrap(), xt);
        assert_eq!(combine(&xs, &xt, Connection::Coupling).unwrap(), xs);
        let other = Tensor5::zeros(d.with_c(3));
        assert!(combine(&xs, &other, Connection::Parallel).is_err());
    }

    #[test]
    fn serial_and_parallel_differ() {
        let mut r = rng(13);
        let f = fac(&[2, 2]);
        let ss = TSConvSpec::new(f.clone(), 1, Kernel3::spatial(3, 3)).unwrap();
        let st = TSConvSpec::new(f, 1, Kernel3::temporal(3)).unwrap();
        let ws = TSConvWeights::he_uniform(&ss, &mut r);
        let wt = TSConvWeights::he_uniform(&st, &mut r);
        let x = random(Dims::new(1, 4, 4, 4, 4), &mut r);
        let xs = s_tsconv(&x, &ss, &ws).unwrap();
        let par = combine(&xs, &t_tsconv(&x, &st, &wt).unwrap(), Connection::Parallel).unwrap();
        let ser = combine(&xs, &t_tsconv(&xs, &st, &wt).unwrap(), Connection::Serial).unwrap();
        assert!(par.max_abs_diff(&ser).unwrap() > 1e-3);
    }

    #[test]
    fn pointwise_cases() {
        let mut r = rng(14);
        let x = random(Dims::new(2, 2, 2, 3, 3), &mut r);
        let eye = Tensor5::from_fn(Dims::new(2, 2, 1, 1, 1), |o, i, _, _, _| if o == i { 1.0 } else { 0.0 });
        assert_eq!(pointwise_conv(&x, &eye).unwrap(), x);
        let swap = Tensor5::from_fn(Dims::new(2, 2, 1, 1, 1), |o, i, _, _, _| if o != i { 1.0 } else { 0.0 });
        let y = pointwise_conv(&x, &swap).unwrap();
        assert_eq!(y.volume(1, 0), x.volume(1, 1));
        assert_eq!(y.volume(0, 1), x.volume(0, 0));
        // matmul oracle per position with C_out != C_in
        let w = random(Dims::new(3, 2, 1, 1, 1), &mut r);
        let y = pointwise_conv(&x, &w).unwrap();
        for n in 0..2 {
            for p in 0..18 {
                for o in 0..3 {
                    let s: f64 = (0..2).map(|i| w.get(o, i, 0, 0, 0) * x.volume(n, i)[p]).sum();
                    assert!((s - y.volume(n, o)[p]).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn pw_tsconv_cases() {
        let mut r = rng(15);
        let f = fac(&[3, 2, 2]);
        let x = random(Dims::new(1, 12, 2, 2, 2), &mut r);
        for k in 1..=3 {
            let spec = TSConvSpec::new(f.clone(), k, Kernel3::point()).unwrap();
            let w = TSConvWeights::he_uniform(&spec, &mut r);
            let a = pw_tsconv(&x, &spec, &w).unwrap();
            let b = tsconv_direct(&x, &spec, &w).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
        }
        // C_k = 1 scales each channel independently
        let spec = TSConvSpec::new(fac(&[12, 1]), 2, Kernel3::point()).unwrap();
        let w = TSConvWeights::he_uniform(&spec, &mut r);
        let y = pw_tsconv(&x, &spec, &w).unwrap();
        for c in 0..12 {
            let s = w.weight.get(c, 0, 0, 0, 0);
            for (a, b) in y.volume(0, c).iter().zip(x.volume(0, c)) {
                assert!((a - s * b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn pw_group_structure_probe() {
        let f = fac(&[2, 3, 2]);
        let k = 2;
        let spec = TSConvSpec::new(f.clone(), k, Kernel3::point()).unwrap();
        let w = TSConvWeights::<f64>::ones(&spec);
        for ci in 0..12 {
            let x = Tensor5::from_fn(Dims::new(1, 12, 1, 1, 1), |_, c, _, _, _| if c == ci { 1.0 } else { 0.0 });
            let y = pw_tsconv(&x, &spec, &w).unwrap();
            for co in 0..12 {
                let expect = f.agree_on(co, ci, [0, 2]);
                assert_eq!(y.get(0, co, 0, 0, 0) != 0.0, expect, "out {co} in {ci}");
            }
        }
    }

    #[test]
    fn bias_is_added_per_channel() {
        let mut r = rng(16);
        let mut spec = TSConvSpec::new(fac(&[2, 2]), 1, Kernel3::point()).unwrap();
        spec.bias = true;
        let mut w = TSConvWeights::<f64>::zeros(&spec);
        w.bias = Some(vec![1.0, 2.0, 3.0, 4.0]);
        let x = random(Dims::new(1, 4, 1, 2, 2), &mut r);
        let y = tsconv_grouped(&x, &spec, &w).unwrap();
        let z = tsconv_direct(&x, &spec, &w).unwrap();
        assert_eq!(y, z);
        assert!(y.volume(0, 3).iter().all(|&v| v == 4.0));
    }

    #[test]
    fn weights_roundtrip_through_sidecar() {
        let dir = std::env::temp_dir().join(format!("ctnet-tsconv-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let mut r = rng(17);
        let spec = TSConvSpec::new(fac(&[4, 2]), 1, Kernel3::new(3, 1, 1)).unwrap();
        let w = TSConvWeights::<f64>::he_uniform(&spec, &mut r);
        let stem = dir.join("w");
        save_tsconv(&stem, &spec, &w).unwrap();
        let (spec2, w2) = load_tsconv::<f64>(&stem).unwrap();
        assert_eq!(spec2, spec);
        assert_eq!(w2, w);
        std::fs::remove_dir_all(&dir).ok();
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn config() -> impl Strategy<Value = (Vec<usize>, usize, [usize; 3], u64)> {
            (
                prop::collection::vec(1usize..4, 1..4),
                0usize..4,
                prop::array::uniform3(prop::sample::select(vec![1usize, 3])),
                0u64..10_000,
            )
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn grouped_equals_direct((sizes, kp, k3, seed) in config()) {
                let f = ChannelFactorization::new(sizes).unwrap();
                let k = 1 + kp % f.k();
                let spec = TSConvSpec::new(f.clone(), k, Kernel3::new(k3[0], k3[1], k3[2])).unwrap();
                let mut r = rng(seed);
                let w = TSConvWeights::he_uniform(&spec, &mut r);
                let x = random(Dims::new(1, f.product(), 3, 3, 4), &mut r);
                let a = tsconv_grouped(&x, &spec, &w).unwrap();
                let b = tsconv_direct(&x, &spec, &w).unwrap();
                prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-10);
            }

            #[test]
            fn linear_in_input((sizes, kp, k3, seed) in config(), alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
                let f = ChannelFactorization::new(sizes).unwrap();
                let k = 1 + kp % f.k();
                let spec = TSConvSpec::new(f.clone(), k, Kernel3::new(k3[0], k3[1], k3[2])).unwrap();
                let mut r = rng(seed);
                let w = TSConvWeights::he_uniform(&spec, &mut r);
                let d = Dims::new(2, f.product(), 3, 3, 3);
                let x = random(d, &mut r);
                let y = random(d, &mut r);
                let lhs = tsconv_grouped(&x.scale(alpha).add(&y.scale(beta)).unwrap(), &spec, &w).unwrap();
                let rhs = tsconv_grouped(&x, &spec, &w).unwrap().scale(alpha)
                    .add(&tsconv_grouped(&y, &spec, &w).unwrap().scale(beta)).unwrap();
                prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
                let full_w = random(Dims::new(f.product(), f.product(), 1, 3, 1), &mut r);
                let lhs = tconv_full(&x.scale(alpha).add(&y.scale(beta)).unwrap(), &full_w).unwrap();
                let rhs = tconv_full(&x, &full_w).unwrap().scale(alpha)
                    .add(&tconv_full(&y, &full_w).unwrap().scale(beta)).unwrap();
                prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
            }

            #[test]
            fn macs_below_dense_when_grouped((sizes, kp, k3, _seed) in config()) {
                let f = ChannelFactorization::new(sizes).unwrap();
                let k = 1 + kp % f.k();
                let kern = Kernel3::new(k3[0], k3[1], k3[2]);
                let spec = TSConvSpec::new(f.clone(), k, kern).unwrap();
                let d = Dims::new(1, f.product(), 8, 4, 4);
                let c = f.product() as u64;
                let ck = spec.group_width() as u64;
                let pos = (8 * 4 * 4) as u64;
                prop_assert_eq!(spec.macs(d), pos * c * ck * kern.volume() as u64);
                if spec.group_width() < f.product() {
                    prop_assert!(spec.macs(d) < pos * c * c * kern.volume() as u64);
                }
            }

            #[test]
            fn spatial_commutes_with_temporal_shift(seed in 0u64..1000) {
                let mut r = rng(seed);
                let spec = TSConvSpec::new(ChannelFactorization::new(vec![2, 2]).unwrap(), 1, Kernel3::spatial(3, 3)).unwrap();
                let w = TSConvWeights::he_uniform(&spec, &mut r);
                let d = Dims::new(1, 4, 5, 4, 4);
                let x = random(d, &mut r);
                let shift = |t: &Tensor5<f64>| Tensor5::from_fn(d, |n, c, tt, h, ww| if tt == 0 { 0.0 } else { t.get(n, c, tt - 1, h, ww) });
                let a = shift(&s_tsconv(&x, &spec, &w).unwrap());
                let b = s_tsconv(&shift(&x), &spec, &w).unwrap();
                // spatial-only kernels have no temporal boundary effect
                prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-14);
            }
        }
    }
}
