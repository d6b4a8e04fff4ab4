//! Dense 5-axis tensors `(N, C, T, H, W)` and the primitives built on them.
//!
//! Storage is contiguous and row-major with `W` fastest. Every operation is a
//! pure function of its inputs; none mutate shared state.

mod factor;
pub mod io;
mod norm;

pub use factor::{ChannelFactorization, ChannelView};
pub(crate) use norm::{channel_stats, stat_count, update_running};
pub use norm::{batch_norm, BatchNormOutput, BnParams, Mode, BN_EPS, BN_MOMENTUM};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Extents of the five axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(n: usize, c: usize, t: usize, h: usize, w: usize) -> Self {
        Self { n, c, t, h, w }
    }

    pub fn from_array(a: [usize; 5]) -> Self {
        Self::new(a[0], a[1], a[2], a[3], a[4])
    }

    pub fn to_array(self) -> [usize; 5] {
        [self.n, self.c, self.t, self.h, self.w]
    }

    pub fn numel(self) -> usize {
        self.n * self.c * self.t * self.h * self.w
    }

    /// Number of elements in one `(T, H, W)` volume.
    pub fn volume(self) -> usize {
        self.t * self.h * self.w
    }

    pub fn is_valid(self) -> bool {
        self.to_array().iter().all(|&d| d >= 1)
    }

    #[inline]
    pub fn index(self, n: usize, c: usize, t: usize, h: usize, w: usize) -> usize {
        debug_assert!(n < self.n && c < self.c && t < self.t && h < self.h && w < self.w);
        (((n * self.c + c) * self.t + t) * self.h + h) * self.w + w
    }

    pub fn with_c(self, c: usize) -> Self {
        Self { c, ..self }
    }

    pub fn with_t(self, t: usize) -> Self {
        Self { t, ..self }
    }

    pub fn with_hw(self, h: usize, w: usize) -> Self {
        Self { h, w, ..self }
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}x{}", self.n, self.c, self.t, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor5<S> {
    dims: Dims,
    data: Vec<S>,
}

impl<S: Scalar> Tensor5<S> {
    pub fn zeros(dims: Dims) -> Self {
        Self::full(dims, S::zero())
    }

    pub fn ones(dims: Dims) -> Self {
        Self::full(dims, S::one())
    }

    pub fn full(dims: Dims, value: S) -> Self {
        assert!(dims.is_valid(), "all dims must be >= 1, got {dims}");
        Self {
            dims,
            data: vec![value; dims.numel()],
        }
    }

    pub fn from_vec(dims: Dims, data: Vec<S>) -> Result<Self> {
        if !dims.is_valid() {
            return Err(Error::InvalidShape(format!("all dims must be >= 1, got {dims}")));
        }
        if data.len() != dims.numel() {
            return Err(Error::InvalidShape(format!(
                "data length {} does not match {dims} ({} elements)",
                data.len(),
                dims.numel()
            )));
        }
        Ok(Self { dims, data })
    }

    /// Builds a tensor by evaluating `f(n, c, t, h, w)` in storage order.
    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize, usize, usize) -> S) -> Self {
        assert!(dims.is_valid(), "all dims must be >= 1, got {dims}");
        let mut data = Vec::with_capacity(dims.numel());
        for n in 0..dims.n {
            for c in 0..dims.c {
                for t in 0..dims.t {
                    for h in 0..dims.h {
                        for w in 0..dims.w {
                            data.push(f(n, c, t, h, w));
                        }
                    }
                }
            }
        }
        Self { dims, data }
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, t: usize, h: usize, w: usize) -> S {
        self.data[self.dims.index(n, c, t, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, t: usize, h: usize, w: usize, v: S) {
        let i = self.dims.index(n, c, t, h, w);
        self.data[i] = v;
    }

    /// Slice holding the `(T, H, W)` volume of one `(n, c)` pair.
    #[inline]
    pub fn volume(&self, n: usize, c: usize) -> &[S] {
        let v = self.dims.volume();
        let start = (n * self.dims.c + c) * v;
        &self.data[start..start + v]
    }

    #[inline]
    pub fn volume_mut(&mut self, n: usize, c: usize) -> &mut [S] {
        let v = self.dims.volume();
        let start = (n * self.dims.c + c) * v;
        &mut self.data[start..start + v]
    }

    /// Same data under new dims with equal element count.
    pub fn reshape(self, dims: Dims) -> Result<Self> {
        Self::from_vec(dims, self.data)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        let out = Self {
            dims: self.dims,
            data: self.data.iter().map(|&x| f(x)).collect(),
        };
        out.debug_check_finite();
        out
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Self> {
        self.expect_same_dims(other, op)?;
        let out = Self {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        };
        out.debug_check_finite();
        Ok(out)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: S) -> Self {
        self.map(|x| x * s)
    }

    pub fn neg(&self) -> Self {
        self.map(|x| -x)
    }

    pub fn sigmoid(&self) -> Self {
        self.map(sigmoid)
    }

    pub fn relu(&self) -> Self {
        self.map(|x| if x > S::zero() { x } else { S::zero() })
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_dims(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Elementwise product where `attn` broadcasts along its size-1 axes.
    pub fn mul_broadcast(&self, attn: &Self) -> Result<Self> {
        let bd = broadcast_strides(self.dims, attn.dims, "mul_broadcast")?;
        let d = self.dims;
        let mut out = Vec::with_capacity(d.numel());
        let mut i = 0;
        for n in 0..d.n {
            for c in 0..d.c {
                for t in 0..d.t {
                    for h in 0..d.h {
                        let base = n * bd[0] + c * bd[1] + t * bd[2] + h * bd[3];
                        for w in 0..d.w {
                            out.push(self.data[i] * attn.data[base + w * bd[4]]);
                            i += 1;
                        }
                    }
                }
            }
        }
        let out = Self { dims: d, data: out };
        out.debug_check_finite();
        Ok(out)
    }

    /// Sums `self` down to `target`, whose axes must equal `self`'s or be 1.
    /// This is the adjoint of broadcasting `target` up to `self.dims()`.
    pub fn reduce_to(&self, target: Dims) -> Result<Self> {
        let bd = broadcast_strides(self.dims, target, "reduce_to")?;
        let d = self.dims;
        let mut out = vec![S::zero(); target.numel()];
        let mut i = 0;
        for n in 0..d.n {
            for c in 0..d.c {
                for t in 0..d.t {
                    for h in 0..d.h {
                        let base = n * bd[0] + c * bd[1] + t * bd[2] + h * bd[3];
                        for w in 0..d.w {
                            out[base + w * bd[4]] += self.data[i];
                            i += 1;
                        }
                    }
                }
            }
        }
        Ok(Self { dims: target, data: out })
    }

    /// Broadcasts `self` up to `target` (inverse shape rule of [`Self::reduce_to`]).
    pub fn broadcast_to(&self, target: Dims) -> Result<Self> {
        Self::ones(target).mul_broadcast(self)
    }

    /// Global temporal average pooling: mean over `T`, result has `T = 1`.
    pub fn t_pool(&self) -> Self {
        let d = self.dims;
        let plane = d.h * d.w;
        let inv = S::one() / S::lit(d.t as f64);
        let mut out = Self::zeros(d.with_t(1));
        for n in 0..d.n {
            for c in 0..d.c {
                let src = self.volume(n, c);
                let dst = out.volume_mut(n, c);
                for t in 0..d.t {
                    for (o, &x) in dst.iter_mut().zip(&src[t * plane..(t + 1) * plane]) {
                        *o += x;
                    }
                }
                dst.iter_mut().for_each(|o| *o *= inv);
            }
        }
        out
    }

    /// Global spatial average pooling: mean over `H` and `W` jointly.
    pub fn s_pool(&self) -> Self {
        let d = self.dims;
        let plane = d.h * d.w;
        let inv = S::one() / S::lit(plane as f64);
        let mut out = Self::zeros(d.with_hw(1, 1));
        for n in 0..d.n {
            for c in 0..d.c {
                let src = self.volume(n, c);
                let dst = out.volume_mut(n, c);
                for t in 0..d.t {
                    let s: S = src[t * plane..(t + 1) * plane].iter().copied().sum();
                    dst[t] = s * inv;
                }
            }
        }
        out
    }

    /// Mean over `(T, H, W)`.
    pub fn global_pool(&self) -> Self {
        self.t_pool().s_pool()
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> S {
        self.sum() / S::lit(self.data.len() as f64)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<S> {
        self.expect_same_dims(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(S::zero(), S::max))
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().map(|x| x.abs()).fold(S::zero(), S::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Converts element type, e.g. `f64` to `f32` for storage.
    pub fn cast<D: Scalar>(&self) -> Tensor5<D> {
        Tensor5 {
            dims: self.dims,
            data: self.data.iter().map(|x| D::lit(x.as_f64())).collect(),
        }
    }

    /// Gathers channels: output channel `i` is input channel `order[i]`.
    pub fn gather_channels(&self, order: &[usize]) -> Result<Self> {
        let d = self.dims;
        if order.len() != d.c || order.iter().any(|&c| c >= d.c) {
            return Err(Error::InvalidShape(format!(
                "channel order of length {} invalid for {} channels",
                order.len(),
                d.c
            )));
        }
        let mut out = Vec::with_capacity(d.numel());
        for n in 0..d.n {
            for &c in order {
                out.extend_from_slice(self.volume(n, c));
            }
        }
        Ok(Self { dims: d, data: out })
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack_batch(items: &[&Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidShape("cannot stack zero tensors".into()))?;
        let mut dims = first.dims;
        let mut data = Vec::with_capacity(first.data.len() * items.len());
        for it in items {
            if it.dims.with_n_one() != dims.with_n_one() {
                return Err(Error::ShapeMismatch {
                    op: "stack_batch",
                    left: dims,
                    right: it.dims,
                });
            }
            data.extend_from_slice(&it.data);
        }
        dims.n = items.iter().map(|t| t.dims.n).sum();
        Ok(Self { dims, data })
    }

    pub(crate) fn expect_same_dims(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::ShapeMismatch {
                op,
                left: self.dims,
                right: other.dims,
            });
        }
        Ok(())
    }

    #[inline]
    pub(crate) fn debug_check_finite(&self) {
        debug_assert!(self.all_finite(), "non-finite value produced ({})", self.dims);
    }
}

impl Dims {
    fn with_n_one(self) -> Self {
        Self { n: 1, ..self }
    }
}

#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Strides into a broadcast operand of dims `small`, zero along broadcast axes.
fn broadcast_strides(big: Dims, small: Dims, op: &'static str) -> Result<[usize; 5]> {
    let b = big.to_array();
    let s = small.to_array();
    if b.iter().zip(&s).any(|(&bb, &ss)| ss != bb && ss != 1) {
        return Err(Error::ShapeMismatch {
            op,
            left: big,
            right: small,
        });
    }
    let mut strides = [0usize; 5];
    let mut acc = 1;
    for axis in (0..5).rev() {
        strides[axis] = if s[axis] == 1 && b[axis] != 1 { 0 } else { acc };
        acc *= s[axis];
    }
    Ok(strides)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: Dims, seed: u64) -> Tensor5<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor5::from_fn(dims, |_, _, _, _, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn t_pool_single_frame_is_identity() {
        let x = random(Dims::new(2, 3, 1, 4, 5), 1);
        assert_eq!(x.t_pool(), x);
    }

    #[test]
    fn t_pool_two_values() {
        let x = Tensor5::from_vec(Dims::new(1, 1, 2, 1, 1), vec![1.0, 3.0]).unwrap();
        assert_eq!(x.t_pool().data(), &[2.0]);
    }

    #[test]
    fn t_pool_matches_loop_oracle() {
        let d = Dims::new(2, 4, 8, 3, 3);
        let x = random(d, 7);
        let out = x.t_pool();
        for n in 0..d.n {
            for c in 0..d.c {
                for h in 0..d.h {
                    for w in 0..d.w {
                        let mut s = 0.0;
                        for t in 0..d.t {
                            s += x.get(n, c, t, h, w);
                        }
                        assert!((out.get(n, c, 0, h, w) - s / d.t as f64).abs() < 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn s_pool_cases() {
        let x = random(Dims::new(2, 3, 4, 1, 1), 2);
        assert_eq!(x.s_pool(), x);
        let p = Tensor5::from_vec(Dims::new(1, 1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(p.s_pool().data(), &[2.5]);

        let d = Dims::new(2, 4, 8, 3, 5);
        let x = random(d, 9);
        let out = x.s_pool();
        for n in 0..d.n {
            for c in 0..d.c {
                for t in 0..d.t {
                    let mut s = 0.0;
                    for h in 0..d.h {
                        for w in 0..d.w {
                            s += x.get(n, c, t, h, w);
                        }
                    }
                    assert!((out.get(n, c, t, 0, 0) - s / 15.0).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn elementwise_basics() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        let a = random(Dims::new(2, 3, 2, 2, 2), 3);
        let ones = Tensor5::ones(Dims::new(1, 3, 1, 1, 1));
        assert_eq!(a.mul_broadcast(&ones).unwrap(), a);
        let z = a.add(&a.neg()).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_errors() {
        let a = Tensor5::<f64>::zeros(Dims::new(1, 2, 3, 4, 5));
        let b = Tensor5::<f64>::zeros(Dims::new(1, 2, 3, 4, 4));
        assert!(matches!(a.add(&b), Err(Error::ShapeMismatch { .. })));
        let bad = Tensor5::<f64>::zeros(Dims::new(1, 2, 2, 1, 1));
        assert!(matches!(a.mul_broadcast(&bad), Err(Error::ShapeMismatch { .. })));
        assert!(Tensor5::<f64>::from_vec(Dims::new(1, 1, 1, 1, 2), vec![0.0]).is_err());
        assert!(Tensor5::<f64>::from_vec(Dims::new(1, 0, 1, 1, 1), vec![]).is_err());
    }

    #[test]
    fn mul_broadcast_along_each_axis() {
        let d = Dims::new(2, 3, 4, 2, 3);
        let a = random(d, 4);
        for axis in 0..5 {
            let mut sd = d.to_array();
            sd[axis] = 1;
            let attn = random(Dims::from_array(sd), 10 + axis as u64);
            let out = a.mul_broadcast(&attn).unwrap();
            let full = attn.broadcast_to(d).unwrap();
            assert_eq!(out, a.mul(&full).unwrap());
            // reduce_to is the adjoint of broadcast
            let lhs: f64 = a.mul(&full).unwrap().sum();
            let rhs: f64 = a.reduce_to(attn.dims()).unwrap().mul(&attn).unwrap().sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_extremes_stay_finite() {
        let x = Tensor5::from_vec(Dims::new(1, 1, 1, 1, 4), vec![-800.0, -30.0, 30.0, 800.0]).unwrap();
        let s = x.sigmoid();
        assert!(s.all_finite());
        assert!(s.data()[1] > 0.0 && s.data()[2] < 1.0);
    }

    #[test]
    fn gather_channels_permutes() {
        let x = random(Dims::new(2, 3, 1, 2, 2), 5);
        let y = x.gather_channels(&[2, 0, 1]).unwrap();
        assert_eq!(y.volume(1, 0), x.volume(1, 2));
        assert_eq!(y.volume(0, 1), x.volume(0, 0));
        assert!(x.gather_channels(&[0, 1]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn pools_preserve_global_mean(
                n in 1usize..3, c in 1usize..4, t in 1usize..5, h in 1usize..5, w in 1usize..5,
                seed in 0u64..1000,
            ) {
                let x = random(Dims::new(n, c, t, h, w), seed);
                let m = x.mean();
                prop_assert!((x.t_pool().mean() - m).abs() < 1e-12);
                prop_assert!((x.s_pool().mean() - m).abs() < 1e-12);
            }

            #[test]
            fn sigmoid_in_open_interval(v in -30.0f64..30.0) {
                let s = sigmoid(v);
                prop_assert!(s > 0.0 && s < 1.0);
            }

            #[test]
            fn add_commutes_exactly(seed in 0u64..1000) {
                let d = Dims::new(1, 2, 2, 3, 3);
                let a = random(d, seed);
                let b = random(d, seed + 1);
                prop_assert_eq!(a.add(&b).unwrap(), b.add(&a).unwrap());
            }
        }
    }
}
