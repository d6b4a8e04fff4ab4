use serde::{Deserialize, Serialize};

use super::Tensor5;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Decomposition of a channel count as `C = C1 x ... x CK`.
///
/// The first factor is the outermost channel axis: the multi-index
/// `(c1, ..., cK)` maps to the flat channel `c1*(C2*...*CK) + ... + cK`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct ChannelFactorization {
    sizes: Vec<usize>,
}

impl ChannelFactorization {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::ConfigInvalid("factorization needs at least one sub-dimension".into()));
        }
        if sizes.contains(&0) {
            return Err(Error::ConfigInvalid(format!("factorization {sizes:?} has a zero factor")));
        }
        Ok(Self { sizes })
    }

    /// Checked against the channel count it must factor.
    pub fn for_channels(sizes: Vec<usize>, channels: usize) -> Result<Self> {
        let f = Self::new(sizes)?;
        f.check(channels)?;
        Ok(f)
    }

    /// Single sub-dimension holding every channel.
    pub fn trivial(channels: usize) -> Self {
        Self {
            sizes: vec![channels],
        }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Number of sub-dimensions `K`.
    pub fn k(&self) -> usize {
        self.sizes.len()
    }

    pub fn product(&self) -> usize {
        self.sizes.iter().product()
    }

    /// Size of the 1-based sub-dimension `k`.
    pub fn size(&self, k: usize) -> usize {
        self.sizes[k - 1]
    }

    pub fn check(&self, channels: usize) -> Result<()> {
        if self.product() != channels {
            return Err(Error::FactorizationMismatch {
                sizes: self.sizes.clone(),
                product: self.product(),
                channels,
            });
        }
        Ok(())
    }

    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        debug_assert!(flat < self.product());
        let mut idx = vec![0; self.sizes.len()];
        for (slot, &s) in idx.iter_mut().zip(&self.sizes).rev() {
            *slot = flat % s;
            flat /= s;
        }
        idx
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        debug_assert_eq!(multi.len(), self.sizes.len());
        multi
            .iter()
            .zip(&self.sizes)
            .fold(0, |acc, (&i, &s)| {
                debug_assert!(i < s);
                acc * s + i
            })
    }

    /// Splits a flat channel into `(group, position along sub-dimension k)`,
    /// where the group is the flattened multi-index with position `k` removed.
    pub fn group_of(&self, flat: usize, k: usize) -> (usize, usize) {
        let multi = self.multi_index(flat);
        let within = multi[k - 1];
        let group = multi
            .iter()
            .zip(&self.sizes)
            .enumerate()
            .filter(|&(i, _)| i != k - 1)
            .fold(0, |acc, (_, (&m, &s))| acc * s + m);
        (group, within)
    }

    /// Inverse of [`Self::group_of`].
    pub fn channel_of(&self, group: usize, within: usize, k: usize) -> usize {
        let mut multi = vec![0; self.sizes.len()];
        let mut g = group;
        for i in (0..self.sizes.len()).rev() {
            if i == k - 1 {
                continue;
            }
            multi[i] = g % self.sizes[i];
            g /= self.sizes[i];
        }
        multi[k - 1] = within;
        self.flat_index(&multi)
    }

    /// Channel order that makes sub-dimension `k` innermost: position
    /// `group * C_k + within` holds flat channel `channel_of(group, within, k)`.
    pub fn innermost_order(&self, k: usize) -> Vec<usize> {
        let ck = self.size(k);
        let groups = self.product() / ck;
        (0..groups)
            .flat_map(|g| (0..ck).map(move |i| (g, i)))
            .map(|(g, i)| self.channel_of(g, i, k))
            .collect()
    }

    /// Whether two flat channels share all sub-indices at the given 0-based positions.
    pub fn agree_on(&self, a: usize, b: usize, positions: impl IntoIterator<Item = usize>) -> bool {
        let ma = self.multi_index(a);
        let mb = self.multi_index(b);
        positions.into_iter().all(|p| ma[p] == mb[p])
    }
}

impl TryFrom<Vec<usize>> for ChannelFactorization {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ChannelFactorization> for Vec<usize> {
    fn from(f: ChannelFactorization) -> Self {
        f.sizes
    }
}

/// Read-only view of a tensor as `(N, C1, ..., CK, T, H, W)`.
#[derive(Debug, Clone, Copy)]
pub struct ChannelView<'a, S> {
    tensor: &'a Tensor5<S>,
    factorization: &'a ChannelFactorization,
}

impl<'a, S: Scalar> ChannelView<'a, S> {
    pub fn get(&self, n: usize, channel: &[usize], t: usize, h: usize, w: usize) -> S {
        self.tensor
            .get(n, self.factorization.flat_index(channel), t, h, w)
    }

    pub fn factorization(&self) -> &ChannelFactorization {
        self.factorization
    }

    pub fn tensor(&self) -> &Tensor5<S> {
        self.tensor
    }
}

impl<S: Scalar> Tensor5<S> {
    pub fn view_channels<'a>(&'a self, f: &'a ChannelFactorization) -> Result<ChannelView<'a, S>> {
        f.check(self.dims().c)?;
        Ok(ChannelView {
            tensor: self,
            factorization: f,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims;
    use proptest::prelude::*;

    #[test]
    fn positional_arithmetic() {
        let f = ChannelFactorization::new(vec![2, 3]).unwrap();
        assert_eq!(f.multi_index(5), vec![1, 2]);
        let f = ChannelFactorization::new(vec![8, 8]).unwrap();
        assert_eq!(f.multi_index(0), vec![0, 0]);
        assert_eq!(f.multi_index(63), vec![7, 7]);
    }

    #[test]
    fn mismatch_is_reported() {
        let t = Tensor5::<f64>::zeros(Dims::new(1, 12, 1, 1, 1));
        let f = ChannelFactorization::new(vec![2, 3]).unwrap();
        assert!(matches!(
            t.view_channels(&f),
            Err(Error::FactorizationMismatch { product: 6, channels: 12, .. })
        ));
        assert!(ChannelFactorization::new(vec![]).is_err());
        assert!(ChannelFactorization::new(vec![2, 0]).is_err());
    }

    #[test]
    fn view_reads_through_flat_layout() {
        let d = Dims::new(1, 6, 1, 1, 2);
        let t = Tensor5::<f64>::from_fn(d, |_, c, _, _, w| (c * 10 + w) as f64);
        let f = ChannelFactorization::new(vec![2, 3]).unwrap();
        let v = t.view_channels(&f).unwrap();
        assert_eq!(v.get(0, &[1, 2], 0, 0, 1), 51.0);
        assert_eq!(v.get(0, &[0, 1], 0, 0, 0), 10.0);
    }

    #[test]
    fn innermost_order_for_last_axis_is_identity() {
        let f = ChannelFactorization::new(vec![2, 3, 4]).unwrap();
        assert_eq!(f.innermost_order(3), (0..24).collect::<Vec<_>>());
        let o = f.innermost_order(1);
        // group 0 = (c2, c3) = (0, 0): channels 0, 12
        assert_eq!(&o[..2], &[0, 12]);
    }

    proptest! {
        #[test]
        fn flatten_inverts_multi_index(sizes in prop::collection::vec(1usize..5, 1..5)) {
            let f = ChannelFactorization::new(sizes).unwrap();
            for c in 0..f.product() {
                prop_assert_eq!(f.flat_index(&f.multi_index(c)), c);
                for k in 1..=f.k() {
                    let (g, i) = f.group_of(c, k);
                    prop_assert_eq!(f.channel_of(g, i, k), c);
                }
            }
        }

        #[test]
        fn innermost_order_is_a_permutation(sizes in prop::collection::vec(1usize..5, 1..5), k_pick in 0usize..4) {
            let f = ChannelFactorization::new(sizes).unwrap();
            let k = 1 + k_pick % f.k();
            let mut o = f.innermost_order(k);
            o.sort_unstable();
            prop_assert_eq!(o, (0..f.product()).collect::<Vec<_>>());
        }
    }
}
