//! Structural probes: receptive-field extents and channel influence.
//!
//! Probes run with all conv weights set to one, batch norm skipped and
//! excitation gates bypassed, so a nonzero response means a connecting path
//! exists rather than depending on weight values.

use serde::{Deserialize, Serialize};

use crate::block::CtModule;
use crate::error::{Error, Result};
use crate::init::rng;
use crate::layer::init_layers;
use crate::params::{Forward, ParamStore};
use crate::tensor::{Dims, Tensor5};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RfReport {
    /// Input `(T, H, W)` used for the probe.
    pub input: [usize; 3],
    /// Bounding-box size of the centered output unit's influence.
    pub extents: [usize; 3],
    /// Every cell of the bounding box has influence.
    pub full_cube: bool,
    /// Analytical prediction `1 + sum of (k - 1)` along each axis.
    pub predicted: [usize; 3],
}

impl RfReport {
    pub fn agrees(&self) -> bool {
        self.extents == self.predicted
    }

    pub fn render(&self) -> String {
        let [t, h, w] = self.extents;
        let [pt, ph, pw] = self.predicted;
        let [it, ih, iw] = self.input;
        format!(
            "input {it}x{ih}x{iw}: extents {t}x{h}x{w}, full cube: {}, predicted {pt}x{ph}x{pw}\n",
            self.full_cube
        )
    }
}

fn ones_store(m: &CtModule, prefix: &str, x: Dims) -> Result<ParamStore<f64>> {
    let mut store = ParamStore::new();
    init_layers(&mut store, &m.layers(prefix, x)?, &mut rng(0));
    store.fill(1.0);
    Ok(store)
}

/// Influence region of the centered output unit (summed over channels).
pub fn probe_rf(m: &CtModule, input: [usize; 3]) -> Result<RfReport> {
    let predicted = m.rf_extent();
    let [t, h, w] = input;
    let dims = Dims::new(1, m.channels, t, h, w);
    if !dims.is_valid() {
        return Err(Error::InputTooSmall(format!("probe input {t}x{h}x{w} is empty")));
    }
    let store = ones_store(m, "m", dims)?;
    let mut fwd = Forward::structural(&store);
    let x = fwd.graph.param(Tensor5::ones(dims));
    let y = m.forward(&mut fwd, "m", x)?;
    let mut mask = Tensor5::zeros(Dims::new(1, 1, t, h, w));
    mask.set(0, 0, t / 2, h / 2, w / 2, 1.0);
    let mask = fwd.input(mask);
    let picked = fwd.graph.mul_broadcast(y, mask)?;
    let loss = fwd.graph.sum(picked);
    let grads = fwd.graph.backward(loss)?;
    let g = grads.get(x).expect("probe input is differentiable");
    let mut hit = vec![false; t * h * w];
    for c in 0..m.channels {
        for (cell, v) in hit.iter_mut().zip(g.volume(0, c)) {
            *cell |= *v != 0.0;
        }
    }
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for (i, _) in hit.iter().enumerate().filter(|(_, &b)| b) {
        let p = [i / (h * w), (i / w) % h, i % w];
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    if lo[0] == usize::MAX {
        return Err(Error::InputTooSmall("no influence reached the input".into()));
    }
    for a in 0..3 {
        if lo[a] == 0 || hi[a] + 1 == input[a] {
            return Err(Error::InputTooSmall(format!(
                "influence touches the border of a {t}x{h}x{w} probe (module reach {}x{}x{})",
                predicted[0], predicted[1], predicted[2]
            )));
        }
    }
    let extents = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1];
    let mut full_cube = true;
    for dt in lo[0]..=hi[0] {
        for dh in lo[1]..=hi[1] {
            for dw in lo[2]..=hi[2] {
                full_cube &= hit[(dt * h + dh) * w + dw];
            }
        }
    }
    Ok(RfReport {
        input,
        extents,
        full_cube,
        predicted,
    })
}

/// Smallest probe input that keeps the predicted region off the border.
pub fn default_probe_input(m: &CtModule) -> [usize; 3] {
    m.rf_extent().map(|e| e + 4)
}

/// `M[out][in]`: whether input channel `in` can affect output channel `out`
/// after the first `prefix` sub-operations (all of them when `None`).
pub fn interaction_matrix(m: &CtModule, prefix: Option<usize>) -> Result<Vec<Vec<bool>>> {
    let mut m = m.clone();
    if let Some(p) = prefix {
        if p == 0 || p > m.sub_ops.len() {
            return Err(Error::ConfigInvalid(format!(
                "prefix {p} outside 1..={}",
                m.sub_ops.len()
            )));
        }
        m.sub_ops.truncate(p);
    }
    let c = m.channels;
    let dims = Dims::new(1, c, 1, 1, 1);
    let store = ones_store(&m, "m", dims)?;
    let mut out = vec![vec![false; c]; c];
    for src in 0..c {
        let mut probe = Tensor5::zeros(dims);
        probe.set(0, src, 0, 0, 0, 1.0);
        let mut fwd = Forward::structural(&store);
        let x = fwd.input(probe);
        let y = m.forward(&mut fwd, "m", x)?;
        for (dst, row) in out.iter_mut().enumerate() {
            row[src] = fwd.value(y).get(0, dst, 0, 0, 0) != 0.0;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::{build_preset, Branches, Middle, Preset, SubOp};
    use crate::tensor::ChannelFactorization;

    fn module(preset: Preset, c: usize) -> CtModule {
        match build_preset(preset).resolve(c).unwrap() {
            Middle::Ct(m) => m,
            Middle::Conv2d => panic!("no module"),
        }
    }

    #[test]
    fn single_parallel_subop_is_a_cross() {
        let f = ChannelFactorization::new(vec![2, 2]).unwrap();
        let m = CtModule {
            channels: 4,
            sub_ops: vec![SubOp {
                factorization: f,
                k: 1,
                branches: Branches::parallel3(),
            }],
            pw: false,
            te: false,
        };
        let r = probe_rf(&m, [7, 7, 7]).unwrap();
        assert_eq!(r.extents, [3, 3, 3]);
        assert!(!r.full_cube);
        assert!(r.agrees());
    }

    #[test]
    fn two_subops_reach_five() {
        let r = probe_rf(&module(Preset::Ctnet, 16), [9, 9, 9]).unwrap();
        assert_eq!(r.extents, [5, 5, 5]);
        let r = probe_rf(&module(Preset::C3d, 4), [7, 7, 7]).unwrap();
        assert_eq!(r.extents, [3, 3, 3]);
        assert!(r.full_cube);
    }

    #[test]
    fn small_input_is_rejected() {
        let m = module(Preset::Ctnet, 16);
        assert!(matches!(probe_rf(&m, [4, 4, 4]), Err(Error::InputTooSmall(_))));
        assert!(matches!(probe_rf(&m, [5, 9, 9]), Err(Error::InputTooSmall(_))));
    }

    #[test]
    fn csn_depthwise_is_diagonal() {
        let mut m = module(Preset::Csn, 6);
        m.sub_ops.remove(0);
        let im = interaction_matrix(&m, None).unwrap();
        for (o, row) in im.iter().enumerate() {
            for (i, &v) in row.iter().enumerate() {
                assert_eq!(v, o == i);
            }
        }
    }
}
