//! Flat layer descriptions shared by parameter initialization and costing.

use serde::{Deserialize, Serialize};

use crate::conv::{conv_macs, ConvGeometry};
use crate::init::{he_uniform, uniform, SeededRng};
use crate::params::{insert_bn, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Dims, Tensor5};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Linear,
    Bn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerDesc {
    pub name: String,
    pub kind: LayerKind,
    pub output: Dims,
    /// Weight dims `(C_out, C_in / G, kt, kh, kw)`; channel count for norms.
    pub weight: Dims,
    pub geometry: ConvGeometry,
    pub bias: bool,
}

impl LayerDesc {
    pub fn conv(name: impl Into<String>, output: Dims, weight: Dims, geometry: ConvGeometry) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Conv,
            output,
            weight,
            geometry,
            bias: false,
        }
    }

    pub fn linear(name: impl Into<String>, output: Dims, inputs: usize) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Linear,
            output,
            weight: Dims::new(output.c, inputs, 1, 1, 1),
            geometry: ConvGeometry::same(crate::conv::Kernel3::point(), 1),
            bias: true,
        }
    }

    pub fn bn(name: impl Into<String>, output: Dims) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Bn,
            output,
            weight: Dims::new(output.c, 1, 1, 1, 1),
            geometry: ConvGeometry::same(crate::conv::Kernel3::point(), 1),
            bias: false,
        }
    }

    pub fn macs(&self) -> u64 {
        match self.kind {
            LayerKind::Conv | LayerKind::Linear => conv_macs(self.output, self.weight),
            LayerKind::Bn => 0,
        }
    }

    pub fn params(&self) -> u64 {
        match self.kind {
            LayerKind::Conv | LayerKind::Linear => {
                (self.weight.numel() + if self.bias { self.weight.n } else { 0 }) as u64
            }
            LayerKind::Bn => 2 * self.weight.n as u64,
        }
    }
}

/// Allocates every layer's parameters: fan-in uniform conv weights, linear
/// weights on `±1/sqrt(fan_in)`, zero biases, identity norms.
pub fn init_layers<S: Scalar>(store: &mut ParamStore<S>, layers: &[LayerDesc], rng: &mut SeededRng) {
    for l in layers {
        let w = l.weight;
        let fan_in = w.c * w.t * w.h * w.w;
        match l.kind {
            LayerKind::Conv => store.insert(format!("{}.weight", l.name), he_uniform::<S>(w, fan_in, rng)),
            LayerKind::Linear => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                store.insert(format!("{}.weight", l.name), uniform::<S>(w, bound, rng));
            }
            LayerKind::Bn => insert_bn(store, &l.name, w.n),
        }
        if l.bias {
            store.insert(format!("{}.bias", l.name), Tensor5::zeros(Dims::new(1, w.n, 1, 1, 1)));
        }
    }
}
