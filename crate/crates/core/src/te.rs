//! Tensor Excitation: spatial, temporal and channel sigmoid gates, each
//! computed by a pooled TSConv grouped on the sub-dimension of the
//! convolution it follows.
//!
//! The gate convolutions are C to C with no reduction ratio. Batch norm sits
//! between each gate conv and its sigmoid.

use crate::autograd::NodeId;
use crate::conv::Kernel3;
use crate::error::Result;
use crate::init::SeededRng;
use crate::params::{insert_bn, Forward, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{BnParams, ChannelFactorization, Dims, Mode, Tensor5};
use crate::tsconv::{TSConvSpec, TSConvWeights};

/// Gate convolution kernels: spatial, temporal, channel.
pub const SPATIAL_GATE: Kernel3 = Kernel3 { t: 1, h: 3, w: 3 };
pub const TEMPORAL_GATE: Kernel3 = Kernel3 { t: 3, h: 1, w: 1 };
pub const CHANNEL_GATE: Kernel3 = Kernel3 { t: 1, h: 1, w: 1 };

/// The three gate specs for sub-dimension `k` of `f`.
pub fn gate_specs(f: &ChannelFactorization, k: usize) -> Result<[TSConvSpec; 3]> {
    Ok([
        TSConvSpec::new(f.clone(), k, SPATIAL_GATE)?,
        TSConvSpec::new(f.clone(), k, TEMPORAL_GATE)?,
        TSConvSpec::new(f.clone(), k, CHANNEL_GATE)?,
    ])
}

/// Records `TE(xs, xt)` under parameter prefix `name`.
///
/// Expects `<name>.s`, `<name>.t`, `<name>.c` conv weights and `_bn` norms.
/// In structural mode the gates are bypassed and the result is `xs + xt`.
pub fn te_forward<S: Scalar>(
    fwd: &mut Forward<'_, S>,
    name: &str,
    f: &ChannelFactorization,
    k: usize,
    xs: NodeId,
    xt: NodeId,
) -> Result<NodeId> {
    if fwd.is_structural() {
        return fwd.graph.add(xs, xt);
    }
    let [s_spec, t_spec, c_spec] = gate_specs(f, k)?;
    let u = gate(fwd, xs, &format!("{name}.s"), &s_spec, Pool::Time)?;
    let v = gate(fwd, xt, &format!("{name}.t"), &t_spec, Pool::Space)?;
    let r = fwd.graph.add(u, v)?;
    gate(fwd, r, &format!("{name}.c"), &c_spec, Pool::Space)
}

#[derive(Clone, Copy)]
enum Pool {
    Time,
    Space,
}

fn gate<S: Scalar>(fwd: &mut Forward<'_, S>, x: NodeId, name: &str, spec: &TSConvSpec, pool: Pool) -> Result<NodeId> {
    let pooled = match pool {
        Pool::Time => fwd.graph.t_pool(x),
        Pool::Space => fwd.graph.s_pool(x),
    };
    let a = fwd.tsconv(pooled, name, spec)?;
    let a = fwd.batch_norm(a, &format!("{name}_bn"))?;
    let a = fwd.graph.sigmoid(a);
    fwd.graph.mul_broadcast(x, a)
}

/// Registers gate parameters for `C = f.product()` channels under `name`.
pub fn insert_te_params<S: Scalar>(
    store: &mut ParamStore<S>,
    name: &str,
    f: &ChannelFactorization,
    k: usize,
    rng: &mut SeededRng,
) -> Result<()> {
    let c = f.product();
    for (tag, spec) in ["s", "t", "c"].iter().zip(gate_specs(f, k)?) {
        let w = TSConvWeights::<S>::he_uniform(&spec, rng);
        store.insert(format!("{name}.{tag}.weight"), w.weight);
        insert_bn(store, &format!("{name}.{tag}_bn"), c);
    }
    Ok(())
}

/// One gate's conv weights and norm.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams<S> {
    pub weight: TSConvWeights<S>,
    pub bn: BnParams<S>,
}

/// Standalone gate parameters for one sub-operation.
#[derive(Debug, Clone, PartialEq)]
pub struct TeParams<S> {
    pub factorization: ChannelFactorization,
    pub k: usize,
    pub spatial: GateParams<S>,
    pub temporal: GateParams<S>,
    pub channel: GateParams<S>,
}

impl<S: Scalar> TeParams<S> {
    pub fn zeros(f: &ChannelFactorization, k: usize) -> Result<Self> {
        Self::build(f, k, |spec| TSConvWeights::zeros(spec))
    }

    pub fn he_uniform(f: &ChannelFactorization, k: usize, rng: &mut SeededRng) -> Result<Self> {
        Self::build(f, k, |spec| TSConvWeights::he_uniform(spec, rng))
    }

    pub fn ones(f: &ChannelFactorization, k: usize) -> Result<Self> {
        Self::build(f, k, |spec| TSConvWeights::ones(spec))
    }

    fn build(f: &ChannelFactorization, k: usize, mut make: impl FnMut(&TSConvSpec) -> TSConvWeights<S>) -> Result<Self> {
        let [s, t, c] = gate_specs(f, k)?;
        let ch = f.product();
        let gp = |w| GateParams {
            weight: w,
            bn: BnParams::identity(ch),
        };
        Ok(Self {
            factorization: f.clone(),
            k,
            spatial: gp(make(&s)),
            temporal: gp(make(&t)),
            channel: gp(make(&c)),
        })
    }

    pub fn specs(&self) -> Result<[TSConvSpec; 3]> {
        gate_specs(&self.factorization, self.k)
    }

    fn gates(&self) -> [(&'static str, &GateParams<S>); 3] {
        [("s", &self.spatial), ("t", &self.temporal), ("c", &self.channel)]
    }

    /// Copies into a store under `name`, matching [`te_forward`]'s layout.
    pub fn to_store(&self, store: &mut ParamStore<S>, name: &str) {
        for (tag, g) in self.gates() {
            store.insert(format!("{name}.{tag}.weight"), g.weight.weight.clone());
            let c = g.bn.channels();
            let pd = Dims::new(1, c, 1, 1, 1);
            let bn = format!("{name}.{tag}_bn");
            store.insert(format!("{bn}.gamma"), Tensor5::from_vec(pd, g.bn.gamma.clone()).expect("bn dims"));
            store.insert(format!("{bn}.beta"), Tensor5::from_vec(pd, g.bn.beta.clone()).expect("bn dims"));
            store.insert_buffer(format!("{bn}.running_mean"), g.bn.running_mean.clone());
            store.insert_buffer(format!("{bn}.running_var"), g.bn.running_var.clone());
        }
    }
}

fn run_gate<S: Scalar>(x: &Tensor5<S>, p: &TeParams<S>, which: usize, mode: Mode) -> Result<Tensor5<S>> {
    let mut store = ParamStore::new();
    p.to_store(&mut store, "te");
    let specs = p.specs()?;
    let (tag, pool) = [("s", Pool::Time), ("t", Pool::Space), ("c", Pool::Space)][which];
    let mut fwd = Forward::new(&store, mode);
    let xi = fwd.input(x.clone());
    let y = gate(&mut fwd, xi, &format!("te.{tag}"), &specs[which], pool)?;
    Ok(fwd.value(y).clone())
}

/// `U = xs * sigmoid(BN(S-TSConv(t_pool(xs))))`.
pub fn spatial_excitation<S: Scalar>(xs: &Tensor5<S>, p: &TeParams<S>, mode: Mode) -> Result<Tensor5<S>> {
    run_gate(xs, p, 0, mode)
}

/// `V = xt * sigmoid(BN(T-TSConv(s_pool(xt))))`.
pub fn temporal_excitation<S: Scalar>(xt: &Tensor5<S>, p: &TeParams<S>, mode: Mode) -> Result<Tensor5<S>> {
    run_gate(xt, p, 1, mode)
}

/// `X = r * sigmoid(BN(PW-TSConv(s_pool(r))))`; the gate keeps the time axis.
pub fn channel_excitation<S: Scalar>(r: &Tensor5<S>, p: &TeParams<S>, mode: Mode) -> Result<Tensor5<S>> {
    run_gate(r, p, 2, mode)
}

pub fn te_apply<S: Scalar>(xs: &Tensor5<S>, xt: &Tensor5<S>, p: &TeParams<S>, mode: Mode) -> Result<Tensor5<S>> {
    xs.expect_same_dims(xt, "te_apply")?;
    let mut store = ParamStore::new();
    p.to_store(&mut store, "te");
    let mut fwd = Forward::new(&store, mode);
    let a = fwd.input(xs.clone());
    let b = fwd.input(xt.clone());
    let y = te_forward(&mut fwd, "te", &p.factorization, p.k, a, b)?;
    Ok(fwd.value(y).clone())
}
