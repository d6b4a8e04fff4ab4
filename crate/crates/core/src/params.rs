//! Named parameter storage and the forward context that binds it to a tape.

use std::collections::BTreeMap;

use crate::autograd::{Gradients, Graph, NodeId, RunningUpdate};
use crate::conv::ConvGeometry;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Dims, Mode, Tensor5};
use crate::tsconv::TSConvSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct Param<S> {
    pub value: Tensor5<S>,
    pub grad: Tensor5<S>,
    pub momentum: Tensor5<S>,
}

impl<S: Scalar> Param<S> {
    pub fn new(value: Tensor5<S>) -> Self {
        let d = value.dims();
        Self {
            value,
            grad: Tensor5::zeros(d),
            momentum: Tensor5::zeros(d),
        }
    }
}

/// Trainable tensors plus non-trainable buffers (batch-norm running stats).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<S> {
    params: BTreeMap<String, Param<S>>,
    buffers: BTreeMap<String, Vec<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor5<S>) {
        self.params.insert(name.into(), Param::new(value));
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Vec<S>) {
        self.buffers.insert(name.into(), value);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param<S>> {
        self.params.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<S>> {
        self.params.get_mut(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor5<S>> {
        self.get(name).map(|p| &p.value)
    }

    pub fn set_value(&mut self, name: &str, value: Tensor5<S>) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.value.dims() != value.dims() {
            return Err(Error::ShapeMismatch {
                op: "set_value",
                left: p.value.dims(),
                right: value.dims(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn buffer(&self, name: &str) -> Result<&[S]> {
        self.buffers
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn set_buffer(&mut self, name: &str, value: Vec<S>) -> Result<()> {
        let slot = self
            .buffers
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        *slot = value;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<S>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<S>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count over trainable tensors.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.dims().numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = S::zero());
        }
    }

    pub fn fill(&mut self, value: S) {
        for p in self.params.values_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = value);
        }
    }
}

/// Records a forward pass: lazily binds named parameters as graph leaves and
/// collects batch-norm running-stat updates.
///
/// In structural mode batch norms are skipped and excitation gates are
/// bypassed, so influence depends only on connectivity.
#[derive(Debug)]
pub struct Forward<'a, S> {
    pub graph: Graph<S>,
    store: &'a ParamStore<S>,
    bound: BTreeMap<String, NodeId>,
    updates: Vec<(String, RunningUpdate<S>)>,
    mode: Mode,
    structural: bool,
}

impl<'a, S: Scalar> Forward<'a, S> {
    pub fn new(store: &'a ParamStore<S>, mode: Mode) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: BTreeMap::new(),
            updates: Vec::new(),
            mode,
            structural: false,
        }
    }

    pub fn structural(store: &'a ParamStore<S>) -> Self {
        Self {
            structural: true,
            ..Self::new(store, Mode::Eval)
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_structural(&self) -> bool {
        self.structural
    }

    pub fn input(&mut self, x: Tensor5<S>) -> NodeId {
        self.graph.input(x)
    }

    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let id = self.graph.param(self.store.value(name)?.clone());
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    /// Convolution with `<name>.weight` and, if present, `<name>.bias`.
    pub fn conv(&mut self, x: NodeId, name: &str, geom: ConvGeometry) -> Result<NodeId> {
        let w = self.param(&format!("{name}.weight"))?;
        let y = self.graph.conv(x, w, geom)?;
        self.maybe_bias(y, name)
    }

    pub fn tsconv(&mut self, x: NodeId, name: &str, spec: &TSConvSpec) -> Result<NodeId> {
        let w = self.param(&format!("{name}.weight"))?;
        let y = self.graph.tsconv(x, w, spec)?;
        self.maybe_bias(y, name)
    }

    fn maybe_bias(&mut self, y: NodeId, name: &str) -> Result<NodeId> {
        let bias = format!("{name}.bias");
        if self.store.contains(&bias) {
            let b = self.param(&bias)?;
            self.graph.channel_bias(y, b)
        } else {
            Ok(y)
        }
    }

    /// Batch norm with `<name>.gamma`, `<name>.beta` and running buffers.
    pub fn batch_norm(&mut self, x: NodeId, name: &str) -> Result<NodeId> {
        if self.structural {
            return Ok(x);
        }
        let gamma = self.param(&format!("{name}.gamma"))?;
        let beta = self.param(&format!("{name}.beta"))?;
        let rm = self.store.buffer(&format!("{name}.running_mean"))?;
        let rv = self.store.buffer(&format!("{name}.running_var"))?;
        let (y, update) = self.graph.batch_norm(x, gamma, beta, rm, rv, self.mode)?;
        if let Some(u) = update {
            self.updates.push((name.to_string(), u));
        }
        Ok(y)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.graph.relu(x)
    }

    pub fn value(&self, id: NodeId) -> &Tensor5<S> {
        self.graph.value(id)
    }

    pub fn dims(&self, id: NodeId) -> Dims {
        self.graph.dims(id)
    }

    pub fn bound(&self) -> &BTreeMap<String, NodeId> {
        &self.bound
    }

    pub fn updates(&self) -> &[(String, RunningUpdate<S>)] {
        &self.updates
    }

    /// Backward from `loss`, returning gradients keyed by parameter name.
    pub fn param_grads(&self, loss: NodeId) -> Result<BTreeMap<String, Tensor5<S>>> {
        let mut grads: Gradients<S> = self.graph.backward(loss)?;
        let mut out = BTreeMap::new();
        for (name, &id) in &self.bound {
            let g = grads.take(id).unwrap_or_else(|| Tensor5::zeros(self.graph.dims(id)));
            out.insert(name.clone(), g);
        }
        Ok(out)
    }
}

/// Writes running-stat updates collected by a train-mode forward.
pub fn apply_bn_updates<S: Scalar>(store: &mut ParamStore<S>, updates: &[(String, RunningUpdate<S>)]) -> Result<()> {
    for (name, u) in updates {
        store.set_buffer(&format!("{name}.running_mean"), u.mean.clone())?;
        store.set_buffer(&format!("{name}.running_var"), u.var.clone())?;
    }
    Ok(())
}

/// Registers `<name>.gamma/beta` and identity running stats for `c` channels.
pub fn insert_bn<S: Scalar>(store: &mut ParamStore<S>, name: &str, c: usize) {
    let pd = Dims::new(1, c, 1, 1, 1);
    store.insert(format!("{name}.gamma"), Tensor5::ones(pd));
    store.insert(format!("{name}.beta"), Tensor5::zeros(pd));
    store.insert_buffer(format!("{name}.running_mean"), vec![S::zero(); c]);
    store.insert_buffer(format!("{name}.running_var"), vec![S::one(); c]);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::Kernel3;

    #[test]
    fn forward_binds_each_param_once() {
        let mut store = ParamStore::<f64>::new();
        store.insert("a.weight", Tensor5::ones(Dims::new(2, 2, 1, 1, 1)));
        insert_bn(&mut store, "bn", 2);
        let mut f = Forward::new(&store, Mode::Train);
        let x = f.input(Tensor5::ones(Dims::new(2, 2, 1, 2, 2)));
        let geom = ConvGeometry::same(Kernel3::point(), 1);
        let y = f.conv(x, "a", geom).unwrap();
        let y = f.conv(y, "a", geom).unwrap();
        let y = f.batch_norm(y, "bn").unwrap();
        let s = f.graph.sum(y);
        assert_eq!(f.bound().len(), 3);
        assert_eq!(f.updates().len(), 1);
        let g = f.param_grads(s).unwrap();
        assert_eq!(g.len(), 3);
        assert!(matches!(f.param("missing"), Err(Error::MissingParam(_))));
    }

    #[test]
    fn structural_mode_skips_batch_norm() {
        let store = ParamStore::<f64>::new();
        let mut f = Forward::structural(&store);
        let x = f.input(Tensor5::ones(Dims::new(1, 1, 1, 1, 1)));
        assert_eq!(f.batch_norm(x, "absent").unwrap(), x);
    }
}
