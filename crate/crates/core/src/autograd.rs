//! Tape-based reverse-mode differentiation over [`Tensor5`] values.
//!
//! Every call on a [`Graph`] evaluates the op eagerly and appends a node to
//! the tape. Node ids grow monotonically, so the tape is a topological order
//! and [`Graph::backward`] is a single reverse sweep.

use crate::conv::{conv3d, conv3d_grad_input, conv3d_grad_weight, conv_macs, max_pool_hw, ConvGeometry};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{channel_stats, stat_count, update_running, Dims, Mode, Tensor5, BN_EPS};
use crate::tsconv::{invert, TSConvSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    Conv { x: NodeId, w: NodeId, geom: ConvGeometry },
    ChannelBias { x: NodeId, b: NodeId },
    Gather { x: NodeId, order: Vec<usize> },
    Add(NodeId, NodeId),
    Scale(NodeId, S),
    MulBroadcast(NodeId, NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    TPool(NodeId),
    SPool(NodeId),
    MaxPool { x: NodeId, argmax: Vec<usize> },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: Mode,
        xhat: Tensor5<S>,
        inv_std: Vec<S>,
    },
    SoftmaxCe { logits: NodeId, labels: Vec<usize>, probs: Tensor5<S> },
    Sum(NodeId),
}

#[derive(Debug, Clone)]
struct Node<S> {
    value: Tensor5<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Running statistics produced by a train-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningUpdate<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

#[derive(Debug, Clone, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    macs: u64,
}

/// Gradients indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor5<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor5<S>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor5<S>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            macs: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates spent in convolutions recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, id: NodeId) -> &Tensor5<S> {
        &self.nodes[id.0].value
    }

    pub fn dims(&self, id: NodeId) -> Dims {
        self.nodes[id.0].value.dims()
    }

    /// Constant leaf; no gradient is propagated into it.
    pub fn input(&mut self, t: Tensor5<S>) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor5<S>) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    fn push(&mut self, value: Tensor5<S>, op: Op<S>, needs_grad: bool) -> NodeId {
        value.debug_check_finite();
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    pub fn conv(&mut self, x: NodeId, w: NodeId, geom: ConvGeometry) -> Result<NodeId> {
        let y = conv3d(self.value(x), self.value(w), &geom)?;
        self.macs += conv_macs(y.dims(), self.dims(w));
        let ng = self.needs(&[x, w]);
        Ok(self.push(y, Op::Conv { x, w, geom }, ng))
    }

    /// Adds `b` (dims `(1, C, 1, 1, 1)`) to every position of channel `c`.
    pub fn channel_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let c = self.dims(x).c;
        if self.dims(b) != Dims::new(1, c, 1, 1, 1) {
            return Err(Error::ShapeMismatch {
                op: "channel_bias",
                left: self.dims(x),
                right: self.dims(b),
            });
        }
        let y = self.value(x).add(&self.value(b).broadcast_to(self.dims(x))?)?;
        let ng = self.needs(&[x, b]);
        Ok(self.push(y, Op::ChannelBias { x, b }, ng))
    }

    /// Output channel `i` is input channel `order[i]`.
    pub fn gather_channels(&mut self, x: NodeId, order: Vec<usize>) -> Result<NodeId> {
        let y = self.value(x).gather_channels(&order)?;
        let ng = self.needs(&[x]);
        Ok(self.push(y, Op::Gather { x, order }, ng))
    }

    /// Tensor separable convolution as permute, grouped conv, inverse permute.
    pub fn tsconv(&mut self, x: NodeId, w: NodeId, spec: &TSConvSpec) -> Result<NodeId> {
        spec.validate()?;
        spec.factorization.check(self.dims(x).c)?;
        let geom = spec.geometry();
        match spec.channel_order() {
            None => self.conv(x, w, geom),
            Some(order) => {
                let inv = invert(&order);
                let p = self.gather_channels(x, order)?;
                let y = self.conv(p, w, geom)?;
                self.gather_channels(y, inv)
            }
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.value(a).add(self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(y, Op::Add(a, b), ng))
    }

    pub fn scale(&mut self, x: NodeId, s: S) -> NodeId {
        let y = self.value(x).scale(s);
        let ng = self.needs(&[x]);
        self.push(y, Op::Scale(x, s), ng)
    }

    /// `a * b` with `b` broadcast along its size-1 axes.
    pub fn mul_broadcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.value(a).mul_broadcast(self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(y, Op::MulBroadcast(a, b), ng))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).sigmoid();
        let ng = self.needs(&[x]);
        self.push(y, Op::Sigmoid(x), ng)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).relu();
        let ng = self.needs(&[x]);
        self.push(y, Op::Relu(x), ng)
    }

    pub fn t_pool(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).t_pool();
        let ng = self.needs(&[x]);
        self.push(y, Op::TPool(x), ng)
    }

    pub fn s_pool(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).s_pool();
        let ng = self.needs(&[x]);
        self.push(y, Op::SPool(x), ng)
    }

    /// Mean over `(T, H, W)`.
    pub fn global_pool(&mut self, x: NodeId) -> NodeId {
        let t = self.t_pool(x);
        self.s_pool(t)
    }

    pub fn max_pool_hw(&mut self, x: NodeId, kernel: usize, stride: usize, pad: usize) -> Result<NodeId> {
        let (y, argmax) = max_pool_hw(self.value(x), kernel, stride, pad)?;
        let ng = self.needs(&[x]);
        Ok(self.push(y, Op::MaxPool { x, argmax }, ng))
    }

    /// Batch norm with `gamma`/`beta` nodes of dims `(1, C, 1, 1, 1)`.
    ///
    /// In train mode the returned update carries the blended running stats.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[S],
        running_var: &[S],
        mode: Mode,
    ) -> Result<(NodeId, Option<RunningUpdate<S>>)> {
        let xd = self.dims(x);
        let pd = Dims::new(1, xd.c, 1, 1, 1);
        if self.dims(gamma) != pd || self.dims(beta) != pd || running_mean.len() != xd.c || running_var.len() != xd.c {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                left: xd,
                right: self.dims(gamma),
            });
        }
        let (mean, var, update) = match mode {
            Mode::Train => {
                let (m, v) = channel_stats(self.value(x));
                let (rm, rv) = update_running(running_mean, running_var, &m, &v, stat_count(self.value(x)));
                (m, v, Some(RunningUpdate { mean: rm, var: rv }))
            }
            Mode::Eval => (running_mean.to_vec(), running_var.to_vec(), None),
        };
        let eps = S::lit(BN_EPS);
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let mut xhat = self.value(x).clone();
        for n in 0..xd.n {
            for c in 0..xd.c {
                let (mu, is) = (mean[c], inv_std[c]);
                xhat.volume_mut(n, c).iter_mut().for_each(|v| *v = (*v - mu) * is);
            }
        }
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut y = xhat.clone();
        for n in 0..xd.n {
            for c in 0..xd.c {
                let (gc, bc) = (g[c], b[c]);
                y.volume_mut(n, c).iter_mut().for_each(|v| *v = gc * *v + bc);
            }
        }
        let ng = self.needs(&[x, gamma, beta]);
        let id = self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mode,
                xhat,
                inv_std,
            },
            ng,
        );
        Ok((id, update))
    }

    /// Mean softmax cross-entropy; `logits` has dims `(N, K, 1, 1, 1)`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let d = self.dims(logits);
        if d.volume() != 1 || labels.len() != d.n || labels.iter().any(|&l| l >= d.c) {
            return Err(Error::InvalidShape(format!(
                "cross entropy over logits {d} with {} labels",
                labels.len()
            )));
        }
        let z = self.value(logits);
        let mut probs = z.clone();
        let mut loss = S::zero();
        for (n, &label) in labels.iter().enumerate() {
            let row = &z.data()[n * d.c..(n + 1) * d.c];
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let denom: S = row.iter().map(|&v| (v - m).exp()).sum();
            let log_denom = denom.ln() + m;
            loss += log_denom - row[label];
            for (p, &v) in probs.data_mut()[n * d.c..(n + 1) * d.c].iter_mut().zip(row) {
                *p = (v - log_denom).exp();
            }
        }
        loss /= S::lit(d.n as f64);
        let value = Tensor5::full(Dims::new(1, 1, 1, 1, 1), loss);
        let ng = self.needs(&[logits]);
        Ok(self.push(
            value,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        let ng = self.needs(&[x]);
        self.push(Tensor5::full(Dims::new(1, 1, 1, 1, 1), s), Op::Sum(x), ng)
    }

    /// Active-set fingerprint of every ReLU and max pool on the tape. Two
    /// evaluations with equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> Vec<u64> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    let mut word = 0u64;
                    for (i, v) in self.value(*x).data().iter().enumerate() {
                        word |= u64::from(*v > S::zero()) << (i % 64);
                        if i % 64 == 63 {
                            sig.push(word);
                            word = 0;
                        }
                    }
                    sig.push(word);
                }
                Op::MaxPool { argmax, .. } => sig.extend(argmax.iter().map(|&a| a as u64)),
                _ => {}
            }
        }
        sig
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<S>> {
        if self.dims(loss).numel() != 1 {
            return Err(Error::UnsupportedOp(format!(
                "backward needs a scalar root, got {}",
                self.dims(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor5<S>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor5::ones(self.dims(loss)));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(i, &node.op, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor5<S>>], at: usize, target: NodeId, g: Tensor5<S>) -> Result<()> {
        assert!(target.0 < at, "tape order violated: {} feeds {}", target.0, at);
        if !self.nodes[target.0].needs_grad {
            return Ok(());
        }
        match &mut grads[target.0] {
            Some(acc) => acc.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn propagate(&self, at: usize, op: &Op<S>, g: &Tensor5<S>, grads: &mut [Option<Tensor5<S>>]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Conv { x, w, geom } => {
                if self.wants(*x) {
                    let gx = conv3d_grad_input(g, self.value(*w), geom, self.dims(*x))?;
                    self.accumulate(grads, at, *x, gx)?;
                }
                if self.wants(*w) {
                    let gw = conv3d_grad_weight(g, self.value(*x), geom, self.dims(*w))?;
                    self.accumulate(grads, at, *w, gw)?;
                }
            }
            Op::ChannelBias { x, b } => {
                self.accumulate(grads, at, *x, g.clone())?;
                if self.wants(*b) {
                    let gb = g.reduce_to(self.dims(*b))?;
                    self.accumulate(grads, at, *b, gb)?;
                }
            }
            Op::Gather { x, order } => {
                let gx = g.gather_channels(&invert(order))?;
                self.accumulate(grads, at, *x, gx)?;
            }
            Op::Add(a, b) => {
                self.accumulate(grads, at, *a, g.clone())?;
                self.accumulate(grads, at, *b, g.clone())?;
            }
            Op::Scale(x, s) => {
                self.accumulate(grads, at, *x, g.scale(*s))?;
            }
            Op::MulBroadcast(a, b) => {
                if self.wants(*a) {
                    let ga = g.mul_broadcast(self.value(*b))?;
                    self.accumulate(grads, at, *a, ga)?;
                }
                if self.wants(*b) {
                    let gb = g.mul(self.value(*a))?.reduce_to(self.dims(*b))?;
                    self.accumulate(grads, at, *b, gb)?;
                }
            }
            Op::Sigmoid(x) => {
                let y = &self.nodes[at].value;
                let gx = g.zip_map(y, "sigmoid_grad", |gv, yv| gv * yv * (S::one() - yv))?;
                self.accumulate(grads, at, *x, gx)?;
            }
            Op::Relu(x) => {
                let gx = g.zip_map(self.value(*x), "relu_grad", |gv, xv| if xv > S::zero() { gv } else { S::zero() })?;
                self.accumulate(grads, at, *x, gx)?;
            }
            Op::TPool(x) => {
                let t = S::lit(self.dims(*x).t as f64);
                let gx = g.broadcast_to(self.dims(*x))?.scale(S::one() / t);
                self.accumulate(grads, at, *x, gx)?;
            }
            Op::SPool(x) => {
                let d = self.dims(*x);
                let hw = S::lit((d.h * d.w) as f64);
                let gx = g.broadcast_to(d)?.scale(S::one() / hw);
                self.accumulate(grads, at, *x, gx)?;
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = Tensor5::zeros(self.dims(*x));
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    gx.data_mut()[src] += gv;
                }
                self.accumulate(grads, at, *x, gx)?;
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mode,
                xhat,
                inv_std,
            } => {
                let d = self.dims(*x);
                let pd = Dims::new(1, d.c, 1, 1, 1);
                let gamma_v = self.value(*gamma).data();
                let mut sum_g = vec![S::zero(); d.c];
                let mut sum_gx = vec![S::zero(); d.c];
                for n in 0..d.n {
                    for c in 0..d.c {
                        for (&gv, &xv) in g.volume(n, c).iter().zip(xhat.volume(n, c)) {
                            sum_g[c] += gv;
                            sum_gx[c] += gv * xv;
                        }
                    }
                }
                if self.wants(*gamma) {
                    self.accumulate(grads, at, *gamma, Tensor5::from_vec(pd, sum_gx.clone())?)?;
                }
                if self.wants(*beta) {
                    self.accumulate(grads, at, *beta, Tensor5::from_vec(pd, sum_g.clone())?)?;
                }
                if self.wants(*x) {
                    let mut gx = Tensor5::zeros(d);
                    let m = S::lit((d.n * d.volume()) as f64);
                    for n in 0..d.n {
                        for c in 0..d.c {
                            let k = gamma_v[c] * inv_std[c];
                            let out = gx.volume_mut(n, c);
                            let gin = g.volume(n, c);
                            let xh = xhat.volume(n, c);
                            match mode {
                                Mode::Eval => {
                                    for (o, &gv) in out.iter_mut().zip(gin) {
                                        *o = gv * k;
                                    }
                                }
                                Mode::Train => {
                                    let (mg, mgx) = (sum_g[c] / m, sum_gx[c] / m);
                                    for ((o, &gv), &xv) in out.iter_mut().zip(gin).zip(xh) {
                                        *o = k * (gv - mg - xv * mgx);
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(grads, at, *x, gx)?;
                }
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let d = probs.dims();
                let scale = g.data()[0] / S::lit(d.n as f64);
                let mut gz = probs.clone();
                for (n, &l) in labels.iter().enumerate() {
                    gz.data_mut()[n * d.c + l] -= S::one();
                }
                gz.data_mut().iter_mut().for_each(|v| *v *= scale);
                self.accumulate(grads, at, *logits, gz)?;
            }
            Op::Sum(x) => {
                let gx = Tensor5::full(self.dims(*x), g.data()[0]);
                self.accumulate(grads, at, *x, gx)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::Kernel3;
    use crate::init::rng;
    use crate::tensor::ChannelFactorization;
    use rand::Rng;

    fn random(dims: Dims, seed: u64) -> Tensor5<f64> {
        let mut r = rng(seed);
        Tensor5::from_fn(dims, |_, _, _, _, _| r.gen_range(-1.0..1.0))
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(random(Dims::new(2, 3, 2, 2, 2), 1));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor5::zeros(Dims::new(1, 2, 2, 2, 2)));
        let y = g.sigmoid(x);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor5::zeros(Dims::new(1, 2, 1, 1, 1)));
        assert!(matches!(g.backward(x), Err(Error::UnsupportedOp(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.input(random(Dims::new(1, 2, 2, 2, 2), 2));
        let w = g.param(random(Dims::new(2, 2, 1, 1, 1), 3));
        let y = g.conv(x, w, ConvGeometry::same(Kernel3::point(), 1)).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).is_none());
        assert!(grads.get(w).is_some());
        assert_eq!(g.macs(), 8 * 2 * 2);
    }

    #[test]
    fn graph_tsconv_matches_plain_tsconv() {
        let f = ChannelFactorization::new(vec![2, 3]).unwrap();
        let spec = TSConvSpec::new(f, 1, Kernel3::cube(3)).unwrap();
        let x = random(Dims::new(1, 6, 3, 3, 3), 4);
        let w = random(spec.weight_dims(), 5);
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let wi = g.param(w.clone());
        let y = g.tsconv(xi, wi, &spec).unwrap();
        let tw = crate::tsconv::TSConvWeights::new(&spec, w, None).unwrap();
        let r = crate::tsconv::tsconv_direct(&x, &spec, &tw).unwrap();
        assert!(g.value(y).max_abs_diff(&r).unwrap() < 1e-12);
    }

    #[test]
    fn cross_entropy_value() {
        let mut g = Graph::new();
        let z = g.param(Tensor5::from_vec(Dims::new(2, 2, 1, 1, 1), vec![0.0, 0.0, 1.0, -1.0]).unwrap());
        let l = g.softmax_cross_entropy(z, &[0, 1]).unwrap();
        let expect = (2f64.ln() + (1.0 + (2f64).exp()).ln()) / 2.0;
        assert!((g.value(l).data()[0] - expect).abs() < 1e-14);
        assert!(g.softmax_cross_entropy(z, &[0, 2]).is_err());
    }
}
