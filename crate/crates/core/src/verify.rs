//! Randomized property suites: grouped-vs-direct equivalence, gradient
//! checks, degeneration equivalences and channel-interaction structure.
//!
//! Case `i` of a run with seed `s` uses seed `s + i`, so a failing case can
//! be replayed alone with `--seed <case seed> --trials 1`.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::block::{build_preset, Branches, CtModule, Middle, Preset, SubOp};
use crate::conv::{ConvGeometry, Kernel3};
use crate::error::{Error, Result};
use crate::init::{rng, uniform, SeededRng};
use crate::layer::{init_layers, LayerKind};
use crate::net::{NetSpec, Network};
use crate::params::{Forward, ParamStore};
use crate::rf::interaction_matrix;
use crate::tensor::{batch_norm, BnParams, ChannelFactorization, Dims, Mode, Tensor5};
use crate::tsconv::{
    pointwise_conv, tconv_full, tsconv_direct, tsconv_grouped, tsconv_grouped_general, TSConvSpec, TSConvWeights,
};

pub const EQUIVALENCE_TOL: f64 = 1e-10;
pub const DEGENERATE_TOL: f64 = 1e-10;
pub const PRIMITIVE_GRAD_TOL: f64 = 1e-5;
pub const NETWORK_GRAD_TOL: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the elementwise relative error
/// `|a - n| / max(|a|, |n|, floor)`.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Equivalence,
    Gradients,
    Degenerate,
    Interaction,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Equivalence, Suite::Gradients, Suite::Degenerate, Suite::Interaction];
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "equivalence" => Ok(Self::Equivalence),
            "gradients" => Ok(Self::Gradients),
            "degenerate" => Ok(Self::Degenerate),
            "interaction" => Ok(Self::Interaction),
            other => Err(Error::ConfigInvalid(format!("unknown suite `{other}`"))),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Equivalence => "equivalence",
            Self::Gradients => "gradients",
            Self::Degenerate => "degenerate",
            Self::Interaction => "interaction",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub name: String,
    pub seed: u64,
    pub max_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CaseResult {
    fn new(name: impl Into<String>, seed: u64, max_error: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            seed,
            max_error,
            tolerance,
            pass: max_error.is_finite() && max_error < tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub seed: u64,
    pub cases: Vec<CaseResult>,
}

impl SuiteReport {
    pub fn pass(&self) -> bool {
        self.cases.iter().all(|c| c.pass)
    }

    pub fn passed(&self) -> usize {
        self.cases.iter().filter(|c| c.pass).count()
    }

    pub fn max_error(&self) -> f64 {
        self.cases.iter().map(|c| c.max_error).fold(0.0, f64::max)
    }

    pub fn render(&self, verbose: bool) -> String {
        let mut s = String::new();
        for c in &self.cases {
            if verbose || !c.pass {
                s += &format!(
                    "{:<4} {:<48} seed {:<8} max err {:.3e} (tol {:.0e})\n",
                    if c.pass { "ok" } else { "FAIL" },
                    c.name,
                    c.seed,
                    c.max_error,
                    c.tolerance
                );
            }
        }
        s += &format!(
            "{}: {}/{} passed, max error {:.3e}\n",
            self.suite,
            self.passed(),
            self.cases.len(),
            self.max_error()
        );
        s
    }
}

pub fn run_suite(suite: Suite, seed: u64, trials: usize) -> Result<SuiteReport> {
    let cases = match suite {
        Suite::Equivalence => (0..trials).map(|i| equivalence_case(seed + i as u64)).collect::<Result<_>>()?,
        Suite::Gradients => {
            let mut v = Vec::new();
            for i in 0..trials {
                v.extend(gradient_cases(seed + i as u64)?);
            }
            v.push(network_gradient_case(seed)?);
            v
        }
        Suite::Degenerate => {
            let mut v = Vec::new();
            for i in 0..trials {
                v.extend(degenerate_cases(seed + i as u64)?);
            }
            v
        }
        Suite::Interaction => interaction_cases()?,
    };
    Ok(SuiteReport { suite, seed, cases })
}

fn rand_tensor(dims: Dims, r: &mut SeededRng) -> Tensor5<f64> {
    uniform(dims, 1.0, r)
}

// ---------------------------------------------------------------- equivalence

/// A random TSConv configuration with `K <= 4` and `C <= 48`.
pub fn random_tsconv_config(r: &mut SeededRng) -> (TSConvSpec, Dims) {
    loop {
        let k_count = r.gen_range(1..=4);
        let sizes: Vec<usize> = (0..k_count).map(|_| r.gen_range(1..=4)).collect();
        let c: usize = sizes.iter().product();
        if c > 48 {
            continue;
        }
        let f = ChannelFactorization::new(sizes).expect("positive sizes");
        let k = r.gen_range(1..=k_count);
        let odd = [1, 3, 5];
        let kernel = Kernel3::new(*odd.choose(r).unwrap(), *odd.choose(r).unwrap(), *odd.choose(r).unwrap());
        let mut spec = TSConvSpec::new(f, k, kernel).expect("valid spec");
        spec.bias = r.gen_bool(0.3);
        let dims = Dims::new(r.gen_range(1..=2), c, r.gen_range(1..=5), r.gen_range(1..=6), r.gen_range(1..=6));
        return (spec, dims);
    }
}

fn equivalence_case(seed: u64) -> Result<CaseResult> {
    let mut r = rng(seed);
    let (spec, dims) = random_tsconv_config(&mut r);
    let x = rand_tensor(dims, &mut r);
    let weight = rand_tensor(spec.weight_dims(), &mut r);
    let bias = spec.bias.then(|| (0..spec.channels()).map(|_| r.gen_range(-1.0..1.0)).collect());
    let w = TSConvWeights::new(&spec, weight, bias)?;
    let direct = tsconv_direct(&x, &spec, &w)?;
    let mut err = tsconv_grouped(&x, &spec, &w)?.max_abs_diff(&direct)?;
    err = err.max(tsconv_grouped_general(&x, &spec, &w)?.max_abs_diff(&direct)?);
    let name = format!(
        "f={:?} k={} kernel={} x={}",
        spec.factorization.sizes(),
        spec.k,
        spec.kernel,
        dims
    );
    Ok(CaseResult::new(name, seed, err, EQUIVALENCE_TOL))
}

// ------------------------------------------------------------------ gradients

/// Maximum elementwise relative error between analytic and central-difference
/// gradients of `sum(build(leaves) * R)` for a fixed random `R`.
///
/// Entries whose perturbation changes a ReLU or max-pool active set are
/// skipped: the function is not differentiable across that boundary.
/// `sample` limits how many entries per input are checked.
pub fn check_gradients<F>(inputs: &[Tensor5<f64>], build: F, seed: u64, sample: Option<usize>) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |vals: &[Tensor5<f64>], weights: Option<&Tensor5<f64>>| -> Result<(Graph<f64>, Vec<NodeId>, NodeId, Tensor5<f64>)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = vals.iter().map(|v| g.param(v.clone())).collect();
        let y = build(&mut g, &ids)?;
        let w = match weights {
            Some(w) => w.clone(),
            None => rand_tensor(g.dims(y), &mut rng(seed ^ 0x5eed)),
        };
        let wi = g.input(w.clone());
        let p = g.mul_broadcast(y, wi)?;
        let loss = g.sum(p);
        Ok((g, ids, loss, w))
    };
    let (g, ids, loss, w) = eval(inputs, None)?;
    let base_sig = g.kink_signature();
    let grads = g.backward(loss)?;
    let mut r = rng(seed ^ 0xfd);
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for (i, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).cloned().unwrap_or_else(|| Tensor5::zeros(inputs[i].dims()));
        let n = inputs[i].dims().numel();
        let mut entries: Vec<usize> = (0..n).collect();
        if let Some(m) = sample {
            entries.shuffle(&mut r);
            entries.truncate(m);
        }
        for j in entries {
            let value = |delta: f64| -> Result<Option<f64>> {
                let mut vals = inputs.to_vec();
                vals[i].data_mut()[j] += delta;
                let (g2, _, l2, _) = eval(&vals, Some(&w))?;
                if g2.kink_signature() != base_sig {
                    return Ok(None);
                }
                Ok(Some(g2.value(l2).data()[0]))
            };
            let (Some(plus), Some(minus)) = (value(FD_STEP)?, value(-FD_STEP)?) else { continue };
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    if checked == 0 {
        return Err(Error::UnsupportedOp("no differentiable entries to check".into()));
    }
    Ok(worst)
}

fn away_from_zero(dims: Dims, r: &mut SeededRng) -> Tensor5<f64> {
    Tensor5::from_fn(dims, |_, _, _, _, _| {
        let m = r.gen_range(0.1..1.0);
        if r.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>>;

fn gradient_cases(seed: u64) -> Result<Vec<CaseResult>> {
    let mut r = rng(seed);
    let n = r.gen_range(1..=2);
    let c = 2 * r.gen_range(1..=2);
    let d = Dims::new(n, c, r.gen_range(2..=3), r.gen_range(3..=4), r.gen_range(3..=4));
    let mut cases: Vec<(String, Vec<Tensor5<f64>>, Build)> = Vec::new();

    let odd = [1, 3];
    let kernel = Kernel3::new(*odd.choose(&mut r).unwrap(), 3, *odd.choose(&mut r).unwrap());
    let groups = if r.gen_bool(0.5) { 2 } else { 1 };
    let cout = 2 * r.gen_range(1..=2);
    let wd = Dims::new(cout, c / groups, kernel.t, kernel.h, kernel.w);
    let geom = ConvGeometry::same(kernel, groups);
    cases.push((
        format!("conv {kernel} groups={groups}"),
        vec![rand_tensor(d, &mut r), rand_tensor(wd, &mut r)],
        Box::new(move |g, v| g.conv(v[0], v[1], geom)),
    ));
    let sgeom = ConvGeometry::strided(Kernel3::spatial(3, 3), 1, [1, 2, 2]);
    cases.push((
        "conv 1x3x3 stride 2".into(),
        vec![rand_tensor(d, &mut r), rand_tensor(Dims::new(3, c, 1, 3, 3), &mut r)],
        Box::new(move |g, v| g.conv(v[0], v[1], sgeom)),
    ));
    cases.push((
        "channel_bias".into(),
        vec![rand_tensor(d, &mut r), rand_tensor(Dims::new(1, c, 1, 1, 1), &mut r)],
        Box::new(|g, v| g.channel_bias(v[0], v[1])),
    ));
    let mut order: Vec<usize> = (0..c).collect();
    order.shuffle(&mut r);
    cases.push((
        "gather_channels".into(),
        vec![rand_tensor(d, &mut r)],
        Box::new(move |g, v| g.gather_channels(v[0], order.clone())),
    ));
    cases.push((
        "add".into(),
        vec![rand_tensor(d, &mut r), rand_tensor(d, &mut r)],
        Box::new(|g, v| g.add(v[0], v[1])),
    ));
    let s = r.gen_range(-2.0..2.0);
    cases.push(("scale".into(), vec![rand_tensor(d, &mut r)], Box::new(move |g, v| Ok(g.scale(v[0], s)))));
    for (label, ad) in [
        ("mul_broadcast over T", d.with_t(1)),
        ("mul_broadcast over HW", d.with_hw(1, 1)),
        ("mul_broadcast over THW", Dims::new(d.n, d.c, 1, 1, 1)),
        ("mul_broadcast full", d),
    ] {
        cases.push((
            label.into(),
            vec![rand_tensor(d, &mut r), rand_tensor(ad, &mut r)],
            Box::new(|g, v| g.mul_broadcast(v[0], v[1])),
        ));
    }
    cases.push(("sigmoid".into(), vec![rand_tensor(d, &mut r).scale(3.0)], Box::new(|g, v| Ok(g.sigmoid(v[0])))));
    cases.push(("relu".into(), vec![away_from_zero(d, &mut r)], Box::new(|g, v| Ok(g.relu(v[0])))));
    cases.push(("t_pool".into(), vec![rand_tensor(d, &mut r)], Box::new(|g, v| Ok(g.t_pool(v[0])))));
    cases.push(("s_pool".into(), vec![rand_tensor(d, &mut r)], Box::new(|g, v| Ok(g.s_pool(v[0])))));
    cases.push((
        "max_pool 3/2/1".into(),
        vec![rand_tensor(d, &mut r)],
        Box::new(|g, v| g.max_pool_hw(v[0], 3, 2, 1)),
    ));
    let pd = Dims::new(1, c, 1, 1, 1);
    let rm: Vec<f64> = (0..c).map(|_| r.gen_range(-0.5..0.5)).collect();
    let rv: Vec<f64> = (0..c).map(|_| r.gen_range(0.5..2.0)).collect();
    for mode in [Mode::Train, Mode::Eval] {
        let (rm, rv) = (rm.clone(), rv.clone());
        cases.push((
            format!("batch_norm {mode:?}").to_lowercase(),
            vec![rand_tensor(d, &mut r), rand_tensor(pd, &mut r), rand_tensor(pd, &mut r)],
            Box::new(move |g, v| Ok(g.batch_norm(v[0], v[1], v[2], &rm, &rv, mode)?.0)),
        ));
    }
    let classes = r.gen_range(2..=5);
    let labels: Vec<usize> = (0..3).map(|_| r.gen_range(0..classes)).collect();
    cases.push((
        "softmax_cross_entropy".into(),
        vec![rand_tensor(Dims::new(3, classes, 1, 1, 1), &mut r).scale(2.0)],
        Box::new(move |g, v| g.softmax_cross_entropy(v[0], &labels)),
    ));
    let (spec, _) = loop {
        let (s, dd) = random_tsconv_config(&mut r);
        if s.channels() <= 12 && s.channels() > 1 {
            break (s, dd);
        }
    };
    let td = Dims::new(1, spec.channels(), 3, 3, 3);
    let spec2 = spec.clone();
    cases.push((
        format!("tsconv f={:?} k={} {}", spec.factorization.sizes(), spec.k, spec.kernel),
        vec![rand_tensor(td, &mut r), rand_tensor(spec.weight_dims(), &mut r)],
        Box::new(move |g, v| g.tsconv(v[0], v[1], &spec2)),
    ));

    cases
        .into_iter()
        .map(|(name, inputs, build)| {
            let err = check_gradients(&inputs, build, seed, None)?;
            Ok(CaseResult::new(name, seed, err, PRIMITIVE_GRAD_TOL))
        })
        .collect()
}

/// Spec for the end-to-end check: toy layout shrunk to 4 x 8 x 8 clips.
pub fn gradient_check_net() -> NetSpec {
    NetSpec {
        frames: 4,
        resolution: 8,
        ..NetSpec::toy(build_preset(Preset::Ctnet).with_pw(true).with_te(true))
    }
}

/// Whole-network check: loss is the training cross-entropy in train mode.
pub fn network_gradient_case(seed: u64) -> Result<CaseResult> {
    let spec = gradient_check_net();
    let net = Network::<f64>::new(&spec, seed)?;
    let mut r = rng(seed ^ 0xe2e);
    let n = 2;
    let x = rand_tensor(spec.input_dims(n), &mut r);
    let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..spec.classes)).collect();
    let names: Vec<String> = net.params.names().map(str::to_string).collect();
    let loss_at = |store: &ParamStore<f64>| -> Result<(f64, Vec<u64>)> {
        let mut fwd = Forward::new(store, Mode::Train);
        let xi = fwd.input(x.clone());
        let z = net.plan.forward(&mut fwd, xi)?;
        let l = fwd.graph.softmax_cross_entropy(z, &labels)?;
        Ok((fwd.value(l).data()[0], fwd.graph.kink_signature()))
    };
    let mut fwd = Forward::new(&net.params, Mode::Train);
    let xi = fwd.input(x.clone());
    let z = net.plan.forward(&mut fwd, xi)?;
    let l = fwd.graph.softmax_cross_entropy(z, &labels)?;
    let base_sig = fwd.graph.kink_signature();
    let grads = fwd.param_grads(l)?;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for name in &names {
        let numel = net.params.value(name)?.dims().numel();
        let picks: Vec<usize> = (0..2).map(|_| r.gen_range(0..numel)).collect();
        for j in picks {
            let eval = |delta: f64| -> Result<Option<f64>> {
                let mut store = net.params.clone();
                store.get_mut(name)?.value.data_mut()[j] += delta;
                let (v, sig) = loss_at(&store)?;
                Ok((sig == base_sig).then_some(v))
            };
            let (Some(p), Some(m)) = (eval(FD_STEP)?, eval(-FD_STEP)?) else { continue };
            let numeric = (p - m) / (2.0 * FD_STEP);
            let a = grads[name].data()[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR));
            checked += 1;
        }
    }
    let name = format!("network toy ctnet+pw+te ({checked} entries)");
    Ok(CaseResult::new(name, seed, worst, NETWORK_GRAD_TOL))
}

// ----------------------------------------------------------------- degenerate

fn module_of(preset: Preset, c: usize) -> Result<CtModule> {
    match build_preset(preset).resolve(c)? {
        Middle::Ct(m) => Ok(m),
        Middle::Conv2d => Err(Error::ConfigInvalid(format!("{preset} has no module"))),
    }
}

/// Random weights and non-trivial norm state for a module under `m`.
fn random_module_store(m: &CtModule, x: Dims, r: &mut SeededRng) -> Result<ParamStore<f64>> {
    let layers = m.layers("m", x)?;
    let mut store = ParamStore::new();
    init_layers(&mut store, &layers, r);
    for l in layers.iter().filter(|l| l.kind == LayerKind::Bn) {
        let c = l.weight.n;
        let pd = Dims::new(1, c, 1, 1, 1);
        store.set_value(&format!("{}.gamma", l.name), uniform(pd, 1.0, r).map(|v| 1.0 + 0.5 * v))?;
        store.set_value(&format!("{}.beta", l.name), uniform(pd, 0.5, r))?;
        store.set_buffer(&format!("{}.running_mean", l.name), (0..c).map(|_| r.gen_range(-0.3..0.3)).collect())?;
        store.set_buffer(&format!("{}.running_var", l.name), (0..c).map(|_| r.gen_range(0.5..1.5)).collect())?;
    }
    Ok(store)
}

fn bn_ref(x: &Tensor5<f64>, store: &ParamStore<f64>, name: &str, mode: Mode) -> Result<Tensor5<f64>> {
    let p = BnParams {
        gamma: store.value(&format!("{name}.gamma"))?.data().to_vec(),
        beta: store.value(&format!("{name}.beta"))?.data().to_vec(),
        running_mean: store.buffer(&format!("{name}.running_mean"))?.to_vec(),
        running_var: store.buffer(&format!("{name}.running_var"))?.to_vec(),
    };
    Ok(batch_norm(x, &p, mode)?.output)
}

/// Per-channel 3-D convolution written as an explicit loop, "same" padding.
pub fn depthwise_reference(x: &Tensor5<f64>, w: &Tensor5<f64>) -> Tensor5<f64> {
    let d = x.dims();
    let (kt, kh, kw) = (w.dims().t, w.dims().h, w.dims().w);
    let (pt, ph, pw) = (kt / 2, kh / 2, kw / 2);
    Tensor5::from_fn(d, |n, c, t, h, wi| {
        let mut acc = 0.0;
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let (ti, hi, wj) = (t + dt, h + dh, wi + dw);
                    if ti < pt || hi < ph || wj < pw || ti - pt >= d.t || hi - ph >= d.h || wj - pw >= d.w {
                        continue;
                    }
                    acc += w.get(c, 0, dt, dh, dw) * x.get(n, c, ti - pt, hi - ph, wj - pw);
                }
            }
        }
        acc
    })
}

fn module_output(m: &CtModule, store: &ParamStore<f64>, x: &Tensor5<f64>, mode: Mode) -> Result<Tensor5<f64>> {
    let mut fwd = Forward::new(store, mode);
    let xi = fwd.input(x.clone());
    let y = m.forward(&mut fwd, "m", xi)?;
    Ok(fwd.value(y).clone())
}

fn degenerate_cases(seed: u64) -> Result<Vec<CaseResult>> {
    let mut r = rng(seed);
    let c = *[3usize, 4, 6, 8].choose(&mut r).unwrap();
    let d = Dims::new(2, c, r.gen_range(3..=5), r.gen_range(3..=6), r.gen_range(3..=6));
    let x = rand_tensor(d, &mut r);
    let mut out = Vec::new();
    for mode in [Mode::Eval, Mode::Train] {
        let tag = format!("{mode:?}").to_lowercase();

        let m = module_of(Preset::C3d, c)?;
        let s = random_module_store(&m, d, &mut r)?;
        let dense = tconv_full(&x, s.value("m.sub1.conv.weight")?)?;
        let expect = bn_ref(&dense, &s, "m.sub1.conv_bn", mode)?.relu();
        let err = module_output(&m, &s, &x, mode)?.max_abs_diff(&expect)?;
        out.push(CaseResult::new(format!("c3d == dense 3x3x3 C={c} {tag}"), seed, err, DEGENERATE_TOL));

        let m = module_of(Preset::Csn, c)?;
        let s = random_module_store(&m, d, &mut r)?;
        let a = pointwise_conv(&x, s.value("m.sub1.conv.weight")?)?;
        let a = bn_ref(&a, &s, "m.sub1.conv_bn", mode)?.relu();
        let b = depthwise_reference(&a, s.value("m.sub2.conv.weight")?);
        let expect = bn_ref(&b, &s, "m.sub2.conv_bn", mode)?.relu();
        let err = module_output(&m, &s, &x, mode)?.max_abs_diff(&expect)?;
        out.push(CaseResult::new(format!("csn == pw + depthwise C={c} {tag}"), seed, err, DEGENERATE_TOL));

        let m = module_of(Preset::R21d, c)?;
        let s = random_module_store(&m, d, &mut r)?;
        let a = tconv_full(&x, s.value("m.sub1.conv.weight")?)?;
        let a = bn_ref(&a, &s, "m.sub1.conv_bn", mode)?.relu();
        let b = tconv_full(&a, s.value("m.sub2.conv.weight")?)?;
        let expect = bn_ref(&b, &s, "m.sub2.conv_bn", mode)?.relu();
        let err = module_output(&m, &s, &x, mode)?.max_abs_diff(&expect)?;
        out.push(CaseResult::new(format!("r21d == full (2+1)d C={c} {tag}"), seed, err, DEGENERATE_TOL));
    }
    Ok(out)
}

// ---------------------------------------------------------------- interaction

/// Module of `K` parallel kernel-3 sub-ops over `sizes`, without PW convs.
pub fn plain_module(sizes: &[usize]) -> Result<CtModule> {
    let f = ChannelFactorization::new(sizes.to_vec())?;
    let m = CtModule {
        channels: f.product(),
        sub_ops: (1..=f.k())
            .map(|k| SubOp {
                factorization: f.clone(),
                k,
                branches: Branches::parallel3(),
            })
            .collect(),
        pw: false,
        te: false,
    };
    m.validate()?;
    Ok(m)
}

/// Mismatches between the probed matrix after `prefix` sub-ops and the
/// predicate "multi-indices agree on every position after `prefix`".
pub fn interaction_mismatches(sizes: &[usize], prefix: usize) -> Result<usize> {
    let m = plain_module(sizes)?;
    let f = &m.sub_ops[0].factorization;
    let im = interaction_matrix(&m, Some(prefix))?;
    let mut bad = 0;
    for (o, row) in im.iter().enumerate() {
        for (i, &v) in row.iter().enumerate() {
            if v != f.agree_on(o, i, prefix..f.k()) {
                bad += 1;
            }
        }
    }
    Ok(bad)
}

pub const INTERACTION_CONFIGS: [&[usize]; 8] = [
    &[3, 4],
    &[2, 2, 3],
    &[6, 6],
    &[3, 3, 4],
    &[4, 3, 3],
    &[8, 8],
    &[4, 4, 4],
    &[2, 2, 4, 4],
];

fn interaction_cases() -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for sizes in INTERACTION_CONFIGS {
        for p in 1..=sizes.len() {
            let bad = interaction_mismatches(sizes, p)?;
            out.push(CaseResult::new(format!("f={sizes:?} after sub-op {p}"), 0, bad as f64, 0.5));
        }
        let full = interaction_matrix(&plain_module(sizes)?, None)?;
        let missing = full.iter().flatten().filter(|v| !**v).count();
        out.push(CaseResult::new(format!("f={sizes:?} complete"), 0, missing as f64, 0.5));
    }
    for c in [12, 36, 64] {
        let mut m = module_of(Preset::Csn, c)?;
        m.sub_ops.remove(0);
        let im = interaction_matrix(&m, None)?;
        let off = im
            .iter()
            .enumerate()
            .flat_map(|(o, row)| row.iter().enumerate().map(move |(i, &v)| v != (o == i)))
            .filter(|&b| b)
            .count();
        out.push(CaseResult::new(format!("csn depthwise C={c} is diagonal"), 0, off as f64, 0.5));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass_on_a_few_trials() {
        for suite in [Suite::Equivalence, Suite::Degenerate] {
            let r = run_suite(suite, 7, 3).unwrap();
            assert!(r.pass(), "{}", r.render(true));
        }
    }

    #[test]
    fn gradient_primitives_pass() {
        let cases = gradient_cases(11).unwrap();
        for c in &cases {
            assert!(c.pass, "{} err {}", c.name, c.max_error);
        }
    }

    #[test]
    fn smooth_check_is_tight() {
        let x = Tensor5::from_fn(Dims::new(1, 1, 1, 1, 3), |_, _, _, _, w| w as f64 + 0.5);
        let err = check_gradients(&[x], |g, v| Ok(g.sigmoid(v[0])), 1, None).unwrap();
        assert!(err < 1e-8);
    }
}
