//! Channel tensorization modules and the presets that degenerate them into
//! C3D, R(2+1)D and CSN style convolutions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::NodeId;
use crate::conv::{ConvGeometry, Kernel3};
use crate::error::{Error, Result};
use crate::layer::LayerDesc;
use crate::params::Forward;
use crate::scalar::Scalar;
use crate::te::{gate_specs, te_forward};
use crate::tensor::{ChannelFactorization, Dims};
use crate::tsconv::{Connection, TSConvSpec};

/// The convolution(s) of one sub-operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branches {
    /// Spatial and temporal factors on the same input, summed.
    Parallel { spatial: Kernel3, temporal: Kernel3 },
    /// Spatial factor, then temporal factor on its activated output.
    Serial { spatial: Kernel3, temporal: Kernel3 },
    /// One kernel covering all three axes.
    Coupled(Kernel3),
}

impl Branches {
    pub const fn parallel3() -> Self {
        Self::Parallel {
            spatial: Kernel3::spatial(3, 3),
            temporal: Kernel3::temporal(3),
        }
    }

    pub fn connection(&self) -> Connection {
        match self {
            Self::Parallel { .. } => Connection::Parallel,
            Self::Serial { .. } => Connection::Serial,
            Self::Coupled(_) => Connection::Coupling,
        }
    }

    /// Growth of the influence extent per axis.
    pub fn reach(&self) -> [usize; 3] {
        let r = |k: Kernel3| [k.t - 1, k.h - 1, k.w - 1];
        match *self {
            Self::Coupled(k) => r(k),
            Self::Parallel { spatial, temporal } => {
                let (a, b) = (r(spatial), r(temporal));
                [a[0].max(b[0]), a[1].max(b[1]), a[2].max(b[2])]
            }
            Self::Serial { spatial, temporal } => {
                let (a, b) = (r(spatial), r(temporal));
                [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Self::Coupled(k) => ok_kernel(k),
            Self::Parallel { spatial, temporal } | Self::Serial { spatial, temporal } => {
                ok_kernel(spatial)?;
                ok_kernel(temporal)?;
                if spatial.t != 1 {
                    return Err(Error::KernelShapeViolation(format!(
                        "spatial kernel {spatial} must have kt = 1"
                    )));
                }
                if temporal.h != 1 || temporal.w != 1 {
                    return Err(Error::KernelShapeViolation(format!(
                        "temporal kernel {temporal} must have kh = kw = 1"
                    )));
                }
                Ok(())
            }
        }
    }
}

fn ok_kernel(k: Kernel3) -> Result<()> {
    if k.volume() == 0 || !k.is_odd() {
        return Err(Error::KernelShapeViolation(format!("kernel {k} must be odd")));
    }
    Ok(())
}

/// `S|T` parallel, `S>T` serial, or a single kernel for coupled.
impl FromStr for Branches {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let b = if let Some((a, b)) = s.split_once(['|']) {
            Self::Parallel {
                spatial: a.parse()?,
                temporal: b.parse()?,
            }
        } else if let Some((a, b)) = s.split_once('>') {
            Self::Serial {
                spatial: a.parse()?,
                temporal: b.parse()?,
            }
        } else {
            Self::Coupled(s.parse()?)
        };
        b.validate()?;
        Ok(b)
    }
}

impl fmt::Display for Branches {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Parallel { spatial, temporal } => write!(f, "{spatial}|{temporal}"),
            Self::Serial { spatial, temporal } => write!(f, "{spatial}>{temporal}"),
            Self::Coupled(k) => write!(f, "{k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubOp {
    pub factorization: ChannelFactorization,
    /// Active sub-dimension, 1-based.
    pub k: usize,
    pub branches: Branches,
}

impl SubOp {
    fn spec(&self, kernel: Kernel3) -> Result<TSConvSpec> {
        TSConvSpec::new(self.factorization.clone(), self.k, kernel)
    }
}

/// A C to C module of sequential sub-operations.
///
/// Every conv is followed by its own batch norm; parallel branches are
/// normalized separately, then summed (or excited) and rectified.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CtModule {
    pub channels: usize,
    pub sub_ops: Vec<SubOp>,
    /// Full 1x1x1 conv + BN + ReLU between consecutive sub-operations.
    pub pw: bool,
    /// Tensor Excitation inside every sub-operation.
    pub te: bool,
}

impl CtModule {
    pub fn validate(&self) -> Result<()> {
        if self.sub_ops.is_empty() {
            return Err(Error::ConfigInvalid("module needs at least one sub-operation".into()));
        }
        for (i, op) in self.sub_ops.iter().enumerate() {
            op.factorization.check(self.channels)?;
            if op.k == 0 || op.k > op.factorization.k() {
                return Err(Error::ConfigInvalid(format!(
                    "sub-op {} targets sub-dimension {} of {:?}",
                    i + 1,
                    op.k,
                    op.factorization.sizes()
                )));
            }
            op.branches.validate()?;
            if self.te && op.branches.connection() != Connection::Parallel {
                return Err(Error::ConfigInvalid(format!(
                    "excitation needs parallel branches, sub-op {} is {}",
                    i + 1,
                    op.branches.connection()
                )));
            }
        }
        Ok(())
    }

    /// Bounding extent `(t, h, w)` of one output unit's input influence.
    pub fn rf_extent(&self) -> [usize; 3] {
        let mut e = [1, 1, 1];
        for op in &self.sub_ops {
            let r = op.branches.reach();
            for a in 0..3 {
                e[a] += r[a];
            }
        }
        e
    }

    /// Layers in forward order for an input of dims `x` (`x.c == channels`).
    pub fn layers(&self, prefix: &str, x: Dims) -> Result<Vec<LayerDesc>> {
        self.validate()?;
        if x.c != self.channels {
            return Err(Error::ShapeMismatch {
                op: "ct module",
                left: x,
                right: x.with_c(self.channels),
            });
        }
        let mut out = Vec::new();
        let last = self.sub_ops.len();
        for (i, op) in self.sub_ops.iter().enumerate() {
            let p = format!("{prefix}.sub{}", i + 1);
            let mut conv = |name: String, kernel: Kernel3, dims: Dims| -> Result<()> {
                let spec = op.spec(kernel)?;
                out.push(LayerDesc::conv(&name, dims, spec.weight_dims(), spec.geometry()));
                out.push(LayerDesc::bn(format!("{name}_bn"), dims));
                Ok(())
            };
            match op.branches {
                Branches::Coupled(k) => conv(format!("{p}.conv"), k, x)?,
                Branches::Parallel { spatial, temporal } | Branches::Serial { spatial, temporal } => {
                    conv(format!("{p}.s"), spatial, x)?;
                    conv(format!("{p}.t"), temporal, x)?;
                }
            }
            if self.te {
                let [s, t, c] = gate_specs(&op.factorization, op.k)?;
                let pooled_t = x.with_t(1);
                let pooled_s = x.with_hw(1, 1);
                for (tag, spec, dims) in [("s", s, pooled_t), ("t", t, pooled_s), ("c", c, pooled_s)] {
                    let name = format!("{p}.te.{tag}");
                    out.push(LayerDesc::conv(&name, dims, spec.weight_dims(), spec.geometry()));
                    out.push(LayerDesc::bn(format!("{name}_bn"), dims));
                }
            }
            if self.pw && i + 1 < last {
                let name = format!("{prefix}.pw{}", i + 1);
                let c = self.channels;
                out.push(LayerDesc::conv(
                    &name,
                    x,
                    Dims::new(c, c, 1, 1, 1),
                    ConvGeometry::same(Kernel3::point(), 1),
                ));
                out.push(LayerDesc::bn(format!("{name}_bn"), x));
            }
        }
        Ok(out)
    }

    pub fn forward<S: Scalar>(&self, fwd: &mut Forward<'_, S>, prefix: &str, mut x: NodeId) -> Result<NodeId> {
        self.validate()?;
        let last = self.sub_ops.len();
        for (i, op) in self.sub_ops.iter().enumerate() {
            let p = format!("{prefix}.sub{}", i + 1);
            let conv_bn = |fwd: &mut Forward<'_, S>, input: NodeId, name: String, kernel: Kernel3| -> Result<NodeId> {
                let y = fwd.tsconv(input, &name, &op.spec(kernel)?)?;
                fwd.batch_norm(y, &format!("{name}_bn"))
            };
            x = match op.branches {
                Branches::Coupled(k) => {
                    let y = conv_bn(fwd, x, format!("{p}.conv"), k)?;
                    fwd.relu(y)
                }
                Branches::Serial { spatial, temporal } => {
                    let a = conv_bn(fwd, x, format!("{p}.s"), spatial)?;
                    let a = fwd.relu(a);
                    let b = conv_bn(fwd, a, format!("{p}.t"), temporal)?;
                    fwd.relu(b)
                }
                Branches::Parallel { spatial, temporal } => {
                    let a = conv_bn(fwd, x, format!("{p}.s"), spatial)?;
                    let b = conv_bn(fwd, x, format!("{p}.t"), temporal)?;
                    let y = if self.te {
                        te_forward(fwd, &format!("{p}.te"), &op.factorization, op.k, a, b)?
                    } else {
                        fwd.graph.add(a, b)?
                    };
                    fwd.relu(y)
                }
            };
            if self.pw && i + 1 < last {
                let name = format!("{prefix}.pw{}", i + 1);
                let y = fwd.conv(x, &name, ConvGeometry::same(Kernel3::point(), 1))?;
                let y = fwd.batch_norm(y, &format!("{name}_bn"))?;
                x = fwd.relu(y);
            }
        }
        Ok(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Tsn,
    C3d,
    R21d,
    Csn,
    Ctnet,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::Tsn, Preset::C3d, Preset::R21d, Preset::Csn, Preset::Ctnet];

    pub fn name(self) -> &'static str {
        match self {
            Self::Tsn => "tsn",
            Self::C3d => "c3d",
            Self::R21d => "r21d",
            Self::Csn => "csn",
            Self::Ctnet => "ctnet",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tsn" => Ok(Self::Tsn),
            "c3d" => Ok(Self::C3d),
            "r21d" | "r(2+1)d" | "r2+1d" => Ok(Self::R21d),
            "csn" => Ok(Self::Csn),
            "ctnet" | "ct" | "ct-net" => Ok(Self::Ctnet),
            other => Err(Error::UnknownPreset(other.to_string())),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How a module's channel count is split into sub-dimensions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FactorizationRule {
    /// `K = 2` with `C2` the divisor of `C` nearest `sqrt(C)` (ties to the
    /// smaller divisor) and `C1 = C / C2`.
    RoundedMiddle,
    /// `K` near-equal divisors, largest first.
    Balanced,
    /// `K = 2` with a fixed inner size `C2`.
    Inner(usize),
    /// Fixed sizes; only valid where their product is the module width.
    Explicit(Vec<usize>),
}

impl FactorizationRule {
    pub fn apply(&self, channels: usize, k: usize) -> Result<ChannelFactorization> {
        if channels == 0 || k == 0 {
            return Err(Error::ConfigInvalid("channels and K must be positive".into()));
        }
        let sizes = match self {
            Self::RoundedMiddle if k == 1 => vec![channels],
            Self::RoundedMiddle => {
                if k != 2 {
                    return Err(Error::ConfigInvalid(format!(
                        "rounded-middle factorization is defined for K = 2, got K = {k}"
                    )));
                }
                let c2 = rounded_middle(channels);
                vec![channels / c2, c2]
            }
            Self::Balanced => balanced(channels, k),
            Self::Inner(c2) => {
                if k != 2 || *c2 == 0 || channels % c2 != 0 {
                    return Err(Error::FactorizationMismatch {
                        sizes: vec![channels / (*c2).max(1), *c2],
                        product: (channels / (*c2).max(1)) * c2,
                        channels,
                    });
                }
                vec![channels / c2, *c2]
            }
            Self::Explicit(v) => v.clone(),
        };
        let f = ChannelFactorization::new(sizes)?;
        f.check(channels)?;
        Ok(f)
    }
}

impl FromStr for FactorizationRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "rounded-middle" => return Ok(Self::RoundedMiddle),
            "balanced" => return Ok(Self::Balanced),
            _ => {}
        }
        if let Some(v) = s.strip_prefix("inner:") {
            let c2 = v
                .trim()
                .parse()
                .map_err(|_| Error::ConfigInvalid(format!("bad inner size `{v}`")))?;
            return Ok(Self::Inner(c2));
        }
        let sizes = parse_list(s).map_err(|_| Error::ConfigInvalid(format!("unknown factorization `{s}`")))?;
        Ok(Self::Explicit(sizes))
    }
}

impl fmt::Display for FactorizationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::RoundedMiddle => f.write_str("rounded-middle"),
            Self::Balanced => f.write_str("balanced"),
            Self::Inner(c) => write!(f, "inner:{c}"),
            Self::Explicit(v) => {
                let s: Vec<String> = v.iter().map(|x| x.to_string()).collect();
                f.write_str(&s.join(","))
            }
        }
    }
}

pub(crate) fn parse_list(s: &str) -> std::result::Result<Vec<usize>, std::num::ParseIntError> {
    s.split(',').map(|p| p.trim().parse()).collect()
}

fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n % d == 0).collect()
}

/// Divisor of `c` nearest `sqrt(c)`, ties toward the smaller one.
pub fn rounded_middle(c: usize) -> usize {
    let root = (c as f64).sqrt();
    let mut best = 1;
    for d in divisors(c) {
        if (d as f64 - root).abs() < (best as f64 - root).abs() - 1e-12 {
            best = d;
        }
    }
    best
}

/// Greedy near-equal split into `k` factors, sorted descending.
pub fn balanced(c: usize, k: usize) -> Vec<usize> {
    let mut rest = c;
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        if i + 1 == k {
            out.push(rest);
            break;
        }
        let target = (rest as f64).powf(1.0 / (k - i) as f64);
        let mut best = 1;
        for d in divisors(rest) {
            if (d as f64 - target).abs() <= (best as f64 - target).abs() + 1e-12 {
                best = d;
            }
        }
        out.push(best);
        rest /= best;
    }
    out.sort_unstable_by(|a, b| b.cmp(a));
    out
}

/// What sits in the middle of a bottleneck block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Middle {
    /// Framewise 3x3 conv; carries the block's spatial stride.
    Conv2d,
    Ct(CtModule),
}

/// Block-level configuration, resolved per width by [`BlockConfig::resolve`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub preset: Preset,
    /// Number of sub-dimensions; used by the `ctnet` preset.
    pub k: usize,
    pub factorization: FactorizationRule,
    /// Branch layout for the `ctnet` preset when `kernels` is unset.
    pub connection: Connection,
    /// Per-sub-op branch override for the `ctnet` preset.
    pub kernels: Option<Vec<Branches>>,
    pub pw: bool,
    pub te: bool,
}

/// Default block configuration for `preset`.
pub fn build_preset(preset: Preset) -> BlockConfig {
    BlockConfig {
        preset,
        k: 2,
        factorization: FactorizationRule::RoundedMiddle,
        connection: Connection::Parallel,
        kernels: None,
        pw: false,
        te: false,
    }
}

impl BlockConfig {
    pub fn with_pw(mut self, pw: bool) -> Self {
        self.pw = pw;
        self
    }

    pub fn with_te(mut self, te: bool) -> Self {
        self.te = te;
        self
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    pub fn with_factorization(mut self, rule: FactorizationRule) -> Self {
        self.factorization = rule;
        self
    }

    pub fn with_kernels(mut self, kernels: Vec<Branches>) -> Self {
        self.kernels = Some(kernels);
        self
    }

    pub fn with_connection(mut self, c: Connection) -> Self {
        self.connection = c;
        self
    }

    /// Expands to a concrete middle for a bottleneck width of `c`.
    pub fn resolve(&self, c: usize) -> Result<Middle> {
        let full = || ChannelFactorization::new(vec![c]);
        let coupled = |f: &ChannelFactorization, k, kernel| SubOp {
            factorization: f.clone(),
            k,
            branches: Branches::Coupled(kernel),
        };
        let sub_ops = match self.preset {
            Preset::Tsn => return Ok(Middle::Conv2d),
            Preset::C3d => vec![coupled(&full()?, 1, Kernel3::cube(3))],
            Preset::R21d => {
                let f = full()?;
                vec![coupled(&f, 1, Kernel3::spatial(3, 3)), coupled(&f, 1, Kernel3::temporal(3))]
            }
            Preset::Csn => {
                let f = ChannelFactorization::new(vec![c, 1])?;
                vec![coupled(&f, 1, Kernel3::point()), coupled(&f, 2, Kernel3::cube(3))]
            }
            Preset::Ctnet => {
                let f = self.factorization.apply(c, self.k)?;
                let k = f.k();
                let branches = match &self.kernels {
                    Some(list) => {
                        if list.len() != k {
                            return Err(Error::ConfigInvalid(format!(
                                "{} kernel entries for K = {k}",
                                list.len()
                            )));
                        }
                        list.clone()
                    }
                    None => {
                        let b = match self.connection {
                            Connection::Parallel => Branches::parallel3(),
                            Connection::Serial => Branches::Serial {
                                spatial: Kernel3::spatial(3, 3),
                                temporal: Kernel3::temporal(3),
                            },
                            Connection::Coupling => Branches::Coupled(Kernel3::cube(3)),
                        };
                        vec![b; k]
                    }
                };
                branches
                    .into_iter()
                    .enumerate()
                    .map(|(i, b)| SubOp {
                        factorization: f.clone(),
                        k: i + 1,
                        branches: b,
                    })
                    .collect()
            }
        };
        let m = CtModule {
            channels: c,
            sub_ops,
            pw: self.pw,
            te: self.te,
        };
        m.validate()?;
        Ok(Middle::Ct(m))
    }
}
