//! Residual bottleneck backbone with a configurable block-replacement pattern.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::NodeId;
use crate::block::{build_preset, BlockConfig, CtModule, Middle, Preset};
use crate::conv::{ConvGeometry, Kernel3};
use crate::error::{Error, Result};
use crate::init::rng;
use crate::layer::{init_layers, LayerDesc};
use crate::params::{Forward, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Dims, Mode, Tensor5};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub channels: usize,
    /// Framewise `k x k` kernel.
    pub kernel: usize,
    pub stride: usize,
    /// 3x3 stride-2 max pool after the stem conv.
    pub pool: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub blocks: usize,
    /// Bottleneck width; the block output is `width * expansion`.
    pub width: usize,
    pub stride: usize,
}

/// Which bottleneck blocks host the configured module. Stages number from 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Replacement {
    None,
    /// The 2nd, 4th, ... block of every stage.
    EverySecond,
    /// Same, restricted to the listed stages.
    EverySecondIn(Vec<usize>),
    All,
    /// `(stage, block)` pairs, both 1-based.
    Explicit(Vec<(usize, usize)>),
}

impl Replacement {
    pub fn hosts(&self, stage: usize, block: usize) -> bool {
        match self {
            Self::None => false,
            Self::EverySecond => block % 2 == 0,
            Self::EverySecondIn(stages) => block % 2 == 0 && stages.contains(&stage),
            Self::All => true,
            Self::Explicit(list) => list.contains(&(stage, block)),
        }
    }
}

/// `none`, `all`, `every-second`, `every-second:3,4`, or `2.2,3.2` pairs.
impl FromStr for Replacement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::ConfigInvalid(format!("bad replacement `{s}`"));
        Ok(match s {
            "none" => Self::None,
            "all" => Self::All,
            "every-second" => Self::EverySecond,
            _ => {
                if let Some(list) = s.strip_prefix("every-second:") {
                    Self::EverySecondIn(crate::block::parse_list(list).map_err(|_| bad())?)
                } else {
                    let pairs = s
                        .split(',')
                        .map(|p| {
                            let (a, b) = p.trim().split_once('.').ok_or_else(bad)?;
                            Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Self::Explicit(pairs)
                }
            }
        })
    }
}

impl fmt::Display for Replacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: Vec<String>| v.join(",");
        match self {
            Self::None => f.write_str("none"),
            Self::All => f.write_str("all"),
            Self::EverySecond => f.write_str("every-second"),
            Self::EverySecondIn(v) => write!(f, "every-second:{}", join(v.iter().map(|x| x.to_string()).collect())),
            Self::Explicit(v) => f.write_str(&join(v.iter().map(|(a, b)| format!("{a}.{b}")).collect())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub in_channels: usize,
    pub frames: usize,
    pub resolution: usize,
    pub classes: usize,
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
    pub expansion: usize,
    pub block: BlockConfig,
    pub replacement: Replacement,
}

impl NetSpec {
    /// ResNet-50 layout at 8 x 256 x 256 with 174 classes; the stride of a
    /// stage's first block sits in its 3x3 conv.
    pub fn resnet50(block: BlockConfig) -> Self {
        Self {
            in_channels: 3,
            frames: 8,
            resolution: 256,
            classes: 174,
            stem: StemSpec {
                channels: 64,
                kernel: 7,
                stride: 2,
                pool: true,
            },
            stages: [(3, 64, 1), (4, 128, 2), (6, 256, 2), (3, 512, 2)]
                .into_iter()
                .map(|(blocks, width, stride)| StageSpec { blocks, width, stride })
                .collect(),
            expansion: 4,
            block,
            replacement: Replacement::EverySecond,
        }
    }

    /// Two single-block stages on 1 x 8 x 32 x 32 clips with 4 classes.
    pub fn toy(block: BlockConfig) -> Self {
        Self {
            in_channels: 1,
            frames: 8,
            resolution: 32,
            classes: 4,
            stem: StemSpec {
                channels: 8,
                kernel: 3,
                stride: 1,
                pool: false,
            },
            stages: vec![
                StageSpec {
                    blocks: 1,
                    width: 8,
                    stride: 2,
                },
                StageSpec {
                    blocks: 1,
                    width: 16,
                    stride: 2,
                },
            ],
            expansion: 4,
            block,
            replacement: Replacement::All,
        }
    }

    pub fn preset_resnet50(preset: Preset) -> Self {
        Self::resnet50(build_preset(preset))
    }

    pub fn total_stride(&self) -> usize {
        let stem = self.stem.stride * if self.stem.pool { 2 } else { 1 };
        stem * self.stages.iter().map(|s| s.stride).product::<usize>()
    }

    pub fn input_dims(&self, n: usize) -> Dims {
        Dims::new(n, self.in_channels, self.frames, self.resolution, self.resolution)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.in_channels, self.frames, self.resolution, self.classes, self.expansion];
        if positive.contains(&0) || self.stages.is_empty() {
            return Err(Error::ConfigInvalid("net dimensions must be positive".into()));
        }
        if self.stem.channels == 0 || self.stem.kernel % 2 == 0 || self.stem.stride == 0 {
            return Err(Error::ConfigInvalid("stem needs positive channels, odd kernel, stride >= 1".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.blocks == 0 || s.width == 0 || s.stride == 0 {
                return Err(Error::ConfigInvalid(format!("stage {} has a zero field", i + 1)));
            }
        }
        if let Replacement::Explicit(list) = &self.replacement {
            for &(st, b) in list {
                if st == 0 || st > self.stages.len() || b == 0 || b > self.stages[st - 1].blocks {
                    return Err(Error::ConfigInvalid(format!("replacement {st}.{b} out of range")));
                }
            }
        }
        if let Replacement::EverySecondIn(list) = &self.replacement {
            if list.iter().any(|&st| st == 0 || st > self.stages.len()) {
                return Err(Error::ConfigInvalid(format!("replacement stages {list:?} out of range")));
            }
        }
        if self.resolution % self.total_stride() != 0 {
            return Err(Error::ConfigInvalid(format!(
                "resolution {} not divisible by total stride {}",
                self.resolution,
                self.total_stride()
            )));
        }
        Ok(())
    }

    pub fn plan(&self) -> Result<NetPlan> {
        self.validate()?;
        let mut blocks = Vec::new();
        let mut in_c = self.stem.channels;
        for (si, stage) in self.stages.iter().enumerate() {
            for bi in 0..stage.blocks {
                let stride = if bi == 0 { stage.stride } else { 1 };
                let out_c = stage.width * self.expansion;
                let middle = if self.replacement.hosts(si + 1, bi + 1) {
                    self.block.resolve(stage.width)?
                } else {
                    Middle::Conv2d
                };
                blocks.push(BlockPlan {
                    name: format!("s{}.b{}", si + 1, bi + 1),
                    in_c,
                    width: stage.width,
                    out_c,
                    stride,
                    middle,
                });
                in_c = out_c;
            }
        }
        Ok(NetPlan {
            spec: self.clone(),
            blocks,
        })
    }
}

/// One bottleneck: 1x1 reduce, middle, 1x1 expand, projection shortcut when
/// the shape changes. A replaced block moves its stride to the first 1x1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPlan {
    pub name: String,
    pub in_c: usize,
    pub width: usize,
    pub out_c: usize,
    pub stride: usize,
    pub middle: Middle,
}

impl BlockPlan {
    pub fn downsample(&self) -> bool {
        self.stride != 1 || self.in_c != self.out_c
    }

    pub fn module(&self) -> Option<&CtModule> {
        match &self.middle {
            Middle::Ct(m) => Some(m),
            Middle::Conv2d => None,
        }
    }

    fn strides(&self) -> (usize, usize) {
        match self.middle {
            Middle::Conv2d => (1, self.stride),
            Middle::Ct(_) => (self.stride, 1),
        }
    }
}

fn point_geom(stride: usize) -> ConvGeometry {
    ConvGeometry::strided(Kernel3::point(), 1, [1, stride, stride])
}

fn conv2d_geom(k: usize, stride: usize) -> ConvGeometry {
    ConvGeometry::strided(Kernel3::spatial(k, k), 1, [1, stride, stride])
}

fn conv_layer(out: &mut Vec<LayerDesc>, name: &str, x: Dims, cout: usize, kernel: Kernel3, geom: ConvGeometry) -> Result<Dims> {
    let w = Dims::new(cout, x.c / geom.groups, kernel.t, kernel.h, kernel.w);
    let y = geom.output_dims(x, w)?;
    out.push(LayerDesc::conv(name, y, w, geom));
    Ok(y)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetPlan {
    pub spec: NetSpec,
    pub blocks: Vec<BlockPlan>,
}

impl NetPlan {
    pub fn replaced(&self) -> usize {
        self.blocks.iter().filter(|b| b.module().is_some()).count()
    }

    /// Every conv, norm and linear layer in forward order for batch `n`.
    pub fn layers(&self, n: usize) -> Result<Vec<LayerDesc>> {
        let s = &self.spec;
        let mut out = Vec::new();
        let x = s.input_dims(n);
        let k = Kernel3::spatial(s.stem.kernel, s.stem.kernel);
        let mut x = conv_layer(&mut out, "stem.conv", x, s.stem.channels, k, conv2d_geom(s.stem.kernel, s.stem.stride))?;
        out.push(LayerDesc::bn("stem.bn", x));
        if s.stem.pool {
            x = x.with_hw((x.h + 2 - 3) / 2 + 1, (x.w + 2 - 3) / 2 + 1);
        }
        for b in &self.blocks {
            let (s1, s2) = b.strides();
            let p = &b.name;
            let y = conv_layer(&mut out, &format!("{p}.conv1"), x, b.width, Kernel3::point(), point_geom(s1))?;
            out.push(LayerDesc::bn(format!("{p}.bn1"), y));
            let y = match &b.middle {
                Middle::Conv2d => {
                    let y = conv_layer(&mut out, &format!("{p}.conv2"), y, b.width, Kernel3::spatial(3, 3), conv2d_geom(3, s2))?;
                    out.push(LayerDesc::bn(format!("{p}.bn2"), y));
                    y
                }
                Middle::Ct(m) => {
                    out.extend(m.layers(&format!("{p}.ct"), y)?);
                    y
                }
            };
            let y = conv_layer(&mut out, &format!("{p}.conv3"), y, b.out_c, Kernel3::point(), point_geom(1))?;
            out.push(LayerDesc::bn(format!("{p}.bn3"), y));
            if b.downsample() {
                let d = conv_layer(&mut out, &format!("{p}.down"), x, b.out_c, Kernel3::point(), point_geom(b.stride))?;
                out.push(LayerDesc::bn(format!("{p}.down_bn"), d));
            }
            x = y;
        }
        out.push(LayerDesc::linear("fc", Dims::new(n, s.classes, 1, 1, 1), x.c));
        Ok(out)
    }

    fn block_forward<S: Scalar>(&self, fwd: &mut Forward<'_, S>, b: &BlockPlan, x: NodeId) -> Result<NodeId> {
        let (s1, s2) = b.strides();
        let p = &b.name;
        let y = fwd.conv(x, &format!("{p}.conv1"), point_geom(s1))?;
        let y = fwd.batch_norm(y, &format!("{p}.bn1"))?;
        let y = fwd.relu(y);
        let y = match &b.middle {
            Middle::Conv2d => {
                let y = fwd.conv(y, &format!("{p}.conv2"), conv2d_geom(3, s2))?;
                let y = fwd.batch_norm(y, &format!("{p}.bn2"))?;
                fwd.relu(y)
            }
            Middle::Ct(m) => m.forward(fwd, &format!("{p}.ct"), y)?,
        };
        let y = fwd.conv(y, &format!("{p}.conv3"), point_geom(1))?;
        let y = fwd.batch_norm(y, &format!("{p}.bn3"))?;
        let shortcut = if b.downsample() {
            let d = fwd.conv(x, &format!("{p}.down"), point_geom(b.stride))?;
            fwd.batch_norm(d, &format!("{p}.down_bn"))?
        } else {
            x
        };
        let y = fwd.graph.add(y, shortcut)?;
        Ok(fwd.relu(y))
    }

    /// Records the network on `fwd`; returns logits of dims `(N, classes, 1, 1, 1)`.
    pub fn forward<S: Scalar>(&self, fwd: &mut Forward<'_, S>, x: NodeId) -> Result<NodeId> {
        let s = &self.spec;
        let d = fwd.dims(x);
        let expect = s.input_dims(d.n);
        if d != expect {
            return Err(Error::ShapeMismatch {
                op: "network input",
                left: d,
                right: expect,
            });
        }
        let y = fwd.conv(x, "stem.conv", conv2d_geom(s.stem.kernel, s.stem.stride))?;
        let y = fwd.batch_norm(y, "stem.bn")?;
        let mut y = fwd.relu(y);
        if s.stem.pool {
            y = fwd.graph.max_pool_hw(y, 3, 2, 1)?;
        }
        for b in &self.blocks {
            y = self.block_forward(fwd, b, y)?;
        }
        let pooled = fwd.graph.global_pool(y);
        fwd.conv(pooled, "fc", ConvGeometry::same(Kernel3::point(), 1))
    }
}

/// A plan with its parameters.
#[derive(Debug, Clone)]
pub struct Network<S> {
    pub plan: NetPlan,
    pub params: ParamStore<S>,
}

impl<S: Scalar> Network<S> {
    pub fn new(spec: &NetSpec, seed: u64) -> Result<Self> {
        let plan = spec.plan()?;
        let mut params = ParamStore::new();
        init_layers(&mut params, &plan.layers(1)?, &mut rng(seed));
        Ok(Self { plan, params })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.plan.spec
    }

    /// Logits as a plain tensor; train mode uses batch statistics but the
    /// running-stat updates are discarded.
    pub fn logits(&self, x: &Tensor5<S>, mode: Mode) -> Result<Tensor5<S>> {
        let mut fwd = Forward::new(&self.params, mode);
        let xi = fwd.input(x.clone());
        let y = self.plan.forward(&mut fwd, xi)?;
        Ok(fwd.value(y).clone())
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::FactorizationRule;

    #[test]
    fn default_pattern_replaces_seven_blocks() {
        let plan = NetSpec::preset_resnet50(Preset::Ctnet).plan().unwrap();
        assert_eq!(plan.replaced(), 7);
        assert_eq!(plan.blocks.len(), 16);
        let tsn = NetSpec::preset_resnet50(Preset::Tsn).plan().unwrap();
        assert_eq!(tsn.replaced(), 0);
        let spec = NetSpec {
            replacement: Replacement::EverySecondIn(vec![4]),
            ..NetSpec::preset_resnet50(Preset::Ctnet)
        };
        assert_eq!(spec.plan().unwrap().replaced(), 1);
    }

    #[test]
    fn replacement_syntax() {
        for s in ["none", "all", "every-second", "every-second:3,4", "1.2,4.2"] {
            assert_eq!(s.parse::<Replacement>().unwrap().to_string(), s);
        }
        assert!("1-2".parse::<Replacement>().is_err());
    }

    #[test]
    fn toy_forward_on_zeros_is_bias() {
        let net = Network::<f64>::new(&NetSpec::toy(build_preset(Preset::Ctnet).with_pw(true).with_te(true)), 1).unwrap();
        let mut params = net.params.clone();
        let bias = Tensor5::from_vec(Dims::new(1, 4, 1, 1, 1), vec![0.1, -0.2, 0.3, 0.4]).unwrap();
        params.set_value("fc.bias", bias.clone()).unwrap();
        let net = Network { params, ..net };
        let x = Tensor5::zeros(net.spec().input_dims(2));
        for mode in [Mode::Eval, Mode::Train] {
            let z = net.logits(&x, mode).unwrap();
            for n in 0..2 {
                for c in 0..4 {
                    assert!((z.get(n, c, 0, 0, 0) - bias.data()[c]).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn layers_match_initialized_params() {
        let spec = NetSpec::toy(build_preset(Preset::Ctnet).with_pw(true).with_te(true));
        let net = Network::<f64>::new(&spec, 2).unwrap();
        let layers = net.plan.layers(1).unwrap();
        let counted: u64 = layers.iter().map(|l| l.params()).sum();
        assert_eq!(counted as usize, net.param_count());
        let mut fwd = Forward::new(&net.params, Mode::Eval);
        let x = fwd.input(Tensor5::zeros(spec.input_dims(1)));
        net.plan.forward(&mut fwd, x).unwrap();
        assert_eq!(fwd.bound().len(), net.params.len(), "every parameter is used");
        let macs: u64 = layers.iter().map(|l| l.macs()).sum();
        assert_eq!(fwd.graph.macs(), macs);
    }

    #[test]
    fn bad_factorization_is_config_error() {
        let block = build_preset(Preset::Ctnet).with_factorization(FactorizationRule::Explicit(vec![8, 8]));
        let err = NetSpec::resnet50(block).plan().unwrap_err();
        assert!(matches!(err, Error::FactorizationMismatch { .. }));
        let spec = NetSpec {
            resolution: 100,
            ..NetSpec::preset_resnet50(Preset::Tsn)
        };
        assert!(spec.plan().is_err());
    }
}
