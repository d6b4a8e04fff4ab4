//! Text network configs: `key = value` lines under `[net]` and `[block]`.
//!
//! `[net]` keys (all optional, layered over `base`):
//!
//! | key | value |
//! |---|---|
//! | `base` | `r50` (default) or `toy` |
//! | `frames`, `resolution`, `classes`, `in_channels`, `expansion` | integers |
//! | `stages` | blocks per stage, e.g. `3,4,6,3` |
//! | `widths` | bottleneck width per stage |
//! | `strides` | spatial stride per stage |
//! | `stem_channels`, `stem_kernel`, `stem_stride` | integers |
//! | `stem_pool` | `true` / `false` |
//! | `replacement` | `none`, `all`, `every-second`, `every-second:3,4` or `stage.block` pairs such as `2.2,3.2` |
//!
//! `[block]` keys:
//!
//! | key | value |
//! |---|---|
//! | `preset` | `tsn`, `c3d`, `r21d`, `csn`, `ctnet` |
//! | `k` | number of channel sub-dimensions |
//! | `factorization` | `rounded-middle`, `balanced`, `inner:N` or explicit sizes `a,b,...` |
//! | `kernels` | one branch spec per sub-dimension separated by `;`: `1x3x3\|3x1x1` parallel, `1x3x3>3x1x1` serial, `3x3x3` coupled |
//! | `connection` | `parallel`, `serial` or `coupling` |
//! | `pw`, `te` | `true` / `false` |
//!
//! Keys are case-insensitive; unknown sections or keys are errors.

use std::path::Path;

use ini::Ini;

use crate::block::{build_preset, Branches, FactorizationRule, Preset};
use crate::error::{Error, Result};
use crate::net::{NetSpec, StageSpec};
use crate::tsconv::Connection;

const NET_KEYS: &[&str] = &[
    "base",
    "frames",
    "resolution",
    "classes",
    "in_channels",
    "expansion",
    "stages",
    "widths",
    "strides",
    "stem_channels",
    "stem_kernel",
    "stem_stride",
    "stem_pool",
    "replacement",
];
const BLOCK_KEYS: &[&str] = &["preset", "k", "factorization", "kernels", "connection", "pw", "te"];

fn invalid(msg: String) -> Error {
    Error::ConfigInvalid(msg)
}

fn num(key: &str, v: &str) -> Result<usize> {
    v.trim()
        .parse()
        .map_err(|_| invalid(format!("`{key}` expects an integer, got `{v}`")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(invalid(format!("`{key}` expects true or false, got `{v}`"))),
    }
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|x| num(key, x)).collect()
}

type Section = Vec<(String, String)>;

fn sections(text: &str) -> Result<(Section, Section)> {
    let ini = Ini::load_from_str(text).map_err(|e| invalid(format!("config syntax: {e}")))?;
    let (mut net, mut block) = (Vec::new(), Vec::new());
    for (name, props) in ini.iter() {
        let (dst, keys) = match name.map(str::to_lowercase).as_deref() {
            Some("net") => (&mut net, NET_KEYS),
            Some("block") => (&mut block, BLOCK_KEYS),
            None if props.is_empty() => continue,
            None => return Err(invalid("keys outside a section".into())),
            Some(other) => return Err(invalid(format!("unknown section [{other}]"))),
        };
        for (k, v) in props.iter() {
            let k = k.to_lowercase();
            if !keys.contains(&k.as_str()) {
                return Err(invalid(format!("unknown key `{k}`")));
            }
            dst.push((k, v.to_string()));
        }
    }
    Ok((net, block))
}

/// Parses a config into a validated network spec.
pub fn parse_config(text: &str) -> Result<NetSpec> {
    let (net, block_keys) = sections(text)?;
    let get = |s: &Section, key: &str| s.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.trim().to_string());

    let preset: Preset = get(&block_keys, "preset").as_deref().unwrap_or("ctnet").parse()?;
    let mut block = build_preset(preset);
    if let Some(v) = get(&block_keys, "k") {
        block.k = num("k", &v)?;
    }
    if let Some(v) = get(&block_keys, "factorization") {
        block.factorization = v.parse::<FactorizationRule>()?;
    }
    if let Some(v) = get(&block_keys, "connection") {
        block.connection = v.parse::<Connection>()?;
    }
    if let Some(v) = get(&block_keys, "kernels") {
        block.kernels = Some(v.split(';').map(str::parse).collect::<Result<Vec<Branches>>>()?);
    }
    if let Some(v) = get(&block_keys, "pw") {
        block.pw = flag("pw", &v)?;
    }
    if let Some(v) = get(&block_keys, "te") {
        block.te = flag("te", &v)?;
    }

    let mut spec = match get(&net, "base").as_deref().unwrap_or("r50") {
        "r50" => NetSpec::resnet50(block),
        "toy" => NetSpec::toy(block),
        other => return Err(invalid(format!("unknown base `{other}`"))),
    };
    for (key, v) in &net {
        match key.as_str() {
            "base" | "stages" | "widths" | "strides" => {}
            "frames" => spec.frames = num(key, v)?,
            "resolution" => spec.resolution = num(key, v)?,
            "classes" => spec.classes = num(key, v)?,
            "in_channels" => spec.in_channels = num(key, v)?,
            "expansion" => spec.expansion = num(key, v)?,
            "stem_channels" => spec.stem.channels = num(key, v)?,
            "stem_kernel" => spec.stem.kernel = num(key, v)?,
            "stem_stride" => spec.stem.stride = num(key, v)?,
            "stem_pool" => spec.stem.pool = flag(key, v)?,
            "replacement" => spec.replacement = v.parse()?,
            _ => unreachable!("key list checked in sections()"),
        }
    }
    let stages = get(&net, "stages").map(|v| list("stages", &v)).transpose()?;
    let widths = get(&net, "widths").map(|v| list("widths", &v)).transpose()?;
    let strides = get(&net, "strides").map(|v| list("strides", &v)).transpose()?;
    if stages.is_some() || widths.is_some() || strides.is_some() {
        let n = [&stages, &widths, &strides]
            .iter()
            .filter_map(|l| l.as_ref().map(Vec::len))
            .max()
            .unwrap_or(0);
        let pick = |l: &Option<Vec<usize>>, i: usize, old: Option<usize>, key: &str| match (l, old) {
            (Some(v), _) if v.len() == n => Ok(v[i]),
            (Some(_), _) => Err(invalid(format!("`{key}` lists must all have {n} entries"))),
            (None, Some(o)) => Ok(o),
            (None, None) => Err(invalid(format!("`{key}` needed for {n} stages"))),
        };
        let old = spec.stages.clone();
        spec.stages = (0..n)
            .map(|i| {
                let o = old.get(i);
                Ok(StageSpec {
                    blocks: pick(&stages, i, o.map(|s| s.blocks), "stages")?,
                    width: pick(&widths, i, o.map(|s| s.width), "widths")?,
                    stride: pick(&strides, i, o.map(|s| s.stride), "strides")?,
                })
            })
            .collect::<Result<_>>()?;
    }
    spec.validate()?;
    spec.plan()?;
    Ok(spec)
}

pub fn load_config(path: &Path) -> Result<NetSpec> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

fn join(v: impl Iterator<Item = usize>) -> String {
    v.map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Writes `spec` back in config syntax; `parse_config` reads it unchanged.
pub fn render_config(spec: &NetSpec) -> String {
    let b = &spec.block;
    let mut s = String::from("[net]\n");
    s += &format!("frames = {}\nresolution = {}\nclasses = {}\n", spec.frames, spec.resolution, spec.classes);
    s += &format!("in_channels = {}\nexpansion = {}\n", spec.in_channels, spec.expansion);
    s += &format!("stages = {}\n", join(spec.stages.iter().map(|x| x.blocks)));
    s += &format!("widths = {}\n", join(spec.stages.iter().map(|x| x.width)));
    s += &format!("strides = {}\n", join(spec.stages.iter().map(|x| x.stride)));
    s += &format!(
        "stem_channels = {}\nstem_kernel = {}\nstem_stride = {}\nstem_pool = {}\n",
        spec.stem.channels, spec.stem.kernel, spec.stem.stride, spec.stem.pool
    );
    s += &format!("replacement = {}\n\n[block]\n", spec.replacement);
    s += &format!("preset = {}\nk = {}\nfactorization = {}\n", b.preset.name(), b.k, b.factorization);
    s += &format!("connection = {}\n", b.connection);
    if let Some(k) = &b.kernels {
        s += &format!("kernels = {}\n", k.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";"));
    }
    s += &format!("pw = {}\nte = {}\n", b.pw, b.te);
    s
}
