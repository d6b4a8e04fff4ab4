//! Analytical cost accounting: multiply-accumulates and parameter counts per
//! layer, counting convolutions and the classifier only.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::LayerKind;
use crate::net::NetSpec;
use crate::tensor::Dims;

/// How totals are reported in "GFLOPs".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Convention {
    /// One multiply-accumulate counts as one operation.
    #[default]
    MacsAsGflops,
    /// Two operations per multiply-accumulate.
    TrueFlops,
}

impl Convention {
    pub fn factor(self) -> u64 {
        match self {
            Self::MacsAsGflops => 1,
            Self::TrueFlops => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub name: String,
    pub kind: LayerKind,
    pub output: Dims,
    pub macs: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub frames: usize,
    pub resolution: usize,
    pub convention: Convention,
    pub replaced_blocks: usize,
    pub rows: Vec<CostRow>,
    pub total_macs: u64,
    pub total_params: u64,
}

impl CostReport {
    /// Total operations in units of 1e9 under the report's convention.
    pub fn gflops(&self) -> f64 {
        (self.total_macs * self.convention.factor()) as f64 / 1e9
    }

    pub fn mparams(&self) -> f64 {
        self.total_params as f64 / 1e6
    }

    pub fn with_convention(mut self, c: Convention) -> Self {
        self.convention = c;
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Parses a report and checks that its totals are the column sums.
    pub fn from_json(s: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(s).map_err(|e| Error::Format(e.to_string()))?;
        let macs: u64 = r.rows.iter().map(|x| x.macs).sum();
        let params: u64 = r.rows.iter().map(|x| x.params).sum();
        if macs != r.total_macs || params != r.total_params {
            return Err(Error::Format("report totals disagree with its rows".into()));
        }
        Ok(r)
    }

    pub fn render_table(&self, with_rows: bool) -> String {
        let mut s = String::new();
        if with_rows {
            let w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
            let _ = writeln!(s, "{:<w$}  {:<6}  {:>20}  {:>14}  {:>10}", "name", "kind", "output", "macs", "params");
            for r in &self.rows {
                let kind = serde_json::to_value(r.kind).expect("kind");
                let _ = writeln!(
                    s,
                    "{:<w$}  {:<6}  {:>20}  {:>14}  {:>10}",
                    r.name,
                    kind.as_str().unwrap_or(""),
                    r.output.to_string(),
                    r.macs * self.convention.factor(),
                    r.params
                );
            }
        }
        let unit = match self.convention {
            Convention::MacsAsGflops => "GFLOPs (MACs)",
            Convention::TrueFlops => "GFLOPs (2 x MACs)",
        };
        let _ = writeln!(
            s,
            "{} frames x {}^2, {} replaced blocks: {:.2} {unit}, {:.2}M params",
            self.frames,
            self.resolution,
            self.replaced_blocks,
            self.gflops(),
            self.mparams()
        );
        s
    }
}

/// Costs `spec` at batch 1 with the given clip shape.
pub fn count_cost(spec: &NetSpec, frames: usize, resolution: usize) -> Result<CostReport> {
    let spec = NetSpec {
        frames,
        resolution,
        ..spec.clone()
    };
    let plan = spec.plan()?;
    let rows: Vec<CostRow> = plan
        .layers(1)?
        .into_iter()
        .map(|l| CostRow {
            macs: l.macs(),
            params: l.params(),
            name: l.name,
            kind: l.kind,
            output: l.output,
        })
        .collect();
    Ok(CostReport {
        frames,
        resolution,
        convention: Convention::MacsAsGflops,
        replaced_blocks: plan.replaced(),
        total_macs: rows.iter().map(|r| r.macs).sum(),
        total_params: rows.iter().map(|r| r.params).sum(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::{build_preset, Preset};

    #[test]
    fn json_roundtrip_and_totals() {
        let r = count_cost(&NetSpec::preset_resnet50(Preset::Ctnet), 8, 64).unwrap();
        let back = CostReport::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
        let mut bad = r.clone();
        bad.total_macs += 1;
        assert!(CostReport::from_json(&bad.to_json()).is_err());
        let names: std::collections::BTreeSet<_> = r.rows.iter().map(|x| x.name.clone()).collect();
        assert_eq!(names.len(), r.rows.len());
    }

    #[test]
    fn true_flops_doubles() {
        let r = count_cost(&NetSpec::toy(build_preset(Preset::Tsn)), 8, 32).unwrap();
        let t = r.clone().with_convention(Convention::TrueFlops);
        assert_eq!(t.gflops(), 2.0 * r.gflops());
        assert!(r.render_table(true).contains("stem.conv"));
    }
}
