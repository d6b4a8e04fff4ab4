//! Published ablation costs as data, with the specs that reproduce them.
//!
//! All rows are costed at 8 frames and 256 x 256 on the ResNet-50 layout
//! with every-second-block replacement unless the row says otherwise.

use serde::{Deserialize, Serialize};

use crate::block::{build_preset, BlockConfig, Branches, FactorizationRule, Preset};
use crate::cost::count_cost;
use crate::error::{Error, Result};
use crate::net::{NetSpec, Replacement};

pub const TABLE_IDS: [&str; 7] = ["3a", "3b", "3d", "3e", "3f", "3g", "params"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// Giga multiply-accumulates.
    Gflops,
    /// Millions of parameters.
    Mparams,
}

#[derive(Debug, Clone)]
pub struct TableRow {
    pub label: String,
    pub published: f64,
    /// Relative tolerance, e.g. 0.05 for five percent.
    pub tolerance: f64,
    pub spec: NetSpec,
}

#[derive(Debug, Clone)]
pub struct Table {
    pub id: &'static str,
    pub title: &'static str,
    pub metric: Metric,
    pub rows: Vec<TableRow>,
    /// Rows must keep the published strictly-descending order.
    pub check_order: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowResult {
    pub label: String,
    pub published: f64,
    pub computed: f64,
    pub rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableResult {
    pub id: String,
    pub title: String,
    pub metric: Metric,
    pub rows: Vec<RowResult>,
    pub order_checked: bool,
    pub order_pass: bool,
}

impl TableResult {
    pub fn pass(&self) -> bool {
        self.order_pass && self.rows.iter().all(|r| r.pass)
    }

    pub fn render(&self) -> String {
        let unit = match self.metric {
            Metric::Gflops => "GFLOPs",
            Metric::Mparams => "M params",
        };
        let w = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(5).max(5);
        let mut s = format!("[{}] {} ({unit})\n", self.id, self.title);
        s += &format!("{:<w$}  {:>9}  {:>9}  {:>8}  {:>5}  result\n", "row", "published", "computed", "rel.err", "tol");
        for r in &self.rows {
            s += &format!(
                "{:<w$}  {:>9.1}  {:>9.2}  {:>+7.2}%  {:>4.0}%  {}\n",
                r.label,
                r.published,
                r.computed,
                100.0 * r.rel_error,
                100.0 * r.tolerance,
                if r.pass { "ok" } else { "FAIL" }
            );
        }
        if self.order_checked {
            s += &format!("ordering: {}\n", if self.order_pass { "ok" } else { "FAIL" });
        }
        s
    }
}

fn ct() -> BlockConfig {
    build_preset(Preset::Ctnet)
}

fn r50(block: BlockConfig) -> NetSpec {
    NetSpec::resnet50(block)
}

fn row(label: &str, published: f64, tolerance: f64, spec: NetSpec) -> TableRow {
    TableRow {
        label: label.to_string(),
        published,
        tolerance,
        spec,
    }
}

fn kernels(s: &str) -> Vec<Branches> {
    s.split(';').map(|b| b.parse().expect("static kernel table")).collect()
}

fn in_stages(stages: &[usize]) -> NetSpec {
    NetSpec {
        replacement: Replacement::EverySecondIn(stages.to_vec()),
        ..r50(ct())
    }
}

pub fn table(id: &str) -> Result<Table> {
    let t = match id {
        // module type at the same seven positions
        "3a" => Table {
            id: "3a",
            title: "module type",
            metric: Metric::Gflops,
            rows: vec![
                row("C3D", 59.9, 0.05, r50(build_preset(Preset::C3d))),
                row("R(2+1)D", 45.8, 0.05, r50(build_preset(Preset::R21d))),
                row("CSN", 35.6, 0.05, r50(build_preset(Preset::Csn))),
                row("CT", 36.3, 0.05, r50(ct())),
            ],
            check_order: true,
        },
        // number of sub-dimensions
        "3b" => Table {
            id: "3b",
            title: "number of sub-dimensions K",
            metric: Metric::Gflops,
            rows: vec![
                row("1D", 45.8, 0.05, r50(ct().with_k(1))),
                row("2D", 36.3, 0.05, r50(ct())),
                row("3D", 35.7, 0.10, r50(ct().with_k(3).with_factorization(FactorizationRule::Balanced))),
                row("4D", 35.6, 0.10, r50(ct().with_k(4).with_factorization(FactorizationRule::Balanced))),
            ],
            check_order: true,
        },
        // inner sub-dimension size
        "3d" => Table {
            id: "3d",
            title: "dimension size C2",
            metric: Metric::Gflops,
            rows: vec![
                row("C2=1", 45.9, 0.05, r50(ct().with_factorization(FactorizationRule::Inner(1)))),
                row("C2=4", 37.6, 0.05, r50(ct().with_factorization(FactorizationRule::Inner(4)))),
                row("C2=16", 36.4, 0.05, r50(ct().with_factorization(FactorizationRule::Inner(16)))),
                row("C2=rounded-middle", 36.3, 0.05, r50(ct())),
            ],
            check_order: false,
        },
        // number and location of replaced blocks; the "+12" row has no
        // derivable pattern and is left out
        "3e" => Table {
            id: "3e",
            title: "number and location of blocks",
            metric: Metric::Gflops,
            rows: vec![
                row("+0 (TSN)", 43.0, 0.02, r50(build_preset(Preset::Tsn))),
                row("+1 stage5", 41.9, 0.05, in_stages(&[4])),
                row("+4 stage4-5", 38.9, 0.05, in_stages(&[3, 4])),
                row("+6 stage3-5", 37.1, 0.05, in_stages(&[2, 3, 4])),
                row("+7 stage2-5", 36.3, 0.05, r50(ct())),
            ],
            check_order: true,
        },
        // kernel sizes per sub-dimension, rows 1 and 3
        "3f" => Table {
            id: "3f",
            title: "kernel sizes per sub-dimension",
            metric: Metric::Gflops,
            rows: vec![
                row("C1 1x1x1|1x1x1, C2 1x3x3|3x1x1", 35.5, 0.05, r50(ct().with_kernels(kernels("1x1x1|1x1x1;1x3x3|3x1x1")))),
                row("C1 1x3x3|3x1x1, C2 1x3x3|3x1x1", 36.3, 0.05, r50(ct().with_kernels(kernels("1x3x3|3x1x1;1x3x3|3x1x1")))),
            ],
            check_order: false,
        },
        // module components
        "3g" => Table {
            id: "3g",
            title: "module components",
            metric: Metric::Gflops,
            rows: vec![
                row("Baseline (TSN)", 43.0, 0.02, r50(build_preset(Preset::Tsn))),
                row("+CT-Module", 36.3, 0.05, r50(ct())),
                row("+CT-Module+PWConv", 37.2, 0.05, r50(ct().with_pw(true))),
                row("+CT-Module+PWConv+TE", 37.3, 0.05, r50(ct().with_pw(true).with_te(true))),
            ],
            check_order: false,
        },
        "params" => Table {
            id: "params",
            title: "parameter counts",
            metric: Metric::Mparams,
            rows: vec![
                row("TSN R50", 23.9, 0.02, r50(build_preset(Preset::Tsn))),
                row("CT-Net R50", 21.0, 0.03, r50(ct().with_pw(true).with_te(true))),
            ],
            check_order: false,
        },
        other => {
            return Err(Error::ConfigInvalid(format!(
                "unknown table `{other}`, expected one of {}",
                TABLE_IDS.join(", ")
            )))
        }
    };
    Ok(t)
}

pub fn evaluate(t: &Table) -> Result<TableResult> {
    let mut rows = Vec::with_capacity(t.rows.len());
    for r in &t.rows {
        let report = count_cost(&r.spec, r.spec.frames, r.spec.resolution)?;
        let computed = match t.metric {
            Metric::Gflops => report.gflops(),
            Metric::Mparams => report.mparams(),
        };
        let rel_error = (computed - r.published) / r.published;
        rows.push(RowResult {
            label: r.label.clone(),
            published: r.published,
            computed,
            rel_error,
            tolerance: r.tolerance,
            pass: rel_error.abs() <= r.tolerance,
        });
    }
    let order_pass = !t.check_order || same_order(&rows);
    Ok(TableResult {
        id: t.id.to_string(),
        title: t.title.to_string(),
        metric: t.metric,
        rows,
        order_checked: t.check_order,
        order_pass,
    })
}

/// Computed values rank exactly as the published ones.
fn same_order(rows: &[RowResult]) -> bool {
    rows.iter().enumerate().all(|(i, a)| {
        rows[i + 1..].iter().all(|b| {
            (a.published - b.published).signum() == (a.computed - b.computed).signum()
        })
    })
}

pub fn run_table(id: &str) -> Result<TableResult> {
    evaluate(&table(id)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_table_builds() {
        for id in TABLE_IDS {
            let r = run_table(id).unwrap();
            println!("{}", r.render());
        }
        assert!(run_table("9").is_err());
    }
}
