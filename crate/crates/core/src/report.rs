//! Tagged JSON envelope shared by every command's machine-readable output.

use serde::{Deserialize, Serialize};

use crate::cost::CostReport;
use crate::error::{Error, Result};
use crate::rf::RfReport;
use crate::tables::TableResult;
use crate::train::TrainReport;
use crate::verify::SuiteReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "report", rename_all = "kebab-case")]
pub enum Report {
    Cost(CostReport),
    Tables(Vec<TableResult>),
    Verify(SuiteReport),
    Rf(RfReport),
    Train(TrainReport),
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(s).map_err(|e| Error::Format(format!("report json: {e}")))?;
        if let Self::Cost(c) = &r {
            // re-validates the totals
            CostReport::from_json(&serde_json::to_string(c).expect("reports serialize"))?;
        }
        Ok(r)
    }
}
