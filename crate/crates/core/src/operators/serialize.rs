//! Versioned JSON document for trained operators.
//!
//! Floats are written in shortest round-trip decimal form, so save/load is
//! bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Branch, NfirOperator};
use crate::error::{Error, Result};

pub const OPERATOR_FORMAT: &str = "pnfir-operator";
pub const OPERATOR_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorDocument {
    pub format: String,
    pub version: u32,
    pub n_branches: usize,
    pub order: usize,
    pub window: usize,
    pub ts: f64,
    pub integrator_gain: Option<f64>,
    pub branches: Vec<Branch>,
}

impl From<&NfirOperator> for OperatorDocument {
    fn from(op: &NfirOperator) -> Self {
        Self {
            format: OPERATOR_FORMAT.to_string(),
            version: OPERATOR_VERSION,
            n_branches: op.n_branches(),
            order: op.order(),
            window: op.window_len(),
            ts: op.ts(),
            integrator_gain: op.integrator_gain(),
            branches: op.branches().to_vec(),
        }
    }
}

impl TryFrom<OperatorDocument> for NfirOperator {
    type Error = Error;

    fn try_from(doc: OperatorDocument) -> Result<Self> {
        if doc.format != OPERATOR_FORMAT {
            return Err(Error::Format(format!("expected format '{OPERATOR_FORMAT}', found '{}'", doc.format)));
        }
        if doc.version != OPERATOR_VERSION {
            return Err(Error::Format(format!("unsupported operator document version {}", doc.version)));
        }
        let op = NfirOperator::new(doc.branches, doc.integrator_gain, doc.ts)?;
        if op.n_branches() != doc.n_branches || op.order() != doc.order || op.window_len() != doc.window {
            return Err(Error::Format("header fields disagree with the branch list".into()));
        }
        Ok(op)
    }
}

impl NfirOperator {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&OperatorDocument::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: OperatorDocument = serde_json::from_str(text)?;
        doc.try_into()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
