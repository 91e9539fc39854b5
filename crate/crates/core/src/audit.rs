//! Append-only record of which mechanism fired at each (timestep, layer).

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::attention::QueryRole;
use crate::error::Result;

/// Classifier-free guidance branch.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pass {
    Cond,
    Uncond,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum AuditRecord {
    Query {
        t: u32,
        layer: usize,
        role: QueryRole,
        /// Fraction of patches that kept the live query instead of the
        /// injected one; `None` when nothing was injected.
        dropout_kept_fraction: Option<f64>,
    },
    Sdsa {
        t: u32,
        layer: usize,
    },
    Refine {
        t: u32,
        layer: usize,
        pass: Pass,
        map_id: u64,
    },
}

impl AuditRecord {
    pub fn t(&self) -> u32 {
        match *self {
            AuditRecord::Query { t, .. } | AuditRecord::Sdsa { t, .. } | AuditRecord::Refine { t, .. } => t,
        }
    }

    pub fn layer(&self) -> usize {
        match *self {
            AuditRecord::Query { layer, .. }
            | AuditRecord::Sdsa { layer, .. }
            | AuditRecord::Refine { layer, .. } => layer,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AuditLog {
    records: Vec<AuditRecord>,
}

impl AuditLog {
    pub fn push(&mut self, r: AuditRecord) {
        self.records.push(r);
    }

    pub fn records(&self) -> &[AuditRecord] {
        &self.records
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut records = Vec::new();
        for line in r.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { records })
    }
}
