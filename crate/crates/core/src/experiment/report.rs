//! Comparison tables of experiment records with significance marks.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{ExperimentRecord, System};
use crate::data::{Dimension, Partition};
use crate::metrics::{fisher_compare, FisherTest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportColumn {
    pub dimension: Dimension,
    pub partition: Partition,
    pub postprocessed: bool,
}

impl ReportColumn {
    pub fn label(&self) -> String {
        format!(
            "{}/{}{}",
            self.dimension,
            self.partition,
            if self.postprocessed { "/pp" } else { "" }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub column: ReportColumn,
    pub ccc: f64,
    pub frames: usize,
    /// One-tailed p of "this system beats the reference".
    pub p_value: Option<f64>,
    pub star: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub system: System,
    pub cells: Vec<Option<ReportCell>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub reference: Option<System>,
    /// `(system, dimension, config hash, seed)` of every record used.
    pub sources: Vec<(System, Dimension, String, u64)>,
    pub columns: Vec<ReportColumn>,
    pub rows: Vec<ReportRow>,
}

fn lookup(records: &[ExperimentRecord], system: System, col: &ReportColumn) -> Option<(f64, usize)> {
    let rec = records
        .iter()
        .find(|r| r.system == system && r.dimension == col.dimension)?;
    let score = rec.score(col.partition)?;
    let value = if col.postprocessed { score.postprocessed_ccc? } else { score.raw_ccc };
    Some((value, score.frames))
}

/// Builds a system × (dimension, partition, raw/post-processed) CCC table.
/// With a reference system, a cell is starred when the one-tailed Fisher
/// test of its CCC against the reference's gives p < .05.
pub fn emit_report(records: &[ExperimentRecord], reference: Option<System>) -> Report {
    let mut systems: Vec<System> = Vec::new();
    for r in records {
        if !systems.contains(&r.system) {
            systems.push(r.system);
        }
    }
    let mut columns = Vec::new();
    for dimension in Dimension::ALL {
        for postprocessed in [false, true] {
            for partition in [Partition::Dev, Partition::Test] {
                let col = ReportColumn {
                    dimension,
                    partition,
                    postprocessed,
                };
                if systems.iter().any(|&s| lookup(records, s, &col).is_some()) {
                    columns.push(col);
                }
            }
        }
    }
    let rows = systems
        .iter()
        .map(|&system| ReportRow {
            system,
            cells: columns
                .iter()
                .map(|col| {
                    let (ccc, frames) = lookup(records, system, col)?;
                    let test: Option<FisherTest> = reference
                        .filter(|&r| r != system)
                        .and_then(|r| lookup(records, r, col))
                        .and_then(|(r_ccc, r_frames)| fisher_compare(ccc, frames, r_ccc, r_frames).ok());
                    Some(ReportCell {
                        column: *col,
                        ccc,
                        frames,
                        p_value: test.map(|t| t.p),
                        star: test.is_some_and(|t| t.significant()),
                    })
                })
                .collect(),
        })
        .collect();
    Report {
        reference,
        sources: records
            .iter()
            .map(|r| (r.system, r.dimension, r.config_hash.clone(), r.seed))
            .collect(),
        columns,
        rows,
    }
}

impl Report {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (system, dim, hash, seed) in &self.sources {
            let _ = writeln!(s, "# {system}/{dim}: config_hash={hash} seed={seed}");
        }
        if let Some(r) = self.reference {
            let _ = writeln!(s, "# * one-tailed Fisher p < .05 against {r}");
        }
        let width = self.rows.iter().map(|r| r.system.as_str().len()).max().unwrap_or(6).max(6);
        let _ = write!(s, "{:<width$}", "system");
        for c in &self.columns {
            let _ = write!(s, " {:>18}", c.label());
        }
        let _ = writeln!(s);
        for row in &self.rows {
            let _ = write!(s, "{:<width$}", row.system.as_str());
            for cell in &row.cells {
                let text = match cell {
                    Some(c) => format!("{:.3}{}", c.ccc, if c.star { "*" } else { "" }),
                    None => "-".to_owned(),
                };
                let _ = write!(s, " {text:>18}");
            }
            let _ = writeln!(s);
        }
        s
    }

    pub fn to_json(&self) -> Vec<u8> {
        super::to_json_bytes(self)
    }
}
