//! Metrics report schema (versioned) plus the JSON/CSV writers.
//!
//! `report.json`: `{report_version, config_hash, config, origin, per_budget,
//! pairs, correlation?}` — `origin` holds the pre-attack dataset metrics,
//! `per_budget` one entry per (scenario, ops) with the post-attack metrics,
//! `pairs` the per-sample records. `report.csv` mirrors `per_budget`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use noskim_core::access::CorrelationReport;
use noskim_core::attack::ScenarioKind;

use crate::error::{CliError, CliResult};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OriginMetrics {
    pub arr: f64,
    pub crr: f64,
    pub accuracy: f64,
    pub layer_retention: Vec<f64>,
    pub mean_rtr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetMetrics {
    pub scenario: ScenarioKind,
    pub ops: usize,
    pub arr: f64,
    pub crr: f64,
    pub accuracy: f64,
    pub mean_similarity: f64,
    pub mean_queries: f64,
    pub mean_wall_time: f64,
    pub layer_retention: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub scenario: ScenarioKind,
    pub ops: usize,
    pub sample_index: usize,
    pub similarity: f64,
    pub label_preserved: bool,
    pub rtr_before: f64,
    pub rtr_after: f64,
    pub queries: u64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub report_version: u32,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub origin: OriginMetrics,
    pub per_budget: Vec<BudgetMetrics>,
    pub pairs: Vec<PairRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correlation: Option<CorrelationSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSummary {
    pub kind: String,
    pub sequence_level_r: f64,
    pub token_level_r: f64,
}

impl Report {
    pub fn write_json(&self, path: &Path) -> CliResult<()> {
        let mut bytes = serde_json::to_vec_pretty(self).map_err(CliError::runtime)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes)
            .map_err(|e| CliError::runtime_msg(format!("cannot write {}: {e}", path.display())))
    }

    pub fn load_json(path: &Path) -> CliResult<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::data_msg(format!("cannot read report {}: {e}", path.display())))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| CliError::data_msg(format!("report {}: {e}", path.display())))
    }

    /// CSV mirror of `per_budget` (same numbers, same order).
    pub fn write_csv(&self, path: &Path) -> CliResult<()> {
        let file = std::fs::File::create(path)
            .map_err(|e| CliError::runtime_msg(format!("cannot write {}: {e}", path.display())))?;
        let mut w = std::io::BufWriter::new(file);
        writeln!(
            w,
            "scenario,ops,arr,crr,accuracy,mean_similarity,mean_queries,mean_wall_time"
        )
        .map_err(CliError::runtime)?;
        for b in &self.per_budget {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                b.scenario.name(),
                b.ops,
                b.arr,
                b.crr,
                b.accuracy,
                b.mean_similarity,
                b.mean_queries,
                b.mean_wall_time
            )
            .map_err(CliError::runtime)?;
        }
        w.flush().map_err(CliError::runtime)
    }
}

/// CSV of the side-channel study: one `(ratio, seq, tok)` row per sample.
pub fn write_correlation_csv(path: &Path, report: &CorrelationReport) -> CliResult<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| CliError::runtime_msg(format!("cannot write {}: {e}", path.display())))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "ratio,seq_reading,tok_reading").map_err(CliError::runtime)?;
    for row in &report.rows {
        writeln!(w, "{},{},{}", row.ratio, row.seq_reading, row.tok_reading)
            .map_err(CliError::runtime)?;
    }
    w.flush().map_err(CliError::runtime)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_report() -> Report {
        Report {
            report_version: REPORT_VERSION,
            config_hash: "abc".into(),
            config: serde_json::json!({"seed": 1}),
            origin: OriginMetrics {
                arr: 0.5,
                crr: 0.5,
                accuracy: 0.9,
                layer_retention: vec![0.8, 0.4],
                mean_rtr: 0.5,
            },
            per_budget: vec![BudgetMetrics {
                scenario: ScenarioKind::WhiteBoxChar,
                ops: 1,
                arr: 0.6,
                crr: 0.4,
                accuracy: 0.85,
                mean_similarity: 0.95,
                mean_queries: 200.0,
                mean_wall_time: 0.01,
                layer_retention: vec![0.9, 0.5],
            }],
            pairs: vec![],
            correlation: None,
        }
    }

    #[test]
    fn json_roundtrip_and_csv_mirror_same_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let jp = dir.path().join("report.json");
        let cp = dir.path().join("report.csv");
        let report = sample_report();
        report.write_json(&jp).unwrap();
        report.write_csv(&cp).unwrap();
        let loaded = Report::load_json(&jp).unwrap();
        assert_eq!(loaded, report);

        let csv = std::fs::read_to_string(&cp).unwrap();
        let line = csv.lines().nth(1).unwrap();
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields[0], "whitebox-char");
        assert_eq!(fields[1].parse::<usize>().unwrap(), loaded.per_budget[0].ops);
        assert_eq!(fields[2].parse::<f64>().unwrap(), loaded.per_budget[0].arr);
        assert_eq!(fields[5].parse::<f64>().unwrap(), loaded.per_budget[0].mean_similarity);
    }

    #[test]
    fn empty_result_set_serializes() {
        let dir = tempfile::tempdir().unwrap();
        let mut report = sample_report();
        report.per_budget.clear();
        let cp = dir.path().join("r.csv");
        report.write_csv(&cp).unwrap();
        let csv = std::fs::read_to_string(&cp).unwrap();
        assert_eq!(csv.lines().count(), 1); // header only
    }
}
