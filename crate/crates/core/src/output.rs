//! Result files.
//!
//! A run directory holds:
//!
//! * `metrics.csv`: `round,client_id,train_loss,test_accuracy`, one row per
//!   evaluated client-round, floats with six decimals, LF line endings.
//! * `selection_counts.csv`: the N x N count matrix without header; row is
//!   the target client, column the source client.
//! * `summary.json`: keys in the fixed order `config_hash`, `algorithm`,
//!   `rounds`, `num_clients`, `mean_accuracy`, `final_accuracy`. Floats use
//!   the shortest decimal that round-trips.
//!
//! Every file is a deterministic function of the [`RunResult`].

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Algorithm;
use crate::error::Result;
use crate::orchestrator::RunResult;

pub const METRICS_FILE: &str = "metrics.csv";
pub const SELECTION_FILE: &str = "selection_counts.csv";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub algorithm: Algorithm,
    pub rounds: usize,
    pub num_clients: usize,
    pub mean_accuracy: f64,
    pub final_accuracy: Vec<f64>,
}

impl Summary {
    pub fn from_result(result: &RunResult) -> Self {
        Summary {
            config_hash: result.config_hash.clone(),
            algorithm: result.algorithm,
            rounds: result.rounds,
            num_clients: result.final_accuracy.len(),
            mean_accuracy: result.mean_accuracy,
            final_accuracy: result.final_accuracy.clone(),
        }
    }
}

pub fn metrics_csv(result: &RunResult) -> String {
    let mut out = String::from("round,client_id,train_loss,test_accuracy\n");
    for record in &result.records {
        for (client, (loss, acc)) in record.train_loss.iter().zip(&record.test_accuracy).enumerate() {
            out.push_str(&format!("{},{client},{loss:.6},{acc:.6}\n", record.round));
        }
    }
    out
}

pub fn selection_counts_csv(result: &RunResult) -> String {
    let mut out = String::new();
    for row in &result.selection_counts {
        let cells: Vec<String> = row.iter().map(u64::to_string).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn summary_json(result: &RunResult) -> String {
    let mut text = serde_json::to_string_pretty(&Summary::from_result(result)).expect("summary serializes");
    text.push('\n');
    text
}

pub fn write_outputs(result: &RunResult, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(METRICS_FILE), metrics_csv(result))?;
    fs::write(out_dir.join(SELECTION_FILE), selection_counts_csv(result))?;
    fs::write(out_dir.join(SUMMARY_FILE), summary_json(result))?;
    Ok(())
}
