//! `report.json`: config echo, per-step records and a summary block.

use std::fs;
use std::path::Path;

use pnnl_core::progression::RunReport;
use pnnl_core::trainer::FineTuneStats;
use pnnl_core::StepRecord;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::RunConfig;
use crate::error::CliError;

pub const REPORT_VERSION: u32 = 1;

/// Fields holding wall-clock measurements. Determinism checks null these
/// out before comparing reports.
pub const WALL_TIME_FIELDS: &[&str] = &[
    "block_time_s",
    "train_time_s",
    "avg_block_time_s",
    "total_time_s",
    "wall_time",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub test_accuracy: Option<f64>,
    pub unique_samples_total: usize,
    pub avg_block_time_s: f64,
    pub total_time_s: f64,
    pub param_count: usize,
}

impl Summary {
    /// The fields derivable from the step records alone.
    pub fn recompute(steps: &[StepRecord]) -> (usize, f64) {
        (
            steps.last().map_or(0, |s| s.unique_count),
            RunReport::mean_block_time(steps),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub version: u32,
    pub config: RunConfig,
    pub completed: bool,
    pub error: Option<String>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub subset_size: usize,
    pub layer_widths: Vec<usize>,
    pub fine_tune_choice: Option<usize>,
    pub fine_tune: Option<FineTuneStats>,
    pub pre_fine_tune_test_accuracy: Option<f64>,
    pub test_loss: Option<f64>,
    pub steps: Vec<StepRecord>,
    pub summary: Summary,
}

impl ReportFile {
    pub fn new(config: &RunConfig, run: &RunReport, error: Option<String>) -> Self {
        ReportFile {
            version: REPORT_VERSION,
            config: config.clone(),
            completed: run.completed,
            error,
            n_train: run.n_train,
            n_val: run.n_val,
            n_test: run.n_test,
            subset_size: run.subset_size,
            layer_widths: run.layer_widths.clone(),
            fine_tune_choice: run.fine_tune_choice,
            fine_tune: run.fine_tune.clone(),
            pre_fine_tune_test_accuracy: run.pre_fine_tune_test_accuracy,
            test_loss: run.test_loss,
            steps: run.steps.clone(),
            summary: Summary {
                test_accuracy: run.test_accuracy,
                unique_samples_total: run.unique_samples_total,
                avg_block_time_s: run.avg_block_time_s,
                total_time_s: run.total_time_s,
                param_count: run.param_count,
            },
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Output(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| CliError::Output(format!("{}: {e}", path.display())))
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}

/// Replaces every [`WALL_TIME_FIELDS`] value with `null`, recursively.
pub fn mask_wall_time(value: &mut Value) {
    match value {
        Value::Object(map) => {
            for (k, v) in map.iter_mut() {
                if WALL_TIME_FIELDS.contains(&k.as_str()) {
                    *v = Value::Null;
                } else {
                    mask_wall_time(v);
                }
            }
        }
        Value::Array(items) => items.iter_mut().for_each(mask_wall_time),
        _ => {}
    }
}
