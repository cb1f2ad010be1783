//! Subcommand implementations. Each returns a [`CliError`] whose exit code
//! the binary passes through.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use pnnl_core::dataset::{self, LabelColumn};
use pnnl_core::progression;
use pnnl_core::trainer::evaluate;
use pnnl_core::{Dataset, Topology};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{load_dataset, prepare, DatasetFormat, RunConfig};
use crate::error::CliError;
use crate::report::{ReportFile, Summary};

pub const REPORT_FILE: &str = "report.json";
pub const MODEL_FILE: &str = "model.pmlp";
pub const STANDARDIZER_FILE: &str = "standardizer.json";
pub const BENCH_CSV: &str = "bench.csv";

#[derive(Clone, Debug, Default)]
pub struct RunOverrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report_path: PathBuf,
    pub model_path: PathBuf,
    pub report: ReportFile,
}

fn output_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Output(format!("{}: {e}", path.display()))
}

pub fn cmd_run(config_path: &Path, overrides: &RunOverrides) -> Result<RunOutput, CliError> {
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(seed) = overrides.seed {
        cfg.base_seed = seed;
    }
    if let Some(out) = &overrides.out {
        cfg.output_dir = out.clone();
    }
    run_config(&cfg)
}

/// Runs an already-loaded config and writes its artifacts to `cfg.output_dir`.
pub fn run_config(cfg: &RunConfig) -> Result<RunOutput, CliError> {
    let data = prepare(cfg)?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| output_err(&cfg.output_dir, e))?;
    let report_path = cfg.output_dir.join(REPORT_FILE);
    let model_path = cfg.output_dir.join(MODEL_FILE);
    info!(
        "running {} on {} ({} train / {} val / {} test)",
        cfg.strategy.name(),
        cfg.dataset_path.display(),
        data.split.train_idx.len(),
        data.split.val_idx.len(),
        data.split.test_idx.len()
    );
    match progression::run(&cfg.progression(), &data.dataset, &data.split) {
        Ok((topo, run)) => {
            let report = ReportFile::new(cfg, &run, None);
            report.write(&report_path)?;
            topo.save(&model_path).map_err(|e| output_err(&model_path, e))?;
            if let Some(st) = &data.standardizer {
                let path = cfg.output_dir.join(STANDARDIZER_FILE);
                let text = serde_json::to_string_pretty(st).map_err(|e| output_err(&path, e))?;
                fs::write(&path, text).map_err(|e| output_err(&path, e))?;
            }
            Ok(RunOutput {
                report_path,
                model_path,
                report,
            })
        }
        Err(failure) => {
            let report = ReportFile::new(cfg, &failure.partial, Some(failure.error.to_string()));
            report.write(&report_path)?;
            match failure.error {
                pnnl_core::Error::InvalidConfig(msg) => Err(CliError::Config(msg)),
                other => Err(CliError::Training(other.to_string())),
            }
        }
    }
}

/// CSV to binary dataset. Returns the loaded dataset.
pub fn cmd_convert(
    csv_path: &Path,
    label_column: &LabelColumn,
    num_classes: Option<usize>,
    out: &Path,
) -> Result<Dataset, CliError> {
    let ds = load_dataset(csv_path, DatasetFormat::Csv, label_column, num_classes)?;
    dataset::save_binary(&ds, out).map_err(|e| output_err(out, e))?;
    Ok(ds)
}

/// Where evaluation data comes from.
#[derive(Clone, Debug)]
pub enum EvalSource {
    /// A dataset file, optionally scaled with a saved standardizer.
    File {
        path: PathBuf,
        label_column: LabelColumn,
        standardizer: Option<PathBuf>,
    },
    /// One split of a run config's data, prepared exactly as `run` does.
    Config { path: PathBuf, split: SplitName },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
    All,
}

pub fn cmd_evaluate(model_path: &Path, source: &EvalSource) -> Result<(f64, f64), CliError> {
    if !model_path.exists() {
        return Err(CliError::Data(format!("model not found: {}", model_path.display())));
    }
    let topo = Topology::load(model_path).map_err(|e| CliError::Data(format!("{}: {e}", model_path.display())))?;
    let ds = match source {
        EvalSource::File {
            path,
            label_column,
            standardizer,
        } => {
            let ds = load_dataset(path, DatasetFormat::infer(path), label_column, Some(topo.num_classes()))?;
            match standardizer {
                Some(sp) => {
                    let text = fs::read_to_string(sp).map_err(|e| CliError::Data(format!("{}: {e}", sp.display())))?;
                    let st: pnnl_core::Standardizer =
                        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", sp.display())))?;
                    st.apply(&ds).map_err(|e| CliError::Data(e.to_string()))?
                }
                None => ds,
            }
        }
        EvalSource::Config { path, split } => {
            let cfg = RunConfig::load(path)?;
            let data = prepare(&cfg)?;
            let rows: Vec<usize> = match split {
                SplitName::Train => data.split.train_idx.clone(),
                SplitName::Val => data.split.val_idx.clone(),
                SplitName::Test => data.split.test_idx.clone(),
                SplitName::All => (0..data.dataset.len()).collect(),
            };
            data.dataset.subset(&rows).map_err(|e| CliError::Data(e.to_string()))?
        }
    };
    if ds.dim() != topo.input_dim() || ds.num_classes() != topo.num_classes() {
        return Err(CliError::Data(format!(
            "dimension mismatch: model expects D={}, K={}; dataset has D={}, K={}",
            topo.input_dim(),
            topo.num_classes(),
            ds.dim(),
            ds.num_classes()
        )));
    }
    evaluate(&topo, ds.features(), ds.labels()).map_err(|e| CliError::Data(e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub name: String,
    pub strategy: String,
    pub subset_size: usize,
    /// Test accuracy in [0, 1].
    pub accuracy: Option<f64>,
    pub unique: usize,
    pub avg_block_s: f64,
    pub total_s: f64,
}

impl BenchRow {
    fn from_report(name: String, r: &ReportFile) -> Self {
        let (unique, avg_block_s) = Summary::recompute(&r.steps);
        BenchRow {
            name,
            strategy: r.config.strategy.name().to_string(),
            subset_size: r.subset_size,
            accuracy: r.summary.test_accuracy,
            unique,
            avg_block_s,
            total_s: r.summary.total_time_s,
        }
    }
}

/// Aggregates every `*.json` in `dir`. Completed reports are read as-is;
/// run configs are executed with artifacts under `out/<name>/`.
pub fn cmd_bench(dir: &Path, out: Option<&Path>, jobs: usize) -> Result<Vec<BenchRow>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "json"))
        .collect();
    files.sort();
    let out_dir = out.map_or_else(|| dir.to_path_buf(), Path::to_path_buf);

    let run_one = |path: &PathBuf| -> Result<BenchRow, CliError> {
        let name = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CliError::Data(format!("unreadable report {}: {e}", path.display())))?;
        if value.get("summary").is_some() {
            let report: ReportFile =
                serde_json::from_value(value).map_err(|e| CliError::Data(format!("unreadable report {}: {e}", path.display())))?;
            return Ok(BenchRow::from_report(name, &report));
        }
        let mut cfg = RunConfig::load(path)?;
        cfg.output_dir = out_dir.join(&name);
        let output = run_config(&cfg)?;
        Ok(BenchRow::from_report(name, &output.report))
    };

    let results: Vec<Result<BenchRow, CliError>> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| CliError::Output(e.to_string()))?;
        pool.install(|| files.par_iter().map(run_one).collect())
    } else {
        files.iter().map(run_one).collect()
    };
    let mut rows = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    rows.sort_by(|a, b| a.name.cmp(&b.name));
    if !rows.is_empty() || out.is_some() {
        fs::create_dir_all(&out_dir).map_err(|e| output_err(&out_dir, e))?;
        let csv_path = out_dir.join(BENCH_CSV);
        fs::write(&csv_path, bench_csv(&rows)).map_err(|e| output_err(&csv_path, e))?;
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("name,strategy,subset_size,accuracy,unique,avg_block_s,total_s\n");
    for r in rows {
        let acc = r.accuracy.map_or(String::new(), |a| format!("{:.4}", a * 100.0));
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.6},{:.6}",
            r.name, r.strategy, r.subset_size, acc, r.unique, r.avg_block_s, r.total_s
        );
    }
    s
}

/// Fixed-width text table, one row per config.
pub fn bench_table(rows: &[BenchRow]) -> String {
    let mut s = format!(
        "{:<24} {:<18} {:>8} {:>10} {:>8} {:>12} {:>10}\n",
        "name", "strategy", "M", "acc (%)", "unique", "avg_block_s", "total_s"
    );
    for r in rows {
        let acc = r.accuracy.map_or("-".to_string(), |a| format!("{:.2}", a * 100.0));
        let _ = writeln!(
            s,
            "{:<24} {:<18} {:>8} {:>10} {:>8} {:>12.4} {:>10.2}",
            r.name, r.strategy, r.subset_size, acc, r.unique, r.avg_block_s, r.total_s
        );
    }
    s
}
