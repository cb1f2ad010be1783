//! The on-disk run configuration: one flat JSON object.

use std::fs;
use std::path::{Path, PathBuf};

use pnnl_core::dataset::{self, split, standardize_fit_apply, LabelColumn};
use pnnl_core::{DataSplit, Dataset, GridSpec, ProgressionConfig, Representation, Standardizer, Strategy, SubsetSize};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Csv,
    Pnnl,
}

impl DatasetFormat {
    /// `.csv` files are CSV; everything else is the binary format.
    pub fn infer(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => DatasetFormat::Csv,
            _ => DatasetFormat::Pnnl,
        }
    }
}

/// Every field except `dataset_path` has a default; progression fields
/// default to [`ProgressionConfig::default`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset_path: PathBuf,
    pub dataset_format: Option<DatasetFormat>,
    pub label_column: LabelColumn,
    pub num_classes: Option<usize>,
    pub split_fractions: [f64; 3],
    pub split_seed: u64,
    pub standardize: bool,
    pub strategy: Strategy,
    pub subset_fraction: Option<f64>,
    /// Absolute subset size; wins over `subset_fraction`.
    pub subset_size: Option<usize>,
    pub block_size: usize,
    pub max_blocks_per_layer: usize,
    pub max_layers: usize,
    pub epsilon: f64,
    pub patience: usize,
    pub num_clusters: Option<usize>,
    pub representation: Representation,
    pub learning_rates: Vec<f64>,
    pub weight_decays: Vec<f64>,
    pub dropout_rates: Vec<f64>,
    pub epochs: Vec<usize>,
    pub fine_tune_epochs: usize,
    pub base_seed: u64,
    pub output_dir: PathBuf,
    pub parallel_candidates: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = ProgressionConfig::default();
        RunConfig {
            dataset_path: PathBuf::new(),
            dataset_format: None,
            label_column: LabelColumn::Name("label".into()),
            num_classes: None,
            split_fractions: [0.8, 0.1, 0.1],
            split_seed: 0,
            standardize: true,
            strategy: p.strategy,
            subset_fraction: None,
            subset_size: None,
            block_size: p.block_size,
            max_blocks_per_layer: p.max_blocks_per_layer,
            max_layers: p.max_layers,
            epsilon: p.epsilon,
            patience: p.patience,
            num_clusters: p.num_clusters,
            representation: p.representation,
            learning_rates: p.grid.learning_rates,
            weight_decays: p.grid.weight_decays,
            dropout_rates: p.grid.dropout_rates,
            epochs: p.grid.epochs,
            fine_tune_epochs: p.fine_tune_epochs,
            base_seed: p.base_seed,
            output_dir: PathBuf::from("out"),
            parallel_candidates: p.parallel_candidates,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        if cfg.dataset_path.as_os_str().is_empty() {
            return Err(CliError::Config("missing field `dataset_path`".into()));
        }
        cfg.progression().validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Reads `path` and resolves relative dataset and output paths against
    /// the directory holding the config file.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        if cfg.dataset_path.is_relative() {
            cfg.dataset_path = base.join(&cfg.dataset_path);
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn progression(&self) -> ProgressionConfig {
        let subset = match (self.subset_size, self.subset_fraction) {
            (Some(m), _) => SubsetSize::Count(m),
            (None, Some(f)) => SubsetSize::Fraction(f),
            (None, None) => SubsetSize::Fraction(0.1),
        };
        ProgressionConfig {
            block_size: self.block_size,
            max_blocks_per_layer: self.max_blocks_per_layer,
            max_layers: self.max_layers,
            epsilon: self.epsilon,
            patience: self.patience,
            subset,
            strategy: self.strategy,
            num_clusters: self.num_clusters,
            representation: self.representation,
            grid: GridSpec {
                learning_rates: self.learning_rates.clone(),
                weight_decays: self.weight_decays.clone(),
                dropout_rates: self.dropout_rates.clone(),
                epochs: self.epochs.clone(),
            },
            fine_tune_epochs: self.fine_tune_epochs,
            base_seed: self.base_seed,
            parallel_candidates: self.parallel_candidates,
        }
    }

    pub fn format(&self) -> DatasetFormat {
        self.dataset_format.unwrap_or_else(|| DatasetFormat::infer(&self.dataset_path))
    }
}

pub fn load_dataset(
    path: &Path,
    format: DatasetFormat,
    label_column: &LabelColumn,
    num_classes: Option<usize>,
) -> Result<Dataset, CliError> {
    if !path.exists() {
        return Err(CliError::Data(format!("dataset not found: {}", path.display())));
    }
    let ds = match format {
        DatasetFormat::Csv => dataset::load_csv(path, label_column, num_classes),
        DatasetFormat::Pnnl => dataset::load_binary(path),
    };
    ds.map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Everything a run needs before training: loaded, split and (optionally)
/// standardized data.
pub struct PreparedData {
    pub dataset: Dataset,
    pub split: DataSplit,
    pub standardizer: Option<Standardizer>,
}

pub fn prepare(cfg: &RunConfig) -> Result<PreparedData, CliError> {
    let raw = load_dataset(&cfg.dataset_path, cfg.format(), &cfg.label_column, cfg.num_classes)?;
    let [ft, fv, fs] = cfg.split_fractions;
    let s = split(&raw, (ft, fv, fs), cfg.split_seed).map_err(|e| CliError::Data(e.to_string()))?;
    if cfg.standardize {
        let (dataset, st) = standardize_fit_apply(&raw, &s).map_err(|e| CliError::Data(e.to_string()))?;
        Ok(PreparedData {
            dataset,
            split: s,
            standardizer: Some(st),
        })
    } else {
        Ok(PreparedData {
            dataset: raw,
            split: s,
            standardizer: None,
        })
    }
}
