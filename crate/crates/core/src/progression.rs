//! The growth loop: sample a subset, add a block, train one candidate per
//! grid entry, keep the validation-best, freeze, and decide whether the
//! current layer is saturated. Ends with full-set fine-tuning.

use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::dataset::{DataSplit, Dataset};
use crate::error::{Error, Result};
use crate::hyperopt::{enumerate_grid, run_candidates, select_best, GridSpec, HyperGrid};
use crate::network::Topology;
use crate::numerics::RngState;
use crate::sampling::{compute_context, select, Representation, SelectionContext, Strategy, UniqueTracker};
use crate::trainer::{elapsed, evaluate, fine_tune, FineTuneStats};

const INIT_TAG: u64 = 0x494E_4954_0000_0000;
const FINE_TUNE_TAG: u64 = 0x4654_554E_0000_0000;

/// Size of the per-step subset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetSize {
    /// `ceil(fraction * N_train)`
    Fraction(f64),
    Count(usize),
}

impl SubsetSize {
    pub fn resolve(self, n_train: usize) -> usize {
        let m = match self {
            SubsetSize::Fraction(f) => (f * n_train as f64).ceil() as usize,
            SubsetSize::Count(m) => m,
        };
        m.clamp(1, n_train.max(1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgressionConfig {
    pub block_size: usize,
    pub max_blocks_per_layer: usize,
    pub max_layers: usize,
    /// Minimum absolute validation-accuracy gain that counts as progress.
    pub epsilon: f64,
    /// Consecutive low-gain steps before a layer is saturated.
    pub patience: usize,
    pub subset: SubsetSize,
    pub strategy: Strategy,
    /// Defaults to the class count.
    pub num_clusters: Option<usize>,
    pub representation: Representation,
    pub grid: GridSpec,
    pub fine_tune_epochs: usize,
    pub base_seed: u64,
    pub parallel_candidates: bool,
}

impl Default for ProgressionConfig {
    fn default() -> Self {
        Self {
            block_size: 20,
            max_blocks_per_layer: 20,
            max_layers: 3,
            epsilon: 0.001,
            patience: 3,
            subset: SubsetSize::Fraction(0.1),
            strategy: Strategy::Random,
            num_clusters: None,
            representation: Representation::Probabilities,
            grid: GridSpec {
                learning_rates: vec![0.001],
                weight_decays: vec![0.0, 1e-4],
                dropout_rates: vec![0.0, 0.2],
                epochs: vec![20],
            },
            fine_tune_epochs: 20,
            base_seed: 0,
            parallel_candidates: false,
        }
    }
}

impl ProgressionConfig {
    pub fn validate(&self) -> Result<HyperGrid> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.block_size == 0 {
            return bad("block_size must be at least 1".into());
        }
        if self.max_layers == 0 || self.max_blocks_per_layer == 0 {
            return bad("max_layers and max_blocks_per_layer must be at least 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return bad(format!("epsilon {}", self.epsilon));
        }
        match self.subset {
            SubsetSize::Fraction(f) if !(f > 0.0 && f <= 1.0) => {
                return bad(format!("subset_fraction {f} must be in (0, 1]"))
            }
            SubsetSize::Count(0) => return bad("subset_size must be at least 1".into()),
            _ => {}
        }
        if self.num_clusters == Some(0) {
            return bad("num_clusters must be at least 1".into());
        }
        enumerate_grid(&self.grid)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub index: usize,
    pub val_accuracy: f64,
    pub val_loss: f64,
    pub train_time_s: f64,
    pub initial_subset_loss: f64,
    pub final_subset_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub layer: usize,
    /// Grid index of the installed candidate.
    pub chosen: usize,
    pub candidates: Vec<CandidateRecord>,
    pub subset_indices: Vec<usize>,
    pub val_accuracy_before: f64,
    pub val_accuracy_after: f64,
    pub unique_count: usize,
    pub block_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ProgressionConfig,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub subset_size: usize,
    pub steps: Vec<StepRecord>,
    pub completed: bool,
    pub fine_tune_choice: Option<usize>,
    pub fine_tune: Option<FineTuneStats>,
    pub pre_fine_tune_test_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub test_loss: Option<f64>,
    pub unique_samples_total: usize,
    pub avg_block_time_s: f64,
    pub total_time_s: f64,
    pub param_count: usize,
    pub layer_widths: Vec<usize>,
}

impl RunReport {
    /// Mean of the per-step block times (0 with no steps).
    pub fn mean_block_time(steps: &[StepRecord]) -> f64 {
        if steps.is_empty() {
            0.0
        } else {
            steps.iter().map(|s| s.block_time_s).sum::<f64>() / steps.len() as f64
        }
    }
}

/// A run that stopped early, with everything recorded up to the failure.
#[derive(Debug, thiserror::Error)]
#[error("progression failed at step {}: {error}", partial.steps.len() + 1)]
pub struct RunError {
    #[source]
    pub error: Error,
    pub partial: Box<RunReport>,
}

/// True when each of the last `patience` entries improved on the best
/// earlier entry by less than `epsilon`.
pub fn improvement_tracker(history: &[f64], epsilon: f64, patience: usize) -> bool {
    let Some(&first) = history.first() else {
        return false;
    };
    let mut best = first;
    let mut low = 0;
    for &acc in &history[1..] {
        if acc - best < epsilon {
            low += 1;
        } else {
            low = 0;
        }
        best = best.max(acc);
    }
    low >= patience
}

/// Most frequently chosen grid index; ties go to the lowest index.
pub fn modal_choice(steps: &[StepRecord], q: usize) -> Option<usize> {
    if steps.is_empty() {
        return None;
    }
    let mut counts = vec![0usize; q];
    for s in steps {
        counts[s.chosen] += 1;
    }
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    Some(best)
}

pub fn run(config: &ProgressionConfig, data: &Dataset, split: &DataSplit) -> std::result::Result<(Topology, RunReport), RunError> {
    run_observed(config, data, split, |_, _| {})
}

/// [`run`] with a callback invoked after every completed step.
pub fn run_observed(
    config: &ProgressionConfig,
    data: &Dataset,
    split: &DataSplit,
    mut observe: impl FnMut(&Topology, &StepRecord),
) -> std::result::Result<(Topology, RunReport), RunError> {
    let start = Instant::now();
    let mut report = RunReport {
        config: config.clone(),
        n_train: split.train_idx.len(),
        n_val: split.val_idx.len(),
        n_test: split.test_idx.len(),
        subset_size: 0,
        steps: Vec::new(),
        completed: false,
        fine_tune_choice: None,
        fine_tune: None,
        pre_fine_tune_test_accuracy: None,
        test_accuracy: None,
        test_loss: None,
        unique_samples_total: 0,
        avg_block_time_s: 0.0,
        total_time_s: 0.0,
        param_count: 0,
        layer_widths: Vec::new(),
    };
    let mut topo = Topology::new(data.dim(), data.num_classes());
    let outcome = drive(config, data, split, &mut topo, &mut report, &mut observe);
    report.avg_block_time_s = RunReport::mean_block_time(&report.steps);
    report.param_count = topo.param_count();
    report.layer_widths = topo.layers.iter().map(|l| l.width()).collect();
    report.total_time_s = elapsed(start);
    match outcome {
        Ok(()) => {
            report.completed = true;
            Ok((topo, report))
        }
        Err(error) => Err(RunError {
            error,
            partial: Box::new(report),
        }),
    }
}

fn drive(
    config: &ProgressionConfig,
    data: &Dataset,
    split: &DataSplit,
    topo: &mut Topology,
    report: &mut RunReport,
    observe: &mut impl FnMut(&Topology, &StepRecord),
) -> Result<()> {
    let grid = config.validate()?;
    split.validate(data.len())?;
    let train = data.subset(&split.train_idx)?;
    let val = data.subset(&split.val_idx)?;
    let test = data.subset(&split.test_idx)?;
    let m = config.subset.resolve(train.len());
    report.subset_size = m;
    let clusters = config.num_clusters.unwrap_or(data.num_classes());
    if config.strategy == Strategy::ClusterTopLoss && m < clusters {
        return Err(Error::InvalidConfig(format!(
            "subset size {m} is smaller than the cluster count {clusters}"
        )));
    }
    let base = RngState::new(config.base_seed);
    let mut tracker = UniqueTracker::new(train.len());
    let mut layer_history: Vec<f64> = Vec::new();
    let mut open_new_layer = true;

    for step in 1usize.. {
        let (val_before, _) = evaluate(topo, val.features(), val.labels())?;
        let sample_rng = base.derive(&[step as u64, config.strategy.tag()]);
        let ctx = match config.strategy {
            Strategy::Random => SelectionContext {
                per_sample_loss: vec![0.0; train.len()],
                representations: crate::numerics::Matrix::zeros(train.len(), 0),
                rng: sample_rng,
                num_clusters: clusters,
            },
            _ => compute_context(
                topo,
                train.features(),
                train.labels(),
                config.representation,
                clusters,
                sample_rng,
            )?,
        };
        let subset = select(config.strategy, &ctx, m, step)?;
        let unique_count = tracker.track(&subset)?;

        let mut init_rng = base.derive(&[step as u64, INIT_TAG]);
        if open_new_layer {
            topo.start_new_layer(config.block_size, &mut init_rng)?;
            layer_history.clear();
        } else {
            let d_in = topo.layers.last().map(|l| l.d_in()).ok_or(Error::NoLayer)?;
            topo.add_block(d_in, config.block_size, &mut init_rng)?;
        }
        let layer = topo.layers.len() - 1;

        let t0 = Instant::now();
        let results = run_candidates(
            topo,
            &subset,
            &grid,
            &train,
            &val,
            &base,
            step as u64,
            config.parallel_candidates,
        )?;
        let block_time_s = elapsed(t0);
        let best = select_best(&results)?;
        topo.install(&results[best].params)?;
        topo.freeze_all();

        let val_after = results[best].val_accuracy;
        let record = StepRecord {
            step,
            layer,
            chosen: results[best].index,
            candidates: results
                .iter()
                .map(|r| CandidateRecord {
                    index: r.index,
                    val_accuracy: r.val_accuracy,
                    val_loss: r.val_loss,
                    train_time_s: r.train_time,
                    initial_subset_loss: r.stats.initial_subset_loss,
                    final_subset_loss: r.stats.final_subset_loss,
                })
                .collect(),
            subset_indices: subset.indices,
            val_accuracy_before: val_before,
            val_accuracy_after: val_after,
            unique_count,
            block_time_s,
        };
        info!(
            "step {step}: layer {layer}, width {}, val {:.4} -> {:.4}, unique {unique_count}",
            topo.last_width(),
            val_before,
            val_after
        );
        observe(topo, &record);
        report.steps.push(record);
        report.unique_samples_total = unique_count;

        layer_history.push(val_after);
        let blocks_in_layer = topo.layers[layer].blocks.len();
        let saturated = blocks_in_layer >= config.max_blocks_per_layer
            || improvement_tracker(&layer_history, config.epsilon, config.patience);
        if saturated {
            if topo.layers.len() >= config.max_layers {
                break;
            }
            open_new_layer = true;
        } else {
            open_new_layer = false;
        }
    }

    let choice = modal_choice(&report.steps, grid.len()).expect("at least one step ran");
    report.fine_tune_choice = Some(choice);
    let (pre_acc, _) = evaluate(topo, test.features(), test.labels())?;
    report.pre_fine_tune_test_accuracy = Some(pre_acc);
    if config.fine_tune_epochs > 0 {
        let mut ft_rng = base.derive(&[FINE_TUNE_TAG]);
        let (tuned, stats) = fine_tune(
            topo,
            &train,
            &val,
            &grid.combos[choice],
            config.fine_tune_epochs,
            &mut ft_rng,
        )?;
        *topo = tuned;
        report.fine_tune = Some(stats);
    }
    let (acc, loss) = evaluate(topo, test.features(), test.labels())?;
    report.test_accuracy = Some(acc);
    report.test_loss = Some(loss);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::split;
    use crate::synthetic::{gaussian_blobs, BlobSpec};

    #[test]
    fn tracker_examples() {
        assert!(!improvement_tracker(&[0.5, 0.6, 0.7], 0.001, 2));
        assert!(improvement_tracker(&[0.7, 0.7, 0.7], 0.001, 2));
        // 0.71 - 0.7 >= 0.01 resets the count; 0.7005 is then one low step
        assert!(!improvement_tracker(&[0.7, 0.71, 0.7005], 0.01, 2));
        assert!(!improvement_tracker(&[0.7], 0.01, 1));
        assert!(!improvement_tracker(&[], 0.01, 1));
    }

    fn small_config() -> ProgressionConfig {
        ProgressionConfig {
            block_size: 4,
            max_blocks_per_layer: 3,
            max_layers: 2,
            patience: 2,
            subset: SubsetSize::Fraction(0.2),
            grid: GridSpec {
                learning_rates: vec![0.01],
                weight_decays: vec![0.0, 1e-3],
                dropout_rates: vec![0.0],
                epochs: vec![5],
            },
            fine_tune_epochs: 3,
            base_seed: 17,
            ..ProgressionConfig::default()
        }
    }

    fn small_data() -> (Dataset, DataSplit) {
        let ds = gaussian_blobs(&BlobSpec { samples: 400, dim: 6, classes: 3, seed: 4, ..BlobSpec::default() }).unwrap();
        let s = split(&ds, (0.8, 0.1, 0.1), 2).unwrap();
        (ds, s)
    }

    #[test]
    fn single_block_cap() {
        let (ds, s) = small_data();
        let cfg = ProgressionConfig { max_layers: 1, max_blocks_per_layer: 1, ..small_config() };
        let (topo, report) = run(&cfg, &ds, &s).unwrap();
        assert_eq!(report.steps.len(), 1);
        assert!(report.fine_tune.is_some());
        assert_eq!(topo.layers.len(), 1);
    }

    #[test]
    fn full_fraction_random_uses_every_row() {
        let (ds, s) = small_data();
        let cfg = ProgressionConfig { subset: SubsetSize::Fraction(1.0), ..small_config() };
        let (_, report) = run(&cfg, &ds, &s).unwrap();
        for step in &report.steps {
            assert_eq!(step.subset_indices, (0..s.train_idx.len()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn report_invariants_and_determinism() {
        let (ds, s) = small_data();
        for strategy in [Strategy::Random, Strategy::TopLoss, Strategy::ClusterTopLoss] {
            let cfg = ProgressionConfig { strategy, ..small_config() };
            let mut frozen_prefix = Vec::new();
            let (topo, a) = run_observed(&cfg, &ds, &s, |t, _| {
                let now = t.frozen_block_bytes();
                assert!(now.starts_with(&frozen_prefix));
                frozen_prefix = now;
            })
            .unwrap();
            assert!(a.steps.len() <= cfg.max_layers * cfg.max_blocks_per_layer);
            let mut tracker = UniqueTracker::new(a.n_train);
            for (i, st) in a.steps.iter().enumerate() {
                assert_eq!(st.step, i + 1);
                let sub = crate::sampling::Subset { indices: st.subset_indices.clone(), step: st.step };
                assert_eq!(tracker.track(&sub).unwrap(), st.unique_count);
                let metrics: Vec<(f64, f64)> = st.candidates.iter().map(|c| (c.val_accuracy, c.val_loss)).collect();
                let replay = crate::hyperopt::select_best_by(&metrics).unwrap();
                assert_eq!(st.candidates[replay].index, st.chosen);
            }
            assert!((a.avg_block_time_s - RunReport::mean_block_time(&a.steps)).abs() < 1e-12);
            assert_eq!(a.param_count, topo.param_count());

            let (_, b) = run(&cfg, &ds, &s).unwrap();
            assert_eq!(a.steps.len(), b.steps.len());
            for (x, y) in a.steps.iter().zip(&b.steps) {
                assert_eq!(x.subset_indices, y.subset_indices);
                assert_eq!(x.chosen, y.chosen);
                assert_eq!(x.val_accuracy_after.to_bits(), y.val_accuracy_after.to_bits());
            }
            assert_eq!(a.test_accuracy, b.test_accuracy);
        }
    }

    #[test]
    fn invalid_config_aborts_with_partial_report() {
        let (ds, s) = small_data();
        let cfg = ProgressionConfig { block_size: 0, ..small_config() };
        let err = run(&cfg, &ds, &s).unwrap_err();
        assert!(matches!(err.error, Error::InvalidConfig(_)));
        assert!(!err.partial.completed);
        assert!(err.partial.steps.is_empty());
    }

    #[test]
    fn subset_size_is_ceiling() {
        assert_eq!(SubsetSize::Fraction(0.1).resolve(95), 10);
        assert_eq!(SubsetSize::Fraction(0.1).resolve(100), 10);
        assert_eq!(SubsetSize::Fraction(0.001).resolve(10), 1);
        assert_eq!(SubsetSize::Count(500).resolve(100), 100);
    }
}
