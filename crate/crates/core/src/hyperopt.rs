//! The hyperparameter grid and per-step online selection: every
//! combination trains its own copy of the new block on the same subset,
//! and the validation-best copy wins.

use std::time::Instant;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::network::{Topology, TrainableParams};
use crate::numerics::RngState;
use crate::sampling::Subset;
use crate::trainer::{elapsed, score_logits, BlockProblem, SampleSource, TrainStats};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub dropout_rate: f64,
    pub epochs: usize,
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidConfig(format!("learning rate {}", self.learning_rate)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig(format!("weight decay {}", self.weight_decay)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(format!("dropout rate {}", self.dropout_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Value lists whose Cartesian product is the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub learning_rates: Vec<f64>,
    pub weight_decays: Vec<f64>,
    pub dropout_rates: Vec<f64>,
    pub epochs: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperGrid {
    pub combos: Vec<HyperParams>,
}

impl HyperGrid {
    pub fn len(&self) -> usize {
        self.combos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.combos.is_empty()
    }
}

/// Cartesian product with learning rate outermost, then weight decay,
/// dropout, and epochs innermost.
pub fn enumerate_grid(spec: &GridSpec) -> Result<HyperGrid> {
    fn check<T: PartialEq + std::fmt::Debug>(name: &str, v: &[T]) -> Result<()> {
        if v.is_empty() {
            return Err(Error::InvalidConfig(format!("{name} list is empty")));
        }
        for (i, a) in v.iter().enumerate() {
            if v[..i].contains(a) {
                return Err(Error::InvalidConfig(format!("{name} repeats {a:?}")));
            }
        }
        Ok(())
    }
    check("learning_rates", &spec.learning_rates)?;
    check("weight_decays", &spec.weight_decays)?;
    check("dropout_rates", &spec.dropout_rates)?;
    check("epochs", &spec.epochs)?;
    if let Some(lr) = spec.learning_rates.iter().find(|&&lr| !(lr > 0.0 && lr.is_finite())) {
        return Err(Error::InvalidConfig(format!("learning rate {lr} must be positive")));
    }
    let mut combos = Vec::new();
    for &learning_rate in &spec.learning_rates {
        for &weight_decay in &spec.weight_decays {
            for &dropout_rate in &spec.dropout_rates {
                for &epochs in &spec.epochs {
                    let hp = HyperParams {
                        learning_rate,
                        weight_decay,
                        dropout_rate,
                        epochs,
                    };
                    hp.validate()?;
                    combos.push(hp);
                }
            }
        }
    }
    Ok(HyperGrid { combos })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateResult {
    pub index: usize,
    pub params: TrainableParams,
    pub val_accuracy: f64,
    pub val_loss: f64,
    /// Seconds spent training and validating this candidate.
    pub train_time: f64,
    pub stats: TrainStats,
}

/// Trains one candidate per grid entry from the same initial block.
///
/// Candidate `h` draws from `base.derive([step, h])`. Results come back in
/// grid order whatever the execution order; failed candidates are dropped
/// with a warning, and the call fails only if every candidate fails.
#[allow(clippy::too_many_arguments)]
pub fn run_candidates(
    topology: &Topology,
    subset: &Subset,
    grid: &HyperGrid,
    train: &impl SampleSource,
    val: &Dataset,
    base: &RngState,
    step: u64,
    parallel: bool,
) -> Result<Vec<CandidateResult>> {
    let order: Vec<usize> = (0..grid.len()).collect();
    run_candidates_in_order(topology, subset, grid, train, val, base, step, parallel, &order)
}

/// [`run_candidates`] with an explicit execution order over candidate indices.
#[allow(clippy::too_many_arguments)]
pub fn run_candidates_in_order(
    topology: &Topology,
    subset: &Subset,
    grid: &HyperGrid,
    train: &impl SampleSource,
    val: &Dataset,
    base: &RngState,
    step: u64,
    parallel: bool,
    order: &[usize],
) -> Result<Vec<CandidateResult>> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("empty hyperparameter grid".into()));
    }
    let problem = BlockProblem::new(topology, subset, train)?;
    let val_cache = topology.block_cache(val.features())?;
    let run_one = |h: usize| -> Result<CandidateResult> {
        let start = Instant::now();
        let mut rng = base.derive(&[step, h as u64]);
        let (params, stats) = problem.train(&grid.combos[h], &mut rng)?;
        let (val_accuracy, val_loss) = score_logits(&val_cache.logits(&params)?, val.labels())?;
        Ok(CandidateResult {
            index: h,
            params,
            val_accuracy,
            val_loss,
            train_time: elapsed(start),
            stats,
        })
    };
    let mut outcomes: Vec<(usize, Result<CandidateResult>)> = if parallel {
        order.par_iter().map(|&h| (h, run_one(h))).collect()
    } else {
        order.iter().map(|&h| (h, run_one(h))).collect()
    };
    outcomes.sort_by_key(|(h, _)| *h);
    let mut results = Vec::with_capacity(outcomes.len());
    let mut first_err = None;
    for (h, outcome) in outcomes {
        match outcome {
            Ok(r) => results.push(r),
            Err(e) => {
                warn!("candidate {h} failed: {e}");
                first_err.get_or_insert(e);
            }
        }
    }
    if results.is_empty() {
        return Err(Error::AllCandidatesFailed(
            grid.len(),
            Box::new(first_err.expect("non-empty grid")),
        ));
    }
    Ok(results)
}

/// Position in `results` of the best candidate: highest validation
/// accuracy, then lowest validation loss, then first in order.
pub fn select_best_by(metrics: &[(f64, f64)]) -> Result<usize> {
    if metrics.is_empty() {
        return Err(Error::InvalidData("no candidates to select from".into()));
    }
    let mut best = 0;
    for (i, &(acc, loss)) in metrics.iter().enumerate().skip(1) {
        let (b_acc, b_loss) = metrics[best];
        if acc > b_acc || (acc == b_acc && loss < b_loss) {
            best = i;
        }
    }
    Ok(best)
}

pub fn select_best(results: &[CandidateResult]) -> Result<usize> {
    let metrics: Vec<(f64, f64)> = results.iter().map(|r| (r.val_accuracy, r.val_loss)).collect();
    select_best_by(&metrics)
}
