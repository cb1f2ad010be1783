//! Subset-restricted block optimization, evaluation, and full-set
//! fine-tuning.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::hyperopt::HyperParams;
use crate::network::{BlockCache, Topology, TrainableParams};
use crate::numerics::{softmax_cross_entropy, AdamState, Matrix, RngState};
use crate::sampling::Subset;

pub const MAX_BATCH: usize = 64;

/// Row-level read access to training samples.
pub trait SampleSource {
    fn len(&self) -> usize;
    fn dim(&self) -> usize;
    fn row(&self, i: usize) -> &[f64];
    fn label(&self, i: usize) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for Dataset {
    fn len(&self) -> usize {
        Dataset::len(self)
    }
    fn dim(&self) -> usize {
        Dataset::dim(self)
    }
    fn row(&self, i: usize) -> &[f64] {
        self.features().row(i)
    }
    fn label(&self, i: usize) -> usize {
        self.labels()[i]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub initial_subset_loss: f64,
    pub final_subset_loss: f64,
    pub epochs_run: usize,
    pub wall_time: f64,
}

/// The optimization problem for one new block: the subset rows pushed
/// through the frozen part of the network once, ready for repeated training.
#[derive(Clone, Debug)]
pub struct BlockProblem {
    cache: BlockCache,
    labels: Vec<usize>,
    initial: TrainableParams,
}

impl BlockProblem {
    /// Reads only the rows listed in `subset`.
    pub fn new(topology: &Topology, subset: &Subset, data: &impl SampleSource) -> Result<Self> {
        if subset.is_empty() {
            return Err(Error::EmptySubset);
        }
        if data.dim() != topology.input_dim() {
            return Err(Error::Dimension(format!(
                "data has {} features, topology expects {}",
                data.dim(),
                topology.input_dim()
            )));
        }
        let initial = topology.trainable()?;
        let mut rows = Vec::with_capacity(subset.len() * data.dim());
        let mut labels = Vec::with_capacity(subset.len());
        for &i in &subset.indices {
            if i >= data.len() {
                return Err(Error::Dimension(format!(
                    "subset index {i} out of range for {} rows",
                    data.len()
                )));
            }
            rows.extend_from_slice(data.row(i));
            labels.push(data.label(i));
        }
        let x = Matrix::from_vec(labels.len(), data.dim(), rows)?;
        Ok(Self {
            cache: topology.block_cache(&x)?,
            labels,
            initial,
        })
    }

    pub fn initial(&self) -> &TrainableParams {
        &self.initial
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn subset_loss(&self, params: &TrainableParams) -> Result<f64> {
        Ok(softmax_cross_entropy(&self.cache.logits(params)?, &self.labels)?.loss)
    }

    /// Mini-batch Adam over the subset from the shared initial parameters.
    pub fn train(&self, hp: &HyperParams, rng: &mut RngState) -> Result<(TrainableParams, TrainStats)> {
        hp.validate()?;
        let start = Instant::now();
        let mut params = self.initial.clone();
        let mut adam = AdamState::new(&params.lengths());
        let initial_subset_loss = self.subset_loss(&params)?;
        let m = self.len();
        let batch = m.min(MAX_BATCH);
        let width = params.bias.len();
        let mut order: Vec<usize> = (0..m).collect();
        for _ in 0..hp.epochs {
            rng.shuffle(&mut order);
            for chunk in order.chunks(batch) {
                let sub = self.cache.select_rows(chunk);
                let labels: Vec<usize> = chunk.iter().map(|&i| self.labels[i]).collect();
                let mask = dropout_mask(chunk.len(), width, hp.dropout_rate, rng);
                let (_, grads) = sub.loss_and_gradients(&params, &labels, mask.as_ref())?;
                let grads: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
                adam.step(&mut params.slices_mut(), &grads, hp.learning_rate, hp.weight_decay)?;
            }
        }
        let final_subset_loss = self.subset_loss(&params)?;
        Ok((
            params,
            TrainStats {
                initial_subset_loss,
                final_subset_loss,
                epochs_run: hp.epochs,
                wall_time: elapsed(start),
            },
        ))
    }
}

pub(crate) fn elapsed(start: Instant) -> f64 {
    start.elapsed().as_secs_f64().max(1e-9)
}

/// Inverted-dropout multipliers, or `None` when `rate` is zero.
pub fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut RngState) -> Option<Matrix> {
    if rate <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - rate);
    let data = (0..rows * cols)
        .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
        .collect();
    Some(Matrix::from_vec(rows, cols, data).expect("sized by construction"))
}

/// Trains the single unfrozen block and the output layer on `subset` only.
pub fn optimize_block(
    topology: &Topology,
    subset: &Subset,
    hp: &HyperParams,
    data: &impl SampleSource,
    rng: &mut RngState,
) -> Result<(Topology, TrainStats)> {
    let problem = BlockProblem::new(topology, subset, data)?;
    let (params, stats) = problem.train(hp, rng)?;
    let mut out = topology.clone();
    out.install(&params)?;
    Ok((out, stats))
}

/// `(accuracy, mean cross-entropy)` from precomputed logits.
pub fn score_logits(logits: &Matrix, labels: &[usize]) -> Result<(f64, f64)> {
    let loss = softmax_cross_entropy(logits, labels)?;
    if labels.is_empty() {
        return Ok((0.0, 0.0));
    }
    let correct = logits
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok((correct as f64 / labels.len() as f64, loss.loss))
}

/// Accuracy (argmax, lowest class on ties) and mean cross-entropy.
pub fn evaluate(topology: &Topology, features: &Matrix, labels: &[usize]) -> Result<(f64, f64)> {
    if labels.len() != features.rows() {
        return Err(Error::Dimension(format!(
            "{} labels for {} rows",
            labels.len(),
            features.rows()
        )));
    }
    score_logits(&topology.forward(features)?.logits, labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneStats {
    pub start_val_accuracy: f64,
    pub best_val_accuracy: f64,
    /// 0 means the starting parameters were kept.
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub wall_time: f64,
}

/// Joint training of every parameter on the full training split.
///
/// Dropout at `hp.dropout_rate` is applied to every hidden layer. Returns
/// the parameters with the highest validation accuracy seen, checked before
/// training and after each epoch; an epoch must strictly beat the best so
/// far to replace it.
pub fn fine_tune(
    topology: &Topology,
    train: &Dataset,
    val: &Dataset,
    hp: &HyperParams,
    epochs: usize,
    rng: &mut RngState,
) -> Result<(Topology, FineTuneStats)> {
    hp.validate()?;
    let start = Instant::now();
    let mut current = topology.clone();
    current.unfreeze_all();
    let (start_acc, _) = evaluate(&current, val.features(), val.labels())?;
    let mut best = (start_acc, 0usize, current.clone());
    let mut adam = AdamState::new(&current.param_lengths());
    let n = train.len();
    let batch = n.min(MAX_BATCH);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch) {
            let x = train.features().select_rows(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels()[i]).collect();
            let masks = if hp.dropout_rate > 0.0 {
                Some(
                    current
                        .layers
                        .iter()
                        .map(|l| dropout_mask(chunk.len(), l.width(), hp.dropout_rate, rng).expect("rate > 0"))
                        .collect::<Vec<_>>(),
                )
            } else {
                None
            };
            let (_, grads) = current.loss_and_gradients(&x, &labels, masks.as_deref())?;
            let grads: Vec<&[f64]> = grads.tensors.iter().map(Vec::as_slice).collect();
            adam.step(&mut current.params_mut(), &grads, hp.learning_rate, hp.weight_decay)?;
        }
        let (acc, _) = evaluate(&current, val.features(), val.labels())?;
        if acc > best.0 {
            best = (acc, epoch, current.clone());
        }
    }
    let (best_acc, best_epoch, mut chosen) = best;
    chosen.freeze_all();
    Ok((
        chosen,
        FineTuneStats {
            start_val_accuracy: start_acc,
            best_val_accuracy: best_acc,
            best_epoch,
            epochs_run: epochs,
            wall_time: elapsed(start),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::RefCell;

    /// Logs every row index read through it.
    struct Logged<'a> {
        inner: &'a Dataset,
        reads: RefCell<Vec<usize>>,
    }

    impl SampleSource for Logged<'_> {
        fn len(&self) -> usize {
            self.inner.len()
        }
        fn dim(&self) -> usize {
            self.inner.dim()
        }
        fn row(&self, i: usize) -> &[f64] {
            self.reads.borrow_mut().push(i);
            self.inner.features().row(i)
        }
        fn label(&self, i: usize) -> usize {
            self.reads.borrow_mut().push(i);
            self.inner.labels()[i]
        }
    }

    fn blobs(n: usize, seed: u64) -> Dataset {
        let mut rng = RngState::new(seed);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = i % 2;
            let c = if y == 0 { -3.0 } else { 3.0 };
            data.push(c + rng.uniform_range(-1.0, 1.0));
            data.push(rng.uniform_range(-1.0, 1.0));
            labels.push(y);
        }
        Dataset::new(Matrix::from_vec(n, 2, data).unwrap(), labels, 2).unwrap()
    }

    fn fresh(d: usize, k: usize, b: usize, seed: u64) -> Topology {
        let mut t = Topology::new(d, k);
        t.start_new_layer(b, &mut RngState::new(seed)).unwrap();
        t
    }

    fn hp(lr: f64, epochs: usize) -> HyperParams {
        HyperParams {
            learning_rate: lr,
            weight_decay: 0.0,
            dropout_rate: 0.0,
            epochs,
        }
    }

    #[test]
    fn zero_learning_rate_is_fixed_point() {
        let data = blobs(40, 1);
        let topo = fresh(2, 2, 4, 2);
        let subset = Subset { indices: (0..40).collect(), step: 1 };
        let (out, stats) = optimize_block(&topo, &subset, &hp(0.0, 3), &data, &mut RngState::new(3)).unwrap();
        assert_eq!(out, topo);
        assert_eq!(stats.epochs_run, 3);
        assert!(stats.wall_time > 0.0);
    }

    #[test]
    fn zero_epochs_rejected() {
        let data = blobs(10, 1);
        let subset = Subset { indices: vec![0, 1], step: 1 };
        assert!(optimize_block(&fresh(2, 2, 2, 0), &subset, &hp(0.1, 0), &data, &mut RngState::new(0)).is_err());
    }

    #[test]
    fn separable_blobs_fit_perfectly() {
        let data = blobs(200, 4);
        let topo = fresh(2, 2, 8, 5);
        let subset = Subset { indices: (0..200).collect(), step: 1 };
        let (out, stats) = optimize_block(&topo, &subset, &hp(0.01, 50), &data, &mut RngState::new(6)).unwrap();
        let (acc, _) = evaluate(&out, data.features(), data.labels()).unwrap();
        assert_eq!(acc, 1.0);
        assert!(stats.final_subset_loss < stats.initial_subset_loss);
    }

    #[test]
    fn touches_only_subset_rows() {
        let data = blobs(100, 7);
        let logged = Logged { inner: &data, reads: RefCell::new(Vec::new()) };
        let mut topo = fresh(2, 2, 3, 8);
        topo.freeze_all();
        topo.add_block(2, 3, &mut RngState::new(9)).unwrap();
        let subset = Subset { indices: vec![3, 17, 42, 64, 99], step: 2 };
        let before = topo.frozen_block_bytes();
        let (out, _) = optimize_block(&topo, &subset, &hp(0.05, 5), &logged, &mut RngState::new(10)).unwrap();
        let reads = logged.reads.borrow();
        assert!(!reads.is_empty());
        assert!(reads.iter().all(|i| subset.indices.contains(i)));
        assert_eq!(out.frozen_block_bytes(), before);
    }

    #[test]
    fn training_is_deterministic() {
        let data = blobs(80, 11);
        let topo = fresh(2, 2, 4, 12);
        let subset = Subset { indices: (0..80).step_by(2).collect(), step: 1 };
        let mut h = hp(0.02, 4);
        h.dropout_rate = 0.3;
        h.weight_decay = 1e-3;
        let a = optimize_block(&topo, &subset, &h, &data, &mut RngState::new(13)).unwrap().0;
        let b = optimize_block(&topo, &subset, &h, &data, &mut RngState::new(13)).unwrap().0;
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    }

    #[test]
    fn no_trainable_block() {
        let data = blobs(10, 1);
        let mut topo = fresh(2, 2, 2, 0);
        topo.freeze_all();
        let subset = Subset { indices: vec![0], step: 1 };
        assert!(matches!(
            optimize_block(&topo, &subset, &hp(0.1, 1), &data, &mut RngState::new(0)),
            Err(Error::NoTrainableBlock)
        ));
        let empty = Subset { indices: vec![], step: 1 };
        assert!(matches!(
            optimize_block(&fresh(2, 2, 2, 0), &empty, &hp(0.1, 1), &data, &mut RngState::new(0)),
            Err(Error::EmptySubset)
        ));
    }

    #[test]
    fn zero_topology_balanced_binary() {
        let data = blobs(10, 2);
        let (acc, loss) = evaluate(&Topology::new(2, 2), data.features(), data.labels()).unwrap();
        assert_eq!(acc, 0.5);
        assert!((loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn accuracy_matches_confusion_trace() {
        let data = blobs(60, 3);
        let mut topo = fresh(2, 2, 4, 4);
        topo.output_weight = Matrix::from_vec(4, 2, vec![0.3, -0.2, 0.1, 0.5, -0.4, 0.2, 0.9, -0.7]).unwrap();
        let (acc, _) = evaluate(&topo, data.features(), data.labels()).unwrap();
        let mut confusion = [[0usize; 2]; 2];
        for i in 0..data.len() {
            let logits = topo.forward(&data.features().select_rows(&[i])).unwrap().logits;
            let pred = if logits.get(0, 1) > logits.get(0, 0) { 1 } else { 0 };
            confusion[data.labels()[i]][pred] += 1;
        }
        let trace = (confusion[0][0] + confusion[1][1]) as f64 / data.len() as f64;
        assert_eq!(acc, trace);
        assert_eq!(evaluate(&topo, data.features(), data.labels()).unwrap(), (acc, evaluate(&topo, data.features(), data.labels()).unwrap().1));
    }

    #[test]
    fn fine_tune_zero_lr_returns_input() {
        let data = blobs(50, 5);
        let mut topo = fresh(2, 2, 3, 6);
        topo.freeze_all();
        let (out, stats) = fine_tune(&topo, &data, &data, &hp(0.0, 1), 3, &mut RngState::new(1)).unwrap();
        assert_eq!(out, topo);
        assert_eq!(stats.best_epoch, 0);
    }

    #[test]
    fn fine_tune_never_worse_on_validation() {
        let train = blobs(100, 8);
        let val = blobs(40, 9);
        let mut topo = fresh(2, 2, 4, 10);
        let subset = Subset { indices: (0..20).collect(), step: 1 };
        topo = optimize_block(&topo, &subset, &hp(0.01, 5), &train, &mut RngState::new(2)).unwrap().0;
        topo.freeze_all();
        let (start, _) = evaluate(&topo, val.features(), val.labels()).unwrap();
        let mut h = hp(0.05, 1);
        h.dropout_rate = 0.2;
        let (out, stats) = fine_tune(&topo, &train, &val, &h, 5, &mut RngState::new(3)).unwrap();
        let (end, _) = evaluate(&out, val.features(), val.labels()).unwrap();
        assert!(end >= start);
        assert_eq!(stats.start_val_accuracy, start);
        assert_eq!(stats.best_val_accuracy, end);
        assert!(out.trainable_block().is_none());
    }
}
