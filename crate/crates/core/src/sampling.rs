//! Subset selection for one progression step: uniform random, top-M by
//! loss, and cluster-diversified top-M, plus unique-sample accounting.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Topology;
use crate::numerics::{softmax_cross_entropy, Matrix, RngState};

pub const KMEANS_MAX_ITERS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    TopLoss,
    ClusterTopLoss,
}

impl Strategy {
    /// Stream tag used when deriving this strategy's per-step RNG.
    pub fn tag(self) -> u64 {
        match self {
            Strategy::Random => 0x5341_4D50_0000_0001,
            Strategy::TopLoss => 0x5341_4D50_0000_0002,
            Strategy::ClusterTopLoss => 0x5341_4D50_0000_0003,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::TopLoss => "top_loss",
            Strategy::ClusterTopLoss => "cluster_top_loss",
        }
    }
}

/// Inputs handed to the clustering step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    #[default]
    Probabilities,
    Logits,
}

/// Sorted, duplicate-free training-split indices chosen at one step.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subset {
    pub indices: Vec<usize>,
    pub step: usize,
}

impl Subset {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// What the previous network says about every training sample.
#[derive(Clone, Debug)]
pub struct SelectionContext {
    pub per_sample_loss: Vec<f64>,
    /// One row per training sample.
    pub representations: Matrix,
    pub rng: RngState,
    pub num_clusters: usize,
}

/// Per-sample losses and representations from one inference pass of `topology`.
pub fn compute_context(
    topology: &Topology,
    features: &Matrix,
    labels: &[usize],
    representation: Representation,
    num_clusters: usize,
    rng: RngState,
) -> Result<SelectionContext> {
    let out = topology.forward(features)?;
    let loss = softmax_cross_entropy(&out.logits, labels)?;
    let representations = match representation {
        Representation::Probabilities => loss.probabilities,
        Representation::Logits => out.logits,
    };
    Ok(SelectionContext {
        per_sample_loss: loss.per_sample,
        representations,
        rng,
        num_clusters,
    })
}

/// Runs `strategy` and wraps the result for step `step`.
pub fn select(strategy: Strategy, ctx: &SelectionContext, m: usize, step: usize) -> Result<Subset> {
    if m == 0 {
        return Err(Error::EmptySubset);
    }
    let indices = match strategy {
        Strategy::Random => {
            let mut rng = ctx.rng.clone();
            select_random(ctx.per_sample_loss.len(), m, &mut rng)
        }
        Strategy::TopLoss => select_top_loss(&ctx.per_sample_loss, m),
        Strategy::ClusterTopLoss => select_cluster_top_loss(ctx, m)?,
    };
    Ok(Subset { indices, step })
}

/// `m` distinct indices from `[0, n)`, uniformly, by partial Fisher-Yates.
pub fn select_random(n: usize, m: usize, rng: &mut RngState) -> Vec<usize> {
    if m >= n {
        return (0..n).collect();
    }
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..m {
        let j = i + rng.below(n - i);
        pool.swap(i, j);
    }
    pool.truncate(m);
    pool.sort_unstable();
    pool
}

/// Highest loss first, lower index first on ties.
fn by_loss_desc(losses: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b))
}

/// The `m` highest-loss indices, sorted ascending.
pub fn select_top_loss(losses: &[f64], m: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(by_loss_desc(losses));
    order.truncate(m);
    order.sort_unstable();
    order
}

/// Top `floor(m / C)` losses within each cluster, then the globally
/// highest-loss leftovers until `m` samples are chosen.
pub fn select_cluster_top_loss(ctx: &SelectionContext, m: usize) -> Result<Vec<usize>> {
    let c = ctx.num_clusters;
    if c == 0 || m < c {
        return Err(Error::InvalidConfig(format!(
            "subset size {m} must be at least the cluster count {c}"
        )));
    }
    let mut rng = ctx.rng.clone();
    let km = kmeans(&ctx.representations, c, &mut rng, KMEANS_MAX_ITERS)?;
    Ok(cluster_top_loss(&ctx.per_sample_loss, &km.assignments, c, m).selected)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterSelection {
    /// Sorted final selection.
    pub selected: Vec<usize>,
    /// Per-cluster contribution before the remainder fill.
    pub per_cluster: Vec<usize>,
    /// How many came from the global fill.
    pub filled: usize,
}

/// Per-cluster top-loss selection for fixed cluster `assignments`.
pub fn cluster_top_loss(losses: &[f64], assignments: &[usize], c: usize, m: usize) -> ClusterSelection {
    let n = losses.len();
    let target = m.min(n);
    let quota = m.checked_div(c).unwrap_or(0);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &a) in assignments.iter().enumerate() {
        members[a].push(i);
    }
    let mut chosen = vec![false; n];
    let mut per_cluster = Vec::with_capacity(c);
    for group in &mut members {
        group.sort_by(by_loss_desc(losses));
        let take = quota.min(group.len());
        for &i in &group[..take] {
            chosen[i] = true;
        }
        per_cluster.push(take);
    }
    let mut count: usize = per_cluster.iter().sum();
    let mut filled = 0;
    if count < target {
        let mut order: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
        order.sort_by(by_loss_desc(losses));
        for &i in order.iter().take(target - count) {
            chosen[i] = true;
            filled += 1;
        }
        count += filled;
    }
    debug_assert_eq!(count, target);
    ClusterSelection {
        selected: (0..n).filter(|&i| chosen[i]).collect(),
        per_cluster,
        filled,
    }
}

#[derive(Clone, Debug)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Matrix,
    /// Within-cluster sum of squares after every assignment pass.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for j in 0..centroids.rows() {
        let d = sq_dist(point, centroids.row(j));
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn kmeans_pp_seed(points: &Matrix, c: usize, rng: &mut RngState) -> Matrix {
    let n = points.rows();
    let mut chosen = Vec::with_capacity(c);
    chosen.push(rng.below(n));
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(chosen[0]))).collect();
    while chosen.len() < c {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in dist.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                acc += d;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            rng.below(n)
        };
        chosen.push(pick);
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(pick)));
        }
    }
    points.select_rows(&chosen)
}

/// Lloyd's algorithm with k-means++ seeding and squared Euclidean distance.
///
/// Stops when an assignment pass changes nothing or after `max_iters`
/// passes. An empty cluster is re-seeded at the point farthest from its
/// current centroid.
pub fn kmeans(points: &Matrix, c: usize, rng: &mut RngState, max_iters: usize) -> Result<KMeansResult> {
    let n = points.rows();
    if c == 0 || n < c {
        return Err(Error::TooFewPoints { points: n, clusters: c });
    }
    let dim = points.cols();
    let mut centroids = kmeans_pp_seed(points, c, rng);
    let mut assignments = vec![usize::MAX; n];
    let mut dists = vec![0.0; n];
    let mut history = Vec::new();
    let mut iterations = 0;
    for iter in 0..max_iters.max(1) {
        iterations = iter + 1;
        let mut changed = false;
        let mut objective = 0.0;
        for i in 0..n {
            let (j, d) = nearest(points.row(i), &centroids);
            if assignments[i] != j {
                assignments[i] = j;
                changed = true;
            }
            dists[i] = d;
            objective += d;
        }
        history.push(objective);
        if !changed {
            break;
        }

        let mut sums = Matrix::zeros(c, dim);
        let mut counts = vec![0usize; c];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums.row_mut(a).iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        let mut used = vec![false; n];
        for (j, &count) in counts.iter().enumerate() {
            if count > 0 {
                let inv = count as f64;
                for (dst, s) in centroids.row_mut(j).iter_mut().zip(sums.row(j)) {
                    *dst = s / inv;
                }
            } else {
                let mut far = None;
                for i in 0..n {
                    if used[i] {
                        continue;
                    }
                    if far.is_none_or(|f: usize| dists[i] > dists[f]) {
                        far = Some(i);
                    }
                }
                if let Some(f) = far {
                    used[f] = true;
                    centroids.row_mut(j).copy_from_slice(points.row(f));
                }
            }
        }
    }
    Ok(KMeansResult {
        assignments,
        centroids,
        objective_history: history,
        iterations,
    })
}

/// Running union of selected indices across steps.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UniqueTracker {
    seen: Vec<bool>,
    count: usize,
    pub per_step_counts: Vec<usize>,
}

impl UniqueTracker {
    pub fn new(n_train: usize) -> Self {
        Self {
            seen: vec![false; n_train],
            count: 0,
            per_step_counts: Vec::new(),
        }
    }

    pub fn unique(&self) -> usize {
        self.count
    }

    pub fn track(&mut self, subset: &Subset) -> Result<usize> {
        if let Some(&bad) = subset.indices.iter().find(|&&i| i >= self.seen.len()) {
            return Err(Error::Dimension(format!(
                "subset index {bad} out of range for {} training rows",
                self.seen.len()
            )));
        }
        for &i in &subset.indices {
            if !self.seen[i] {
                self.seen[i] = true;
                self.count += 1;
            }
        }
        self.per_step_counts.push(self.count);
        Ok(self.count)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ctx(losses: Vec<f64>, reps: Matrix, c: usize, seed: u64) -> SelectionContext {
        SelectionContext {
            per_sample_loss: losses,
            representations: reps,
            rng: RngState::new(seed),
            num_clusters: c,
        }
    }

    #[test]
    fn random_full_set() {
        assert_eq!(select_random(6, 6, &mut RngState::new(1)), (0..6).collect::<Vec<_>>());
        assert_eq!(select_random(6, 60, &mut RngState::new(1)), (0..6).collect::<Vec<_>>());
    }

    // Frozen from tests/oracle/splitmix_oracle.py
    #[test]
    fn random_matches_reference_triple() {
        assert_eq!(select_random(10, 3, &mut RngState::new(2024)), vec![1, 4, 6]);
    }

    #[test]
    fn top_loss_examples() {
        assert_eq!(select_top_loss(&[0.9, 0.1, 0.5, 0.7], 2), vec![0, 3]);
        assert_eq!(select_top_loss(&[1.0; 5], 3), vec![0, 1, 2]);
    }

    #[test]
    fn top_loss_dominates_full_sort() {
        let mut rng = RngState::new(31);
        let losses: Vec<f64> = (0..1000).map(|_| rng.uniform() * 5.0).collect();
        let sel = select_top_loss(&losses, 100);
        assert_eq!(sel.len(), 100);
        let mut sorted = losses.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let min_sel = sel.iter().map(|&i| losses[i]).fold(f64::INFINITY, f64::min);
        let max_unsel = (0..1000)
            .filter(|i| !sel.contains(i))
            .map(|i| losses[i])
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(min_sel >= max_unsel);
        assert_eq!(min_sel, sorted[99]);
    }

    #[test]
    fn kmeans_single_cluster_is_mean() {
        let pts = Matrix::from_rows(&[vec![0.0, 1.0], vec![2.0, 3.0], vec![4.0, 8.0]]).unwrap();
        let km = kmeans(&pts, 1, &mut RngState::new(0), 100).unwrap();
        assert_eq!(km.assignments, vec![0, 0, 0]);
        assert_eq!(km.centroids.row(0), &[2.0, 4.0]);
    }

    #[test]
    fn kmeans_too_few_points() {
        let pts = Matrix::zeros(2, 2);
        assert!(matches!(kmeans(&pts, 3, &mut RngState::new(0), 10), Err(Error::TooFewPoints { .. })));
    }

    #[test]
    fn kmeans_identical_points_terminates() {
        let pts = Matrix::from_vec(50, 3, vec![0.25; 150]).unwrap();
        let km = kmeans(&pts, 4, &mut RngState::new(5), 100).unwrap();
        assert!(km.assignments.iter().all(|&a| a == 0));
        assert!(km.objective_history.iter().all(|&o| o == 0.0));
    }

    #[test]
    fn cluster_quota_is_floor() {
        // M=10, C=3 -> m=3: three per cluster, then one global fill
        let losses: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let assign: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let sel = cluster_top_loss(&losses, &assign, 3, 10);
        assert_eq!(sel.per_cluster, vec![3, 3, 3]);
        assert_eq!(sel.filled, 1);
        // clusters give {21,24,27}, {22,25,28}, {23,26,29}; the fill takes 20
        assert_eq!(sel.selected, (20..30).collect::<Vec<_>>());
    }

    /// Enumerates every subset of each cluster of size `quota` to find the
    /// loss-maximizing one with lowest-index tie-break, then fills globally.
    fn brute_force(losses: &[f64], assign: &[usize], c: usize, m: usize) -> Vec<usize> {
        let n = losses.len();
        let quota = m / c;
        let mut chosen = vec![false; n];
        for k in 0..c {
            let members: Vec<usize> = (0..n).filter(|&i| assign[i] == k).collect();
            let take = quota.min(members.len());
            let mut best: Option<(f64, Vec<usize>)> = None;
            for mask in 0u32..(1 << members.len()) {
                if mask.count_ones() as usize != take {
                    continue;
                }
                let pick: Vec<usize> = (0..members.len()).filter(|b| mask >> b & 1 == 1).map(|b| members[b]).collect();
                let score: f64 = pick.iter().map(|&i| losses[i]).sum();
                let better = match &best {
                    None => true,
                    Some((s, p)) => score > *s || (score == *s && pick < *p),
                };
                if better {
                    best = Some((score, pick));
                }
            }
            for i in best.unwrap().1 {
                chosen[i] = true;
            }
        }
        let mut rest: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
        let have = chosen.iter().filter(|&&x| x).count();
        rest.sort_by(|&a, &b| losses[b].partial_cmp(&losses[a]).unwrap().then(a.cmp(&b)));
        for &i in rest.iter().take(m.min(n) - have) {
            chosen[i] = true;
        }
        (0..n).filter(|&i| chosen[i]).collect()
    }

    #[test]
    fn small_cluster_contributes_all_then_fill() {
        // cluster A = {0, 1} near the origin, cluster B = {2..10} far away
        let mut rows = vec![vec![0.0, 0.0], vec![0.1, 0.0]];
        for i in 0..8 {
            rows.push(vec![100.0 + i as f64 * 0.01, 100.0]);
        }
        let reps = Matrix::from_rows(&rows).unwrap();
        let losses = vec![0.1, 0.2, 0.9, 0.3, 0.8, 0.4, 0.7, 0.5, 0.6, 0.35];
        let context = ctx(losses.clone(), reps.clone(), 2, 3);
        let km = kmeans(&reps, 2, &mut RngState::new(3), 100).unwrap();
        let small = km.assignments[0];
        assert!(km.assignments[..2].iter().all(|&a| a == small));
        assert!(km.assignments[2..].iter().all(|&a| a != small));
        let detail = cluster_top_loss(&losses, &km.assignments, 2, 6);
        assert_eq!(detail.per_cluster[small], 2);
        assert_eq!(detail.per_cluster[1 - small], 3);
        assert_eq!(detail.filled, 1);
        let expect = brute_force(&losses, &km.assignments, 2, 6);
        assert_eq!(detail.selected, expect);
        // B's top three are 2, 4, 6; fill takes the next highest, 8
        assert_eq!(expect, vec![0, 1, 2, 4, 6, 8]);
        assert_eq!(select_cluster_top_loss(&context, 6).unwrap(), expect);
    }

    #[test]
    fn single_cluster_reduces_to_top_loss() {
        let mut rng = RngState::new(4);
        let losses: Vec<f64> = (0..200).map(|_| rng.uniform()).collect();
        let reps = Matrix::from_vec(200, 2, (0..400).map(|_| rng.uniform()).collect()).unwrap();
        let c = ctx(losses.clone(), reps, 1, 9);
        assert_eq!(select_cluster_top_loss(&c, 37).unwrap(), select_top_loss(&losses, 37));
    }

    #[test]
    fn cluster_rejects_m_below_c() {
        let c = ctx(vec![0.0; 10], Matrix::zeros(10, 2), 4, 0);
        assert!(select_cluster_top_loss(&c, 3).is_err());
    }

    #[test]
    fn tracker_union() {
        let mut t = UniqueTracker::new(10);
        t.track(&Subset { indices: vec![1, 2], step: 1 }).unwrap();
        t.track(&Subset { indices: vec![2, 3], step: 2 }).unwrap();
        t.track(&Subset { indices: vec![2, 3], step: 3 }).unwrap();
        assert_eq!(t.per_step_counts, vec![2, 3, 3]);
        assert!(t.track(&Subset { indices: vec![10], step: 4 }).is_err());
    }

    #[test]
    fn tracker_saturates_at_full_subsets() {
        let mut t = UniqueTracker::new(25);
        for step in 1..=50 {
            let s = Subset { indices: select_random(25, 25, &mut RngState::new(step)), step: step as usize };
            assert_eq!(t.track(&s).unwrap(), 25);
        }
    }

    #[test]
    fn zero_topology_context_is_uniform() {
        let topo = Topology::new(3, 4);
        let x = Matrix::from_vec(5, 3, (0..15).map(|i| i as f64).collect()).unwrap();
        let c = compute_context(&topo, &x, &[0, 1, 2, 3, 0], Representation::Probabilities, 4, RngState::new(0)).unwrap();
        assert!(c.per_sample_loss.iter().all(|l| (l - 4f64.ln()).abs() < 1e-12));
        assert!(c.representations.data().iter().all(|p| (p - 0.25).abs() < 1e-15));
    }

    proptest! {
        #[test]
        fn strategies_return_valid_subsets(n in 5usize..80, m in 3usize..100, seed in any::<u64>()) {
            let mut rng = RngState::new(seed);
            let losses: Vec<f64> = (0..n).map(|_| (rng.below(4) as f64) * 0.5).collect();
            let reps = Matrix::from_vec(n, 3, (0..n * 3).map(|_| rng.uniform()).collect()).unwrap();
            let c = ctx(losses.clone(), reps, 3, seed);
            for strategy in [super::Strategy::Random, super::Strategy::TopLoss, super::Strategy::ClusterTopLoss] {
                let s = select(strategy, &c, m, 1).unwrap();
                prop_assert_eq!(s.len(), m.min(n));
                prop_assert!(s.indices.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(s.indices.iter().all(|&i| i < n));
                prop_assert_eq!(&s, &select(strategy, &c, m, 1).unwrap());
            }
            // boundary ties resolve toward lower indices
            let top = select_top_loss(&losses, m);
            let min_sel = top.iter().map(|&i| losses[i]).fold(f64::INFINITY, f64::min);
            for i in 0..n {
                if !top.contains(&i) {
                    prop_assert!(losses[i] <= min_sel);
                    if losses[i] == min_sel {
                        prop_assert!(top.iter().filter(|&&j| losses[j] == min_sel).all(|&j| j < i));
                    }
                }
            }
        }

        #[test]
        fn cluster_cap_holds_before_fill(n in 10usize..60, c in 1usize..6, extra in 0usize..30, seed in any::<u64>()) {
            let mut rng = RngState::new(seed);
            let losses: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
            let assign: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
            let m = c + extra;
            let sel = cluster_top_loss(&losses, &assign, c, m);
            prop_assert!(sel.per_cluster.iter().all(|&k| k <= m / c));
            prop_assert_eq!(sel.selected.len(), m.min(n));
        }

        #[test]
        fn tracker_is_monotone_and_bounded(steps in proptest::collection::vec(proptest::collection::btree_set(0usize..40, 0..15), 1..20)) {
            let mut t = UniqueTracker::new(40);
            let mut prev = 0;
            for (k, s) in steps.into_iter().enumerate() {
                let now = t.track(&Subset { indices: s.into_iter().collect(), step: k }).unwrap();
                prop_assert!(now >= prev && now <= 40);
                prev = now;
            }
        }

        #[test]
        fn lloyd_objective_never_increases(seed in any::<u64>(), c in 1usize..6) {
            let mut rng = RngState::new(seed);
            let pts = Matrix::from_vec(60, 3, (0..180).map(|_| rng.uniform_range(-5.0, 5.0)).collect()).unwrap();
            let km = kmeans(&pts, c, &mut rng, 100).unwrap();
            prop_assert!(km.objective_history.windows(2).all(|w| w[1] <= w[0]));
        }
    }
}
