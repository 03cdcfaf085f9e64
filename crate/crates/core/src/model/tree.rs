//! CART regression trees with variance-reduction splits.
//!
//! Samples are kept as per-feature sorted orderings that are stably
//! partitioned at every split, so each node scans its candidate features in
//! sorted order without re-sorting. A sample set may contain repeated rows
//! (bootstrap draws).

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Best threshold among all midpoints of each candidate feature.
    Exact,
    /// One uniform threshold per candidate feature; the best of those wins.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeParams {
    pub mode: SplitMode,
    /// `None` grows until leaves are pure or too small to split.
    pub max_depth: Option<usize>,
    /// Number of non-constant features examined per split.
    pub max_features: usize,
    pub min_samples_leaf: usize,
}

impl TreeParams {
    pub fn exact(n_features: usize) -> Self {
        Self { mode: SplitMode::Exact, max_depth: None, max_features: n_features, min_samples_leaf: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf {
        value: f64,
    },
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
        /// Reduction in the sum of squared errors achieved by this split.
        improvement: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub nodes: Vec<Node>,
    pub n_features: usize,
    /// Training samples at the root (with multiplicity).
    pub n_samples: usize,
}

impl DecisionTree {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut i = 0usize;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value } => return *value,
                Node::Split { feature, threshold, left, right, .. } => {
                    i = if row[*feature as usize] <= *threshold { *left } else { *right } as usize;
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left as usize).max(walk(nodes, *right as usize)),
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    /// Adds each split's improvement divided by the root sample count to
    /// `acc[feature]`.
    pub fn accumulate_importance(&self, acc: &mut [f64]) {
        let n = self.n_samples.max(1) as f64;
        for node in &self.nodes {
            if let Node::Split { feature, improvement, .. } = node {
                acc[*feature as usize] += improvement / n;
            }
        }
    }
}

/// Per-feature sort orders of a sample set, reusable across fits on the same
/// rows (gradient-boosting stages, unbootstrapped forests).
#[derive(Debug, Clone)]
pub struct Presorted {
    rows: Vec<usize>,
    /// `order[f]` lists sample slots sorted by feature `f`, ties by slot.
    order: Vec<Vec<u32>>,
}

impl Presorted {
    pub fn new(x: &Matrix, rows: &[usize]) -> Self {
        let order = (0..x.n_cols())
            .map(|f| {
                let mut slots: Vec<u32> = (0..rows.len() as u32).collect();
                slots.sort_by(|&a, &b| {
                    x.get(rows[a as usize], f).total_cmp(&x.get(rows[b as usize], f)).then(a.cmp(&b))
                });
                slots
            })
            .collect();
        Self { rows: rows.to_vec(), order }
    }

    pub fn n_samples(&self) -> usize {
        self.rows.len()
    }
}

struct Builder<'a, R> {
    x: &'a Matrix,
    params: &'a TreeParams,
    rng: &'a mut R,
    rows: Vec<usize>,
    /// Target per slot.
    ys: Vec<f64>,
    order: Vec<Vec<u32>>,
    goes_left: Vec<bool>,
    scratch: Vec<u32>,
    features: Vec<usize>,
    nodes: Vec<Node>,
}

struct Candidate {
    feature: usize,
    threshold: f64,
    n_left: usize,
    gain: f64,
}

impl<R: Rng> Builder<'_, R> {
    #[inline]
    fn value(&self, feature: usize, slot: u32) -> f64 {
        self.x.get(self.rows[slot as usize], feature)
    }

    fn build(&mut self, start: usize, end: usize, depth: usize) -> u32 {
        let id = self.nodes.len() as u32;
        self.nodes.push(Node::Leaf { value: 0.0 });

        let n = end - start;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &s in &self.order[0][start..end] {
            let y = self.ys[s as usize];
            sum += y;
            sum_sq += y * y;
            lo = lo.min(y);
            hi = hi.max(y);
        }
        let mean = sum / n as f64;

        let can_split =
            self.params.max_depth.is_none_or(|d| depth < d) && n >= 2 * self.params.min_samples_leaf && lo < hi;
        let best = if can_split { self.best_split(start, end, sum, sum_sq) } else { None };
        let Some(best) = best else {
            self.nodes[id as usize] = Node::Leaf { value: mean };
            return id;
        };

        let sorted = &self.order[best.feature][start..end];
        for (k, &s) in sorted.iter().enumerate() {
            self.goes_left[s as usize] = k < best.n_left;
        }
        for f in 0..self.order.len() {
            let seg = &mut self.order[f][start..end];
            self.scratch.clear();
            let mut w = 0;
            for k in 0..seg.len() {
                let s = seg[k];
                if self.goes_left[s as usize] {
                    seg[w] = s;
                    w += 1;
                } else {
                    self.scratch.push(s);
                }
            }
            seg[w..].copy_from_slice(&self.scratch);
        }

        let mid = start + best.n_left;
        let left = self.build(start, mid, depth + 1);
        let right = self.build(mid, end, depth + 1);
        self.nodes[id as usize] = Node::Split {
            feature: best.feature as u32,
            threshold: best.threshold,
            left,
            right,
            improvement: best.gain.max(0.0),
        };
        id
    }

    /// Draws candidate features in random order until `max_features`
    /// non-constant ones are found, then evaluates them in index order.
    fn candidate_features(&mut self, start: usize, end: usize) -> Vec<usize> {
        self.features.shuffle(&mut *self.rng);
        let mut picked = Vec::with_capacity(self.params.max_features);
        for &f in &self.features {
            if picked.len() == self.params.max_features {
                break;
            }
            let first = self.value(f, self.order[f][start]);
            let last = self.value(f, self.order[f][end - 1]);
            if first < last {
                picked.push(f);
            }
        }
        picked.sort_unstable();
        picked
    }

    fn best_split(&mut self, start: usize, end: usize, sum: f64, sum_sq: f64) -> Option<Candidate> {
        let n = end - start;
        let min_leaf = self.params.min_samples_leaf;
        let parent = sum * sum / n as f64;
        let tol = 1e-11 * sum_sq.max(f64::MIN_POSITIVE);
        let mut best: Option<Candidate> = None;
        let consider = |c: Candidate, best: &mut Option<Candidate>| {
            if best.as_ref().is_none_or(|b| c.gain > b.gain + tol) {
                *best = Some(c);
            }
        };

        for f in self.candidate_features(start, end) {
            let seg = &self.order[f][start..end];
            match self.params.mode {
                SplitMode::Exact => {
                    let mut left_sum = 0.0;
                    for k in 0..n - 1 {
                        left_sum += self.ys[seg[k] as usize];
                        let n_left = k + 1;
                        if n_left < min_leaf || n - n_left < min_leaf {
                            continue;
                        }
                        let a = self.value(f, seg[k]);
                        let b = self.value(f, seg[k + 1]);
                        if !(a < b) {
                            continue;
                        }
                        let right_sum = sum - left_sum;
                        let gain =
                            left_sum * left_sum / n_left as f64 + right_sum * right_sum / (n - n_left) as f64 - parent;
                        consider(Candidate { feature: f, threshold: midpoint(a, b), n_left, gain }, &mut best);
                    }
                }
                SplitMode::Random => {
                    let lo = self.value(f, seg[0]);
                    let hi = self.value(f, seg[n - 1]);
                    let threshold = self.rng.gen_range(lo..hi);
                    let mut left_sum = 0.0;
                    let mut n_left = 0;
                    for &s in seg {
                        if self.value(f, s) > threshold {
                            break;
                        }
                        left_sum += self.ys[s as usize];
                        n_left += 1;
                    }
                    if n_left < min_leaf || n - n_left < min_leaf {
                        continue;
                    }
                    let right_sum = sum - left_sum;
                    let gain =
                        left_sum * left_sum / n_left as f64 + right_sum * right_sum / (n - n_left) as f64 - parent;
                    consider(Candidate { feature: f, threshold, n_left, gain }, &mut best);
                }
            }
        }
        best
    }
}

/// Midpoint of two consecutive distinct values, kept strictly below `b`.
pub fn midpoint(a: f64, b: f64) -> f64 {
    let m = a + (b - a) / 2.0;
    if m < b {
        m
    } else {
        a
    }
}

/// Fits a tree on every row of `x`.
pub fn fit_tree<R: Rng>(x: &Matrix, y: &[f64], params: &TreeParams, rng: &mut R) -> Result<DecisionTree> {
    let rows: Vec<usize> = (0..x.n_rows()).collect();
    fit_tree_on(x, y, &rows, params, rng)
}

/// Fits a tree on the given rows (repeats allowed).
pub fn fit_tree_on<R: Rng>(
    x: &Matrix,
    y: &[f64],
    rows: &[usize],
    params: &TreeParams,
    rng: &mut R,
) -> Result<DecisionTree> {
    if x.n_rows() != y.len() {
        return Err(Error::Argument(format!("X has {} rows but y has {} values", x.n_rows(), y.len())));
    }
    if rows.is_empty() {
        return Err(Error::Argument("cannot fit a tree on zero samples".into()));
    }
    fit_tree_presorted(x, y, Presorted::new(x, rows), params, rng)
}

/// Fits a tree on a presorted sample set (consumed; clone it to reuse).
pub fn fit_tree_presorted<R: Rng>(
    x: &Matrix,
    y: &[f64],
    presorted: Presorted,
    params: &TreeParams,
    rng: &mut R,
) -> Result<DecisionTree> {
    if presorted.rows.is_empty() {
        return Err(Error::Argument("cannot fit a tree on zero samples".into()));
    }
    if params.min_samples_leaf == 0 {
        return Err(Error::Argument("min_samples_leaf must be at least 1".into()));
    }
    let n_features = x.n_cols();
    let n_samples = presorted.rows.len();
    let ys: Vec<f64> = presorted.rows.iter().map(|&r| y[r]).collect();
    if n_features == 0 {
        let mean = ys.iter().sum::<f64>() / n_samples as f64;
        return Ok(DecisionTree { nodes: vec![Node::Leaf { value: mean }], n_features, n_samples });
    }
    let mut builder = Builder {
        x,
        params,
        rng,
        rows: presorted.rows,
        ys,
        order: presorted.order,
        goes_left: vec![false; n_samples],
        scratch: Vec::with_capacity(n_samples),
        features: (0..n_features).collect(),
        nodes: Vec::new(),
    };
    builder.build(0, n_samples, 0);
    Ok(DecisionTree { nodes: builder.nodes, n_features, n_samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn column(xs: &[f64]) -> Matrix {
        Matrix::new(xs.len(), 1, xs.to_vec()).unwrap()
    }

    #[test]
    fn single_step_fit() {
        let x = column(&[0.0, 1.0, 2.0, 3.0]);
        let y = [0.0, 0.0, 10.0, 10.0];
        let params = TreeParams { max_depth: Some(1), ..TreeParams::exact(1) };
        let tree = fit_tree(&x, &y, &params, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        match &tree.nodes[0] {
            Node::Split { feature, threshold, improvement, .. } => {
                assert_eq!(*feature, 0);
                assert!(*threshold > 1.0 && *threshold <= 2.0);
                assert_eq!(*threshold, 1.5);
                assert_eq!(*improvement, 100.0);
            }
            other => panic!("expected split, got {other:?}"),
        }
        let preds: Vec<f64> = x.rows().map(|r| tree.predict_row(r)).collect();
        assert_eq!(preds, y);
    }

    #[test]
    fn constant_target_is_one_leaf() {
        let x = column(&[0.0, 1.0, 2.0]);
        let tree = fit_tree(&x, &[4.0; 3], &TreeParams::exact(1), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(tree.nodes, vec![Node::Leaf { value: 4.0 }]);
    }

    #[test]
    fn single_sample_is_leaf() {
        let x = column(&[3.0]);
        let tree = fit_tree(&x, &[7.5], &TreeParams::exact(1), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(tree.nodes, vec![Node::Leaf { value: 7.5 }]);
    }

    #[test]
    fn empty_data_is_error() {
        let x = Matrix::empty(2);
        assert!(fit_tree(&x, &[], &TreeParams::exact(2), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn min_samples_leaf_respected() {
        let x = column(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let y = [0.0, 9.0, 1.0, 8.0, 2.0, 7.0];
        let params = TreeParams { min_samples_leaf: 2, ..TreeParams::exact(1) };
        let tree = fit_tree(&x, &y, &params, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        // every leaf holds at least two training rows
        let mut counts = std::collections::HashMap::new();
        for r in x.rows() {
            *counts.entry(tree.predict_row(r).to_bits()).or_insert(0) += 1;
        }
        assert!(counts.values().all(|&c| c >= 2), "{counts:?}");
    }

    #[test]
    fn random_split_partitions_strictly() {
        let x = Matrix::new(6, 2, vec![0.0, 5.0, 1.0, 4.0, 2.0, 3.0, 3.0, 2.0, 4.0, 1.0, 5.0, 0.0]).unwrap();
        let y = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let params = TreeParams { mode: SplitMode::Random, ..TreeParams::exact(2) };
        let tree = fit_tree(&x, &y, &params, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        // fully grown on distinct rows: reproduces the training targets
        let preds: Vec<f64> = x.rows().map(|r| tree.predict_row(r)).collect();
        assert_eq!(preds, y);
    }

    #[test]
    fn midpoint_stays_below_upper() {
        let a = 1.0f64;
        let b = f64::from_bits(a.to_bits() + 1);
        assert!(midpoint(a, b) < b);
        assert_eq!(midpoint(1.0, 2.0), 1.5);
    }
}
