use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::{fit_tree_presorted, DecisionTree, Presorted, SplitMode, TreeParams};
use super::Matrix;
use crate::error::{Error, Result};
use crate::ingest::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Learner {
    /// Random forest: bootstrap rows, exact splits.
    Rf,
    /// Extremely randomized trees: all rows, random thresholds.
    Et,
    /// Gradient boosting on squared error.
    Gb,
}

impl Learner {
    pub const ALL: [Learner; 3] = [Learner::Rf, Learner::Et, Learner::Gb];

    pub fn as_str(self) -> &'static str {
        match self {
            Learner::Rf => "rf",
            Learner::Et => "et",
            Learner::Gb => "gb",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Learner::Rf => "Random Forest",
            Learner::Et => "Extra-Trees",
            Learner::Gb => "Gradient Boosting",
        }
    }
}

impl fmt::Display for Learner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Learner {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|l| l.as_str() == s).ok_or_else(|| Error::Argument(format!("unknown learner `{s}`")))
    }
}

/// Candidate features examined per split, as a share of all features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaxFeatures {
    Third,
    Half,
    All,
}

impl MaxFeatures {
    pub const ALL: [MaxFeatures; 3] = [MaxFeatures::Third, MaxFeatures::Half, MaxFeatures::All];

    /// Number of candidates for `p` features, at least one.
    pub fn count(self, p: usize) -> usize {
        let k = match self {
            MaxFeatures::Third => p / 3,
            MaxFeatures::Half => p / 2,
            MaxFeatures::All => p,
        };
        k.max(1).min(p.max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperParams {
    pub learner: Learner,
    pub n_trees: usize,
    /// rf/et only; boosting always examines every feature.
    pub max_features: MaxFeatures,
    /// gb only; rf/et trees are grown without a depth cap.
    pub gb_max_depth: usize,
    pub gb_learning_rate: f64,
    pub min_samples_leaf: usize,
    pub seed: u64,
    /// rf only. Disabling it makes every tree see the full training set.
    #[serde(default = "default_true")]
    pub bootstrap: bool,
}

fn default_true() -> bool {
    true
}

impl HyperParams {
    pub fn new(learner: Learner) -> Self {
        Self {
            learner,
            n_trees: if learner == Learner::Gb { 100 } else { 50 },
            max_features: MaxFeatures::All,
            gb_max_depth: 3,
            gb_learning_rate: 0.1,
            min_samples_leaf: 1,
            seed: 0,
            bootstrap: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::Argument("n_trees must be positive".into()));
        }
        if self.min_samples_leaf == 0 {
            return Err(Error::Argument("min_samples_leaf must be at least 1".into()));
        }
        if self.learner == Learner::Gb {
            if !(1..=4).contains(&self.gb_max_depth) {
                return Err(Error::Argument(format!("gb_max_depth {} outside 1..=4", self.gb_max_depth)));
            }
            if !(0.0..=1.0).contains(&self.gb_learning_rate) {
                return Err(Error::Argument(format!("learning rate {} outside [0, 1]", self.gb_learning_rate)));
            }
        }
        Ok(())
    }
}

/// Independent RNG stream for tree (or stage) `index`.
pub fn tree_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// A trained ensemble. Forest predictions are the mean of the trees;
/// boosted predictions are `init` plus the learning-rate-scaled stage outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleModel {
    pub format_version: u32,
    pub params: HyperParams,
    pub n_features: usize,
    pub feature_names: Vec<String>,
    /// Boosting's initial constant (training mean); 0 for forests.
    pub init: f64,
    pub trees: Vec<DecisionTree>,
    /// Hash of the training configuration (params plus feature names).
    pub config_hash: String,
}

fn check_training_data(x: &Matrix, y: &[f64], params: &HyperParams) -> Result<()> {
    params.validate()?;
    if x.n_rows() == 0 {
        return Err(Error::Argument("no training rows".into()));
    }
    if x.n_rows() != y.len() {
        return Err(Error::Argument(format!("X has {} rows but y has {} values", x.n_rows(), y.len())));
    }
    if !x.all_finite() || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("training data contains non-finite values".into()));
    }
    Ok(())
}

fn config_hash(params: &HyperParams, names: &[String]) -> String {
    let bytes = serde_json::to_vec(&(params, names)).expect("params serialize");
    sha256_hex(&bytes)
}

fn forest(x: &Matrix, y: &[f64], params: &HyperParams, names: Vec<String>) -> Result<EnsembleModel> {
    check_training_data(x, y, params)?;
    let n = x.n_rows();
    let (mode, bootstrap) = match params.learner {
        Learner::Rf => (SplitMode::Exact, params.bootstrap),
        Learner::Et => (SplitMode::Random, false),
        Learner::Gb => return Err(Error::Argument("forest fit called with gb params".into())),
    };
    let tree_params = TreeParams {
        mode,
        max_depth: None,
        max_features: params.max_features.count(x.n_cols()),
        min_samples_leaf: params.min_samples_leaf,
    };
    let all_rows: Vec<usize> = (0..n).collect();
    let shared = (!bootstrap).then(|| Presorted::new(x, &all_rows));
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|i| {
            let mut rng = tree_rng(params.seed, i);
            let presorted = match &shared {
                Some(p) => p.clone(),
                None => {
                    let rows: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
                    Presorted::new(x, &rows)
                }
            };
            fit_tree_presorted(x, y, presorted, &tree_params, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EnsembleModel {
        format_version: MODEL_FORMAT_VERSION,
        params: *params,
        n_features: x.n_cols(),
        config_hash: config_hash(params, &names),
        feature_names: names,
        init: 0.0,
        trees,
    })
}

fn default_names(p: usize) -> Vec<String> {
    (0..p).map(|j| format!("x{j}")).collect()
}

pub fn fit_random_forest(x: &Matrix, y: &[f64], params: &HyperParams) -> Result<EnsembleModel> {
    let params = HyperParams { learner: Learner::Rf, ..*params };
    forest(x, y, &params, default_names(x.n_cols()))
}

pub fn fit_extra_trees(x: &Matrix, y: &[f64], params: &HyperParams) -> Result<EnsembleModel> {
    let params = HyperParams { learner: Learner::Et, ..*params };
    forest(x, y, &params, default_names(x.n_cols()))
}

/// Stagewise least-squares boosting: each stage fits a depth-limited exact
/// tree to the current residuals.
pub fn fit_gradient_boosting(x: &Matrix, y: &[f64], params: &HyperParams) -> Result<EnsembleModel> {
    let params = HyperParams { learner: Learner::Gb, ..*params };
    boosting(x, y, &params, default_names(x.n_cols()))
}

fn boosting(x: &Matrix, y: &[f64], params: &HyperParams, names: Vec<String>) -> Result<EnsembleModel> {
    check_training_data(x, y, params)?;
    let n = x.n_rows();
    let init = y.iter().sum::<f64>() / n as f64;
    let tree_params = TreeParams {
        mode: SplitMode::Exact,
        max_depth: Some(params.gb_max_depth),
        max_features: x.n_cols(),
        min_samples_leaf: params.min_samples_leaf,
    };
    let all_rows: Vec<usize> = (0..n).collect();
    let presorted = Presorted::new(x, &all_rows);
    let lr = params.gb_learning_rate;
    let mut current = vec![init; n];
    let mut residuals = vec![0.0; n];
    let mut trees = Vec::with_capacity(params.n_trees);
    for stage in 0..params.n_trees {
        for i in 0..n {
            residuals[i] = y[i] - current[i];
        }
        let mut rng = tree_rng(params.seed, stage);
        let tree = fit_tree_presorted(x, &residuals, presorted.clone(), &tree_params, &mut rng)?;
        for (i, f) in current.iter_mut().enumerate() {
            *f += lr * tree.predict_row(x.row(i));
        }
        trees.push(tree);
    }
    Ok(EnsembleModel {
        format_version: MODEL_FORMAT_VERSION,
        params: *params,
        n_features: x.n_cols(),
        config_hash: config_hash(params, &names),
        feature_names: names,
        init,
        trees,
    })
}

/// Fits whichever learner `params` names, recording `feature_names`.
pub fn fit(x: &Matrix, y: &[f64], params: &HyperParams, feature_names: Vec<String>) -> Result<EnsembleModel> {
    if feature_names.len() != x.n_cols() {
        return Err(Error::Argument(format!("{} feature names for {} columns", feature_names.len(), x.n_cols())));
    }
    match params.learner {
        Learner::Rf | Learner::Et => forest(x, y, params, feature_names),
        Learner::Gb => boosting(x, y, params, feature_names),
    }
}

impl EnsembleModel {
    pub fn learner(&self) -> Learner {
        self.params.learner
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.n_rows() > 0 && x.n_cols() != self.n_features {
            return Err(Error::Argument(format!("model expects {} features, got {}", self.n_features, x.n_cols())));
        }
        Ok(())
    }

    /// Prediction using only the first `n_trees` trees (stages).
    pub fn predict_row_prefix(&self, row: &[f64], n_trees: usize) -> f64 {
        let trees = &self.trees[..n_trees.min(self.trees.len())];
        match self.params.learner {
            Learner::Gb => {
                let lr = self.params.gb_learning_rate;
                trees.iter().fold(self.init, |f, t| f + lr * t.predict_row(row))
            }
            Learner::Rf | Learner::Et => trees.iter().map(|t| t.predict_row(row)).sum::<f64>() / trees.len() as f64,
        }
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.predict_row_prefix(row, self.trees.len())
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok((0..x.n_rows()).into_par_iter().map(|i| self.predict_row(x.row(i))).collect())
    }

    /// Predictions of each tree-count prefix in `stages`, one vector per stage.
    /// Equal to the predictions of a model trained with that many trees.
    pub fn predict_staged(&self, x: &Matrix, stages: &[usize]) -> Result<Vec<Vec<f64>>> {
        self.check_input(x)?;
        if let Some(&s) = stages.iter().find(|&&s| s == 0 || s > self.trees.len()) {
            return Err(Error::Argument(format!("stage {s} outside 1..={}", self.trees.len())));
        }
        let per_row: Vec<Vec<f64>> = (0..x.n_rows())
            .into_par_iter()
            .map(|i| stages.iter().map(|&s| self.predict_row_prefix(x.row(i), s)).collect())
            .collect();
        Ok((0..stages.len()).map(|k| per_row.iter().map(|r| r[k]).collect()).collect())
    }

    /// SHA-256 of the serialized model.
    pub fn content_hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("model serializes"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(self)?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let model: Self = serde_json::from_slice(&bytes)?;
        if model.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Argument(format!("unsupported model format {}", model.format_version)));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::super::tree::fit_tree;
    use super::*;

    fn fixture(seed: u64, n: usize, p: usize) -> (Matrix, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n * p).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Matrix::new(n, p, data).unwrap();
        let y = (0..n).map(|i| 2.0 * x.get(i, 0) - x.get(i, 1 % p) + rng.gen_range(-0.1..0.1)).collect();
        (x, y)
    }

    fn mse(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
    }

    #[test]
    fn one_tree_forest_without_bootstrap_is_fit_tree() {
        let (x, y) = fixture(1, 40, 3);
        let params = HyperParams { n_trees: 1, bootstrap: false, seed: 9, ..HyperParams::new(Learner::Rf) };
        let model = fit_random_forest(&x, &y, &params).unwrap();
        let tree = fit_tree(&x, &y, &TreeParams::exact(3), &mut tree_rng(9, 0)).unwrap();
        assert_eq!(model.trees[0], tree);
    }

    #[test]
    fn forest_prediction_is_tree_mean() {
        let (x, y) = fixture(2, 60, 4);
        for learner in [Learner::Rf, Learner::Et] {
            let params = HyperParams { n_trees: 7, max_features: MaxFeatures::Half, ..HyperParams::new(learner) };
            let model = fit(&x, &y, &params, default_names(4)).unwrap();
            let preds = model.predict(&x).unwrap();
            for (i, p) in preds.iter().enumerate() {
                let mean = model.trees.iter().map(|t| t.predict_row(x.row(i))).sum::<f64>() / 7.0;
                assert_eq!(*p, mean);
            }
        }
    }

    #[test]
    fn same_seed_same_model() {
        let (x, y) = fixture(3, 50, 3);
        for learner in Learner::ALL {
            let params = HyperParams { n_trees: 10, seed: 42, ..HyperParams::new(learner) };
            let a = fit(&x, &y, &params, default_names(3)).unwrap();
            let b = fit(&x, &y, &params, default_names(3)).unwrap();
            assert_eq!(a.content_hash(), b.content_hash());
            let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
            let c = one.install(|| fit(&x, &y, &params, default_names(3)).unwrap());
            assert_eq!(a, c);
        }
    }

    #[test]
    fn unbootstrapped_full_forest_interpolates() {
        let (x, y) = fixture(4, 30, 3);
        let params = HyperParams { n_trees: 5, bootstrap: false, ..HyperParams::new(Learner::Rf) };
        let model = fit_random_forest(&x, &y, &params).unwrap();
        for (p, t) in model.predict(&x).unwrap().iter().zip(&y) {
            assert!((p - t).abs() < 1e-12);
        }
    }

    #[test]
    fn boosting_one_stage_by_hand() {
        let x = Matrix::new(4, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = [0.0, 0.0, 10.0, 10.0];
        let params =
            HyperParams { n_trees: 1, gb_learning_rate: 1.0, gb_max_depth: 1, ..HyperParams::new(Learner::Gb) };
        let model = fit_gradient_boosting(&x, &y, &params).unwrap();
        assert_eq!(model.init, 5.0);
        assert_eq!(model.predict(&x).unwrap(), y);
    }

    #[test]
    fn zero_learning_rate_predicts_mean() {
        let (x, y) = fixture(5, 25, 2);
        let params = HyperParams { n_trees: 5, gb_learning_rate: 0.0, ..HyperParams::new(Learner::Gb) };
        let model = fit_gradient_boosting(&x, &y, &params).unwrap();
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        assert!(model.predict(&x).unwrap().iter().all(|&p| p == mean));
    }

    #[test]
    fn boosting_training_error_never_increases() {
        for seed in 0..5 {
            let (x, y) = fixture(seed, 40, 3);
            for lr in [0.01, 0.1, 1.0] {
                let params = HyperParams { n_trees: 30, gb_learning_rate: lr, ..HyperParams::new(Learner::Gb) };
                let model = fit_gradient_boosting(&x, &y, &params).unwrap();
                let stages: Vec<usize> = (1..=30).collect();
                let staged = model.predict_staged(&x, &stages).unwrap();
                let mut prev = mse(&vec![model.init; y.len()], &y);
                for preds in staged {
                    let cur = mse(&preds, &y);
                    assert!(cur <= prev, "seed {seed} lr {lr}: {cur} > {prev}");
                    prev = cur;
                }
            }
        }
    }

    #[test]
    fn staged_prefix_equals_smaller_model() {
        let (x, y) = fixture(6, 50, 3);
        for learner in Learner::ALL {
            let big = fit(&x, &y, &HyperParams { n_trees: 20, seed: 5, ..HyperParams::new(learner) }, default_names(3))
                .unwrap();
            let small =
                fit(&x, &y, &HyperParams { n_trees: 8, seed: 5, ..HyperParams::new(learner) }, default_names(3))
                    .unwrap();
            let staged = big.predict_staged(&x, &[8]).unwrap();
            assert_eq!(staged[0], small.predict(&x).unwrap(), "{learner}");
        }
    }

    #[test]
    fn predict_input_checks() {
        let (x, y) = fixture(7, 20, 3);
        let model = fit_random_forest(&x, &y, &HyperParams { n_trees: 3, ..HyperParams::new(Learner::Rf) }).unwrap();
        assert!(model.predict(&Matrix::empty(3)).unwrap().is_empty());
        let wrong = Matrix::new(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(model.predict(&wrong).is_err());
    }

    #[test]
    fn serialization_round_trip() {
        let (x, y) = fixture(8, 30, 3);
        let model =
            fit_gradient_boosting(&x, &y, &HyperParams { n_trees: 10, ..HyperParams::new(Learner::Gb) }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        model.save(&path).unwrap();
        let back = EnsembleModel::load(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.predict(&x).unwrap(), model.predict(&x).unwrap());
    }

    #[test]
    fn max_features_counts() {
        assert_eq!(MaxFeatures::Third.count(85), 28);
        assert_eq!(MaxFeatures::Half.count(85), 42);
        assert_eq!(MaxFeatures::All.count(85), 85);
        assert_eq!(MaxFeatures::Third.count(2), 1);
    }
}
