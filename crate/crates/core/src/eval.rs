//! Experiment harness: target transform, metrics, nested geographic
//! cross-validation, temporal holdout, bootstrap importance and residual layers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use geojson::JsonObject;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{build_matrix, FeatureConfig, FeatureMatrix, Subset};
use crate::ingest::{quantile_sorted, tract_feature, write_feature_collection, IncidentType, RegionDataset};
use crate::model::{fit, tree_rng, EnsembleModel, HyperParams, ImportanceVector, Learner, Matrix, MaxFeatures};

/// Raw per-tract counts and their log1p transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetVector {
    pub incident: IncidentType,
    pub year: i32,
    pub raw: Vec<u64>,
    pub y: Vec<f64>,
}

pub fn transform_count(count: u64) -> f64 {
    (count as f64).ln_1p()
}

/// Inverse of [`transform_count`], rounded to the nearest count and floored at 0.
pub fn inverse_transform(y: f64) -> u64 {
    y.exp_m1().round().max(0.0) as u64
}

pub fn transform_target(counts: &[u64], incident: IncidentType, year: i32) -> TargetVector {
    TargetVector { incident, year, raw: counts.to_vec(), y: counts.iter().map(|&c| transform_count(c)).collect() }
}

fn check_pair(y: &[f64], y_hat: &[f64]) -> Result<()> {
    if y.len() != y_hat.len() {
        return Err(Error::Metric(format!("{} targets but {} predictions", y.len(), y_hat.len())));
    }
    if y.is_empty() {
        return Err(Error::Metric("empty target vector".into()));
    }
    Ok(())
}

pub fn mse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64)
}

/// Coefficient of determination. Constant `y` has no variance to explain and
/// is reported as a metric error.
pub fn r2(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat)?;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
    if ss_tot == 0.0 {
        log::warn!("r2 undefined for a constant target");
        return Err(Error::Metric("r2 undefined: target has zero variance".into()));
    }
    let ss_res: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Seeded random partition of `0..n` into `k` folds of near-equal size. Each
/// fold is returned sorted.
pub fn kfold(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Argument(format!("need at least 2 folds, got {k}")));
    }
    if n < k {
        return Err(Error::Argument(format!("{n} tracts cannot fill {k} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut tree_rng(seed, 0));
    let mut folds = vec![Vec::new(); k];
    for (pos, i) in idx.into_iter().enumerate() {
        folds[pos % k].push(i);
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(folds)
}

fn complement(n: usize, fold: &[usize]) -> Vec<usize> {
    let mut mask = vec![true; n];
    fold.iter().for_each(|&i| mask[i] = false);
    (0..n).filter(|&i| mask[i]).collect()
}

/// Outer test folds over all tracts and, per outer fold, inner test folds over
/// that fold's training tracts (as tract indices).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub n: usize,
    pub seed: u64,
    pub outer: Vec<Vec<usize>>,
    pub inner: Vec<Vec<Vec<usize>>>,
}

impl SplitPlan {
    pub fn new(n: usize, outer_k: usize, inner_k: usize, seed: u64) -> Result<Self> {
        let outer = kfold(n, outer_k, seed)?;
        let inner = outer
            .iter()
            .enumerate()
            .map(|(o, test)| {
                let train = complement(n, test);
                let folds = kfold(train.len(), inner_k, seed.wrapping_add(1 + o as u64))?;
                Ok(folds.into_iter().map(|f| f.into_iter().map(|i| train[i]).collect()).collect())
            })
            .collect::<Result<_>>()?;
        Ok(Self { n, seed, outer, inner })
    }

    pub fn outer_train(&self, o: usize) -> Vec<usize> {
        complement(self.n, &self.outer[o])
    }
}

/// Hyperparameter grid for one learner. Fields unused by the learner are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamGrid {
    pub learner: Learner,
    pub n_trees: Vec<usize>,
    #[serde(default)]
    pub max_features: Vec<MaxFeatures>,
    #[serde(default)]
    pub max_depth: Vec<usize>,
    #[serde(default)]
    pub learning_rate: Vec<f64>,
}

impl ParamGrid {
    pub fn default_for(learner: Learner) -> Self {
        match learner {
            Learner::Rf | Learner::Et => Self {
                learner,
                n_trees: vec![50, 100, 200, 400],
                max_features: MaxFeatures::ALL.to_vec(),
                max_depth: Vec::new(),
                learning_rate: Vec::new(),
            },
            Learner::Gb => Self {
                learner,
                n_trees: vec![100, 200, 400],
                max_features: Vec::new(),
                max_depth: vec![1, 2, 3, 4],
                learning_rate: vec![0.01, 0.05, 0.1, 0.2],
            },
        }
    }

    /// Single-cell grid.
    pub fn fixed(params: &HyperParams) -> Self {
        Self {
            learner: params.learner,
            n_trees: vec![params.n_trees],
            max_features: vec![params.max_features],
            max_depth: vec![params.gb_max_depth],
            learning_rate: vec![params.gb_learning_rate],
        }
    }

    /// Base configurations (all but `n_trees`) in grid order, with the
    /// learner-irrelevant knobs pinned to their defaults.
    fn families(&self, base: &HyperParams) -> Vec<HyperParams> {
        let mut out = Vec::new();
        match self.learner {
            Learner::Rf | Learner::Et => {
                for &mf in &self.max_features {
                    out.push(HyperParams { learner: self.learner, max_features: mf, ..*base });
                }
            }
            Learner::Gb => {
                for &d in &self.max_depth {
                    for &lr in &self.learning_rate {
                        out.push(HyperParams {
                            learner: self.learner,
                            gb_max_depth: d,
                            gb_learning_rate: lr,
                            max_features: MaxFeatures::All,
                            ..*base
                        });
                    }
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let mut trees = self.n_trees.clone();
        trees.sort_unstable();
        trees.dedup();
        if trees.len() != self.n_trees.len() || trees.is_empty() {
            return Err(Error::Argument("n_trees grid must be non-empty and distinct".into()));
        }
        let empty = match self.learner {
            Learner::Rf | Learner::Et => self.max_features.is_empty(),
            Learner::Gb => self.max_depth.is_empty() || self.learning_rate.is_empty(),
        };
        if empty {
            return Err(Error::Argument(format!("grid for {} is missing values", self.learner)));
        }
        for p in self.families(&HyperParams::new(self.learner)) {
            for &n in &self.n_trees {
                HyperParams { n_trees: n, ..p }.validate()?;
            }
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.n_trees.len() * self.families(&HyperParams::new(self.learner)).len()
    }
}

/// Deterministic preference among equal-scoring cells: fewer trees, lower
/// learning rate, fewer candidate features, shallower boosting trees.
fn prefer(a: &HyperParams, b: &HyperParams) -> std::cmp::Ordering {
    a.n_trees
        .cmp(&b.n_trees)
        .then(a.gb_learning_rate.total_cmp(&b.gb_learning_rate))
        .then(a.max_features.cmp(&b.max_features))
        .then(a.gb_max_depth.cmp(&b.gb_max_depth))
}

/// Result of a grid search: the chosen cell and its mean validation MSE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub params: HyperParams,
    pub validation_mse: f64,
}

/// Grid search over `rows` with the given validation folds (subsets of
/// `rows`). Each family is fitted once at the largest tree count; smaller
/// counts are read off as prefixes of the ensemble.
pub fn grid_search(
    x: &Matrix,
    y: &[f64],
    rows: &[usize],
    folds: &[Vec<usize>],
    grid: &ParamGrid,
    base: &HyperParams,
) -> Result<Selection> {
    grid.validate()?;
    let families = grid.families(base);
    let max_trees = *grid.n_trees.iter().max().expect("validated non-empty");
    let jobs: Vec<(usize, usize)> = (0..families.len()).flat_map(|f| (0..folds.len()).map(move |k| (f, k))).collect();

    // per job: one MSE per n_trees value
    let scores: Vec<Vec<f64>> = jobs
        .par_iter()
        .map(|&(f, k)| {
            let train = complement_within(rows, &folds[k]);
            let xt = x.select_rows(&train);
            let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
            let params = HyperParams { n_trees: max_trees, ..families[f] };
            let model = fit(&xt, &yt, &params, (0..x.n_cols()).map(|j| format!("x{j}")).collect())?;
            let xv = x.select_rows(&folds[k]);
            let yv: Vec<f64> = folds[k].iter().map(|&i| y[i]).collect();
            model.predict_staged(&xv, &grid.n_trees)?.iter().map(|p| mse(&yv, p)).collect()
        })
        .collect::<Result<_>>()?;

    let mut best: Option<Selection> = None;
    for (f, family) in families.iter().enumerate() {
        for (t, &n_trees) in grid.n_trees.iter().enumerate() {
            let fold_scores: Vec<f64> = (0..folds.len()).map(|k| scores[f * folds.len() + k][t]).collect();
            let score = fold_scores.iter().sum::<f64>() / fold_scores.len() as f64;
            let cand = Selection { params: HyperParams { n_trees, ..*family }, validation_mse: score };
            let better = match &best {
                None => true,
                Some(b) => {
                    score < b.validation_mse || (score == b.validation_mse && prefer(&cand.params, &b.params).is_lt())
                }
            };
            if better {
                best = Some(cand);
            }
        }
    }
    Ok(best.expect("grid has at least one cell"))
}

/// `rows` minus the sorted `fold`, order preserved.
fn complement_within(rows: &[usize], fold: &[usize]) -> Vec<usize> {
    rows.iter().copied().filter(|i| fold.binary_search(i).is_err()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SplitKind {
    Geographic { outer_folds: usize, inner_folds: usize },
    Temporal { train_year: i32, test_year: i32, folds: usize },
}

/// One outer fold (or the single temporal test): the chosen cell and the
/// persisted test predictions on the log scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub chosen: HyperParams,
    pub validation_mse: f64,
    pub tract_ids: Vec<String>,
    pub y_true: Vec<f64>,
    pub y_pred: Vec<f64>,
    pub mse: f64,
    pub r2: f64,
}

impl FoldResult {
    fn score(fold: usize, sel: Selection, tract_ids: Vec<String>, y_true: Vec<f64>, y_pred: Vec<f64>) -> Result<Self> {
        Ok(Self {
            fold,
            chosen: sel.params,
            validation_mse: sel.validation_mse,
            mse: mse(&y_true, &y_pred)?,
            r2: r2(&y_true, &y_pred)?,
            tract_ids,
            y_true,
            y_pred,
        })
    }
}

/// Metrics for one learner x subset x incident type x split kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub learner: Learner,
    pub subset: Subset,
    pub incident: IncidentType,
    pub year: i32,
    pub split: SplitKind,
    pub n_tracts: usize,
    pub n_features: usize,
    pub seed: u64,
    pub mean_mse: f64,
    pub sd_mse: f64,
    pub mean_r2: f64,
    pub sd_r2: f64,
    pub folds: Vec<FoldResult>,
    /// Wall-clock seconds; not serialized so reports stay byte-stable.
    #[serde(skip)]
    pub runtime_secs: f64,
}

impl EvalEntry {
    fn from_folds(meta: EntryMeta, folds: Vec<FoldResult>, runtime_secs: f64) -> Self {
        let mses: Vec<f64> = folds.iter().map(|f| f.mse).collect();
        let r2s: Vec<f64> = folds.iter().map(|f| f.r2).collect();
        let (mean_mse, sd_mse) = mean_sd(&mses);
        let (mean_r2, sd_r2) = mean_sd(&r2s);
        Self {
            learner: meta.learner,
            subset: meta.subset,
            incident: meta.incident,
            year: meta.year,
            split: meta.split,
            n_tracts: meta.n_tracts,
            n_features: meta.n_features,
            seed: meta.seed,
            mean_mse,
            sd_mse,
            mean_r2,
            sd_r2,
            folds,
            runtime_secs,
        }
    }

    /// Recomputes (mean MSE, mean R²) from the persisted fold predictions.
    pub fn recompute_means(&self) -> Result<(f64, f64)> {
        let mut m = Vec::new();
        let mut r = Vec::new();
        for f in &self.folds {
            m.push(mse(&f.y_true, &f.y_pred)?);
            r.push(r2(&f.y_true, &f.y_pred)?);
        }
        Ok((mean_sd(&m).0, mean_sd(&r).0))
    }
}

struct EntryMeta {
    learner: Learner,
    subset: Subset,
    incident: IncidentType,
    year: i32,
    split: SplitKind,
    n_tracts: usize,
    n_features: usize,
    seed: u64,
}

/// Settings shared by the geographic and temporal protocols.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSettings {
    pub outer_folds: usize,
    pub inner_folds: usize,
    pub temporal_folds: usize,
    pub seed: u64,
    pub min_samples_leaf: usize,
    /// Permutation-null control: shuffle the target before evaluation.
    pub shuffle_target: bool,
    /// rf row bootstrap; disabling it is a test switch.
    pub bootstrap: bool,
}

impl Default for CvSettings {
    fn default() -> Self {
        Self {
            outer_folds: 5,
            inner_folds: 2,
            temporal_folds: 5,
            seed: 0,
            min_samples_leaf: 1,
            shuffle_target: false,
            bootstrap: true,
        }
    }
}

impl CvSettings {
    fn base(&self, learner: Learner) -> HyperParams {
        HyperParams {
            seed: self.seed,
            min_samples_leaf: self.min_samples_leaf,
            bootstrap: self.bootstrap,
            ..HyperParams::new(learner)
        }
    }
}

/// Feature matrix (restricted to `subset`) and transformed target for one year.
pub fn prepare(
    ds: &RegionDataset,
    year: i32,
    incident: IncidentType,
    subset: Subset,
    config: &FeatureConfig,
) -> Result<(FeatureMatrix, TargetVector)> {
    let m = build_matrix(ds, year, subset, config)?;
    let counts = ds.crime_counts(year, incident)?;
    Ok((m, transform_target(&counts, incident, year)))
}

pub fn to_model_matrix(m: &FeatureMatrix) -> Matrix {
    Matrix::new(m.n_rows(), m.n_cols(), m.flat()).expect("feature rows are rectangular")
}

fn maybe_shuffled(y: &[f64], settings: &CvSettings) -> Vec<f64> {
    let mut y = y.to_vec();
    if settings.shuffle_target {
        y.shuffle(&mut tree_rng(settings.seed, u64::MAX as usize));
    }
    y
}

/// Nested cross-validation on an already-built matrix.
pub fn nested_cv_matrix(
    x: &Matrix,
    y: &[f64],
    tract_ids: &[String],
    grid: &ParamGrid,
    settings: &CvSettings,
) -> Result<Vec<FoldResult>> {
    let n = x.n_rows();
    if y.len() != n || tract_ids.len() != n {
        return Err(Error::Argument("matrix, target and tract ids disagree in length".into()));
    }
    let plan = SplitPlan::new(n, settings.outer_folds, settings.inner_folds, settings.seed)?;
    let base = settings.base(grid.learner);
    (0..plan.outer.len())
        .into_par_iter()
        .map(|o| {
            let train = plan.outer_train(o);
            let sel = grid_search(x, y, &train, &plan.inner[o], grid, &base)?;
            let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
            let model = fit(&x.select_rows(&train), &yt, &sel.params, names(x.n_cols()))?;
            let test = &plan.outer[o];
            let pred = model.predict(&x.select_rows(test))?;
            FoldResult::score(
                o,
                sel,
                test.iter().map(|&i| tract_ids[i].clone()).collect(),
                test.iter().map(|&i| y[i]).collect(),
                pred,
            )
        })
        .collect()
}

fn names(p: usize) -> Vec<String> {
    (0..p).map(|j| format!("x{j}")).collect()
}

/// Geographic nested CV: outer folds hold out tracts, inner folds pick the
/// grid cell by mean MSE.
pub fn nested_cv(
    ds: &RegionDataset,
    year: i32,
    incident: IncidentType,
    subset: Subset,
    config: &FeatureConfig,
    grid: &ParamGrid,
    settings: &CvSettings,
) -> Result<EvalEntry> {
    let start = std::time::Instant::now();
    let (m, target) = prepare(ds, year, incident, subset, config)?;
    let x = to_model_matrix(&m);
    let y = maybe_shuffled(&target.y, settings);
    let folds = nested_cv_matrix(&x, &y, &m.tract_ids, grid, settings)?;
    let meta = EntryMeta {
        learner: grid.learner,
        subset,
        incident,
        year,
        split: SplitKind::Geographic { outer_folds: settings.outer_folds, inner_folds: settings.inner_folds },
        n_tracts: m.n_rows(),
        n_features: m.n_cols(),
        seed: settings.seed,
    };
    Ok(EvalEntry::from_folds(meta, folds, start.elapsed().as_secs_f64()))
}

/// Tunes with k-fold CV on the training matrix, refits on all of it and
/// scores the test matrix.
pub fn holdout_matrix(
    train: (&Matrix, &[f64]),
    test: (&Matrix, &[f64]),
    test_ids: &[String],
    grid: &ParamGrid,
    settings: &CvSettings,
) -> Result<(FoldResult, EnsembleModel)> {
    let (x, y) = train;
    let rows: Vec<usize> = (0..x.n_rows()).collect();
    let folds = kfold(x.n_rows(), settings.temporal_folds, settings.seed)?;
    let sel = grid_search(x, y, &rows, &folds, grid, &settings.base(grid.learner))?;
    let model = fit(x, y, &sel.params, names(x.n_cols()))?;
    let pred = model.predict(test.0)?;
    Ok((FoldResult::score(0, sel, test_ids.to_vec(), test.1.to_vec(), pred)?, model))
}

/// Temporal protocol: train on `train_year`, test on `test_year` over the same
/// tracts, with features recomputed for each year.
#[allow(clippy::too_many_arguments)]
pub fn temporal_holdout(
    ds: &RegionDataset,
    train_year: i32,
    test_year: i32,
    incident: IncidentType,
    subset: Subset,
    config: &FeatureConfig,
    grid: &ParamGrid,
    settings: &CvSettings,
) -> Result<EvalEntry> {
    let start = std::time::Instant::now();
    let (m_train, t_train) = prepare(ds, train_year, incident, subset, config)?;
    let (m_test, t_test) = prepare(ds, test_year, incident, subset, config)?;
    let (x_train, x_test) = (to_model_matrix(&m_train), to_model_matrix(&m_test));
    let y_train = maybe_shuffled(&t_train.y, settings);
    let (fold, _) = holdout_matrix((&x_train, &y_train), (&x_test, &t_test.y), &m_test.tract_ids, grid, settings)?;
    let meta = EntryMeta {
        learner: grid.learner,
        subset,
        incident,
        year: test_year,
        split: SplitKind::Temporal { train_year, test_year, folds: settings.temporal_folds },
        n_tracts: m_test.n_rows(),
        n_features: m_test.n_cols(),
        seed: settings.seed,
    };
    Ok(EvalEntry::from_folds(meta, vec![fold], start.elapsed().as_secs_f64()))
}

pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub entries: Vec<EvalEntry>,
}

impl EvalReport {
    pub fn new(mut entries: Vec<EvalEntry>) -> Self {
        entries.sort_by(|a, b| {
            (a.split, a.incident, a.subset, a.learner).cmp(&(b.split, b.incident, b.subset, b.learner))
        });
        Self { format_version: REPORT_FORMAT_VERSION, entries }
    }

    /// Text table with one block per split kind and incident type: subsets as
    /// rows, learners as column pairs of MSE and R² (mean ± sd).
    pub fn to_table(&self) -> String {
        let mut blocks: BTreeMap<(SplitKind, IncidentType), Vec<&EvalEntry>> = BTreeMap::new();
        for e in &self.entries {
            blocks.entry((e.split, e.incident)).or_default().push(e);
        }
        let mut out = String::new();
        for ((split, incident), entries) in blocks {
            let title = match split {
                SplitKind::Geographic { outer_folds, inner_folds } => {
                    format!("geographic nested CV ({outer_folds} outer / {inner_folds} inner)")
                }
                SplitKind::Temporal { train_year, test_year, .. } => {
                    format!("temporal holdout (train {train_year}, test {test_year})")
                }
            };
            let _ = writeln!(out, "{} incidents, {title}", incident.as_str());
            let learners: Vec<Learner> =
                Learner::ALL.into_iter().filter(|l| entries.iter().any(|e| e.learner == *l)).collect();
            let mut header = format!("{:<16}", "features");
            for l in &learners {
                let _ = write!(header, " | {:^35}", l.display_name());
            }
            let _ = writeln!(out, "{header}");
            let mut sub = format!("{:<16}", "");
            for _ in &learners {
                let _ = write!(sub, " | {:^17} {:^17}", "MSE", "R2");
            }
            let _ = writeln!(out, "{sub}");
            let _ = writeln!(out, "{}", "-".repeat(sub.len()));
            for subset in Subset::ALL {
                if !entries.iter().any(|e| e.subset == subset) {
                    continue;
                }
                let mut line = format!("{:<16}", subset.as_str());
                for l in &learners {
                    match entries.iter().find(|e| e.subset == subset && e.learner == *l) {
                        Some(e) => {
                            let _ = write!(
                                line,
                                " | {:>7.3} ± {:<7.3} {:>7.3} ± {:<7.3}",
                                e.mean_mse, e.sd_mse, e.mean_r2, e.sd_r2
                            );
                        }
                        None => {
                            let _ = write!(line, " | {:^35}", "-");
                        }
                    }
                }
                let _ = writeln!(out, "{line}");
            }
            out.push('\n');
        }
        out
    }
}

/// Rows of the `b`-th resample: `round(frac * n)` distinct indices, sorted.
pub fn bootstrap_sample(n: usize, frac: f64, seed: u64, b: usize) -> Vec<usize> {
    let m = ((frac * n as f64).round() as usize).clamp(1, n);
    let mut rows = rand::seq::index::sample(&mut tree_rng(seed, b), n, m).into_vec();
    rows.sort_unstable();
    rows
}

/// Box-plot statistics of one feature's importance across resamples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRow {
    pub rank: usize,
    pub feature: String,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
    /// Resamples in which this feature had the largest importance.
    pub times_first: usize,
}

pub const IMPORTANCE_COLUMNS: [&str; 8] = ["rank", "feature", "median", "q1", "q3", "min", "max", "times_first"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTable {
    pub resamples: usize,
    pub frac: f64,
    pub params: HyperParams,
    pub rows: Vec<ImportanceRow>,
}

impl ImportanceTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(IMPORTANCE_COLUMNS)?;
        for r in &self.rows {
            w.serialize((r.rank, &r.feature, r.median, r.q1, r.q3, r.min, r.max, r.times_first))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Refits `params` on `resamples` random `frac` subsamples of the rows and
/// ranks features by median impurity importance.
pub fn bootstrap_importance(
    x: &Matrix,
    y: &[f64],
    feature_names: &[String],
    params: &HyperParams,
    resamples: usize,
    frac: f64,
    seed: u64,
) -> Result<ImportanceTable> {
    if resamples == 0 || !(frac > 0.0 && frac <= 1.0) {
        return Err(Error::Argument(format!("invalid resampling: B={resamples}, frac={frac}")));
    }
    let vectors: Vec<ImportanceVector> = (0..resamples)
        .into_par_iter()
        .map(|b| {
            let rows = bootstrap_sample(x.n_rows(), frac, seed, b);
            let yb: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
            Ok(fit(&x.select_rows(&rows), &yb, params, feature_names.to_vec())?.importance())
        })
        .collect::<Result<_>>()?;
    let p = feature_names.len();
    let mut times_first = vec![0usize; p];
    for v in &vectors {
        times_first[v.ranking()[0]] += 1;
    }
    let mut rows: Vec<ImportanceRow> = (0..p)
        .map(|j| {
            let mut w: Vec<f64> = vectors.iter().map(|v| v.weights[j]).collect();
            w.sort_by(f64::total_cmp);
            ImportanceRow {
                rank: 0,
                feature: feature_names[j].clone(),
                median: quantile_sorted(&w, 0.5),
                q1: quantile_sorted(&w, 0.25),
                q3: quantile_sorted(&w, 0.75),
                min: w[0],
                max: w[w.len() - 1],
                times_first: times_first[j],
            }
        })
        .collect();
    // stable sort keeps registry order among equal medians
    rows.sort_by(|a, b| b.median.total_cmp(&a.median));
    rows.iter_mut().enumerate().for_each(|(i, r)| r.rank = i + 1);
    Ok(ImportanceTable { resamples, frac, params: *params, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub tract_id: String,
    pub y: f64,
    pub y_hat: f64,
    pub error: f64,
    pub rounded_error: i64,
    pub count: u64,
    pub predicted_count: u64,
}

/// Per-tract errors on the log scale, their rounded histogram and the number
/// of tracts with |error| < 0.5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualLayer {
    pub rows: Vec<ResidualRow>,
    pub histogram: BTreeMap<i64, usize>,
    pub in_band: usize,
}

impl ResidualLayer {
    pub fn from_predictions(tract_ids: &[String], y: &[f64], y_hat: &[f64]) -> Result<Self> {
        check_pair(y, y_hat)?;
        if tract_ids.len() != y.len() {
            return Err(Error::Argument("tract ids and targets disagree in length".into()));
        }
        let mut histogram = BTreeMap::new();
        let mut in_band = 0;
        let rows = tract_ids
            .iter()
            .zip(y.iter().zip(y_hat))
            .map(|(id, (&y, &y_hat))| {
                let error = y - y_hat;
                let rounded_error = error.round() as i64;
                *histogram.entry(rounded_error).or_insert(0) += 1;
                if error.abs() < 0.5 {
                    in_band += 1;
                }
                ResidualRow {
                    tract_id: id.clone(),
                    y,
                    y_hat,
                    error,
                    rounded_error,
                    count: inverse_transform(y),
                    predicted_count: inverse_transform(y_hat),
                }
            })
            .collect();
        Ok(Self { rows, histogram, in_band })
    }

    /// Writes a GeoJSON layer joining tract geometry with the error columns.
    pub fn write_geojson(&self, ds: &RegionDataset, path: &Path) -> Result<()> {
        let by_id: BTreeMap<&str, &ResidualRow> = self.rows.iter().map(|r| (r.tract_id.as_str(), r)).collect();
        let features = ds
            .tracts
            .iter()
            .filter_map(|t| {
                let r = by_id.get(t.tract_id.as_str())?;
                let mut props = JsonObject::new();
                props.insert("y".into(), r.y.into());
                props.insert("y_hat".into(), r.y_hat.into());
                props.insert("error".into(), r.error.into());
                props.insert("rounded_error".into(), r.rounded_error.into());
                props.insert("count".into(), r.count.into());
                props.insert("predicted_count".into(), r.predicted_count.into());
                Some(tract_feature(t, props))
            })
            .collect();
        write_feature_collection(path, features)
    }
}

/// Residuals of `model` on the `year` matrix of `ds`.
pub fn residual_layer(
    model: &EnsembleModel,
    ds: &RegionDataset,
    year: i32,
    incident: IncidentType,
    subset: Subset,
    config: &FeatureConfig,
) -> Result<ResidualLayer> {
    let (m, target) = prepare(ds, year, incident, subset, config)?;
    if m.names() != model.feature_names.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(Error::Argument("model features do not match the requested subset".into()));
    }
    let pred = model.predict(&to_model_matrix(&m))?;
    ResidualLayer::from_predictions(&m.tract_ids, &target.y, &pred)
}
