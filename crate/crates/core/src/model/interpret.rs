use serde::{Deserialize, Serialize};

use super::ensemble::{EnsembleModel, Learner};
use super::Matrix;
use crate::error::{Error, Result};
use crate::ingest::quantile_sorted;

/// Normalized impurity importance. `degenerate` is set when no tree split at
/// all; the weights are then uniform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceVector {
    pub names: Vec<String>,
    pub weights: Vec<f64>,
    pub degenerate: bool,
}

impl ImportanceVector {
    /// Feature indices ordered by decreasing weight, ties by index.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.weights.len()).collect();
        idx.sort_by(|&a, &b| self.weights[b].total_cmp(&self.weights[a]).then(a.cmp(&b)));
        idx
    }

    pub fn top(&self, k: usize) -> Vec<(&str, f64)> {
        self.ranking().into_iter().take(k).map(|j| (self.names[j].as_str(), self.weights[j])).collect()
    }
}

fn normalize(v: &mut [f64]) -> bool {
    let total: f64 = v.iter().sum();
    if total > 0.0 {
        v.iter_mut().for_each(|w| *w /= total);
        true
    } else {
        false
    }
}

impl EnsembleModel {
    /// Mean-decrease-in-impurity importance. Forest trees are normalized
    /// individually and averaged; boosting stages are summed, then normalized.
    pub fn importance(&self) -> ImportanceVector {
        let p = self.n_features;
        let mut acc = vec![0.0; p];
        match self.params.learner {
            Learner::Gb => {
                for t in &self.trees {
                    t.accumulate_importance(&mut acc);
                }
            }
            Learner::Rf | Learner::Et => {
                for t in &self.trees {
                    let mut one = vec![0.0; p];
                    t.accumulate_importance(&mut one);
                    if normalize(&mut one) {
                        acc.iter_mut().zip(&one).for_each(|(a, b)| *a += b);
                    }
                }
            }
        }
        let degenerate = !normalize(&mut acc);
        if degenerate {
            log::warn!("model has no splits; importance is uniform");
            acc = vec![1.0 / p.max(1) as f64; p];
        }
        ImportanceVector { names: self.feature_names.clone(), weights: acc, degenerate }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialDependence {
    pub feature: String,
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
}

/// The 10th..90th percentiles of `column`, deduplicated.
pub fn decile_grid(column: &[f64]) -> Vec<f64> {
    let mut sorted = column.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut grid: Vec<f64> = (1..=9).map(|k| quantile_sorted(&sorted, k as f64 / 10.0)).collect();
    grid.dedup();
    grid
}

/// Average prediction over the rows of `x` with `feature` clamped to each grid
/// value. With `grid = None` the deciles of the feature are used.
pub fn partial_dependence(
    model: &EnsembleModel,
    x: &Matrix,
    feature: usize,
    grid: Option<&[f64]>,
) -> Result<PartialDependence> {
    if feature >= x.n_cols() || x.n_cols() != model.n_features {
        return Err(Error::Argument(format!("feature index {feature} invalid for {} columns", x.n_cols())));
    }
    if x.n_rows() == 0 {
        return Err(Error::Argument("partial dependence needs at least one row".into()));
    }
    let grid = match grid {
        Some(g) => g.to_vec(),
        None => decile_grid(&x.column(feature)),
    };
    let mut work = x.clone();
    let values = grid
        .iter()
        .map(|&g| {
            for i in 0..work.n_rows() {
                work.set(i, feature, g);
            }
            let preds = model.predict(&work)?;
            Ok(preds.iter().sum::<f64>() / preds.len() as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PartialDependence { feature: model.feature_names[feature].clone(), grid, values })
}

#[cfg(test)]
mod tests {
    use super::super::ensemble::{fit, HyperParams};
    use super::*;

    fn names(p: usize) -> Vec<String> {
        (0..p).map(|j| format!("f{j}")).collect()
    }

    #[test]
    fn importance_goes_to_the_only_signal() {
        let n = 60;
        let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![(i % 7) as f64, i as f64, ((i * 13) % 5) as f64]).collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let y: Vec<f64> = (0..n).map(|i| if i < 30 { 0.0 } else { 5.0 }).collect();
        let params = HyperParams { n_trees: 1, gb_max_depth: 1, ..HyperParams::new(Learner::Gb) };
        let imp = fit(&x, &y, &params, names(3)).unwrap().importance();
        assert_eq!(imp.weights, vec![0.0, 1.0, 0.0]);
        assert_eq!(imp.ranking()[0], 1);
        assert!(!imp.degenerate);
    }

    #[test]
    fn constant_target_gives_uniform_degenerate_importance() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0], vec![3.0, 0.0]]).unwrap();
        for learner in Learner::ALL {
            let imp = fit(&x, &[4.0; 3], &HyperParams { n_trees: 3, ..HyperParams::new(learner) }, names(2))
                .unwrap()
                .importance();
            assert!(imp.degenerate);
            assert_eq!(imp.weights, vec![0.5, 0.5]);
        }
    }

    #[test]
    fn importance_sums_to_one() {
        let rows: Vec<Vec<f64>> =
            (0..50).map(|i| vec![i as f64, ((i * 7) % 11) as f64, ((i * 3) % 4) as f64]).collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let y: Vec<f64> = rows.iter().map(|r| r[0] + 2.0 * r[1]).collect();
        for learner in Learner::ALL {
            let imp =
                fit(&x, &y, &HyperParams { n_trees: 10, ..HyperParams::new(learner) }, names(3)).unwrap().importance();
            assert!((imp.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn decile_grid_of_one_to_hundred() {
        let col: Vec<f64> = (1..=101).map(f64::from).collect();
        assert_eq!(decile_grid(&col), vec![11.0, 21.0, 31.0, 41.0, 51.0, 61.0, 71.0, 81.0, 91.0]);
        assert_eq!(decile_grid(&[3.0; 10]), vec![3.0]);
    }

    #[test]
    fn pdp_of_step_by_hand() {
        // y = 10 when x0 >= 2.5; the single-stage, lr 1 model reproduces it.
        let x = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![4.0, 1.0], vec![5.0, 0.0]]).unwrap();
        let y = [0.0, 0.0, 10.0, 10.0];
        let params =
            HyperParams { n_trees: 1, gb_max_depth: 1, gb_learning_rate: 1.0, ..HyperParams::new(Learner::Gb) };
        let model = fit(&x, &y, &params, names(2)).unwrap();
        let pd = partial_dependence(&model, &x, 0, Some(&[0.0, 3.0])).unwrap();
        assert_eq!(pd.values, vec![0.0, 10.0]);
        let flat = partial_dependence(&model, &x, 1, Some(&[0.0, 1.0])).unwrap();
        assert_eq!(flat.values, vec![5.0, 5.0]);
        assert!(partial_dependence(&model, &x, 2, None).is_err());
    }
}
