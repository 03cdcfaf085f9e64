//! Exhaustive reference for exact CART splitting: every feature, every
//! boundary between distinct sorted values, children scored by direct SSE.

use crimecast::model::tree::{DecisionTree, Node};
use crimecast::model::Matrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug)]
pub enum RefTree {
    Leaf(f64),
    Split { feature: usize, threshold: f64, left: Box<RefTree>, right: Box<RefTree> },
}

fn sse(ys: &[f64]) -> f64 {
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    ys.iter().map(|y| (y - mean) * (y - mean)).sum()
}

fn mid(a: f64, b: f64) -> f64 {
    let m = a + (b - a) / 2.0;
    if m < b {
        m
    } else {
        a
    }
}

pub fn reference_tree(x: &Matrix, y: &[f64], rows: &[usize]) -> RefTree {
    let ys: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    if ys.iter().all(|&v| v == ys[0]) {
        return RefTree::Leaf(mean);
    }
    let tol = 1e-11 * ys.iter().map(|v| v * v).sum::<f64>();
    let mut best: Option<(f64, usize, f64)> = None;
    for f in 0..x.n_cols() {
        let mut values: Vec<f64> = rows.iter().map(|&i| x.get(i, f)).collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        for w in values.windows(2) {
            let t = mid(w[0], w[1]);
            let (l, r): (Vec<f64>, Vec<f64>) = {
                let l = rows.iter().filter(|&&i| x.get(i, f) <= t).map(|&i| y[i]).collect();
                let r = rows.iter().filter(|&&i| x.get(i, f) > t).map(|&i| y[i]).collect();
                (l, r)
            };
            let score = sse(&l) + sse(&r);
            if best.is_none_or(|(b, _, _)| score < b - tol) {
                best = Some((score, f, t));
            }
        }
    }
    let Some((_, feature, threshold)) = best else {
        return RefTree::Leaf(mean);
    };
    let left: Vec<usize> = rows.iter().copied().filter(|&i| x.get(i, feature) <= threshold).collect();
    let right: Vec<usize> = rows.iter().copied().filter(|&i| x.get(i, feature) > threshold).collect();
    RefTree::Split {
        feature,
        threshold,
        left: Box::new(reference_tree(x, y, &left)),
        right: Box::new(reference_tree(x, y, &right)),
    }
}

/// Structural comparison; leaf values within `tol`.
pub fn same_tree(tree: &DecisionTree, node: u32, reference: &RefTree, tol: f64) -> Result<(), String> {
    match (&tree.nodes[node as usize], reference) {
        (Node::Leaf { value }, RefTree::Leaf(v)) => {
            if (value - v).abs() <= tol {
                Ok(())
            } else {
                Err(format!("leaf {value} vs {v}"))
            }
        }
        (
            Node::Split { feature, threshold, left, right, .. },
            RefTree::Split { feature: f, threshold: t, left: l, right: r },
        ) => {
            if *feature as usize != *f || threshold != t {
                return Err(format!("split x{feature} <= {threshold} vs x{f} <= {t}"));
            }
            same_tree(tree, *left, l, tol)?;
            same_tree(tree, *right, r, tol)
        }
        (a, b) => Err(format!("node shape differs: {a:?} vs {b:?}")),
    }
}

/// Random fixture with at most 20 rows and 3 features. Feature values come
/// from a small integer range so duplicates are common.
pub fn fixture(rng: &mut ChaCha8Rng) -> (Matrix, Vec<f64>) {
    let n = rng.gen_range(1..=20);
    let p = rng.gen_range(1..=3);
    let data: Vec<f64> = (0..n * p).map(|_| f64::from(rng.gen_range(0..8))).collect();
    let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
    (Matrix::new(n, p, data).unwrap(), y)
}
