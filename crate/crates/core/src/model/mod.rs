//! Tree ensembles fitted from scratch, plus model interpretation.

mod ensemble;
mod interpret;
mod matrix;
pub mod tree;

pub use ensemble::{
    fit, fit_extra_trees, fit_gradient_boosting, fit_random_forest, tree_rng, EnsembleModel, HyperParams, Learner,
    MaxFeatures, MODEL_FORMAT_VERSION,
};
pub use interpret::{decile_grid, partial_dependence, ImportanceVector, PartialDependence};
pub use matrix::Matrix;
