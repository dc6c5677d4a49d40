//! Paired-partition clustering of features.
//!
//! Features are recursively bisected; a split is kept when mixtures fitted on
//! each half still explain the densest instances of the parent node.

pub mod data;
pub mod engine;
pub mod error;
pub mod gmm;
pub mod kmeans;
pub mod som;
pub mod synth;

pub use data::{column_vectors, submatrix, DesignMatrix, IndexSet, RandomSeed};
pub use engine::{build_tree, cut_tree, grow_node, CutTarget, PppConfig, PppNode, PppTree, SplitEvaluation, TreeDocument};
pub use error::{PppError, Result};
