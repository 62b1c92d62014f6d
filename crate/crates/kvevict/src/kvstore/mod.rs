//! Tensor containers and the on-disk bundle and plan formats.

mod bundle;
mod matrix;
mod plan;

pub use bundle::{
    apply_plan, load_bundle, read_bundle, save_bundle, write_bundle, HeadKV, KVBundle,
};
pub use matrix::RowMatrix;
pub use plan::{load_plan, retained_count, save_plan, RetentionPlan, PLAN_VERSION};

use serde::{Deserialize, Serialize};

/// What a [`ScoreVector`] measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Outlier,
    Attention,
    Blended,
    Baseline,
}

/// Per-token importance scores for one head.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub scores: Vec<f64>,
    pub kind: ScoreKind,
}

impl ScoreVector {
    pub fn new(scores: Vec<f64>, kind: ScoreKind) -> Self {
        Self { scores, kind }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.scores.iter().all(|s| s.is_finite())
    }
}
