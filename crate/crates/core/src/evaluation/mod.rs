//! Lesion-wise interactive evaluation.

mod clicks;
mod components;
mod harness;
mod metrics;

pub use clicks::{simulate_correction_click, simulate_initial_click};
pub use components::{
    centroid, connected_components, fill_holes, nearest_voxel, remove_small_components, select_largest, Connectivity,
};
pub use harness::{run_lesionwise_eval, ClickRecord, EvalConfig, EvalRun, InteractiveModel, MetricsReport};
pub use metrics::{dsc, lesion_f1, lesionwise_dsc, LesionMatch, MatchRow};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("mask extents differ")]
    ExtentMismatch,
    #[error("lesion mask is empty")]
    EmptyLesion,
    #[error("invalid eval config: {0}")]
    Config(String),
    #[error("model failed: {0}")]
    Model(String),
}
