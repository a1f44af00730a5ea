//! Synthetic scenes, toy metrics, and the alignment / frame-count /
//! fusion-operator benches behind the CLI.

mod bench;
mod metrics;
mod scene;

pub use bench::{align_bench, frame_sweep, fusion_bench, AlignBenchRow, SweepRow};
pub use metrics::{evaluate, ToyMetrics, RANGE_SPLIT_M};
pub use scene::{
    ego_pose_at, generate_sequence, read_scene_dir, render_semantic_bev, write_scene_dir,
    FrameSample, SceneConfig, CLASS_LANDMARK, CLASS_MOVER, NUM_CLASSES,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("bad scene configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error(transparent)]
    Bev(#[from] crate::bev::BevError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[cfg(test)]
mod tests;
