//! Orchestration: configuration, the end-to-end pipeline, grids, presets and
//! run persistence.

pub mod config;
pub mod grid;
pub mod persist;
pub mod pipeline;
pub mod presets;
pub mod stats;

pub use config::{AnnotationMethod, DataSource, PipelineConfig};
pub use grid::{grid_experiment, Axis, GridRun};
pub use pipeline::{load_annotation, rerun, run_pipeline, run_with_annotation, RunRecord};
pub use presets::{reproduce, Figure, ReproduceOptions, Verdict};
