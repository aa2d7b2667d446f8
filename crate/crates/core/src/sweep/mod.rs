//! The experiment grid: seeds x methods x directions x occlusion levels x
//! replacement strategies, with aggregation and CSV/PGM export.

mod config;
mod export;
mod harness;

pub use config::{Paths, RenderConfig, SweepConfig, Task, DEFAULT_FRACTIONS};
pub use export::{
    export_all, export_csv, export_images, export_manifest, export_summary_csv, records_csv,
    summary_csv, Manifest, RECORDS_HEADER, SUMMARY_HEADER,
};
pub use harness::{
    aggregate, ensure_model, grid, load_task_splits, run_cell, run_sweep, run_sweep_on, train_seed,
    Cell, CellScores, Metric, Record, SeedEvaluator, Summary, SweepResult, TrainRecord,
};
