//! Config-driven experiment plans with append-only, resumable results.

mod config;
mod dataset;
mod plan;
mod report;
mod results;

pub use config::{infer_format, load_config, DatasetConfig, EvalConfig, ExperimentConfig, ModelSettings};
pub use dataset::{load_processed, prepare_cached, preprocess, preprocess_bytes, DatasetStats, PreparedDataset};
pub use plan::{plan_points, point_seed, run_plan, PlanSummary, RunOptions, RunPoint};
pub use report::{markdown_report, write_markdown_report};
pub use results::{read_results, PointSnapshot, ResultsStore, RunRecord, RunStatus, RESULT_COLUMNS};
