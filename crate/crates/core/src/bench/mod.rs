//! Experiment harness: metrics, statistics, training and multi-seed suites.

pub mod metrics;
pub mod stats;
pub mod suite;
pub mod train;

pub use metrics::{compute_metrics, Metrics, MetricsRow};
pub use stats::{paired_t_test, pearson, student_t_p_two_sided, t_from_summary, TTest};
pub use suite::{
    evaluate, read_manifest, run_suite, run_suite_jobs, stratified_split, write_manifest, ComparisonRow, EnvSpec,
    Manifest, Method, SuiteConfig, SuiteResult, ABLATION, ALL_METHODS, BETA_GRID, N_GRID,
};
pub use train::{train, Trained};
