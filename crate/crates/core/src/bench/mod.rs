//! Benchmark harness: metrics, simulated observers, Monte-Carlo simulation
//! batches, weight search and Fisher-energy analysis.

pub mod metrics;
pub mod observer;
pub mod sim;

pub use metrics::{
    auc, brier, brier_from_probabilities, default_mu_star, exceed_probability, mean_and_stderr, mid_ranks, pearson,
    rmse, spearman, BRIER_STD_FLOOR,
};
pub use observer::{full_grid, make_test_set, FunctionSpec, Observer, DEFAULT_TEST_POINTS};
pub use sim::{
    component_map, fisher_analysis, fisher_run, run_batch, run_simulation, weight_search, Aggregate, BatchReport,
    BatchSummary, BenchmarkConfig, ComponentMap, ComponentRecord, CsvRow, FisherAnalysis, FisherRun, MetricSeries,
    RunSummary, WeightScore,
};
