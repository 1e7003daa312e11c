//! Metrics, calibration, attention reports and experiments.

mod attention_dump;
mod experiments;
mod metrics;
mod predictions;

pub use attention_dump::{attention_report, parse_attention_matrices, render_attention_dump, AttentionRow};
pub use experiments::{
    density_csv, lane_change_attention, latency_benchmark, mean_covariance_trace, percentile, scalability_experiment,
    self_sampled_coverage,
    DensityRow, LaneChangeAttention, LatencyReport, LATENCY_WARMUP, REFERENCE_LATENCY_MS,
};
pub use metrics::{
    calibration, horizon_indices, inside_three_sigma, rmse, rmse_of_forecasts, target_mask, CalibrationReport,
    HorizonCoverage, HorizonRmse, RmseReport, SceneTrajectories, HORIZONS_S, THREE_SIGMA_Q,
};
pub use predictions::{comparison_table, read_predictions, write_predictions, PREDICTION_COLUMNS};
