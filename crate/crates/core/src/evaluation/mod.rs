//! Metrics, the Kalman-filter baseline, ablation runners and artifacts.

mod ekf;
mod evaluate;
mod metrics;
mod report;

pub use ekf::{ekf_predict, ekf_sample, track_of, EkfPrediction, Track};
pub use evaluate::{
    ablate_mask, aggregate, bucket_by_agents, evaluate, mask_polylines, score_all, score_sample, AgentBucket, AgentScore, ClassMetrics,
    EkfPredictor, MetricsTable, MissRateMode, ModelPredictor, OraclePredictor, Predictor, MASK_FRACTIONS,
};
pub use metrics::{ade_of, fde_of, final_step, min_ade, min_fde, miss_rate, most_probable, MISS_THRESHOLD};
pub use report::{
    config_hash, render_plot, save_plot, save_report, save_sweep_report, write_report, write_sweep_report, REPORT_COLUMNS,
};
