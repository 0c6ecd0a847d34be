//! Training, evaluation, sweeps and run artifacts.

mod checkpoint;
mod config;
mod correlate;
mod data;
mod eval;
mod interventions;
mod run;
mod rundir;
mod sweep;
mod train;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, RngState, TensorGroup};
pub use config::{
    DataConfig, EvalGrid, ExperimentConfig, Intervention, OptimizerConfig, Precision, Split, SCHEMA_VERSION,
};
pub use correlate::{correlate, linear_fit, spearman, TrendFit};
pub use data::{mse_loss, split_set, train_set, TaskBatch};
pub use eval::{
    evaluate, evaluate_cell, score_state, write_aa_csv, write_metrics_csv, CellEval, MetricsRow, Prediction,
    EVAL_CHUNK,
};
pub use interventions::{
    alignment_penalty, intervene_mixed_init, intervene_random_depth, mixed_init_mask, penalty_from_states,
    PenaltyResult, PenaltyValue,
};
pub use run::{run_experiment, RunSummary, CHECKPOINT_FILE};
pub use rundir::{RunDir, DONE_MARKER, FAILED_MARKER};
pub use sweep::{
    run_sweep, trend_point, trend_report, write_trend_csv, Axis, SweepGrid, SweepRun, TrendMetric, TrendPoint,
    TrendReport, TrendSpec, MAX_SWEEP_RUNS,
};
pub use train::{train, write_train_csv, TrainOutcome, TrainRow, UNHEALTHY_SKIP_FRACTION};
