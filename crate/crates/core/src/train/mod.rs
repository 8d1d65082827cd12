//! Training, per-spot evaluation and ablation grids.
mod ablation;
mod eval;
mod metrics;
mod trainer;

pub use ablation::{
    ablation_csv, ablation_run, apply_overrides, grid, levels_label, AblationRow, GridEntry, GridName, Splits,
    ABLATION_FILE, ABLATION_HEADER, LEVEL_SUBSETS, MASK_SWEEP,
};
pub use eval::{
    config_digest, evaluate, predict_dataset, read_matrix, score, write_evaluation, EvalReport, Evaluation, Matrix,
    PER_SPOT_FILE, PREDICTIONS_FILE, REPORT_FILE, TARGETS_FILE,
};
pub use metrics::{mse_loss, pcc, pearson, rmse, Pearson};
pub use trainer::{
    log_csv, train, train_corpus, train_step, LogRow, TrainOutcome, TrainSpec, BEST_DIR, FINAL_DIR, LAST_GOOD_DIR,
    LOG_FILE, LOG_HEADER,
};
