mod ablation;
mod checkpoint;
mod config;
mod loss;
mod trainer;

pub use ablation::{
    row_dir, run_ablation, run_ablation_with_corpus, AblationMatrix, AblationResult, AblationRow, AblationTable,
    EncoderChoice, TABLE_JSON, TABLE_TEXT,
};
pub use checkpoint::{Checkpoint, OptimizerState, Role};
pub use config::{OptimizerConfig, TrainConfig};
pub use loss::{edge_weights, structure_loss, EDGE_GAIN, EDGE_KERNEL};
pub use trainer::{
    derive_seed, epoch_aug_params, evaluate_model, follower_loss, init_seed, make_batch, noisy_masks, predict, prepare_split,
    read_log, resume, supervised_loss, train_follower, train_leader, train_with_corpus, AuditRecord, Batch,
    FollowerLoss, Prepared, StepRecord, TrainOutcome, CONFIG_FILE, FINAL_CHECKPOINT, LOG_FILE,
};
