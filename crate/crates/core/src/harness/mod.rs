//! Training, inference, evaluation and ablation drivers.

mod ablation;
pub mod config;
mod evaluate;
mod infer;
mod train;

pub use ablation::{ablation_csv, run_ablation, AblationAxis, AblationRow};
pub use config::{parse_gen_config, parse_train_config, read_gen_config, read_train_config, LrSchedule, TrainConfig, Variant};
pub use evaluate::{binarize, evaluate, evaluate_model, EvalReport};
pub use infer::{image_tensor, infer_sliding};
pub use train::{log_paths, sgd_step, train, train_with, EvalRow, RunLog, TrainData, TrainOutcome};
