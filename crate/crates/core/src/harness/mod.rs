//! Training, evaluation, checkpoints and the command-line surface.

mod checkpoint;
mod checks;
pub mod cli;
mod config;
mod eval;
mod fsio;
mod optim;
mod train;

pub use checkpoint::{sha256_hex, weights_blob, Checkpoint, Manifest, TensorEntry, FORMAT as CHECKPOINT_FORMAT, MANIFEST_FILE, WEIGHTS_FILE};
pub use checks::{model_gradcheck, verify_sampling, ModelGradCheck, SamplingCheck, GRADCHECK_THRESHOLD};
pub use config::{BaselineConfig, LossConfig, Mode, ModelConfig, OptimizerConfig, OptimizerKind, RunConfig, Seeds};
pub use eval::{
    ablation_csv, evaluate, mean_accuracy, run_arms, sweep, train_and_sweep, Arm, ArmRun, EvalMetrics, EvalReport,
    EvalRow, ABLATION_HEADER, REPORT_HEADER,
};
pub use fsio::{ensure_dir, read, read_string, resolve_output, write_atomic, OUTPUT_ROOT_ENV};
pub use optim::Optimizer;
pub use train::{prepare_data, train, train_to_dir, RunArtifacts, StepMetrics, TrainEvent, TrainOutcome};
