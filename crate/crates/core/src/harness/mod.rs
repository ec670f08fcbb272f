//! Training, evaluation, checkpoints and gradient verification.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod gradsuite;
pub mod optim;
pub mod train;

pub use checkpoint::{peek, stored_param_count, Checkpoint, RngState};
pub use config::{Precision, RunConfig, TrainConfig};
pub use eval::{ablate, denoise_sequence, evaluate, AblationReport, EvalReport, Variant};
pub use gradsuite::{run_suite, GradCase};
pub use optim::{cosine_lr, Adam, AdamConfig};
pub use train::{CurveRow, TrainLog, Trainer};
