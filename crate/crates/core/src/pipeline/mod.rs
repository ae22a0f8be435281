//! Training, inference, evaluation and persistence around the full model.

mod checkpoint;
mod config;
mod data;
mod evaluate;
mod model;
mod train;
mod workflow;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{BackgroundRule, Config, DataConfig, EvalConfig, LossConfig, ModelConfig, TrainConfig};
pub use data::{AccessLog, AccessRecord, Purpose, SampleStore};
pub use evaluate::{deterministic_mode, evaluate, DETERMINISTIC_ENV};
pub use model::{BundleSummary, LesionSummary, LossParts, Malenia, PredictionBundle, TokenPrediction, Trace};
pub use train::{EpochRecord, StepLosses, Trainer};
pub use workflow::{default_provider, generate_test_set, generate_training_set, train};
