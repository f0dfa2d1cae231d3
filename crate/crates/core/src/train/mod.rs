//! Synthetic corpus, optimization, checkpoints and the singer probe.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod probe;
pub mod schedule;
pub mod trainer;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, Checkpoint};
pub use config::TrainConfig;
pub use corpus::{make_synthetic_corpus, CorpusConfig, CorpusItem, LyricPool, SyntheticCorpus};
pub use probe::{probe_eval, ProbeConfig, ProbeReport};
pub use schedule::{lr_at, lr_for_step, LrSchedule};
pub use trainer::{load_checkpoint, run_training, save_checkpoint, train, StepMetrics, TrainOutcome, TrainState, Trainer};
