pub mod adamw;
pub mod type1;

pub use adamw::{adamw_step, AdamWConfig, OptimizerState, StepStats};
pub use type1::{type1_train, validate, EpochLog, StepLog, TrainConfig, TrainReport};
