//! Training loop, optimizer, and the freeze-aware cost model.

mod config;
mod cost;
mod optim;
mod report;
mod train;

pub use config::{Precision, TrainerConfig};
pub use cost::{block_flops, median, predict_speedup, CostMeter, FlopProfile};
pub use optim::{AdamWConfig, OptimizerState};
pub use report::{AbortDiagnostic, FreezeEvent, LayerDigest, PruneEvent, TraceRow, TrainReport};
pub use train::{layer_digest, prepare_batch, train, train_observed, train_with_model, TrainObserver};
