//! Adapter training with per-step path activation, domain sampling,
//! gradient accumulation and update accounting.

mod adam;
mod counters;
mod sampling;
mod train;

pub use adam::{adam_step, Adam, AdamConfig, MomentState};
pub use counters::UpdateCounters;
pub use sampling::{sample_batch, sample_windows, DomainSampler, Sampling};
pub use train::{trace_csv, train_adapters, LrSchedule, TraceRow, TrainConfig, Trained, Variant};
