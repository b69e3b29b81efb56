//! On-disk formats: checkpoints, configuration files and report logs.

mod checkpoint;
mod config;
mod report;

pub use checkpoint::{AnyTensor, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ConfigFile, ExperimentConfig};

pub use report::{write_report_log, ReportLog};
