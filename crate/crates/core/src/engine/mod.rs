//! Training, tracking sessions, metrics and checkpoints.

pub mod checkpoint;
pub mod evaluate;
pub mod metrics;
pub mod optim;
pub mod tracker;
pub mod train;
pub mod viz;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest};
pub use evaluate::{evaluate, reference_for, score_sequence};
pub use metrics::{eval_vos, eval_vot, MetricsReport, SequenceMetrics, VosScores, VotScores};
pub use tracker::{track_sequence, Tracker, TrackerState};
pub use train::{train, StepLog, Trainer};
