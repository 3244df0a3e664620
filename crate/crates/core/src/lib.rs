//! Unified box/mask multi-object tracking and segmentation.
//!
//! Objects are given to the tracker as either masks or boxes on the first
//! frame. Both formats are turned into the same kind of identification
//! embedding, propagated through an attention memory, and decoded every frame
//! into masks and boxes at once.

pub mod config;
pub mod data;
pub mod encoder;
pub mod engine;
pub mod error;
pub mod geometry;
pub mod heads;
pub mod losses;
pub mod model;
pub mod nn;
pub mod propagation;
pub mod uidm;

pub use config::{Config, HeadKind, LocalizerKind, ModelConfig, TrainConfig};
pub use error::{Error, Result};
pub use model::{FrameOutput, Model};
