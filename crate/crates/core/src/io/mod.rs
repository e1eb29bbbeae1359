//! On-disk formats: tensor checkpoints, run configuration, toy datasets.

pub mod checkpoint;
pub mod config;
pub mod data;

pub use checkpoint::{load_checkpoint, load_encoder, save_checkpoint, save_encoder, Checkpoint};
pub use config::RunConfig;
pub use data::{generate_toy_dataset, Dataset, ShapeKind, ToyData, ToySpec};
