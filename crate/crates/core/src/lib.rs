//! Privacy-preserving compensation pipeline.

pub mod bus;
pub mod crypto;
pub mod model;
pub mod slicing;
pub mod standardize;
pub mod store;
pub mod submission;
pub mod timestamp;
pub mod prepare;
pub mod insights;
pub mod campaign;
pub mod harness;
pub mod synth;
pub mod pipeline;
