//! Desk-scale toolkit for training a small anchor-free detector under domain
//! shift: teacher-student self-training with EMA weight fusion, confidence-
//! tiered pseudo-label losses, divergence-driven dynamic augmentation, and
//! queue-based contrastive instance alignment, verified end to end on a
//! synthetic two-domain dataset.

pub mod align;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod core;
pub mod data_synth;
pub mod detector;
pub mod dynaug;
pub mod error;
pub mod eval;
pub mod img;
pub mod nn;
pub mod rng;
pub mod sup_losses;
pub mod teacher_student;
pub mod uncertainty;

pub use error::{Error, Result};
