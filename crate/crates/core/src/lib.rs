//! Neuron-level unlearning for a toy dual-branch multimodal model.
//!
//! Pipeline: generate a synthetic profile corpus ([`datagen`]), train a small
//! model ([`model`]), score neurons by how much they carry the forget set
//! ([`attribution`]), walk a path of such neurons layer by layer
//! ([`pathfinder`]), then prune and re-steer them ([`editor`]). [`baselines`]
//! and [`evalkit`] supply the comparison methods and metrics.

pub mod error;
pub mod diffcore;
pub mod datagen;
pub mod model;
pub mod optim;
pub mod attribution;
pub mod pathfinder;
pub mod editor;
pub mod baselines;
pub mod evalkit;
pub mod pipeline;
pub mod cli;

pub use error::{Error, Result};
