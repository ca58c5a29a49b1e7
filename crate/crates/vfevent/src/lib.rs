//! Few-shot visually-fused event detection.
//!
//! A dual-modality event classifier trained episodically (N+1-way K-shot,
//! with a distinguished "none" class) over fused text and image embeddings,
//! paired with a text-conditioned diffusion image synthesizer that can be
//! customized on an episode's support images and used to "imagine" a visual
//! context for text-only queries at inference time. Everything is seeded and
//! deterministic: same inputs, same bytes out.

pub mod checkpoint;
pub mod classifier;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod imaginator;
pub mod inference;
pub mod model;
pub mod optim;
pub mod params;
pub mod seeding;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
