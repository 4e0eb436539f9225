//! Multi-behavior sequential recommendation with Gaussian embeddings.
//!
//! Items, users, behaviors, positions and behavior-to-behavior relations are
//! all embedded as diagonal Gaussians. A bidirectional attention encoder
//! scores key/query pairs by (negative) squared 2-Wasserstein distance after
//! fusing in personalized behavior-relation impact factors, and is trained
//! with a cloze objective over masked positions.
//!
//! Crate layout:
//!
//! * [`gaussian`]   — the distribution type and closed-form fusion ops
//! * [`data`]       — TSV ingestion, sequence building, splits, masking,
//!   negative sampling, synthetic data
//! * [`params`]     — flat parameter store, model shapes, seeded init
//! * [`embedding`]  — table lookups and personalized behavior patterns
//! * [`tape`]       — minimal reverse-mode autodiff over `f64` vectors
//! * [`encoder`]    — the attention encoder forward pass (on the tape)
//! * [`train`]      — cloze loss, Adam, training loop, gradient checking
//! * [`eval`]       — leave-one-out ranking metrics and matrix export
//! * [`checkpoint`] — binary parameter serialization
//! * [`config`]     — `key = value` run configuration files

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gaussian;
pub mod params;
pub mod tape;
pub mod train;

pub use error::{PbatError, Result};
