//! Desk-scale laboratory for targeted adversarial attacks on polyphonic
//! sound event detection.
//!
//! The crate trains a small frame-level detector on synthetic polyphonic
//! scenes, generates adversarial audio that inserts ("mirage") or deletes
//! ("mute") events in chosen time/class regions while preserving the rest of
//! the output, and evaluates attacks and defenses with editing-precision
//! metrics.
//!
//! Module map:
//! - [`signal`]: waveforms, WAV I/O, SNR.
//! - [`diffgraph`]: tape-based reverse-mode autodiff and optimizers.
//! - [`features`]: differentiable log-mel frontend.
//! - [`model`]: the reference detection network, training, checkpoints.
//! - [`scenegen`]: deterministic labeled scene synthesis.
//! - [`attack`]: target formalism, perturbation optimization, baselines.
//! - [`metrics`]: edit counting and EP/ASR/UER/SNR reports.
//! - [`defense`]: input-transformation defenses and defended evaluation.
//! - [`experiment`]: config files, experiment commands, CSV reports.

pub mod attack;
pub mod defense;
pub mod diffgraph;
pub mod experiment;
pub mod features;
pub mod metrics;
pub mod model;
pub mod scenegen;
pub mod signal;
