//! Test-time adaptation of pixel-based control policies to camera-view shifts.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: tape-based reverse-mode AD with the handful of primitives the
//!   networks need, Adam, and a finite-difference gradient checker.
//! - [`nn`]: conv encoders, MLP heads and spatial-transformer blocks.
//! - [`world`]: a 2D reach task rendered through an affine camera, plus the
//!   camera perturbation settings and a scripted expert.
//! - [`agent`]: pretraining of encoder, latent dynamics, policy and inverse
//!   dynamics heads on expert data, and plain evaluation.
//! - [`adapt`]: the spatial adaptive encoder and reward-free test-time
//!   adaptation against the frozen dynamics model, plus baselines.
//! - [`bench`]: run configuration, result CSVs, summary tables and the
//!   gradient-check suite used by the command-line tool.

pub mod autodiff;
pub mod nn;
pub mod world;
pub mod agent;
pub mod adapt;
pub mod bench;
