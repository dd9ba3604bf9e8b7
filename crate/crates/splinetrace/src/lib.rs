//! Guidewire shape estimation and navigation at desk scale.
//!
//! The pipeline in one sentence: a synthetic fluoroscopy renderer produces
//! grayscale images of a guidewire inside a 2D vessel phantom, a small
//! encoder/decoder transformer (trained with a from-scratch reverse-mode
//! autodiff engine) maps each image to a variable-length B-spline describing
//! the wire, and a kinematic navigation simulator uses that condensed spline
//! representation to drive a behavior-cloned steering policy.
//!
//! Modules map onto the stages:
//!
//! - [`bspline`] — exact B-spline geometry kernel (basis functions, curve
//!   evaluation, least-squares fitting of polylines, arc length)
//! - [`autodiff`] — dense-tensor reverse-mode autodiff with gradient checking
//!   and an Adam optimizer
//! - [`transformer`] — patch embedding, positional encoding, multi-head
//!   attention, and post-norm encoder/decoder stacks
//! - [`model`] — the full image-to-spline model: tip predictor, autoregressive
//!   token generation, spline assembly, attention maps
//! - [`loss`] — composite training objective (parameter MSE + end-of-sequence
//!   BCE + curve consistency)
//! - [`synthdata`] — procedural vessel maps, guidewire ground truth, renderer,
//!   and stratified dataset generation
//! - [`navsim`] — 2D navigation environment, scripted expert, behavior
//!   cloning, and the evaluation harness
//! - [`train`] — the teacher-forced training loop
//! - [`cli`] — subcommand implementations behind the `splinetrace` binary

pub mod autodiff;
pub mod bspline;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod image;
pub mod loss;
pub mod model;
pub mod navsim;
pub mod rng;
pub mod synthdata;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
