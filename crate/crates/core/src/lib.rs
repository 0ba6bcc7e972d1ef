//! Numerical engine for depth from focus.
//!
//! The crate is `no_std` (it needs `alloc`) and performs no I/O. It covers the
//! full pipeline from a focal stack to a fused depth map:
//!
//! * [`synth`] renders physically parameterized focal stacks from an image and
//!   a depth map using circle-of-confusion disc blur with layered compositing.
//! * [`volume`] builds focal-difference augmented focus volumes and classical
//!   sharpness measures.
//! * [`surface`] holds the finite-difference operator and the regularized
//!   least-squares projection of gradient fields onto integrable surfaces.
//! * [`losses`] implements the training objective terms with analytic
//!   gradients, [`fusion`] turns focus logits into depth.
//! * [`solver`] jointly optimizes focus logits, gradient fields and the
//!   channel-fusion map by gradient descent; [`metrics`] scores the result.
//!
//! Companion crates supply file formats and the command-line frontend.
#![no_std]
#![warn(missing_debug_implementations)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod grid;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod rng;
pub mod scenes;
pub mod solver;
pub mod surface;
pub mod synth;
pub mod types;
pub mod volume;

pub use error::{Error, Result};
pub use grid::{Grid, Image};
pub use types::{DepthMap, FocalStack, FocusProbabilityMap};
