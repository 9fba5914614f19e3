//! Volumetric segmentation with multi-resolution 3D convolutional networks.
//!
//! The crate is organised bottom-up:
//!
//! * [`volume`] holds image/label grids, normalization, patch extraction and
//!   the `VSEG1` file format.
//! * [`archspec`] describes networks as layer graphs and analyses them
//!   (receptive fields, parameter counts, activation memory).
//! * [`netexec`] executes a graph on the CPU: forward, loss and backward.
//! * [`sampling`], [`training`] and [`inference`] implement class-balanced
//!   patch sampling, the patch-based training loop and tiled dense
//!   segmentation.
//! * [`metrics`] computes Dice/precision/recall over tumor regions.
//! * [`phantom`] generates synthetic multi-modal volumes with known labels.

pub mod archspec;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod netexec;
pub mod phantom;
pub mod sampling;
pub mod training;
pub mod volume;

mod par;

pub use error::{Error, Result};

/// Number of worker threads for parallel kernels. Results are identical
/// for every thread count.
pub use par::configure_workers;

/// Number of input modalities (T1, T1c, T2, FLAIR).
pub const IN_CHANNELS: usize = 4;

/// Number of label classes: background plus four tumor structures.
pub const NUM_CLASSES: usize = 5;
