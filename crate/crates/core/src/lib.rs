//! Zero-shot text-guided video editing over space-time volumes.
//!
//! The crate is `no_std` (with `alloc`). It contains the numerical core only:
//!
//! - [`stvolume`]: the `(t, y, x, c)` video volume, its x-y / y-t / x-t slices,
//!   pixel permutation and overlapping-segment planning and blending.
//! - [`schedule`]: noise schedules and the per-step DDPM/DDIM mean and
//!   noise-extraction math.
//! - [`denoisers`]: the pluggable [`denoisers::Denoiser`] interface, the
//!   closed-form Gaussian MMSE denoiser, the toy U-Net, prompt embedding and
//!   classifier-free guidance.
//! - [`attention`]: self / extended attention, key-frame plans and the
//!   capture / injection cache.
//! - [`inflated`]: the combined frame + spatiotemporal-slice video denoiser.
//! - [`pipeline`]: volume inversion, sampling with injection and the full
//!   edit recipe (interpolation, segmentation, codec).
//! - [`metrics`]: Horn-Schunck flow, left-right masking, flow error and
//!   embedding consistency.
//! - [`experiments`]: denoiser MSE on frames vs slices vs permuted frames.
//!
//! File formats, configuration files and the command line live in the
//! `slicedit` companion crate.
//!
//! Enable the `parallel` feature to spread per-image work over a rayon pool.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod attention;
pub mod denoisers;
pub mod error;
pub mod experiments;
pub mod inflated;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod schedule;
pub mod stvolume;

mod math;
mod par;

pub use error::{Error, Result};
