//! Two-stage projection-domain tracer conversion.
//!
//! Stage one is a diffusion bridge that carries a tracer-A sinogram to a
//! coarse tracer-B estimate with a hybrid Euler–Maruyama / Heun sampler.
//! Stage two re-noises that estimate to an intermediate step and runs a
//! conditional denoising diffusion guided by a degraded copy of it.
//!
//! Module map:
//!
//! * [`phantom`]: synthetic paired phantoms, parallel-beam projection, FBP.
//! * [`schedules`]: bridge coefficients, the sampling grid, the DDPM schedule.
//! * [`nn`]: the small encoder–decoder denoiser, backprop, AdamW, checkpoints.
//! * [`bridge`]: stage-one training and sampling.
//! * [`refiner`]: degradation, stage-two training and sampling.
//! * [`metrics`]: PSNR, SSIM, NRMSE and profile lines.

// NaN-rejecting `!(x > 0.0)` checks are intentional.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod bridge;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod refiner;
pub mod rng;
pub mod schedules;
pub mod sino_io;

pub use error::{Error, Result};
pub use phantom::{Dataset, Geometry, ImageGrid, PhantomSpec, Sinogram, Variant};
pub use schedules::{BridgeSchedule, RefineSchedule};
