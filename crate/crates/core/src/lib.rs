//! Desk-scale benchmark of generative (diffusion/flow) priors against
//! variational regularization on linear inverse problems.
//!
//! Analytic Gaussian-mixture priors stand in for trained networks: the score,
//! the Tweedie denoiser, its Jacobian products and the flow velocity all have
//! closed forms, so every solver can be validated against exact oracles.
//!
//! Modules:
//! - [`image`]: dense grids and file formats,
//! - [`linops`]: forward operators with exact adjoints, FBP, norm estimation,
//! - [`priors`]: mixture priors, noise schedules, EM, synthetic phantoms,
//! - [`variational`]: TV and smooth variational solvers, CG, the data prox,
//! - [`diffusion`]: DDPM/DDIM and the DPS/DiffPIR/RED-diff/DMPlug solvers,
//! - [`pnpflow`]: flow-matching plug-and-play (explicit and implicit),
//! - [`metrics`]: PSNR/SSIM/data-consistency and the diameter estimator,
//! - [`bench`]: the experiment harness and its spec-file format.

pub mod bench;
pub mod diffusion;
pub mod error;
pub mod image;
pub mod linops;
pub mod metrics;
pub mod pnpflow;
pub mod priors;
pub mod variational;

pub use error::{Error, Result};
