//! Non-parametric Bayesian reconstruction of undersampled multi-coil MRI.
//!
//! An unrolled k-space network is trained with Adam on gradients perturbed
//! by Gaussian noise (stochastic gradient Langevin dynamics). The parameter
//! checkpoints saved after burn-in form a posterior ensemble; at inference
//! the ensemble's reconstructions are averaged for the image estimate and
//! their pixel-wise standard deviation serves as an uncertainty map.
//!
//! Modules, bottom-up:
//!
//! - [`fourier`]: centered orthonormal transforms and coil operators
//! - [`mask`]: undersampling patterns
//! - [`phantom`]: synthetic multi-coil slices and datasets
//! - [`net`]: the unrolled network with manual reverse-mode gradients
//! - [`metrics`]: SSIM (with gradient), PSNR, MSE, NMSE
//! - [`sgld`]: noisy-gradient Adam training and the checkpoint window
//! - [`posterior`]: ensemble inference and uncertainty analysis
//! - [`config`], [`cli`]: the `npbrec` command-line runner
// `!(x > 0.0)` is used on purpose: unlike `x <= 0.0` it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod binio;
pub mod cli;
pub mod config;
pub mod error;
pub mod fourier;
pub mod mask;
pub mod metrics;
pub mod net;
pub mod phantom;
pub mod posterior;
pub mod sgld;

pub use error::{Error, Result};

/// Derives an independent child seed from `(base, stream)` with a
/// SplitMix64 finalizer, so seeded streams never share state.
pub fn mix_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
