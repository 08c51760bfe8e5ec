//! Guide chapters compiled as doctests, one module per chapter so a failure
//! points at its source file.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/fourier.md")]
pub mod fourier {}
#[doc = include_str!("../../../book/src/masks.md")]
pub mod masks {}
#[doc = include_str!("../../../book/src/phantoms.md")]
pub mod phantoms {}
#[doc = include_str!("../../../book/src/network.md")]
pub mod network {}
#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}
#[doc = include_str!("../../../book/src/sgld.md")]
pub mod sgld {}
#[doc = include_str!("../../../book/src/posterior.md")]
pub mod posterior {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
