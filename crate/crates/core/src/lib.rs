//! Camera-conditioned rotary attention.
//!
//! The crate is organised bottom-up:
//!
//! - [`geometry`]: SE(3) camera poses, pinhole intrinsics, Plücker ray maps,
//!   per-frame trajectory generators and relative pose error metrics.
//! - [`rope`]: frequency schedule, 1D and 3D rotary fields, rotation of token
//!   tensors.
//! - [`roce`]: camera phase networks, phase fields and the camera-conditioned
//!   attention operator with its analytic backward pass.
//! - [`oracle`]: slow complex-domain reference evaluations used by the checks.
//! - [`flow`]: rectified-flow interpolant, flow-matching loss, Euler sampler.
//! - [`toymodel`]: synthetic blob scenes, a two-block transformer and the
//!   training / evaluation harness.
//! - [`cli`]: the `retake` command line front end.

pub mod checks;
pub mod cli;
pub mod flow;
pub mod geometry;
pub mod nn;
pub mod oracle;
pub mod roce;
pub mod rope;
pub mod scalar;
pub mod tensor_io;
pub mod toymodel;

pub use scalar::Real;
