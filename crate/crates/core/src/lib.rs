//! Off-policy learning for large-action contextual bandits.
//!
//! The library implements a two-stage learning algorithm that decomposes an
//! overall policy into a cluster-selection (first-stage) policy trained by
//! policy gradient and a within-cluster action-selection (second-stage) policy
//! derived from pairwise reward regression. Alongside it come the classic
//! policy-gradient baselines (IPS, DR, selective IPS), a fully seeded
//! synthetic environment, closed-form bias/variance oracles for the gradient
//! estimators, and an experiment harness with CSV reporting.

pub mod adam;
pub mod env;
pub mod error;
pub mod estimators;
pub mod experiment;
pub mod mlp;
pub mod oracle;
pub mod policy;
pub mod reward;
pub mod scalar;
pub mod trainer;

/// Scalar type used by the environment, estimators and experiment layers.
/// The numeric kernels in [`mlp`] and [`adam`] are generic over [`scalar::Scalar`].
pub type Real = f64;

/// Flat parameter-space gradient, aligned with [`mlp::Mlp::params`].
pub type GradientVector = Vec<Real>;

pub use error::{OplError, Result};

/// Derive an independent stream seed from a master seed (splitmix64 mix).
/// Used wherever replications, sweep cells or epochs need decorrelated RNG
/// streams that stay reproducible from one master seed.
pub fn mix_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
