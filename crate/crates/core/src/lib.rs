//! Marked temporal point processes with neural spectral influence kernels.
//!
//! The conditional intensity of an event at `x = (t, m)` is
//! `λ(x) = μ + Σ_{x' ∈ H_t} k(x', x)`, where the influence kernel `k` is one of
//! three families (see [`kernel`]). Kernels are fitted by maximizing the
//! point-process log-likelihood with a Monte-Carlo estimate of the
//! compensator, and sequences are generated by thinning.

pub mod checkpoint;
pub mod domain;
pub mod evaluator;
pub mod intensity;
pub mod io;
pub mod kernel;
pub mod likelihood;
pub mod net;
pub mod optim;
pub mod par;
pub mod rng;
pub mod simulator;
pub mod trainer;

pub use domain::{normalize_dataset, validate_sequence, Affine, Dataset, Domain, EventPoint, EventSequence};
