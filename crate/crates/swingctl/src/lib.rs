//! Stability-constrained learned frequency control for power grids whose
//! inertia switches among discrete modes.
//!
//! The crate covers the full pipeline:
//!
//! 1. [`grid`] — network Laplacian, per-mode swing dynamics and their
//!    exact zero-order-hold discretization.
//! 2. [`lyapunov`] — joint synthesis of a common quadratic Lyapunov
//!    function and a stabilizing linear gain valid in every inertia mode,
//!    plus certificate verification.
//! 3. [`lqr`] — finite-horizon LQR expert trajectories (with and without
//!    action box constraints) and dataset generation.
//! 4. [`policy`] — the combined controller `u = Kx + Π[π(x)]` with a
//!    closed-form projection onto the Lyapunov-decrease half-space, the
//!    box-constrained variant, and the inertia-mode estimator.
//! 5. [`train`] — iterative imitation learning of the neural residual and
//!    the `(K, P)` pair under an eigenvalue stability penalty, gated by
//!    post-training certificate verification.
//! 6. [`sim`] — switched-system rollouts, randomized scenario sampling
//!    and the evaluation metrics (settling time, overshoot, average
//!    cost).
//!
//! Run `cargo run --example evaluate` for an end-to-end comparison, or
//! use the `swingctl` binary for the staged pipeline with on-disk
//! artifacts. See the crate examples for each capability in isolation.

pub mod artifact;
pub mod cli;
pub mod error;
pub mod grid;
pub mod linalg;
pub mod lqr;
pub mod lyapunov;
pub mod mlp;
pub mod opt;
pub mod policy;
pub mod sim;
pub mod train;

pub use error::{Error, Result};
