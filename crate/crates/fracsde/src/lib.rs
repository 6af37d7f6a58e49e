//! Numerical toolkit for degenerate stochastic differential equations driven by
//! fractional Brownian motion with Hurst parameter `H > 1/2`.
//!
//! The system under study couples a noiseless first component to a noisy second one,
//! $$ dX_t = (A X_t + B Y_t)\,dt, \qquad dY_t = \tilde b_t(X_t, Y_t)\,dt + \sigma(t)\,dB_t^H, $$
//! so the noise reaches `X` only through the coupling matrix `B`. The crate provides
//!
//! - singular-kernel quadrature for fractional Riemann-Liouville integrals, Weyl
//!   (Marchaud-form) derivatives, and the Volterra kernel operators `K_H`, `K_H*`,
//!   `K_H^{-1}` ([`frac_ops`], [`kernel`]),
//! - a Wiener-first fBm sampler through the kernel representation
//!   `B^H_t = ∫_0^t K_H(t,s) dW_s` with covariance validation ([`fbm`]),
//! - controllability machinery (matrix exponentials, Kalman rank, Gramians) and the
//!   bridge functions that steer a coupled trajectory into exact terminal
//!   coalescence ([`bridge`]),
//! - Euler schemes for the degenerate system, its coupled companion, and the
//!   pathwise variational equation ([`sde`]),
//! - three cross-validating estimators of the semigroup gradient
//!   `∇_v P_T f(z)`: the Malliavin/coupling weight, the pathwise derivative, and
//!   central finite differences with common random numbers ([`gradient`]),
//! - empirical probes of Wang-type Harnack and log-Harnack inequalities
//!   ([`harnack`]).
//!
//! Everything is deterministic given a master seed: per-path generators are
//! independent counter-based streams, and Monte Carlo reductions run in a fixed
//! order.

pub mod bridge;
pub mod error;
pub mod fbm;
pub mod frac_ops;
pub mod gradient;
pub mod grid;
pub mod harnack;
pub mod kernel;
pub mod model;
pub mod sde;

pub use error::Error;
pub use fbm::{covariance_rh, sample_wiener, wiener_to_fbm, NoisePair};
pub use frac_ops::Hurst;
pub use grid::{holder_norm, Path, SeedSpec, TimeGrid};
pub use kernel::VolterraKernels;
pub use model::DegenerateModel;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
