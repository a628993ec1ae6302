//! Backward Riccati and Lyapunov integral equations for kernels parameterized
//! by a signed matrix measure on `[0, ∞)`.
//!
//! The central object is a two-argument matrix kernel `Γ_t(θ, τ)` solving, in
//! mild form,
//!
//! ```text
//! Γ_t(θ, τ) = ∫_t^T exp(-(θ+τ)(s-t)) R(Γ_s)(θ, τ) ds,      Γ_T = 0,
//! ```
//!
//! where all coupling between mean-reversion rates `θ` happens through
//! integrals against a measure `μ`. Such equations are the Riccati equations
//! of linear-quadratic control for stochastic Volterra dynamics whose
//! convolution kernel is the Laplace transform `K(t) = ∫ exp(-θt) μ(dθ)`;
//! the rough fractional kernel `t^{H-1/2}` is the canonical singular example.
//!
//! Everything here works on a discrete atom system (nodes `θ_k`, matrix
//! weights `w_k`), so `μ` is either given directly as atoms or obtained by
//! quadrature of a density. The solvers are:
//!
//! - [`lyapunov::solve_lyapunov`] — the linear equation, by an exponential
//!   integrator (default) or by Picard contraction sweeps (verification mode);
//! - [`riccati::solve_riccati_iterative`] — monotone iteration through a
//!   sequence of Lyapunov solves with feedback-updated coefficients;
//! - [`riccati::solve_riccati_direct`] — backward stepping on the nonlinear
//!   mild equation, used as a uniqueness cross-check;
//! - [`oracle`] — an independent dense RK4 integrator for atom systems;
//! - [`mcsim`] — Monte Carlo verification of the Lyapunov quadratic form via
//!   the lifted stochastic system.

pub mod config;
pub mod error;
pub mod field;
pub mod lyapunov;
pub mod mcsim;
pub mod measure;
pub mod numeric;
pub mod oracle;
pub mod riccati;

pub use error::{Error, Result};
pub use field::{KernelField, PsdCheckResult, TestFunction};
pub use measure::{DensityKind, DensityMeasureSpec, MeasureAtoms};
