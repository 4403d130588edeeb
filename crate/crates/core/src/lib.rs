//! Flow-matching ODE trajectories driven by exact closed-form denoisers.
//!
//! The crate works in the noise-to-signal parametrization `σ = β_t / α_t`,
//! where the flow-matching ODE reads `dx/dσ = -(m_σ(x) - x) / σ` with
//! `m_σ` the posterior-mean denoiser of the data distribution. Integration is
//! carried out in `λ = -ln σ`, where the same ODE becomes `dz/dλ = m(z) - z`.
//!
//! Modules:
//!
//! - [`schedule`]: scheduling functions, `t ↔ σ ↔ λ` conversions and the EDM grid.
//! - [`measure`]: weighted point clouds, Gaussian smoothing and synthetic generators.
//! - [`denoiser`]: posterior weights, the closed-form denoiser and its Jacobian.
//! - [`geometry`]: convex-hull distance, shrunk Voronoi cells, nearest-point gaps.
//! - [`integrate`]: fixed-grid Euler/Heun/RK4 integration and trajectory I/O.
//! - [`stages`]: closed-form stage thresholds and per-node trajectory reports.
//! - [`diagnostics`]: limit-theorem checks (rates, equivariance, memorization).

pub mod denoiser;
pub mod diagnostics;
pub mod error;
pub mod geometry;
pub mod integrate;
pub mod linalg;
pub mod measure;
pub mod schedule;
pub mod stages;

pub use denoiser::{Denoiser, DenoiserEval, PerturbedDenoiser};
pub use error::{Error, Result};
pub use integrate::{integrate, IntegrateOptions, Method, Trajectory};
pub use measure::{ClusterSpec, DiscreteMeasure, SmoothedMeasure};
pub use schedule::{Schedule, SigmaGrid};
