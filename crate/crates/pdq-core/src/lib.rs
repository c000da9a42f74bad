//! Planar pose-graph optimization with poses represented as unit planar
//! dual quaternions.
//!
//! A pose graph stores robot poses as nodes and relative odometry
//! measurements as edges. This crate measures edge errors with the
//! logarithm map of the dual-quaternion manifold `S¹ × ℝ²` and minimizes
//! the resulting weighted least-squares cost with a Riemannian
//! Gauss-Newton method: the gradient and approximate Hessian are
//! projected onto per-node tangent planes, the reduced sparse system is
//! solved by Cholesky factorization, and steps are retracted back to the
//! manifold through the exponential map.
//!
//! Module map:
//! - [`manifold`]: dual-quaternion arithmetic, tangent planes, log/exp maps.
//! - [`graph`]: pose-graph model plus g2o/TORO text parsing and writing.
//! - [`optimizer`]: edge errors, Jacobians, and the Gauss-Newton solver.
//! - [`chordal`]: chordal-relaxation initialization.
//! - [`init`]: odometry (sequential-edge) initialization.
//! - [`synth`]: synthetic noise injection and test fixture generation.
//! - [`metrics`]: reference cost and relative pose error evaluation.

pub mod chordal;
pub mod graph;
pub mod init;
mod linsys;
pub mod manifold;
pub mod metrics;
pub mod optimizer;
pub mod synth;


pub use manifold::{AmbientTangent, PlanarDualQuat, Tangent};

