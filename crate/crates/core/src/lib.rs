//! Synthesis, simulation and verification of time-varying Luenberger and
//! switching observers for triangular systems whose coupling powers are odd,
//! so the linearization at the origin carries no output information.
//!
//! The crate is organized bottom-up:
//!
//! * [`expr`] — the scalar expression mini-language used for the system data
//!   (drift terms, coupling coefficients, completeness bound, decay profile),
//!   with exact symbolic differentiation and conservative box extrema.
//! * [`linalg`] — small dense symmetric kernels (Cholesky, LU determinant,
//!   Jacobi eigenvalues) sized for the `n × n` gain matrices.
//! * [`timefn`] — C¹ scalar functions of time with derivative propagation,
//!   built from closed forms or monotone cubic interpolants.
//! * [`system`] — the triangular plant, its output-substituted vector field,
//!   the divided-difference polynomials `b_m` and the factor map.
//! * [`envelopes`] — validated scalar envelopes: decay profile, completeness
//!   bound, partial-derivative bound and coupling floor.
//! * [`synthesis`] — the inductive gain construction producing a full
//!   [`synthesis::GainSchedule`].
//! * [`observer`] — the fixed-ball observer right-hand side and the switching
//!   plan (times, gains, saturation radii, per-segment schedules).
//! * [`sim`] — fixed-step RK4 co-integration with a step-stability probe,
//!   trajectories and run reports.
//! * [`verify`] — the sampling-based invariant suite with negative-control
//!   fixtures.
//!
//! `no_std` compatible (requires `alloc`); all floating-point transcendentals
//! go through [`fmath`] so results are identical across feature sets.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod envelopes;
pub mod expr;
pub mod fmath;
pub mod linalg;
pub mod observer;
pub mod rng;
pub mod sim;
pub mod synthesis;
pub mod system;
pub mod timefn;
pub mod verify;

pub use expr::{Expression, ScalarField};
pub use synthesis::GainSchedule;
pub use system::TriangularSystem;
