//! Mean-field residual networks as interacting particle systems.
//!
//! A depth-`n` ResNet is represented as `n` particles `(θ_i, τ_i)`: each
//! particle is a residual block `σ(θx)` and its time stamp `τ`. Sorting the
//! particles by `τ` fixes the block order and the gaps between consecutive
//! `τ` values become the Euler step sizes of the forward ODE. Gradients with
//! respect to both `θ` and `τ` come from the exact discrete adjoint, and
//! training re-sorts the particles after every update.
//!
//! Modules:
//! - [`numerics`]: dense linear algebra, activations, seeded randomness.
//! - [`ensemble`]: particles, sorting, clamping, exact W₂ between ensembles.
//! - [`dynamics`]: forward Euler pass, adjoint pass, parameter gradients.
//! - [`training`]: momentum SGD over `(θ, τ)` with per-step re-sorting.
//! - [`diagnostics`]: executable checks of stability, adjoint bounds,
//!   shallow expansions, descent directions, homogeneity and gradients.
//! - [`data`]: teacher-student datasets and CSV I/O.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod data;
pub mod diagnostics;
pub mod dynamics;
pub mod ensemble;
pub mod error;
pub mod numerics;
pub mod training;

pub use dynamics::{
    AdjointTrajectory, GradientRecord, ModelConfig, Reduction, Sample, StepRule, TailMode,
    Trajectory,
};
pub use data::{Dataset, TeacherSpec};
pub use ensemble::{Ensemble, Particle, ProductMetric, TransportPlan};
pub use error::{Error, Result};
pub use numerics::{Activation, Matrix, RngState, SeededRng, Vector};
pub use training::{EpochRecord, Mode, TauInit, TrainConfig, TrainState};

