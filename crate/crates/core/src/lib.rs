//! Neural samplers for unnormalized Boltzmann densities.
//!
//! A curve of energies `f_t` joins a simple latent density to the target
//! `exp(-f_D)`. Networks are fitted so that the curve and a velocity field
//! satisfy the continuity equation pointwise; samples then come from
//! integrating the velocity field, with exact divergence tracking for
//! importance weights.
//!
//! Three curves are supported (see [`interpolations::Kind`]): the linear
//! blend of energies, the learned blend with a network correction, and the
//! gradient-flow curve whose velocity follows from the energy itself.
//! [`analytic`] holds an exact 1D example of why the linear blend can need
//! unbounded velocities.

pub mod analytic;
pub mod diffengine;
pub mod error;
pub mod interpolations;
pub mod metrics;
pub mod odeint;
pub mod targets;
pub mod training;

pub use diffengine::{Mlp, Tape};
pub use error::{Error, Result};
pub use interpolations::{FlowModel, Kind, VpSchedule};
pub use metrics::MetricsReport;
pub use odeint::{AugmentedState, NanPolicy, SolverConfig, SolverMethod};
pub use targets::{EnergyTarget, TargetSpec};
pub use training::{TrainConfig, TrainOutcome};
