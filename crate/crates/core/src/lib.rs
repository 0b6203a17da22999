//! Model-free design of two-degree-of-freedom PI controllers for noisy MIMO
//! LTI plants.
//!
//! The crate is organised bottom-up:
//!
//! * [`linmath`]: matrix exponential, Van Loan discretization, Lyapunov
//!   solvers, pseudo-inverse and sphere sampling.
//! * [`plant`]: the continuous-time plant, the 2DOF PI law, equilibria and an
//!   exact sampled simulator of the stochastic closed loop.
//! * [`blackbox`]: the rollout interfaces through which the model-free
//!   algorithms see a plant.
//! * [`oracle`]: model-knowing ground truth (cost, gradient, moments).
//! * [`feedforward`]: equilibrium-input estimation from closed-loop data and
//!   the horizon bound calculator.
//! * [`tuner`]: two-point zeroth-order gradient estimation and projected
//!   gradient descent over a product of Frobenius balls.
//! * [`baseline`]: the model-based comparison (ZOH, Ho-Kalman, discrete
//!   projected gradient).
//! * [`experiment`]: metrics and the end-to-end comparison harness.

// Negated float comparisons deliberately treat NaN as failure.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baseline;
pub mod blackbox;
pub mod error;
pub mod experiment;
pub mod feedforward;
pub mod linmath;
pub mod oracle;
pub mod plant;
pub mod rng;
pub mod tuner;

pub use error::{Error, Result};
pub use linmath::{Matrix, Vector};
pub use plant::{AugmentedClosedLoop, Equilibrium, InitialState, LtiPlant, PiGain, RolloutSample};
pub use tuner::{ConstraintBox, PgdConfig, TuneTrace, ZoConfig};
