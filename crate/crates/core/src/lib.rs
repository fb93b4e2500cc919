//! Limit order book chain, its fluid limit and the tooling to compare them.
//!
//! - [`model`]: parameters, states and the `1/L` rescaling.
//! - [`markov`]: exact simulation of the discrete-time chain.
//! - [`fluid`]: the limiting ODE system and its RK4 integration.
//! - [`fixed_point`]: the stationary point via the monotone recursion.
//! - [`harness`]: ensemble studies of sup-distances at growing `L`.
//! - [`cli`]: config parsing, command dispatch and CSV/manifest output.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod fixed_point;
pub mod fluid;
pub mod harness;
pub mod markov;
pub mod model;

pub use fixed_point::{solve_fixed_point, FixedPointResult, FixedPointSolver, Regime};
pub use fluid::{find_fixed_point_by_integration, integrate, rhs, OdeSolution};
pub use markov::{RngStream, Sampler, StepBreakdown, Trajectory};
pub use model::{
    distance, rescale_params, rescale_state, validate_params, DiscreteParams, FluidState,
    LatticeState, ModelError, ModelParams, ScalingConfig,
};
