//! Empty-car routing in closed ridesharing networks.
//!
//! A market of `r` regions and `N` cars: passengers arrive at region `i` at rate
//! `N * lambda_i`, travel to `j` with probability `P_ij` at rate `mu_ij`, and
//! dropped-off cars are repositioned by an empty-car routing policy `Q`.
//!
//! * [`fluid_opt`] solves the fluid LP for an optimal static routing and builds lookahead policies.
//! * [`equilibrium`] computes the fluid equilibrium for a given static `Q`.
//! * [`fluid_ode`] integrates the fluid dynamics and tracks convergence.
//! * [`mva`] gives exact finite-`N` availabilities by mean value analysis.
//! * [`simulator`] runs the exact Markov chain under static and state-dependent policies.
//! * [`fleet_sizing`] finds the minimal fluid fleet for perfect availability.

pub mod equilibrium;
pub mod experiments;
pub mod fleet_sizing;
pub mod fluid_ode;
pub mod fluid_opt;
pub mod linprog;
pub mod model;
pub mod mva;
pub mod simulator;

pub use model::{
    builtin_scenario, FluidState, Matrix, NetworkParams, RoutingMatrix, Scenario, Schedule,
    SystemState, TravelTimeMode,
};
