//! Angular droop control of networked DC/AC converters.
//!
//! * [`netgraph`]: network topology, incidence and Laplacian operators.
//! * [`reduced`]: integrator angle model, angular droop law, value function
//!   and the optimality identities it satisfies.
//! * [`linear`]: linearized angular/frequency droop, LQR correspondence and
//!   angle-coherence (squared H2) metrics.
//! * [`converter`]: averaged three-phase converter network in the
//!   alpha-beta frame closed with the practical angular droop controller.
//! * [`sim`]: fixed-step RK4 engine, trajectories and settling metrics.
//!
//! All numerics are generic over [`Scalar`] (`f32` or `f64`); the `*64`
//! aliases below fix the double-precision instantiation used by the CLI.

pub mod converter;
pub mod error;
pub mod linear;
pub mod netgraph;
pub mod reduced;
pub mod scalar;
pub mod sim;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type NetworkGraph64 = netgraph::NetworkGraph<f64>;
pub type NetworkGraph32 = netgraph::NetworkGraph<f32>;
pub type ReducedSystem64 = reduced::ReducedSystem<f64>;
pub type ReducedSystem32 = reduced::ReducedSystem<f32>;
pub type SteadyState64 = reduced::SteadyState<f64>;
pub type LinearizedSystem64 = linear::LinearizedSystem<f64>;
pub type LinearizedSystem32 = linear::LinearizedSystem<f32>;
pub type ConverterNetworkParams64 = converter::ConverterNetworkParams<f64>;
pub type ConverterNetworkState64 = converter::ConverterNetworkState<f64>;
pub type Trajectory64 = sim::Trajectory<f64>;
