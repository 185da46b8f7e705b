//! Redundant end-to-end control of a simulated ground vehicle.
//!
//! Three Bayesian (Monte-Carlo-dropout) networks are imitation-trained on
//! distinct sensor channels from a receding-horizon DDP expert. At run time
//! the controller executes, each step, the prediction of the network with the
//! lowest combined (epistemic + aleatoric) predictive variance, so the vehicle
//! survives faults that would crash any individual network.
//!
//! The crate is organized around the pipeline stages:
//! - [`track`]: oval-track geometry, planar bicycle dynamics, crash and lap logic
//! - [`sensors`]: state / ray observation channels and fault injection
//! - [`expert`]: iLQG trajectory optimization run in MPC fashion
//! - [`nn`]: from-scratch MLPs with dropout, heteroscedastic loss, Adam
//! - [`ensemble`]: MC predictive sampling, variance decomposition, arbitration
//! - [`harness`]: configuration, data collection, training, closed-loop runs,
//!   and report emission

pub mod ensemble;
pub mod expert;
pub mod harness;
pub mod nn;
pub mod rng;
pub mod sensors;
pub mod track;
pub mod util;
