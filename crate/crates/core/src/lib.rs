//! Online reinforcement learning with flow-matching policies.
//!
//! The actor is a velocity field integrated from Gaussian noise to an action
//! ([`flow`]). It is trained to maximize the current-policy critic while a
//! value-weighted conditional flow-matching term pulls it toward the best
//! behavior found in the replay buffer ([`trainer`]). Behavior-optimal values
//! come from expectile regression ([`value`]). [`verify`] holds brute-force
//! oracles for the transport bound and the reweighting identity.

pub mod env;
pub mod error;
pub mod flow;
pub mod nn;
pub mod par;
pub mod replay;
pub mod trainer;
pub mod value;
pub mod verify;

pub use error::{Error, Result};
