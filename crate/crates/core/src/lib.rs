//! Discrete-sequence GAN laboratory comparing REINFORCE, REBAR and RELAX
//! gradient estimators on a synthetic arithmetic grammar.

pub mod error;
pub mod estimators;
pub mod grammar;
pub mod harness;
pub mod models;
pub mod ndgraph;
pub mod relaxation;

pub use error::{Error, Result};
