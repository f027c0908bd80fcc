//! Risk-averse optimal stopping with nested coherent risk measures.
//!
//! Modules, bottom up:
//! - [`risk`]: one-step risk measures on finite distributions.
//! - [`lattice`]: random-walk state models, increment discretization, path sampling.
//! - [`tree`]: finite filtration trees and Markov lattices.
//! - [`snell`]: risk-averse Snell envelopes, stopping times, enumeration oracle.
//! - [`lab`]: nested preference systems and randomized property checks.
//! - [`amput`]: grid dynamic programming for American (basket) puts.
//! - [`sddp`]: cutting-plane solver for the discretized stopping problem.
//! - [`cli`]: command implementations behind the `riskstop` binary.

pub mod amput;
pub mod cli;
pub mod error;
pub mod lab;
pub mod lattice;
pub mod risk;
pub mod sddp;
pub mod snell;
pub mod tree;

pub use error::{Error, Result};
