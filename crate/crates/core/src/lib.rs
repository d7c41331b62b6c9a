//! Second-order BSDEs with jumps on finite filtered probability trees.
//!
//! The crate builds trees and kernel families ([`lattice`]), computes
//! characteristics, orthogonal decompositions and contraction constants
//! ([`calculus`]), solves single-measure and reflected BSDEs ([`bsde`]),
//! builds the second-order value function and its decomposition
//! ([`twobsde`]) and verifies robust control problems ([`control`]).

pub mod bsde;
pub mod calculus;
pub mod control;
pub mod error;
pub mod generator;
pub mod lattice;
pub mod random;
pub mod scenario;
pub mod twobsde;

pub use error::{Error, Result};
