//! Learning state observers for nonlinear systems with Neural ODEs.
//!
//! Two observer families are provided: a Luenberger-like observer that
//! learns the unknown part of partially known dynamics, and a KKL observer
//! that jointly learns a diagonal Hurwitz latent matrix and the inverse
//! immersion mapping latent states back to the original state space.

pub mod cli;
pub mod error;
pub mod eval;
pub mod integrate;
pub mod net;
pub mod observer;
pub mod systems;
pub mod train;

pub use error::{Error, Result};
