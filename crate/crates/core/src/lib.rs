//! Recurrent residual attention (RRA) cells: an LSTM whose output reads the
//! memory cell plus a normalized, learned mix of the `K` hidden states that
//! precede `h_{t-1}`. Includes an LSTM baseline, exact back-propagation
//! through time checked against finite differences, optimizers, synthetic
//! and MNIST tasks, and a deterministic training harness.

pub mod cells;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod initializers;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod tasks;

pub use error::{Error, Result};
