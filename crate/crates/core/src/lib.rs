//! Automatic expert selection mixture-of-experts for joint multi-scenario,
//! multi-task ranking.
//!
//! The crate carries its own reverse-mode autodiff ([`tensor`]), the
//! KL-based selection rule ([`selection`]), the model and its baselines
//! ([`model`]), losses and Adam ([`objective`]), data handling ([`data`]),
//! metrics ([`eval`]) and the training loop ([`train`]).

pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod objective;
pub mod selection;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
