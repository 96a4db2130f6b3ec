//! Generative flows on directed graphs that may contain cycles.
//!
//! The crate covers edgeflows and their policies ([`flows`]), sampler-flow
//! and cycle analysis ([`analysis`]), the loss families with analytic
//! gradients ([`losses`]), tabular and MLP training ([`optim`], [`nnflow`]),
//! a Metropolis-Hastings baseline ([`baselines`]) and the experiment runner
//! behind the `cycleflow` binary ([`cli`]).

pub mod analysis;
pub mod baselines;
pub mod cli;
pub mod error;
pub mod flows;
pub mod graphs;
pub mod losses;
pub mod nnflow;
pub mod optim;
pub mod synthetic;

pub use error::{Error, Result};
