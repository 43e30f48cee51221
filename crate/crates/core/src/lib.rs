//! Overfitted MAML linear regression with Gaussian features.
//!
//! The crate covers the whole pipeline: sampling tasks from the generative
//! model, assembling the stacked meta system `(B, γ)`, solving for the
//! minimum-norm / ideal / least-squares meta parameters, evaluating the
//! closed-form expectations and high-probability bounds, and running seeded
//! Monte-Carlo sweeps over the feature count `p`.
//!
//! Module map:
//!
//! * [`task_gen`] – configuration, truths, training batches and test tasks.
//! * [`maml`] – meta system assembly, meta loss and one-step adaptation.
//! * [`solvers`] – min-ℓ2 interpolator, ideal interpolator, least squares and
//!   the Term 1 / Term 2 split of the model error.
//! * [`bounds`] – closed-form expectations and the bound stack.
//! * [`experiments`] – replicate engine, sweeps, audits and tightness tables.
//! * [`config`], [`output`], [`cli`] – JSON configs, CSV schema and commands.

pub mod bounds;
pub mod cli;
pub mod config;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod maml;
pub mod output;
pub mod rng;
pub mod solvers;
pub mod stats;
pub mod task_gen;

pub use error::{Error, Result};
