//! Truncated sequential neural posterior estimation (TSNPE).
//!
//! This crate implements simulation-based inference with truncated proposals:
//! a conditional density estimator q(θ|x) is trained by maximum likelihood on
//! pooled simulations, and each round's proposal is the prior restricted to
//! the current estimator's ε-highest-probability region at the observation.
//! Because every proposal is a renormalized restriction of the prior, the
//! pooled training data stays proportional to the prior on the region that
//! matters, and plain maximum likelihood remains a valid training target in
//! every round — no importance weights, no atomic classification loss, and no
//! posterior mass leaking outside the prior support.
//!
//! A short run, end to end:
//!
//! ```
//! use tsnpe_core::engine::{run, RunConfig};
//!
//! let mut cfg = RunConfig::new("toy1d", 42)?;
//! cfg.rounds = 2;
//! cfg.sims_per_round = 150;
//! cfg.epsilon = 0.05;
//! cfg.threshold_draws = 1000;
//! cfg.train.max_epochs = 30;
//! cfg.train.batch_size = 50;
//!
//! let outcome = run(&cfg, None, false)?;
//! assert_eq!(outcome.record.rounds.len(), 2);
//! let proposal = outcome.proposal.expect("final truncated proposal");
//! let (draws, _stats) = proposal.sample_batch(64, cfg.seed, &[99])?;
//! assert!(draws.iter().all(|t| proposal.contains(t).unwrap()));
//! # Ok::<(), tsnpe_core::Error>(())
//! ```

pub mod density;
pub mod diagnostics;
pub mod engine;
mod error;
pub mod nn;
pub mod seed;
pub mod tasks;
pub mod truncation;

pub use density::{
    Conditioned, DensityEstimator, Ensemble, FittedEstimator, Standardizer, TrainConfig,
};
pub use engine::{
    coverage_of_run, posterior_view, run, CoverageConfig, CoverageStrategy, Method,
    MetricsConfig, RunConfig, RunOutcome, RunRecord,
};
pub use error::{Error, Result};
pub use tasks::{InvalidPolicy, Prior, Task};
pub use truncation::{SamplerMethod, TruncatedProposal};
