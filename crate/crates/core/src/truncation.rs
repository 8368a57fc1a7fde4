//! Highest-probability regions and truncated-prior proposals.
//!
//! The proposal for each round after the first is the prior restricted to
//! the estimator's ε-highest-probability region (HPR) at the observation:
//!
//! ```text
//! p̃(θ) ∝ p(θ) · 1[ log q(θ|x_o) > τ_ε ]
//! ```
//!
//! The threshold τ_ε is a Monte-Carlo order statistic: draw M samples from
//! q(·|x_o), evaluate their own log-densities, and take the ⌈εM⌉-th smallest.
//! By construction the region above the threshold holds ≈ 1−ε of the
//! estimator's mass, whatever shape that mass has — no density level search,
//! no assumption of unimodality.
//!
//! Two exact samplers for the truncated prior are provided:
//!
//! * **rejection** — draw from the prior, keep what lands in the region.
//!   Exact, embarrassingly parallel, but the acceptance rate decays as the
//!   region shrinks relative to the prior volume.
//! * **sampling–importance–resampling (SIR)** — draw K candidates from
//!   q(·|x_o) itself, weight by prior/estimator masked to the region, and
//!   keep one. The estimator concentrates exactly where the region is, so
//!   the cost per sample stays flat as truncation tightens.
//!
//! The default mode picks between them automatically: a cheap pilot
//! estimates the rejection acceptance rate, and if it falls below
//! [`SIR_FALLBACK_RATE`] the sampler switches to SIR for the batch.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::density::{Conditioned, DensityEstimator};
use crate::error::{Error, Result};
use crate::nn::logsumexp;
use crate::seed;
use crate::tasks::Prior;

/// Default number of estimator draws behind a threshold estimate.
pub const THRESHOLD_DRAWS: usize = 10_000;
/// Minimum number of draws accepted for a threshold estimate.
pub const THRESHOLD_DRAWS_MIN: usize = 1_000;
/// Default number of SIR candidates per retained sample.
pub const SIR_CANDIDATES: usize = 1024;
/// Rejection acceptance rate below which sampling switches to SIR.
pub const SIR_FALLBACK_RATE: f64 = 1e-3;
/// Prior draws spent estimating the rejection acceptance rate.
pub const ACCEPTANCE_PILOT_DRAWS: usize = 100_000;
/// Per-sample rejection attempts before the sampler gives up. With the SIR
/// fallback at 1e-3 this bound is ~100 expected waiting times, so hitting it
/// signals a bug or a vanished region, not bad luck.
pub const REJECTION_MAX_ATTEMPTS: usize = 100_000;
/// Full SIR candidate batches that may come back all-zero-weight before the
/// sampler concludes the region and the prior are disjoint.
pub const SIR_MAX_REDRAWS: usize = 100;

/// How to sample from the truncated prior.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMethod {
    /// Prior rejection sampling only; exhausting the per-sample attempt
    /// budget is an error.
    Rejection,
    /// Sampling–importance–resampling with this many candidates per sample.
    Sir { candidates: usize },
    /// Rejection, switching to SIR with [`SIR_CANDIDATES`] candidates when
    /// a pilot puts the acceptance rate below [`SIR_FALLBACK_RATE`].
    #[default]
    Auto,
}

/// Estimate the log-density threshold of the ε-HPR of `cond` from `m` of its
/// own draws: the ⌈εm⌉-th smallest log-density. Requires `m ≥ 1000` and
/// `⌈εm⌉ ≥ 1` so the order statistic is meaningful.
pub fn estimate_threshold(
    cond: &dyn Conditioned,
    epsilon: f64,
    m: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Config(format!(
            "epsilon must lie strictly in (0, 1), got {epsilon}"
        )));
    }
    if m < THRESHOLD_DRAWS_MIN {
        return Err(Error::Config(format!(
            "threshold estimation needs at least {THRESHOLD_DRAWS_MIN} draws, got {m}"
        )));
    }
    let k = (epsilon * m as f64).ceil() as usize;
    if k < 1 {
        return Err(Error::Config(format!(
            "epsilon {epsilon} with {m} draws leaves no draw below the threshold"
        )));
    }
    let mut logs = Vec::with_capacity(m);
    for i in 0..m {
        let theta = cond.sample(rng);
        let lq = cond.log_prob(&theta)?;
        if !lq.is_finite() {
            return Err(Error::Sampler(format!(
                "estimator produced non-finite log-density {lq} on its own draw {i}"
            )));
        }
        logs.push(lq);
    }
    let (_, tau, _) = logs.select_nth_unstable_by(k - 1, |a, b| a.partial_cmp(b).unwrap());
    Ok(*tau)
}

/// Region membership: inside the prior support and strictly above the
/// threshold.
pub fn in_region(
    prior: &Prior,
    cond: &dyn Conditioned,
    threshold: f64,
    theta: &[f64],
) -> Result<bool> {
    if !prior.supports(theta) {
        return Ok(false);
    }
    Ok(cond.log_prob(theta)? > threshold)
}

/// Fraction of `samples` lying in the region — used both for prior-mass
/// estimates (pass prior draws) and posterior-retention checks (pass
/// reference posterior draws).
pub fn mass_in_region(
    prior: &Prior,
    cond: &dyn Conditioned,
    threshold: f64,
    samples: &[Vec<f64>],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("mass_in_region needs samples".into()));
    }
    let hits: u32 = samples
        .par_iter()
        .map(|t| in_region(prior, cond, threshold, t).map(u32::from))
        .sum::<Result<u32>>()?;
    Ok(hits as f64 / samples.len() as f64)
}

/// Effective sample size 1/Σwᵢ² of normalized importance weights.
pub fn effective_sample_size(weights: &[f64]) -> Result<f64> {
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "effective_sample_size expects normalized weights, got sum {total}"
        )));
    }
    Ok(1.0 / weights.iter().map(|w| w * w).sum::<f64>())
}

/// Sampling statistics of one proposal batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProposalStats {
    /// Sampler that actually produced the batch (after any fallback).
    pub method: String,
    /// Rejection acceptance rate (accepted / attempted), when rejection ran.
    pub acceptance_rate: Option<f64>,
    /// Per-sample SIR effective sample sizes, when SIR ran.
    pub ess: Option<Vec<f64>>,
}

impl ProposalStats {
    pub fn ess_min(&self) -> Option<f64> {
        self.ess
            .as_ref()
            .map(|e| e.iter().cloned().fold(f64::INFINITY, f64::min))
    }

    pub fn ess_mean(&self) -> Option<f64> {
        self.ess
            .as_ref()
            .map(|e| e.iter().sum::<f64>() / e.len() as f64)
    }
}

/// The prior restricted to an estimator's ε-HPR at a fixed observation.
pub struct TruncatedProposal {
    pub prior: Prior,
    estimator: Arc<dyn DensityEstimator>,
    pub x_obs: Vec<f64>,
    pub threshold: f64,
    pub epsilon: f64,
    pub method: SamplerMethod,
}

impl TruncatedProposal {
    /// Build a proposal around an already-estimated threshold.
    pub fn new(
        prior: Prior,
        estimator: Arc<dyn DensityEstimator>,
        x_obs: Vec<f64>,
        threshold: f64,
        epsilon: f64,
        method: SamplerMethod,
    ) -> Result<TruncatedProposal> {
        if prior.dim() != estimator.theta_dim() {
            return Err(Error::dim(
                "truncated proposal",
                prior.dim(),
                estimator.theta_dim(),
            ));
        }
        if x_obs.len() != estimator.x_dim() {
            return Err(Error::dim(
                "truncated proposal observation",
                estimator.x_dim(),
                x_obs.len(),
            ));
        }
        Ok(TruncatedProposal {
            prior,
            estimator,
            x_obs,
            threshold,
            epsilon,
            method,
        })
    }

    /// Estimate the threshold from `m` estimator draws and build the
    /// proposal in one step.
    pub fn from_estimator(
        prior: Prior,
        estimator: Arc<dyn DensityEstimator>,
        x_obs: Vec<f64>,
        epsilon: f64,
        m: usize,
        method: SamplerMethod,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<TruncatedProposal> {
        let threshold = {
            let cond = estimator.condition(&x_obs)?;
            estimate_threshold(cond.as_ref(), epsilon, m, rng)?
        };
        Self::new(prior, estimator, x_obs, threshold, epsilon, method)
    }

    /// Membership test against this proposal's region.
    pub fn contains(&self, theta: &[f64]) -> Result<bool> {
        let cond = self.estimator.condition(&self.x_obs)?;
        in_region(&self.prior, cond.as_ref(), self.threshold, theta)
    }

    /// The estimator conditioned at this proposal's observation. Callers
    /// that test many points against the region should condition once here
    /// and use [`in_region`] directly.
    pub fn conditioned(&self) -> Result<Box<dyn Conditioned + '_>> {
        self.estimator.condition(&self.x_obs)
    }

    /// The underlying estimator.
    pub fn estimator(&self) -> &Arc<dyn DensityEstimator> {
        &self.estimator
    }

    /// Draw `n` samples. Sample `i` consumes only the stream
    /// `(seed_root, tags…, i)`, so batches are reproducible and independent
    /// of worker count; the acceptance pilot uses `(seed_root, tags…, n)`.
    pub fn sample_batch(
        &self,
        n: usize,
        seed_root: u64,
        tags: &[u64],
    ) -> Result<(Vec<Vec<f64>>, ProposalStats)> {
        if n == 0 {
            return Err(Error::Config("proposal batch size must be positive".into()));
        }
        let cond = self.estimator.condition(&self.x_obs)?;
        match self.method {
            SamplerMethod::Sir { candidates } => {
                self.sample_sir(cond.as_ref(), n, candidates, seed_root, tags)
            }
            SamplerMethod::Rejection => self.sample_rejection(cond.as_ref(), n, seed_root, tags),
            SamplerMethod::Auto => {
                let rate = self.pilot_acceptance(cond.as_ref(), n, seed_root, tags)?;
                if rate < SIR_FALLBACK_RATE {
                    let (thetas, mut stats) =
                        self.sample_sir(cond.as_ref(), n, SIR_CANDIDATES, seed_root, tags)?;
                    stats.acceptance_rate = Some(rate);
                    Ok((thetas, stats))
                } else {
                    self.sample_rejection(cond.as_ref(), n, seed_root, tags)
                }
            }
        }
    }

    /// Estimate the rejection acceptance rate from prior draws on a
    /// dedicated stream.
    fn pilot_acceptance(
        &self,
        cond: &dyn Conditioned,
        n: usize,
        seed_root: u64,
        tags: &[u64],
    ) -> Result<f64> {
        let mut pilot_tags = tags.to_vec();
        pilot_tags.push(n as u64);
        const CHUNK: usize = 500;
        let chunks = ACCEPTANCE_PILOT_DRAWS / CHUNK;
        let hits: u32 = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let mut chunk_tags = pilot_tags.clone();
                chunk_tags.push(c as u64);
                let mut rng = seed::stream(seed_root, &chunk_tags);
                let mut h = 0u32;
                for _ in 0..CHUNK {
                    let theta = self.prior.sample(&mut rng);
                    if in_region(&self.prior, cond, self.threshold, &theta)? {
                        h += 1;
                    }
                }
                Ok(h)
            })
            .sum::<Result<u32>>()?;
        Ok(hits as f64 / (chunks * CHUNK) as f64)
    }

    fn sample_rejection(
        &self,
        cond: &dyn Conditioned,
        n: usize,
        seed_root: u64,
        tags: &[u64],
    ) -> Result<(Vec<Vec<f64>>, ProposalStats)> {
        let results: Vec<(Vec<f64>, usize)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut row_tags = tags.to_vec();
                row_tags.push(i as u64);
                let mut rng = seed::stream(seed_root, &row_tags);
                for attempt in 1..=REJECTION_MAX_ATTEMPTS {
                    let theta = self.prior.sample(&mut rng);
                    if in_region(&self.prior, cond, self.threshold, &theta)? {
                        return Ok((theta, attempt));
                    }
                }
                Err(Error::Sampler(format!(
                    "rejection sampler exhausted {REJECTION_MAX_ATTEMPTS} attempts for one \
                     sample (threshold {:.3})",
                    self.threshold
                )))
            })
            .collect::<Result<_>>()?;
        let attempts: usize = results.iter().map(|(_, a)| a).sum();
        let thetas = results.into_iter().map(|(t, _)| t).collect();
        Ok((
            thetas,
            ProposalStats {
                method: "rejection".into(),
                acceptance_rate: Some(n as f64 / attempts as f64),
                ess: None,
            },
        ))
    }

    fn sample_sir(
        &self,
        cond: &dyn Conditioned,
        n: usize,
        candidates: usize,
        seed_root: u64,
        tags: &[u64],
    ) -> Result<(Vec<Vec<f64>>, ProposalStats)> {
        if candidates < 2 {
            return Err(Error::Config(format!(
                "SIR needs at least 2 candidates per sample, got {candidates}"
            )));
        }
        let results: Vec<(Vec<f64>, f64)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut row_tags = tags.to_vec();
                row_tags.push(i as u64);
                let mut rng = seed::stream(seed_root, &row_tags);
                for _ in 0..=SIR_MAX_REDRAWS {
                    let mut thetas = Vec::with_capacity(candidates);
                    let mut logw = Vec::with_capacity(candidates);
                    for _ in 0..candidates {
                        let theta = cond.sample(&mut rng);
                        // Importance weight of "truncated prior over
                        // estimator", in log space; zero outside the region.
                        let lw = if in_region(&self.prior, cond, self.threshold, &theta)? {
                            self.prior.log_density(&theta) - cond.log_prob(&theta)?
                        } else {
                            f64::NEG_INFINITY
                        };
                        thetas.push(theta);
                        logw.push(lw);
                    }
                    let norm = logsumexp(&logw);
                    if norm == f64::NEG_INFINITY {
                        continue; // every candidate missed the region
                    }
                    let weights: Vec<f64> =
                        logw.iter().map(|lw| (lw - norm).exp()).collect();
                    let ess = effective_sample_size(&weights)?;
                    let mut pick = rng.random::<f64>();
                    let mut chosen = candidates - 1;
                    for (j, w) in weights.iter().enumerate() {
                        if pick < *w {
                            chosen = j;
                            break;
                        }
                        pick -= w;
                    }
                    return Ok((thetas.swap_remove(chosen), ess));
                }
                Err(Error::Sampler(format!(
                    "SIR drew {SIR_MAX_REDRAWS} batches of {candidates} candidates without \
                     hitting the region — the estimator and the prior appear disjoint"
                )))
            })
            .collect::<Result<_>>()?;
        let ess: Vec<f64> = results.iter().map(|(_, e)| *e).collect();
        let thetas = results.into_iter().map(|(t, _)| t).collect();
        Ok((
            thetas,
            ProposalStats {
                method: "sir".into(),
                acceptance_rate: None,
                ess: Some(ess),
            },
        ))
    }
}
