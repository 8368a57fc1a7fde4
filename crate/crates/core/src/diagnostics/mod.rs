//! Calibration and quality diagnostics for fitted estimators.
//!
//! The centerpiece is expected-coverage calibration (`sbcc`): draw pairs
//! (θ*, x*) from a proposal and the simulator, and ask how much estimator
//! mass at x* has higher density than θ* itself. For a perfectly calibrated
//! estimator that fraction — the "e-value" of the pair — is uniform on
//! [0, 1], because θ* is a genuine posterior draw for x*. Each e-value is
//! itself estimated with a finite number of estimator draws, which makes the
//! whole procedure a rank statistic: the integer count behind an e-value is
//! exactly the rank of θ*'s log-density among the estimator draws'
//! log-densities. Deviations from uniformity localize the failure: e-values
//! piling up near 1 mean the estimator is overconfident (true parameters
//! land in its tails), near 0 underconfident.
//!
//! Everything here draws from derived per-row streams, so diagnostics are
//! reproducible and independent of worker count, like the rest of the crate.

mod c2st;

pub use c2st::c2st;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::density::DensityEstimator;
use crate::error::{Error, Result};
use crate::seed;
use crate::tasks::Prior;
use crate::truncation::{in_region, TruncatedProposal};

/// Number of grid points in a coverage curve (confidence 0.00 … 1.00).
pub const CURVE_POINTS: usize = 101;
/// Attempt multiplier before region-filtered estimator sampling gives up.
const FILTER_ATTEMPT_FACTOR: usize = 200;

/// A stochastic simulator as the calibration loop sees it: parameters and a
/// dedicated stream in, one data vector out.
pub type Simulator<'a> = dyn Fn(&[f64], &mut ChaCha8Rng) -> Result<Vec<f64>> + Sync + 'a;

/// A θ*-source for coverage calibration: either the raw prior or a
/// truncated proposal.
#[derive(Clone, Copy)]
pub enum ProposalRef<'a> {
    Prior(&'a Prior),
    Truncated(&'a TruncatedProposal),
}

impl ProposalRef<'_> {
    fn sample_batch(&self, n: usize, seed_root: u64, tags: &[u64]) -> Result<Vec<Vec<f64>>> {
        match self {
            ProposalRef::Prior(prior) => Ok((0..n)
                .map(|i| {
                    let mut row_tags = tags.to_vec();
                    row_tags.push(i as u64);
                    prior.sample(&mut seed::stream(seed_root, &row_tags))
                })
                .collect()),
            ProposalRef::Truncated(prop) => {
                prop.sample_batch(n, seed_root, tags).map(|(thetas, _)| thetas)
            }
        }
    }
}

/// Result of one coverage calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct Coverage {
    /// One e-value per calibration pair: the fraction of estimator draws at
    /// x* with log-density strictly above θ*'s.
    pub e_values: Vec<f64>,
    /// The integer counts behind the e-values (rank statistics).
    pub counts: Vec<u32>,
    /// Estimator draws per pair (the rank denominator).
    pub posterior_draws: u32,
    /// Empirical coverage at confidence levels 0.00, 0.01, …, 1.00. The
    /// endpoints are pinned to (0,0) and (1,1) — they are exact by
    /// definition, not estimates.
    pub curve: Vec<(f64, f64)>,
    /// Kolmogorov–Smirnov distance of the e-values from U(0, 1).
    pub ks: f64,
}

impl Coverage {
    /// Empirical coverage at one confidence level (linear in the curve grid).
    pub fn at(&self, confidence: f64) -> f64 {
        let c = confidence.clamp(0.0, 1.0) * (CURVE_POINTS - 1) as f64;
        let lo = c.floor() as usize;
        let hi = c.ceil() as usize;
        let frac = c - lo as f64;
        self.curve[lo].1 * (1.0 - frac) + self.curve[hi].1 * frac
    }

    /// Largest absolute deviation of the curve from the diagonal.
    pub fn max_deviation(&self) -> f64 {
        self.curve
            .iter()
            .map(|(c, v)| (c - v).abs())
            .fold(0.0f64, f64::max)
    }
}

/// Expected-coverage calibration of `estimator` against `simulate`.
///
/// θ* for row `i` comes from `proposals[r_i]` with `r_i` uniform over the
/// components (a single component means no mixing) — for multi-round
/// estimators, pass every round's proposal to calibrate against the pooled
/// training distribution, or only the latest to focus on the current region.
/// With `filter` set, estimator draws are rejection-filtered to the given
/// proposal's region before ranking, which restricts the calibration
/// question to the region the run actually relies on.
#[allow(clippy::too_many_arguments)]
pub fn sbcc(
    estimator: &dyn DensityEstimator,
    simulate: &Simulator<'_>,
    proposals: &[ProposalRef<'_>],
    filter: Option<&TruncatedProposal>,
    rows: usize,
    posterior_draws: usize,
    seed_root: u64,
    tags: &[u64],
) -> Result<Coverage> {
    if proposals.is_empty() {
        return Err(Error::Config("sbcc needs at least one proposal".into()));
    }
    if rows < 10 || posterior_draws < 10 {
        return Err(Error::Config(format!(
            "sbcc needs at least 10 rows and 10 draws per row, got {rows}/{posterior_draws}"
        )));
    }

    // Component assignment, then one batched draw per component so truncated
    // proposals pay their sampling setup once, not per row.
    let assignment: Vec<usize> = if proposals.len() == 1 {
        vec![0; rows]
    } else {
        (0..rows)
            .map(|i| {
                let mut rng = seed::stream(seed_root, &chain(tags, &[0, i as u64]));
                (rand::Rng::random_range(&mut rng, 0..proposals.len() as u64)) as usize
            })
            .collect()
    };
    let mut theta_stars: Vec<Vec<f64>> = vec![vec![]; rows];
    for (c, proposal) in proposals.iter().enumerate() {
        let idxs: Vec<usize> = (0..rows).filter(|i| assignment[*i] == c).collect();
        if idxs.is_empty() {
            continue;
        }
        let batch = proposal.sample_batch(idxs.len(), seed_root, &chain(tags, &[1, c as u64]))?;
        for (slot, theta) in idxs.into_iter().zip(batch) {
            theta_stars[slot] = theta;
        }
    }

    let filter_cond = match filter {
        Some(prop) => Some((prop, prop.conditioned()?)),
        None => None,
    };

    let counts: Vec<u32> = theta_stars
        .par_iter()
        .enumerate()
        .map(|(i, theta_star)| {
            let mut sim_rng = seed::stream(seed_root, &chain(tags, &[2, i as u64]));
            let x_star = simulate(theta_star, &mut sim_rng)?;
            let cond = estimator.condition(&x_star)?;
            let l_star = cond.log_prob(theta_star)?;
            let mut rng = seed::stream(seed_root, &chain(tags, &[3, i as u64]));
            let mut kept = 0usize;
            let mut above = 0u32;
            let mut attempts = 0usize;
            let cap = FILTER_ATTEMPT_FACTOR * posterior_draws;
            while kept < posterior_draws {
                attempts += 1;
                if attempts > cap {
                    return Err(Error::Sampler(format!(
                        "coverage row {i}: filtered estimator sampling accepted only \
                         {kept}/{posterior_draws} draws in {cap} attempts"
                    )));
                }
                let draw = cond.sample(&mut rng);
                if let Some((prop, fc)) = &filter_cond {
                    if !in_region(&prop.prior, fc.as_ref(), prop.threshold, &draw)? {
                        continue;
                    }
                }
                if cond.log_prob(&draw)? > l_star {
                    above += 1;
                }
                kept += 1;
            }
            Ok(above)
        })
        .collect::<Result<_>>()?;

    let e_values: Vec<f64> = counts
        .iter()
        .map(|c| *c as f64 / posterior_draws as f64)
        .collect();
    let curve = coverage_curve(&e_values);
    let ks = ks_uniform_statistic(&e_values);
    Ok(Coverage {
        e_values,
        counts,
        posterior_draws: posterior_draws as u32,
        curve,
        ks,
    })
}

fn chain(tags: &[u64], extra: &[u64]) -> Vec<u64> {
    let mut v = tags.to_vec();
    v.extend_from_slice(extra);
    v
}

/// Empirical coverage curve of a set of e-values on the standard grid.
/// Interior points count `e < c`; the endpoints are pinned to the exact
/// values (0,0) and (1,1).
pub fn coverage_curve(e_values: &[f64]) -> Vec<(f64, f64)> {
    let n = e_values.len() as f64;
    (0..CURVE_POINTS)
        .map(|i| {
            let c = i as f64 / (CURVE_POINTS - 1) as f64;
            if i == 0 {
                (0.0, 0.0)
            } else if i == CURVE_POINTS - 1 {
                (1.0, 1.0)
            } else {
                let below = e_values.iter().filter(|e| **e < c).count() as f64;
                (c, below / n)
            }
        })
        .collect()
}

/// One-sample Kolmogorov–Smirnov statistic against U(0, 1).
pub fn ks_uniform_statistic(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let hi = (i + 1) as f64 / n - v;
            let lo = v - i as f64 / n;
            hi.max(lo)
        })
        .fold(0.0f64, f64::max)
}

/// Asymptotic 1% critical value of the one-sample KS statistic.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.6276 / (n as f64).sqrt()
}

/// Fraction of the estimator's mass at `x_obs` outside the prior support,
/// estimated from `n` draws. This is the quantity truncation is designed to
/// pin at zero and unconstrained sequential schemes let grow.
pub fn leakage_fraction(
    estimator: &dyn DensityEstimator,
    x_obs: &[f64],
    prior: &Prior,
    n: usize,
    seed_root: u64,
    tags: &[u64],
) -> Result<f64> {
    if n == 0 {
        return Err(Error::Config("leakage estimate needs draws".into()));
    }
    let cond = estimator.condition(x_obs)?;
    let outside: u32 = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed::stream(seed_root, &chain(tags, &[i as u64]));
            let draw = cond.sample(&mut rng);
            u32::from(!prior.supports(&draw))
        })
        .sum();
    Ok(outside as f64 / n as f64)
}

/// Fraction of prior mass inside a proposal's region (its rejection
/// acceptance rate), from `n` prior draws.
pub fn prior_mass_in_region(
    prop: &TruncatedProposal,
    n: usize,
    seed_root: u64,
    tags: &[u64],
) -> Result<f64> {
    let cond = prop.conditioned()?;
    let hits: u32 = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed::stream(seed_root, &chain(tags, &[i as u64]));
            let theta = prop.prior.sample(&mut rng);
            in_region(&prop.prior, cond.as_ref(), prop.threshold, &theta).map(u32::from)
        })
        .sum::<Result<u32>>()?;
    Ok(hits as f64 / n as f64)
}

/// Fraction of the given posterior sample retained by a proposal's region.
/// Pass reference posterior draws to measure how much true posterior mass a
/// truncation step would discard.
pub fn posterior_retention(
    prop: &TruncatedProposal,
    posterior_draws: &[Vec<f64>],
) -> Result<f64> {
    let cond = prop.conditioned()?;
    crate::truncation::mass_in_region(
        &prop.prior,
        cond.as_ref(),
        prop.threshold,
        posterior_draws,
    )
}
