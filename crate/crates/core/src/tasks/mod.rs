//! Benchmark problems: priors, simulators, observations, reference posteriors.
//!
//! A [`Task`] bundles everything the inference engine needs to treat a
//! problem as a black box — a prior it can sample and evaluate, a stochastic
//! simulator, and a fixed observation — plus two things the engine never
//! touches but evaluation does: a tractable log-likelihood and a reference
//! posterior sampler. Keeping the likelihood out of the inference path is
//! the point of the exercise; keeping it *in* the repository is what makes
//! the benchmarks checkable.
//!
//! Observations are part of a task's identity, not of any run: observation
//! `k` is generated from a stream keyed by the task name and `k` alone, so
//! every run, method, and seed sees the same `x_o`. Index 0 of the 1-D toy
//! task is pinned to the canonical noise-free pair (θ* = 1.5, x_o = 2.25);
//! all other observations draw θ* from the prior and simulate once.

mod reference;
pub mod sims;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, phase};

/// Number of prior-predictive pilot draws used to calibrate invalid-output
/// replacement values.
pub const PILOT_DRAWS: usize = 10_000;

/// A prior over parameters. All tasks use one of these three shapes, which
/// is enough to make support checks and log-densities exact rather than
/// estimator-dependent.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum Prior {
    /// Uniform over an axis-aligned box.
    BoxUniform { lower: Vec<f64>, upper: Vec<f64> },
    /// Independent normals per dimension.
    DiagGaussian { mean: Vec<f64>, std: Vec<f64> },
    /// Uniform over a disjoint union of axis-aligned boxes
    /// (mass proportional to volume).
    UnionOfBoxes { boxes: Vec<(Vec<f64>, Vec<f64>)> },
}

impl Prior {
    pub fn dim(&self) -> usize {
        match self {
            Prior::BoxUniform { lower, .. } => lower.len(),
            Prior::DiagGaussian { mean, .. } => mean.len(),
            Prior::UnionOfBoxes { boxes } => boxes[0].0.len(),
        }
    }

    /// Natural per-dimension length scale, used to seed MCMC step widths.
    pub(crate) fn scales(&self) -> Vec<f64> {
        match self {
            Prior::BoxUniform { lower, upper } => {
                lower.iter().zip(upper).map(|(l, u)| u - l).collect()
            }
            Prior::DiagGaussian { std, .. } => std.iter().map(|s| 2.0 * s).collect(),
            Prior::UnionOfBoxes { boxes } => boxes[0]
                .0
                .iter()
                .zip(&boxes[0].1)
                .map(|(l, u)| u - l)
                .collect(),
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            Prior::BoxUniform { lower, upper } => lower
                .iter()
                .zip(upper)
                .map(|(l, u)| rng.random_range(*l..*u))
                .collect(),
            Prior::DiagGaussian { mean, std } => mean
                .iter()
                .zip(std)
                .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
                .collect(),
            Prior::UnionOfBoxes { boxes } => {
                let vols: Vec<f64> = boxes.iter().map(|(l, u)| box_volume(l, u)).collect();
                let total: f64 = vols.iter().sum();
                let mut pick = rng.random::<f64>() * total;
                let mut idx = 0;
                for (i, v) in vols.iter().enumerate() {
                    idx = i;
                    if pick < *v {
                        break;
                    }
                    pick -= v;
                }
                let (l, u) = &boxes[idx];
                l.iter()
                    .zip(u)
                    .map(|(l, u)| rng.random_range(*l..*u))
                    .collect()
            }
        }
    }

    /// Log-density; `-inf` outside the support.
    pub fn log_density(&self, theta: &[f64]) -> f64 {
        if !self.supports(theta) {
            return f64::NEG_INFINITY;
        }
        match self {
            Prior::BoxUniform { lower, upper } => -lower
                .iter()
                .zip(upper)
                .map(|(l, u)| (u - l).ln())
                .sum::<f64>(),
            Prior::DiagGaussian { mean, std } => theta
                .iter()
                .zip(mean.iter().zip(std))
                .map(|(t, (m, s))| {
                    let z = (t - m) / s;
                    -0.5 * z * z - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
                })
                .sum(),
            Prior::UnionOfBoxes { boxes } => {
                let total: f64 = boxes.iter().map(|(l, u)| box_volume(l, u)).sum();
                -total.ln()
            }
        }
    }

    /// Exact support membership (closed boxes; Gaussians support everything).
    pub fn supports(&self, theta: &[f64]) -> bool {
        if theta.len() != self.dim() {
            return false;
        }
        match self {
            Prior::BoxUniform { lower, upper } => theta
                .iter()
                .zip(lower.iter().zip(upper))
                .all(|(t, (l, u))| *t >= *l && *t <= *u),
            Prior::DiagGaussian { .. } => theta.iter().all(|t| t.is_finite()),
            Prior::UnionOfBoxes { boxes } => boxes.iter().any(|(l, u)| {
                theta
                    .iter()
                    .zip(l.iter().zip(u))
                    .all(|(t, (l, u))| *t >= *l && *t <= *u)
            }),
        }
    }

    /// The tightest axis-aligned box containing the support, if bounded.
    /// Used by estimators that transform into an unconstrained space.
    pub fn bounding_box(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        match self {
            Prior::BoxUniform { lower, upper } => Some((lower.clone(), upper.clone())),
            Prior::DiagGaussian { .. } => None,
            // A union is bounded but not a box; transforming to its bounding
            // box would put positive estimator mass in the gap, so callers
            // that need a box treat this as "no box".
            Prior::UnionOfBoxes { .. } => None,
        }
    }
}

fn box_volume(lower: &[f64], upper: &[f64]) -> f64 {
    lower.iter().zip(upper).map(|(l, u)| u - l).product()
}

type SimFn = fn(&[f64], &mut ChaCha8Rng) -> Vec<f64>;
type LikFn = fn(&[f64], &[f64]) -> f64;

/// A parameter involution θ ↦ g(θ) (its own inverse).
pub type Involution = fn(&[f64]) -> Vec<f64>;

/// One benchmark problem with a fixed observation.
pub struct Task {
    pub name: String,
    pub theta_dim: usize,
    pub x_dim: usize,
    pub prior: Prior,
    /// Parameter that generated the observation (recorded for evaluation).
    pub theta_star: Vec<f64>,
    /// The observation this task conditions on.
    pub x_obs: Vec<f64>,
    /// Which of the task's observations this instance carries.
    pub observation: u64,
    /// Training minibatch size suited to the problem scale.
    pub batch_size: usize,
    sim: SimFn,
    lik: LikFn,
}

impl Task {
    /// All registered task names, in canonical order.
    pub fn names() -> &'static [&'static str] {
        &[
            "toy1d",
            "linear_gaussian_uniform",
            "gaussian_linear",
            "two_moons",
            "slcp",
            "bernoulli_glm",
            "lotka_volterra",
            "sir_epidemic",
        ]
    }

    /// Instantiate a registered task with observation index `observation`.
    pub fn new(name: &str, observation: u64) -> Result<Task> {
        let (prior, sim, lik, batch_size): (Prior, SimFn, LikFn, usize) = match name {
            "toy1d" => (
                Prior::UnionOfBoxes {
                    boxes: vec![
                        (vec![-2.0], vec![-1.0]),
                        (vec![1.0], vec![2.0]),
                    ],
                },
                sims::toy1d,
                |t, x| {
                    let z = (x[0] - t[0] * t[0]) / sims::TOY1D_NOISE_STD;
                    -0.5 * z * z - sims::TOY1D_NOISE_STD.ln()
                        - 0.5 * (2.0 * std::f64::consts::PI).ln()
                },
                200,
            ),
            "linear_gaussian_uniform" => (
                Prior::BoxUniform {
                    lower: vec![-1.0; sims::LGU_DIM],
                    upper: vec![1.0; sims::LGU_DIM],
                },
                sims::linear_gaussian_uniform,
                |t, x| diag_gaussian_loglik(x, t, sims::LGU_NOISE_STD),
                200,
            ),
            "gaussian_linear" => (
                Prior::DiagGaussian {
                    mean: vec![0.0; sims::GL_DIM],
                    std: vec![sims::GL_PRIOR_VAR.sqrt(); sims::GL_DIM],
                },
                sims::gaussian_linear,
                |t, x| diag_gaussian_loglik(x, t, sims::GL_LIK_VAR.sqrt()),
                500,
            ),
            "two_moons" => (
                Prior::BoxUniform {
                    lower: vec![-1.0; 2],
                    upper: vec![1.0; 2],
                },
                sims::two_moons,
                sims::two_moons_log_likelihood,
                200,
            ),
            "slcp" => (
                Prior::BoxUniform {
                    lower: vec![-sims::SLCP_BOUND; sims::SLCP_DIM],
                    upper: vec![sims::SLCP_BOUND; sims::SLCP_DIM],
                },
                sims::slcp,
                sims::slcp_log_likelihood,
                200,
            ),
            "bernoulli_glm" => (
                Prior::DiagGaussian {
                    mean: vec![0.0; sims::GLM_DIM],
                    std: {
                        let mut s = vec![sims::GLM_PRIOR_STD_WEIGHT; sims::GLM_DIM];
                        s[0] = sims::GLM_PRIOR_STD_BIAS;
                        s
                    },
                },
                sims::bernoulli_glm,
                sims::bernoulli_glm_log_likelihood,
                500,
            ),
            "lotka_volterra" => (
                Prior::BoxUniform {
                    lower: sims::LV_PRIOR_LO.to_vec(),
                    upper: sims::LV_PRIOR_HI.to_vec(),
                },
                sims::lotka_volterra,
                sims::lotka_volterra_log_likelihood,
                200,
            ),
            "sir_epidemic" => (
                Prior::BoxUniform {
                    lower: sims::SIR_PRIOR_LO.to_vec(),
                    upper: sims::SIR_PRIOR_HI.to_vec(),
                },
                sims::sir_epidemic,
                sims::sir_log_likelihood,
                200,
            ),
            other => {
                return Err(Error::Config(format!(
                    "unknown task '{other}'; known tasks: {}",
                    Task::names().join(", ")
                )))
            }
        };

        // Fixed per-(task, observation) streams — intentionally independent
        // of any run seed so every method conditions on the same data.
        let root = sims::name_tag(name);
        let (theta_star, x_obs) = if name == "toy1d" && observation == 0 {
            (vec![sims::TOY1D_THETA_STAR], vec![sims::TOY1D_X_OBS])
        } else {
            let mut trng = seed::stream(root, &[phase::OBSERVATION, observation, 0]);
            let theta_star = prior.sample(&mut trng);
            let mut xrng = seed::stream(root, &[phase::OBSERVATION, observation, 1]);
            let x_obs = sim(&theta_star, &mut xrng);
            (theta_star, x_obs)
        };

        Ok(Task {
            name: name.to_string(),
            theta_dim: prior.dim(),
            x_dim: x_obs.len(),
            prior,
            theta_star,
            x_obs,
            observation,
            batch_size,
            sim,
            lik,
        })
    }

    /// Run the simulator once.
    pub fn simulate(&self, theta: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        if theta.len() != self.theta_dim {
            return Err(Error::dim("simulate", self.theta_dim, theta.len()));
        }
        Ok((self.sim)(theta, rng))
    }

    /// Exact log p(x | θ) of the given observation vector. Every registered
    /// task has a tractable likelihood by construction; the inference engine
    /// never calls this, evaluation code does.
    pub fn log_likelihood_at(&self, theta: &[f64], x: &[f64]) -> Result<f64> {
        if theta.len() != self.theta_dim {
            return Err(Error::dim("log_likelihood", self.theta_dim, theta.len()));
        }
        if x.len() != self.x_dim {
            return Err(Error::dim("log_likelihood x", self.x_dim, x.len()));
        }
        Ok((self.lik)(theta, x))
    }

    /// Exact log p(x_o | θ) at this task's own observation.
    pub fn log_likelihood(&self, theta: &[f64]) -> Result<f64> {
        self.log_likelihood_at(theta, &self.x_obs)
    }

    /// Unnormalized log posterior at the task's observation.
    pub fn log_posterior_unnormalized(&self, theta: &[f64]) -> Result<f64> {
        let lp = self.prior.log_density(theta);
        if lp == f64::NEG_INFINITY {
            return Ok(f64::NEG_INFINITY);
        }
        Ok(lp + self.log_likelihood(theta)?)
    }

    /// Draw `n` samples from the reference posterior at `x_obs`: closed form
    /// where the model is conjugate, MCMC with convergence checks otherwise.
    pub fn reference_posterior(&self, n: usize, seed_root: u64) -> Result<Vec<Vec<f64>>> {
        reference::reference_posterior(self, n, seed_root)
    }

    /// Parameter involutions that leave the posterior density invariant
    /// (used as extra MCMC moves so multimodal references mix across modes).
    pub fn symmetries(&self) -> Vec<Involution> {
        reference::symmetries(&self.name)
    }
}

impl std::fmt::Debug for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Task")
            .field("name", &self.name)
            .field("observation", &self.observation)
            .field("theta_dim", &self.theta_dim)
            .field("x_dim", &self.x_dim)
            .finish()
    }
}

/// Simulate one x per θ row. Each row uses the stream
/// `(seed_root, tags…, row)`, so the result is a pure function of the seed
/// and the θ matrix — never of worker count or scheduling.
pub fn simulate_batch(
    task: &Task,
    thetas: &[Vec<f64>],
    seed_root: u64,
    tags: &[u64],
) -> Result<Vec<Vec<f64>>> {
    thetas
        .par_iter()
        .enumerate()
        .map(|(i, theta)| {
            let mut row_tags = tags.to_vec();
            row_tags.push(i as u64);
            let mut rng = seed::stream(seed_root, &row_tags);
            task.simulate(theta, &mut rng)
        })
        .collect()
}

/// Replacement rule for non-finite simulator outputs.
///
/// Calibrated once per task from a fixed-seed pilot of prior predictive
/// draws: each output dimension's replacement value is
/// `min(finite pilot values) − 2·std(finite pilot values)`, i.e. clearly
/// outside the observed range so a density model can learn to separate
/// failures from data rather than interpolate through them.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct InvalidPolicy {
    pub replacement: Vec<f64>,
}

impl InvalidPolicy {
    /// Calibrate from the task's pilot stream (independent of run seeds).
    pub fn fit(task: &Task) -> Result<InvalidPolicy> {
        let root = sims::name_tag(&task.name);
        let thetas: Vec<Vec<f64>> = (0..PILOT_DRAWS)
            .map(|i| {
                let mut rng = seed::stream(root, &[phase::PILOT, 0, i as u64]);
                task.prior.sample(&mut rng)
            })
            .collect();
        let xs = simulate_batch(task, &thetas, root, &[phase::PILOT, 1])?;
        let mut replacement = Vec::with_capacity(task.x_dim);
        for d in 0..task.x_dim {
            let finite: Vec<f64> = xs
                .iter()
                .map(|row| row[d])
                .filter(|v| v.is_finite())
                .collect();
            if finite.is_empty() {
                return Err(Error::Sampler(format!(
                    "task '{}': output dimension {d} produced no finite pilot values",
                    task.name
                )));
            }
            let min = finite.iter().cloned().fold(f64::INFINITY, f64::min);
            let mean = finite.iter().sum::<f64>() / finite.len() as f64;
            let var =
                finite.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / finite.len() as f64;
            replacement.push(min - 2.0 * var.sqrt());
        }
        Ok(InvalidPolicy { replacement })
    }

    /// Replace non-finite entries in place. Returns one validity flag per
    /// row (`false` where anything was replaced).
    pub fn apply(&self, xs: &mut [Vec<f64>]) -> Vec<bool> {
        xs.iter_mut()
            .map(|row| {
                let mut ok = true;
                for (v, r) in row.iter_mut().zip(&self.replacement) {
                    if !v.is_finite() {
                        *v = *r;
                        ok = false;
                    }
                }
                ok
            })
            .collect()
    }
}

fn diag_gaussian_loglik(x: &[f64], mean: &[f64], std: f64) -> f64 {
    x.iter()
        .zip(mean)
        .map(|(xv, m)| {
            let z = (xv - m) / std;
            -0.5 * z * z - std.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
        })
        .sum()
}
