//! The shared training loop for both backends and both losses.
//!
//! Maximum likelihood minimizes −E[log q(θ|x)] over the batch. The atomic
//! classification loss instead scores the true θ against A−1 contrasting
//! atoms drawn from the same minibatch:
//!
//! ```text
//! ℓᵢ = −log softmax_k [ log q(θₖ|xᵢ) − log p(θₖ) ]   (k = 0 is the true pair)
//! ```
//!
//! The softmax makes the loss invariant under q → c·q: density placed where
//! no atoms live is never penalized, which is exactly why estimators trained
//! this way can leak probability mass outside the prior support. It is kept
//! here as the baseline to compare truncation against.
//!
//! Early stopping watches a held-out validation split (fraction of the data,
//! shuffled off the front) with a fixed patience, snapshotting parameters at
//! every improvement and restoring the best snapshot at the end — including
//! the untouched initialization, so a fit can never return something worse
//! on validation than what it started from.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::nn::{logsumexp, Activation, AdamConfig, AdamState};
use crate::{seed, Error, Result};

use super::{CouplingFlow, DensityEstimator, Ensemble, FittedEstimator, Mdn, Standardizer};

/// Default trunk/conditioner hidden sizes.
pub const DEFAULT_HIDDEN: [usize; 2] = [50, 50];

/// Estimator architecture selection.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Backend {
    Mdn {
        #[serde(default = "default_components")]
        components: usize,
        #[serde(default = "default_hidden")]
        hidden: Vec<usize>,
        #[serde(default = "default_activation")]
        activation: Activation,
    },
    Flow {
        #[serde(default = "default_flow_layers")]
        layers: usize,
        #[serde(default = "default_hidden")]
        hidden: Vec<usize>,
        #[serde(default = "default_activation")]
        activation: Activation,
    },
}

fn default_components() -> usize {
    10
}

fn default_flow_layers() -> usize {
    5
}

fn default_hidden() -> Vec<usize> {
    DEFAULT_HIDDEN.to_vec()
}

fn default_activation() -> Activation {
    Activation::Tanh
}

impl Default for Backend {
    /// Ten-component MDN with two hidden layers of 50 tanh units.
    fn default() -> Self {
        Backend::Mdn {
            components: default_components(),
            hidden: default_hidden(),
            activation: default_activation(),
        }
    }
}

impl Backend {
    pub fn default_flow() -> Self {
        Backend::Flow {
            layers: default_flow_layers(),
            hidden: default_hidden(),
            activation: default_activation(),
        }
    }

    fn build(
        &self,
        theta_dim: usize,
        x_dim: usize,
        theta_std: Standardizer,
        x_std: Standardizer,
        rng: &mut ChaCha8Rng,
    ) -> Result<FittedEstimator> {
        match self {
            Backend::Mdn {
                components,
                hidden,
                activation,
            } => Ok(FittedEstimator::Mdn(Mdn::new(
                theta_dim,
                x_dim,
                *components,
                hidden,
                *activation,
                theta_std,
                x_std,
                rng,
            )?)),
            Backend::Flow {
                layers,
                hidden,
                activation,
            } => Ok(FittedEstimator::Flow(CouplingFlow::new(
                theta_dim,
                x_dim,
                *layers,
                hidden,
                *activation,
                theta_std,
                x_std,
                rng,
            )?)),
        }
    }
}

/// Optimization schedule. Defaults: Adam at 5e-4, batches of 200, 10%
/// validation split, patience 20, at most 300 epochs.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub patience: usize,
    pub max_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            batch_size: 200,
            val_fraction: 0.1,
            patience: 20,
            max_epochs: 300,
        }
    }
}

impl TrainConfig {
    pub(crate) fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(0.0..=0.5).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction must lie in [0, 0.5], got {}",
                self.val_fraction
            )));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Training objective.
#[derive(Clone, Copy)]
pub enum Loss<'a> {
    MaxLikelihood,
    /// Atomic classification against `atoms − 1` contrasting parameters from
    /// the same minibatch; needs the prior's log-density for the ratios.
    Atomic {
        atoms: usize,
        prior_log_density: &'a (dyn Fn(&[f64]) -> f64 + Sync),
    },
}

/// Everything `fit` accepts beyond data and schedule.
pub struct FitOptions<'a> {
    pub loss: Loss<'a>,
    /// Reuse externally fitted standardizers (the round loop fits them on
    /// first-round data); otherwise they are fitted on the given dataset.
    pub standardizers: Option<(Standardizer, Standardizer)>,
    /// Continue training this estimator instead of a fresh initialization.
    pub init: Option<FittedEstimator>,
}

impl Default for FitOptions<'_> {
    fn default() -> Self {
        FitOptions {
            loss: Loss::MaxLikelihood,
            standardizers: None,
            init: None,
        }
    }
}

/// What happened during a fit.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    /// Best validation objective (the training loss family).
    pub val_objective: f64,
    /// Validation NLL of the returned estimator (plain −log q, both losses).
    pub val_nll: f64,
    pub n_train: usize,
    pub n_val: usize,
}

/// Mean −log q over a set of pairs.
pub(crate) fn mean_nll(
    est: &dyn DensityEstimator,
    thetas: &[Vec<f64>],
    xs: &[Vec<f64>],
    idx: &[usize],
) -> Result<f64> {
    let mut acc = 0.0;
    for &i in idx {
        acc -= est.log_prob(&thetas[i], &xs[i])?;
    }
    Ok(acc / idx.len() as f64)
}

/// Atomic loss for one element given its candidate list (true θ first).
/// Returns (loss, softmax probabilities over candidates).
fn atomic_element(
    cond: &dyn super::Conditioned,
    candidates: &[&[f64]],
    prior_log_density: &dyn Fn(&[f64]) -> f64,
) -> Result<(f64, Vec<f64>)> {
    let vals = candidates
        .iter()
        .map(|c| Ok(cond.log_prob(c)? - prior_log_density(c)))
        .collect::<Result<Vec<f64>>>()?;
    let lse = logsumexp(&vals);
    let probs = vals.iter().map(|v| (v - lse).exp()).collect();
    Ok((lse - vals[0], probs))
}

/// Draw `k` distinct members of `0..m` excluding `skip`.
fn draw_atoms(m: usize, skip: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut picked = Vec::with_capacity(k);
    while picked.len() < k {
        let c = rng.random_range(0..m);
        if c != skip && !picked.contains(&c) {
            picked.push(c);
        }
    }
    picked
}

/// Train one estimator. The RNG drives initialization, the train/val split,
/// epoch shuffles, and atom draws — pass a derived stream for reproducibility.
pub fn fit(
    backend: &Backend,
    thetas: &[Vec<f64>],
    xs: &[Vec<f64>],
    cfg: &TrainConfig,
    opts: &FitOptions,
    rng: &mut ChaCha8Rng,
) -> Result<(FittedEstimator, TrainReport)> {
    cfg.validate()?;
    let n = thetas.len();
    if n != xs.len() {
        return Err(Error::dim("fit dataset", n, xs.len()));
    }
    if n < 4 {
        return Err(Error::Config(format!("fit needs at least 4 rows, got {n}")));
    }
    let theta_dim = thetas[0].len();
    let x_dim = xs[0].len();
    for (i, (t, x)) in thetas.iter().zip(xs).enumerate() {
        if t.len() != theta_dim {
            return Err(Error::dim("fit θ row", theta_dim, t.len()));
        }
        if x.len() != x_dim {
            return Err(Error::dim("fit x row", x_dim, x.len()));
        }
        if t.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite training value in row {i}; run invalid-replacement first"
            )));
        }
    }
    if let Loss::Atomic { atoms, .. } = opts.loss {
        if atoms < 2 {
            return Err(Error::Config("atomic loss needs at least 2 atoms".into()));
        }
        if atoms > cfg.batch_size {
            return Err(Error::Config(format!(
                "atom count {atoms} exceeds batch size {}",
                cfg.batch_size
            )));
        }
    }

    let (theta_std, x_std) = match &opts.standardizers {
        Some((t, x)) => (t.clone(), x.clone()),
        None => (Standardizer::fit(thetas)?, Standardizer::fit(xs)?),
    };
    if theta_std.dim() != theta_dim || x_std.dim() != x_dim {
        return Err(Error::Config("provided standardizer dims mismatch data".into()));
    }

    let mut est = match &opts.init {
        Some(init) => {
            if init.theta_dim() != theta_dim || init.x_dim() != x_dim {
                return Err(Error::Config("warm-start estimator dims mismatch data".into()));
            }
            init.clone()
        }
        None => backend.build(theta_dim, x_dim, theta_std, x_std, rng)?,
    };

    // Split: validation off the front of one shuffle.
    let mut perm: Vec<usize> = (0..n).collect();
    shuffle(&mut perm, rng);
    let n_val = ((cfg.val_fraction * n as f64).round() as usize).clamp(1, n - 2);
    let (val_idx, train_idx_base) = perm.split_at(n_val);
    let val_idx = val_idx.to_vec();
    let mut train_idx = train_idx_base.to_vec();

    // Fixed validation atoms so the early-stopping signal is deterministic.
    let val_atoms: Option<Vec<Vec<usize>>> = match opts.loss {
        Loss::Atomic { atoms, .. } if val_idx.len() >= atoms => Some(
            (0..val_idx.len())
                .map(|p| draw_atoms(val_idx.len(), p, atoms - 1, rng))
                .collect(),
        ),
        _ => None,
    };

    let val_objective = |est: &FittedEstimator| -> Result<f64> {
        match (&opts.loss, &val_atoms) {
            (Loss::Atomic { prior_log_density, .. }, Some(atom_lists)) => {
                let mut acc = 0.0;
                for (p, &i) in val_idx.iter().enumerate() {
                    let cond = est.as_dyn().condition(&xs[i])?;
                    let mut cands: Vec<&[f64]> = vec![&thetas[i]];
                    cands.extend(atom_lists[p].iter().map(|&q| thetas[val_idx[q]].as_slice()));
                    acc += atomic_element(cond.as_ref(), &cands, prior_log_density)?.0;
                }
                Ok(acc / val_idx.len() as f64)
            }
            _ => mean_nll(est.as_dyn(), thetas, xs, &val_idx),
        }
    };

    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut adam_states: Vec<AdamState> = est
        .grad_buffers()
        .iter()
        .map(|g| AdamState::new(g.len()))
        .collect();
    let mut grads = est.grad_buffers();

    let mut best_snapshot = est.snapshot();
    let mut best_val = val_objective(&est)?;
    let mut best_epoch = 0;
    let mut stall = 0;
    let mut epochs_run = 0;

    'epochs: for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        shuffle(&mut train_idx, rng);
        for (batch_no, chunk) in train_idx.chunks(cfg.batch_size).enumerate() {
            if let Loss::Atomic { atoms, .. } = opts.loss {
                if chunk.len() < atoms {
                    continue; // tail too small to form an atom set
                }
            }
            for g in &mut grads {
                g.iter_mut().for_each(|v| *v = 0.0);
            }
            let scale = 1.0 / chunk.len() as f64;
            let mut batch_loss = 0.0;
            let mut worst_row = None;
            match opts.loss {
                Loss::MaxLikelihood => {
                    for &i in chunk {
                        let lps = est.backward_shared_x(
                            &[&thetas[i]],
                            &xs[i],
                            &[-scale],
                            &mut grads,
                        )?;
                        if !lps[0].is_finite() {
                            worst_row = Some(i);
                        }
                        batch_loss -= scale * lps[0];
                    }
                }
                Loss::Atomic {
                    atoms,
                    prior_log_density,
                } => {
                    for (p, &i) in chunk.iter().enumerate() {
                        let others = draw_atoms(chunk.len(), p, atoms - 1, rng);
                        let mut cands: Vec<&[f64]> = vec![&thetas[i]];
                        cands.extend(others.iter().map(|&q| thetas[chunk[q]].as_slice()));
                        let cond = est.as_dyn().condition(&xs[i])?;
                        let (loss_i, probs) =
                            atomic_element(cond.as_ref(), &cands, prior_log_density)?;
                        drop(cond);
                        if !loss_i.is_finite() {
                            worst_row = Some(i);
                        }
                        batch_loss += scale * loss_i;
                        let lambdas: Vec<f64> = probs
                            .iter()
                            .enumerate()
                            .map(|(k, &pk)| scale * (pk - if k == 0 { 1.0 } else { 0.0 }))
                            .collect();
                        est.backward_shared_x(&cands, &xs[i], &lambdas, &mut grads)?;
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {epoch}, batch {batch_no}{}",
                    worst_row
                        .map(|i| format!(" (row {i})"))
                        .unwrap_or_default()
                )));
            }
            est.adam_apply(&grads, &mut adam_states, &adam_cfg)
                .map_err(|e| {
                    Error::Training(format!("epoch {epoch}, batch {batch_no}: {e}"))
                })?;
        }
        let v = val_objective(&est)?;
        if v < best_val {
            best_val = v;
            best_snapshot = est.snapshot();
            best_epoch = epoch;
            stall = 0;
        } else {
            stall += 1;
            if stall >= cfg.patience {
                break 'epochs;
            }
        }
    }

    est.restore(&best_snapshot);
    let val_nll = mean_nll(est.as_dyn(), thetas, xs, &val_idx)?;
    Ok((
        est,
        TrainReport {
            epochs_run,
            best_epoch,
            val_objective: best_val,
            val_nll,
            n_train: train_idx.len(),
            n_val: val_idx.len(),
        },
    ))
}

/// Train `n_members` estimators on the same data (shared standardizers,
/// independent derived streams) and pool them uniformly. Members train in
/// parallel; results are identical for any worker count because each
/// member's stream depends only on its index.
#[allow(clippy::too_many_arguments)]
pub fn fit_ensemble(
    backend: &Backend,
    n_members: usize,
    thetas: &[Vec<f64>],
    xs: &[Vec<f64>],
    cfg: &TrainConfig,
    loss: Loss,
    standardizers: Option<(Standardizer, Standardizer)>,
    init: Option<&Ensemble>,
    seed_root: u64,
    seed_tags: &[u64],
) -> Result<(Ensemble, Vec<TrainReport>)> {
    if n_members == 0 {
        return Err(Error::Config("ensemble needs at least one member".into()));
    }
    if let Some(e) = init {
        if e.members().len() != n_members {
            return Err(Error::Config(format!(
                "warm-start ensemble has {} members, requested {n_members}",
                e.members().len()
            )));
        }
    }
    let shared = match standardizers {
        Some(s) => s,
        None => (Standardizer::fit(thetas)?, Standardizer::fit(xs)?),
    };
    let results: Vec<(FittedEstimator, TrainReport)> = (0..n_members)
        .into_par_iter()
        .map(|m| {
            let mut tags = seed_tags.to_vec();
            tags.push(seed::phase::ENSEMBLE);
            tags.push(m as u64);
            let mut rng = seed::stream(seed_root, &tags);
            let opts = FitOptions {
                loss,
                standardizers: Some(shared.clone()),
                init: init.map(|e| e.members()[m].clone()),
            };
            fit(backend, thetas, xs, cfg, &opts, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let (members, reports): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok((Ensemble::new(members)?, reports))
}

/// Fisher–Yates with the crate's stream RNG.
fn shuffle<T>(v: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}
