//! End-to-end behavioral guarantees, one test per release gate.
//!
//! Each test exercises the crate the way a study would — full multi-round
//! runs, real reference posteriors, real calibration — and prints a single
//! `[aNN name] pass: …` line with the measured numbers (visible under
//! `--nocapture`; on failure the same numbers land in the panic message).
//! The checks, in order:
//!
//!  1. truncation keeps estimator mass inside the prior while the atomic
//!     baseline leaks, and its leakage grows with more rounds;
//!  2. coverage calibration is exact on an analytically calibrated estimator;
//!  3. the e-value counts are literally SBC ranks under the log-density
//!     projection — equal, count for count, on shared seeds;
//!  4. over-aggressive truncation (large ε) shows up as undercoverage while
//!     a conservative ε stays near nominal;
//!  5. the final truncated region retains ≥ 99% of true-posterior mass;
//!  6. the sequential scheme matches or beats the amortized baseline at
//!     equal simulation budget, and both improve with budget;
//!  7. SIR sampling is statistically indistinguishable from rejection
//!     sampling at K=1024 but collapses the proposal at K=16;
//!  8. the numerical substrate holds: backprop matches finite differences,
//!     densities integrate to one, the flow inverts to machine precision;
//!  9. pooled truncated proposals stay prior-shaped on the region every
//!     round kept (the property that keeps maximum likelihood valid);
//! 10. runs are byte-reproducible and resume exactly.

use std::sync::{Arc, OnceLock};
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use tsnpe_core::density::{
    fit, Backend, CouplingFlow, FitOptions, FixedDiagGaussian, LinearGaussianPosterior,
    Standardizer,
};
use tsnpe_core::diagnostics::{c2st, ks_critical_1pct, sbcc, ProposalRef};
use tsnpe_core::engine::{persist, posterior_sample};
use tsnpe_core::nn::{Activation, DenseNet, Trace};
use tsnpe_core::seed::{self, phase};
use tsnpe_core::tasks::{simulate_batch, sims, Prior, Task};
use tsnpe_core::truncation::{in_region, SamplerMethod, TruncatedProposal};
use tsnpe_core::{
    run, CoverageConfig, CoverageStrategy, DensityEstimator, Method, RunConfig, RunOutcome,
};

/// Print the one-line verdict and enforce it.
fn verdict(tag: &str, ok: bool, detail: &str) {
    println!("[{tag}] {}: {detail}", if ok { "pass" } else { "FAIL" });
    assert!(ok, "[{tag}] {detail}");
}

/// A small architecture so the multi-run tests stay within desk budgets;
/// wide enough for every posterior these tasks produce.
fn small_mdn() -> Backend {
    Backend::Mdn {
        components: 8,
        hidden: vec![32],
        activation: Activation::Tanh,
    }
}

fn final_leakage(outcome: &RunOutcome) -> f64 {
    outcome
        .record
        .rounds
        .last()
        .and_then(|r| r.metrics.leakage_fraction)
        .expect("leakage metric enabled")
}

/// Reference posterior draws for a task, cached per task name (the MCMC
/// references are the expensive part). Fixed root 0, like the CLI benchmark.
fn reference(task: &Task, n: usize) -> &'static [Vec<f64>] {
    const CACHE_DRAWS: usize = 2000;
    static GL: OnceLock<Vec<Vec<f64>>> = OnceLock::new();
    static TM: OnceLock<Vec<Vec<f64>>> = OnceLock::new();
    let cell = match task.name.as_str() {
        "gaussian_linear" => &GL,
        "two_moons" => &TM,
        other => panic!("no reference cache for task {other}"),
    };
    assert!(n <= CACHE_DRAWS);
    &cell.get_or_init(|| task.reference_posterior(CACHE_DRAWS, 0).expect("reference"))[..n]
}

#[test]
fn a01_leakage_contrast() {
    let t0 = Instant::now();
    let mut cfg = RunConfig::new("toy1d", 11).unwrap();
    cfg.rounds = 10;
    cfg.sims_per_round = 500;
    cfg.backend = small_mdn();
    cfg.train.max_epochs = 150;
    cfg.train.patience = 12;

    let truncated = run(&cfg, None, false).unwrap();
    let mut apt_cfg = cfg.clone();
    apt_cfg.method = Method::Apt;
    let atomic10 = run(&apt_cfg, None, false).unwrap();
    apt_cfg.rounds = 20;
    let atomic20 = run(&apt_cfg, None, false).unwrap();

    let (lt, l10, l20) = (
        final_leakage(&truncated),
        final_leakage(&atomic10),
        final_leakage(&atomic20),
    );
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        "a01 leakage-contrast",
        lt < 0.01 && l10 > 0.10 && l20 >= l10 && secs < 600.0,
        &format!(
            "truncated {:.2}% < 1%, atomic 10r {:.1}% > 10%, atomic 20r {:.1}% ≥ 10r, {secs:.0} s < 600 s",
            100.0 * lt,
            100.0 * l10,
            100.0 * l20
        ),
    );
}

#[test]
fn a02_coverage_exact_on_calibrated_estimator() {
    let t0 = Instant::now();
    let task = Task::new("gaussian_linear", 0).unwrap();
    let (scale, std) = sims::gaussian_linear_posterior_coef();
    let exact = LinearGaussianPosterior {
        scale,
        offset: 0.0,
        std,
        dim: task.theta_dim,
    };
    let sim = |t: &[f64], rng: &mut ChaCha8Rng| task.simulate(t, rng);
    let cov = sbcc(
        &exact,
        &sim,
        &[ProposalRef::Prior(&task.prior)],
        None,
        500,
        1000,
        71,
        &[1],
    )
    .unwrap();
    let (dev, ks, crit) = (cov.max_deviation(), cov.ks, ks_critical_1pct(500));
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        "a02 coverage-exactness",
        dev < 0.05 && ks < crit && secs < 120.0,
        &format!("max deviation {dev:.4} < 0.05, ks {ks:.4} < {crit:.4} (1%), {secs:.0} s < 120 s"),
    );
}

#[test]
fn a03_e_values_are_sbc_ranks() {
    let task = Task::new("gaussian_linear", 0).unwrap();
    let (scale, std) = sims::gaussian_linear_posterior_coef();
    let exact = LinearGaussianPosterior {
        scale,
        offset: 0.0,
        std,
        dim: task.theta_dim,
    };
    let (rows, draws, root) = (100usize, 200usize, 37u64);
    let sim = |t: &[f64], rng: &mut ChaCha8Rng| task.simulate(t, rng);
    let cov = sbcc(
        &exact,
        &sim,
        &[ProposalRef::Prior(&task.prior)],
        None,
        rows,
        draws,
        root,
        &[7],
    )
    .unwrap();

    // Direct simulation-based calibration under the projection
    // f(θ) = log q(θ|x), drawing from the same per-row streams: the rank of
    // f(θ*) among {f(θ_j)} must equal the calibration count exactly.
    let mut ranks: Vec<u32> = Vec::with_capacity(rows);
    for i in 0..rows {
        let theta_star = task.prior.sample(&mut seed::stream(root, &[7, 1, 0, i as u64]));
        let x = task
            .simulate(&theta_star, &mut seed::stream(root, &[7, 2, i as u64]))
            .unwrap();
        let cond = exact.condition(&x).unwrap();
        let f_star = cond.log_prob(&theta_star).unwrap();
        let mut rng = seed::stream(root, &[7, 3, i as u64]);
        let mut rank = 0u32;
        for _ in 0..draws {
            let draw = cond.sample(&mut rng);
            if cond.log_prob(&draw).unwrap() > f_star {
                rank += 1;
            }
        }
        ranks.push(rank);
    }

    let hist = |counts: &[u32]| -> [u32; 20] {
        let mut h = [0u32; 20];
        for c in counts {
            h[(*c as usize * 20 / (draws + 1)).min(19)] += 1;
        }
        h
    };
    verdict(
        "a03 rank-identity",
        ranks == cov.counts && hist(&ranks) == hist(&cov.counts),
        &format!(
            "{} ranks equal, identical 20-bin histograms",
            ranks.len()
        ),
    );
}

#[test]
fn a04_epsilon_controls_truncation_bias() {
    let t0 = Instant::now();
    let coverage_at_95 = |epsilon: f64| {
        let mut cfg = RunConfig::new("linear_gaussian_uniform", 19).unwrap();
        cfg.rounds = 2;
        cfg.sims_per_round = 1000;
        cfg.epsilon = epsilon;
        cfg.coverage = Some(CoverageConfig {
            rows: 300,
            posterior_draws: 500,
            strategy: CoverageStrategy::Mixture,
            final_round_only: true,
        });
        let outcome = run(&cfg, None, false).unwrap();
        outcome.coverage.expect("coverage requested").at(0.95)
    };
    let aggressive = coverage_at_95(0.1);
    let conservative = coverage_at_95(0.01);
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        "a04 truncation-bias",
        aggressive < 0.92 && (0.92..=0.98).contains(&conservative) && secs < 900.0,
        &format!(
            "coverage@0.95: ε=0.1 → {aggressive:.3} < 0.92, ε=0.01 → {conservative:.3} ∈ [0.92, 0.98], {secs:.0} s < 900 s"
        ),
    );
}

#[test]
fn a05_true_posterior_retention() {
    let mut details = Vec::new();
    let mut ok = true;
    for name in ["gaussian_linear", "two_moons"] {
        let task = Task::new(name, 0).unwrap();
        let mut cfg = RunConfig::new(name, 29).unwrap();
        cfg.rounds = 5;
        cfg.sims_per_round = 2000;
        let outcome = run(&cfg, None, false).unwrap();
        let prop = outcome.proposal.expect("truncated runs end with a proposal");
        let cond = prop.conditioned().unwrap();
        let refs = reference(&task, 2000);
        let kept = refs
            .iter()
            .filter(|t| in_region(&prop.prior, cond.as_ref(), prop.threshold, t).unwrap())
            .count();
        let frac = kept as f64 / refs.len() as f64;
        ok &= frac >= 0.99;
        details.push(format!("{name} {:.2}%", 100.0 * frac));
    }
    verdict(
        "a05 retention",
        ok,
        &format!("true-posterior mass inside final region ≥ 99%: {}", details.join(", ")),
    );
}

#[test]
fn a06_sequential_gain_over_amortized() {
    let t0 = Instant::now();
    let budgets = [400usize, 800, 1600, 3200];
    let seeds = [101u64, 211, 307];
    let mut ok = true;
    let mut details = Vec::new();

    for name in ["gaussian_linear", "two_moons"] {
        let task = Task::new(name, 0).unwrap();
        let refs = reference(&task, 512);
        let mut medians = [[0.0f64; 4]; 2]; // [method][budget]
        for (m, method) in [Method::Tsnpe, Method::Npe].into_iter().enumerate() {
            for (b, budget) in budgets.into_iter().enumerate() {
                let mut scores: Vec<f64> = seeds
                    .iter()
                    .map(|&s| {
                        let mut cfg = RunConfig::new(name, s).unwrap();
                        cfg.method = method;
                        cfg.rounds = 2;
                        cfg.sims_per_round = budget / 2;
                        cfg.train.batch_size = 100;
                        cfg.metrics.leakage = false;
                        let outcome = run(&cfg, None, false).unwrap();
                        let draws = posterior_sample(
                            &*outcome.posterior,
                            &task,
                            &task.x_obs,
                            refs.len(),
                            cfg.seed,
                            &[phase::METRICS, 1],
                        )
                        .unwrap();
                        c2st(refs, &draws, seed::derive(cfg.seed, &[phase::METRICS, 2])).unwrap()
                    })
                    .collect();
                scores.sort_by(f64::total_cmp);
                medians[m][b] = scores[1];
            }
        }
        let [ts, np] = medians;
        let matched = budgets
            .iter()
            .enumerate()
            .all(|(b, _)| ts[b] <= np[b] + 0.05);
        let improving = |row: &[f64; 4]| (0..3).filter(|&b| row[b + 1] <= row[b]).count() >= 2;
        ok &= matched && improving(&ts) && improving(&np);
        details.push(format!(
            "{name}: truncated {:?} vs amortized {:?}",
            ts.map(|v| (v * 1000.0).round() / 1000.0),
            np.map(|v| (v * 1000.0).round() / 1000.0),
        ));
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        "a06 sequential-gain",
        ok,
        &format!(
            "c2st medians (3 seeds) at budgets 400/800/1600/3200 — {}; {secs:.0} s",
            details.join("; ")
        ),
    );
}

#[test]
fn a07_sir_matches_rejection_and_collapses_at_small_k() {
    let t0 = Instant::now();
    // --- fidelity on two fixture posteriors -------------------------------
    let mut fidelity = Vec::new();
    let mut ok = true;

    // Fixture 1: analytic Gaussian posterior under a box prior.
    let prior = Prior::BoxUniform {
        lower: vec![-1.0, -1.0],
        upper: vec![1.0, 1.0],
    };
    let gauss: Arc<dyn DensityEstimator> = Arc::new(FixedDiagGaussian {
        mean: vec![0.3, -0.2],
        std: vec![0.35, 0.25],
        x_dim: 1,
    });
    // Fixture 2: a trained estimator of the bimodal 1-d toy posterior.
    let toy = Task::new("toy1d", 0).unwrap();
    let thetas: Vec<Vec<f64>> = (0..1500u64)
        .map(|i| toy.prior.sample(&mut seed::stream(83, &[1, i])))
        .collect();
    let xs = simulate_batch(&toy, &thetas, 83, &[2]).unwrap();
    let (fitted, _) = fit(
        &small_mdn(),
        &thetas,
        &xs,
        &tsnpe_core::TrainConfig::default(),
        &FitOptions::default(),
        &mut seed::stream(83, &[3]),
    )
    .unwrap();
    let bimodal: Arc<dyn DensityEstimator> = Arc::new(fitted);

    let fixtures: [(&str, Prior, Arc<dyn DensityEstimator>, Vec<f64>); 2] = [
        ("gaussian", prior, gauss, vec![0.0]),
        ("bimodal", toy.prior.clone(), bimodal, toy.x_obs.clone()),
    ];
    for (label, prior, estimator, x_obs) in fixtures {
        let by_rejection = TruncatedProposal::from_estimator(
            prior,
            estimator,
            x_obs,
            0.05,
            4000,
            SamplerMethod::Rejection,
            &mut seed::stream(83, &[4]),
        )
        .unwrap();
        let by_sir = TruncatedProposal::new(
            by_rejection.prior.clone(),
            Arc::clone(by_rejection.estimator()),
            by_rejection.x_obs.clone(),
            by_rejection.threshold,
            by_rejection.epsilon,
            SamplerMethod::Sir { candidates: 1024 },
        )
        .unwrap();
        let (a, _) = by_rejection.sample_batch(512, 83, &[5]).unwrap();
        let (b, stats) = by_sir.sample_batch(512, 83, &[6]).unwrap();
        let score = c2st(&a, &b, seed::derive(83, &[7])).unwrap();
        let ess = stats.ess.expect("SIR records ESS");
        let ess_min = ess.iter().cloned().fold(f64::INFINITY, f64::min);
        let ess_mean = ess.iter().sum::<f64>() / ess.len() as f64;
        ok &= score <= 0.55 && ess_min >= 1.0;
        fidelity.push(format!(
            "{label} c2st {score:.3} (ess mean {ess_mean:.1}, min {ess_min:.1})"
        ));
    }

    // --- collapse over 50 rounds at K=16 ----------------------------------
    let proposal_std = |candidates: usize| {
        let mut cfg = RunConfig::new("linear_gaussian_uniform", 43).unwrap();
        cfg.rounds = 50;
        cfg.sims_per_round = 100;
        cfg.sampler = SamplerMethod::Sir { candidates };
        cfg.backend = small_mdn();
        cfg.train.batch_size = 50;
        cfg.train.max_epochs = 60;
        cfg.train.patience = 8;
        cfg.metrics.leakage = false;
        let outcome = run(&cfg, None, false).unwrap();
        let ess_floor = outcome
            .record
            .rounds
            .iter()
            .filter_map(|r| r.metrics.ess_min)
            .fold(f64::INFINITY, f64::min);
        let (draws, _) = outcome
            .proposal
            .expect("truncated run")
            .sample_batch(800, 97, &[1])
            .unwrap();
        let dim = draws[0].len();
        let std = (0..dim)
            .map(|d| {
                let mean = draws.iter().map(|t| t[d]).sum::<f64>() / draws.len() as f64;
                (draws.iter().map(|t| (t[d] - mean).powi(2)).sum::<f64>()
                    / (draws.len() - 1) as f64)
                    .sqrt()
            })
            .sum::<f64>()
            / dim as f64;
        (std, ess_floor)
    };
    let (std16, ess16) = proposal_std(16);
    let (std1024, ess1024) = proposal_std(1024);
    ok &= std16 < 0.5 * std1024 && ess16 >= 1.0 && ess1024 >= 1.0;

    let secs = t0.elapsed().as_secs_f64();
    verdict(
        "a07 sir-fidelity",
        ok,
        &format!(
            "{}; 50-round proposal std K=16 {std16:.4} < 0.5 × K=1024 {std1024:.4}, \
             ess floors {ess16:.1}/{ess1024:.1} ≥ 1; {secs:.0} s",
            fidelity.join(", ")
        ),
    );
}

#[test]
fn a08_numerical_substrate() {
    // Backpropagation against central finite differences, every parameter.
    let mut rng = seed::stream(53, &[1]);
    let mut net = DenseNet::new(&[3, 16, 8, 2], Activation::Tanh, &mut rng).unwrap();
    let batch: Vec<(Vec<f64>, Vec<f64>)> = (0..12)
        .map(|_| {
            let x: Vec<f64> = (0..3).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let y: Vec<f64> = (0..2).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            (x, y)
        })
        .collect();
    let loss_of = |net: &DenseNet| -> f64 {
        batch
            .iter()
            .map(|(x, y)| {
                net.forward(x)
                    .iter()
                    .zip(y)
                    .map(|(o, t)| 0.5 * (o - t) * (o - t))
                    .sum::<f64>()
            })
            .sum()
    };
    let mut grad = vec![0.0; net.n_params()];
    let mut trace = Trace::default();
    for (x, y) in &batch {
        let out = net.forward_trace(x, &mut trace).to_vec();
        let adj: Vec<f64> = out.iter().zip(y).map(|(o, t)| o - t).collect();
        net.backward(&trace, &adj, &mut grad);
    }
    let mut max_rel = 0.0f64;
    for p in 0..net.n_params() {
        let h = 1e-5;
        let orig = net.params()[p];
        net.params_mut()[p] = orig + h;
        let up = loss_of(&net);
        net.params_mut()[p] = orig - h;
        let down = loss_of(&net);
        net.params_mut()[p] = orig;
        let fd = (up - down) / (2.0 * h);
        max_rel = max_rel.max((grad[p] - fd).abs() / grad[p].abs().max(1.0));
    }

    // Flow invertibility: θ → z → θ round-trips to machine precision.
    let rows: Vec<Vec<f64>> = (0..64u64)
        .map(|i| {
            let mut r = seed::stream(53, &[2, i]);
            (0..3).map(|_| r.random::<f64>()).collect()
        })
        .collect();
    let theta_std = Standardizer::fit(&rows).unwrap();
    let flow = CouplingFlow::new(
        3,
        2,
        5,
        &[24, 24],
        Activation::Tanh,
        theta_std,
        Standardizer::identity(2),
        &mut seed::stream(53, &[3]),
    )
    .unwrap();
    let mut max_round = 0.0f64;
    let mut rng = seed::stream(53, &[4]);
    for _ in 0..200 {
        let theta: Vec<f64> = (0..3).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let x: Vec<f64> = (0..2).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let back = flow.reconstruct(&theta, &x).unwrap();
        for (a, b) in theta.iter().zip(&back) {
            max_round = max_round.max((a - b).abs());
        }
    }

    // Trained densities integrate to one: 1-d mixture, 2-d flow.
    let toy = Task::new("toy1d", 0).unwrap();
    let thetas: Vec<Vec<f64>> = (0..800u64)
        .map(|i| toy.prior.sample(&mut seed::stream(53, &[5, i])))
        .collect();
    let xs = simulate_batch(&toy, &thetas, 53, &[6]).unwrap();
    let (mdn, _) = fit(
        &small_mdn(),
        &thetas,
        &xs,
        &tsnpe_core::TrainConfig::default(),
        &FitOptions::default(),
        &mut seed::stream(53, &[7]),
    )
    .unwrap();
    let cond = mdn.as_dyn().condition(&toy.x_obs).unwrap();
    let (lo, hi, n) = (-6.0, 6.0, 6000usize);
    let step = (hi - lo) / n as f64;
    let mass_1d: f64 = (0..=n)
        .map(|i| {
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            w * cond.log_prob(&[lo + i as f64 * step]).unwrap().exp()
        })
        .sum::<f64>()
        * step;

    let moons = Task::new("two_moons", 0).unwrap();
    let thetas: Vec<Vec<f64>> = (0..800u64)
        .map(|i| moons.prior.sample(&mut seed::stream(53, &[8, i])))
        .collect();
    let xs = simulate_batch(&moons, &thetas, 53, &[9]).unwrap();
    let (flow2, _) = fit(
        &Backend::Flow {
            layers: 4,
            hidden: vec![24, 24],
            activation: Activation::Tanh,
        },
        &thetas,
        &xs,
        &tsnpe_core::TrainConfig::default(),
        &FitOptions::default(),
        &mut seed::stream(53, &[10]),
    )
    .unwrap();
    let cond2 = flow2.as_dyn().condition(&moons.x_obs).unwrap();
    let (lo2, hi2, n2) = (-2.5, 2.5, 250usize);
    let step2 = (hi2 - lo2) / n2 as f64;
    let mut mass_2d = 0.0;
    for i in 0..=n2 {
        for j in 0..=n2 {
            let wi = if i == 0 || i == n2 { 0.5 } else { 1.0 };
            let wj = if j == 0 || j == n2 { 0.5 } else { 1.0 };
            let p = cond2
                .log_prob(&[lo2 + i as f64 * step2, lo2 + j as f64 * step2])
                .unwrap()
                .exp();
            mass_2d += wi * wj * p;
        }
    }
    mass_2d *= step2 * step2;

    let ok = max_rel < 1e-4
        && max_round < 1e-6
        && (0.98..=1.02).contains(&mass_1d)
        && (0.98..=1.02).contains(&mass_2d);
    verdict(
        "a08 numerics",
        ok,
        &format!(
            "gradient max rel err {max_rel:.2e} < 1e-4, flow round-trip {max_round:.2e} < 1e-6, \
             ∫1d {mass_1d:.4} and ∫2d {mass_2d:.4} ∈ [0.98, 1.02]"
        ),
    );
}

#[test]
fn a09_pooled_proposal_stays_prior_shaped() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::new("toy1d", 61).unwrap();
    cfg.rounds = 3;
    cfg.sims_per_round = 500;
    cfg.backend = small_mdn();
    run(&cfg, Some(dir.path()), false).unwrap();

    let task = Task::new("toy1d", 0).unwrap();
    // Pool every round's θ draws: round 1 from the prior, rounds 2–3 from
    // the two truncated proposals.
    let mut pooled: Vec<f64> = Vec::new();
    for r in 1..=3 {
        let (thetas, _, _) =
            persist::read_dataset(&persist::round_dir(dir.path(), r).join("dataset.csv"), r)
                .unwrap();
        pooled.extend(thetas.into_iter().map(|t| t[0]));
    }

    // The regions the two truncated rounds kept, via the persisted artifacts.
    let regions: Vec<_> = (1..=2)
        .map(|r| {
            let rdir = persist::round_dir(dir.path(), r);
            let ens = persist::read_estimator(&rdir.join("estimator.bin")).unwrap();
            let summary: tsnpe_core::engine::ProposalSummary =
                persist::read_json(&rdir.join("proposal.json")).unwrap();
            (ens, summary.threshold.expect("truncated proposal"))
        })
        .collect();
    let conds: Vec<_> = regions
        .iter()
        .map(|(ens, _)| ens.condition(&task.x_obs).unwrap())
        .collect();
    let inside = |theta: f64| {
        regions.iter().zip(&conds).all(|((_, tau), cond)| {
            in_region(&task.prior, cond.as_ref(), *tau, &[theta]).unwrap()
        })
    };

    // Longest stretch of the right prior box on which *every* round's
    // proposal reduces to the prior, found on a fine grid.
    let grid: Vec<f64> = (0..=2000).map(|i| 1.0 + i as f64 / 2000.0).collect();
    let mut best = (0usize, 0usize);
    let mut start = None;
    for (i, &g) in grid.iter().enumerate() {
        if inside(g) {
            start.get_or_insert(i);
            let s = start.unwrap();
            if i - s > best.1 - best.0 {
                best = (s, i);
            }
        } else {
            start = None;
        }
    }
    let (a, b) = (grid[best.0], grid[best.1]);
    assert!(
        b - a >= 0.1,
        "common kept region [{a:.3}, {b:.3}] too narrow to bin"
    );

    // 20 bins: the pooled sample's density ratio to the prior must be flat.
    let bins = 20usize;
    let width = (b - a) / bins as f64;
    let n = pooled.len() as f64;
    let mut counts = vec![0usize; bins];
    for &t in &pooled {
        if t >= a && t < b {
            counts[((t - a) / width) as usize] += 1;
        }
    }
    let prior_density = task.prior.log_density(&[(a + b) / 2.0]).exp();
    let ratios: Vec<f64> = counts
        .iter()
        .map(|&c| c as f64 / (n * width * prior_density))
        .collect();
    let mean = ratios.iter().sum::<f64>() / bins as f64;
    let worst = counts
        .iter()
        .zip(&ratios)
        .map(|(&c, &r)| {
            let se = (c.max(1) as f64).sqrt() / (n * width * prior_density);
            (r - mean).abs() / se
        })
        .fold(0.0f64, f64::max);
    verdict(
        "a09 composition-invariant",
        worst <= 3.0,
        &format!(
            "pooled/prior ratio flat over 20 bins on [{a:.3}, {b:.3}]: worst deviation {worst:.2} s.e. ≤ 3"
        ),
    );
}

#[test]
fn a10_determinism_and_resume() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::new("toy1d", 67).unwrap();
    cfg.rounds = 2;
    cfg.sims_per_round = 120;
    cfg.backend = small_mdn();
    cfg.train.batch_size = 60;

    let (a, b) = (root.path().join("a"), root.path().join("b"));
    run(&cfg, Some(&a), false).unwrap();
    run(&cfg, Some(&b), false).unwrap();
    let bytes = |dir: &std::path::Path, r: usize, f: &str| {
        std::fs::read(persist::round_dir(dir, r).join(f)).unwrap()
    };
    let mut identical = true;
    for r in 1..=2 {
        for f in ["dataset.csv", "estimator.bin", "metrics.json", "proposal.json"] {
            identical &= bytes(&a, r, f) == bytes(&b, r, f);
        }
    }

    // Interrupt after round 1 and resume: round 2 must come out unchanged.
    std::fs::remove_dir_all(persist::round_dir(&b, 2)).unwrap();
    run(&cfg, Some(&b), true).unwrap();
    let resumed = bytes(&a, 2, "estimator.bin") == bytes(&b, 2, "estimator.bin")
        && bytes(&a, 2, "metrics.json") == bytes(&b, 2, "metrics.json");
    verdict(
        "a10 determinism",
        identical && resumed,
        "reruns byte-identical across both rounds; resumed round 2 equals the uninterrupted one",
    );
}
