//! Simulator definitions and their numeric canon.
//!
//! Every constant a simulator depends on (prior ranges, noise scales, ODE
//! initial conditions, step sizes, summary times) lives here, in one place,
//! and is part of this repository's canon: tests and reference posteriors
//! all read the same values.
//!
//! The two population-dynamics tasks are deterministic ODE models (classic
//! fixed-step RK4) with Gaussian noise added to the summary statistics —
//! a deliberate simplification that keeps their likelihoods tractable, so
//! reference posteriors can be drawn by MCMC instead of being approximated.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::seed;

// ---- toy 1-D: two-island prior, squared-mean observation ------------------

/// Observation noise std for the 1-D toy problem: x = θ² + σ·ε.
pub const TOY1D_NOISE_STD: f64 = 0.2;
/// Canonical generating parameter and noise-free observation for index 0.
pub const TOY1D_THETA_STAR: f64 = 1.5;
pub const TOY1D_X_OBS: f64 = 2.25;

pub fn toy1d(theta: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    vec![theta[0] * theta[0] + TOY1D_NOISE_STD * rng.sample::<f64, _>(StandardNormal)]
}

// ---- linear Gaussian with a uniform box prior ------------------------------

pub const LGU_DIM: usize = 2;
pub const LGU_NOISE_STD: f64 = 0.2;

pub fn linear_gaussian_uniform(theta: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    theta
        .iter()
        .map(|t| t + LGU_NOISE_STD * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

// ---- conjugate Gaussian linear ---------------------------------------------

pub const GL_DIM: usize = 10;
/// Prior variance 0.25 (std 0.5), likelihood variance 0.1.
pub const GL_PRIOR_VAR: f64 = 0.25;
pub const GL_LIK_VAR: f64 = 0.1;

pub fn gaussian_linear(theta: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let s = GL_LIK_VAR.sqrt();
    theta
        .iter()
        .map(|t| t + s * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Posterior of the conjugate pair: θ|x ~ N(V·x/σ_l², V·I) with
/// V = (1/σ_p² + 1/σ_l²)⁻¹.
pub fn gaussian_linear_posterior_coef() -> (f64, f64) {
    let v = 1.0 / (1.0 / GL_PRIOR_VAR + 1.0 / GL_LIK_VAR);
    (v / GL_LIK_VAR, v.sqrt()) // (mean scale, posterior std)
}

// ---- two moons --------------------------------------------------------------

pub const TM_RADIUS_MEAN: f64 = 0.1;
pub const TM_RADIUS_STD: f64 = 0.01;

/// Deterministic offset t(θ) added to the crescent.
fn two_moons_offset(theta: &[f64]) -> [f64; 2] {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    [-(theta[0] + theta[1]).abs() * s, (-theta[0] + theta[1]) * s]
}

pub fn two_moons(theta: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let a: f64 = rng.random_range(-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2);
    let r = TM_RADIUS_MEAN + TM_RADIUS_STD * rng.sample::<f64, _>(StandardNormal);
    let t = two_moons_offset(theta);
    vec![r * a.cos() + 0.25 + t[0], r * a.sin() + t[1]]
}

/// Tractable log-likelihood of one observation under the crescent model:
/// the pre-offset point (u+0.25, v) has density N(r; μ_r, σ_r²)/(π·r) on the
/// half-plane u > 0 (polar change of variables with the half-circle angle).
pub fn two_moons_log_likelihood(theta: &[f64], x: &[f64]) -> f64 {
    let t = two_moons_offset(theta);
    let u = x[0] - t[0] - 0.25;
    let v = x[1] - t[1];
    if u <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let r = (u * u + v * v).sqrt();
    log_normal_pdf(r, TM_RADIUS_MEAN, TM_RADIUS_STD) - (std::f64::consts::PI * r).ln()
}

// ---- simple likelihood complex posterior (slcp) -----------------------------

pub const SLCP_DIM: usize = 5;
pub const SLCP_BOUND: f64 = 3.0;
pub const SLCP_POINTS: usize = 4;

fn slcp_moments(theta: &[f64]) -> ([f64; 2], f64, f64, f64) {
    let m = [theta[0], theta[1]];
    let s1 = theta[2] * theta[2];
    let s2 = theta[3] * theta[3];
    let rho = theta[4].tanh();
    (m, s1, s2, rho)
}

pub fn slcp(theta: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (m, s1, s2, rho) = slcp_moments(theta);
    let mut out = Vec::with_capacity(2 * SLCP_POINTS);
    for _ in 0..SLCP_POINTS {
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        out.push(m[0] + s1 * z1);
        out.push(m[1] + s2 * (rho * z1 + (1.0 - rho * rho).sqrt() * z2));
    }
    out
}

pub fn slcp_log_likelihood(theta: &[f64], x: &[f64]) -> f64 {
    let (m, s1, s2, rho) = slcp_moments(theta);
    // Bivariate normal with cov [[s1², ρ s1 s2], [ρ s1 s2, s2²]].
    let det = (s1 * s2).powi(2) * (1.0 - rho * rho);
    if det <= 0.0 || !det.is_finite() {
        return f64::NEG_INFINITY;
    }
    let norm = -(2.0 * std::f64::consts::PI) .ln() - 0.5 * det.ln();
    let omr2 = 1.0 - rho * rho;
    (0..SLCP_POINTS)
        .map(|i| {
            let d1 = (x[2 * i] - m[0]) / s1;
            let d2 = (x[2 * i + 1] - m[1]) / s2;
            norm - 0.5 * (d1 * d1 - 2.0 * rho * d1 * d2 + d2 * d2) / omr2
        })
        .sum()
}

// ---- Bernoulli GLM with sufficient summaries --------------------------------

pub const GLM_DIM: usize = 10; // bias + 9 filter weights
pub const GLM_BINS: usize = 100;
/// Prior stds: looser on the bias, unit on the filter weights.
pub const GLM_PRIOR_STD_BIAS: f64 = 2.0;
pub const GLM_PRIOR_STD_WEIGHT: f64 = 1.0;

/// The fixed white-noise design matrix (GLM_BINS × 9), drawn once from its
/// own stream; part of the task definition, not of any run's randomness.
pub fn glm_design() -> &'static Vec<[f64; 9]> {
    use std::sync::OnceLock;
    static DESIGN: OnceLock<Vec<[f64; 9]>> = OnceLock::new();
    DESIGN.get_or_init(|| {
        let mut rng = seed::stream(name_tag("bernoulli_glm"), &[seed::phase::DESIGN]);
        (0..GLM_BINS)
            .map(|_| {
                let mut row = [0.0; 9];
                for v in &mut row {
                    *v = rng.sample(StandardNormal);
                }
                row
            })
            .collect()
    })
}

pub fn bernoulli_glm(theta: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let design = glm_design();
    let mut spikes = 0.0;
    let mut weighted = [0.0f64; 9];
    for row in design {
        let psi = theta[0] + row.iter().zip(&theta[1..]).map(|(z, f)| z * f).sum::<f64>();
        let p = 1.0 / (1.0 + (-psi).exp());
        if rng.random::<f64>() < p {
            spikes += 1.0;
            for (w, z) in weighted.iter_mut().zip(row) {
                *w += z;
            }
        }
    }
    let mut out = Vec::with_capacity(GLM_DIM);
    out.push(spikes);
    out.extend_from_slice(&weighted);
    out
}

/// Exact log-likelihood of the summary vector, up to a θ-free constant.
/// (Σy, Zᵀy) are sufficient: every spike train with these summaries has the
/// same probability, so the combinatorial count cancels in the posterior.
pub fn bernoulli_glm_log_likelihood(theta: &[f64], x: &[f64]) -> f64 {
    let design = glm_design();
    let mut lp = theta[0] * x[0];
    for (f, s) in theta[1..].iter().zip(&x[1..]) {
        lp += f * s;
    }
    for row in design {
        let psi = theta[0] + row.iter().zip(&theta[1..]).map(|(z, f)| z * f).sum::<f64>();
        // ln(1 + e^ψ), stable on both tails
        lp -= psi.max(0.0) + (-psi.abs()).exp().ln_1p();
    }
    lp
}

// ---- Lotka–Volterra (ODE + Gaussian summary noise) --------------------------

pub const LV_DIM: usize = 4;
pub const LV_PRIOR_LO: [f64; 4] = [0.5, 0.03, 0.5, 0.02];
pub const LV_PRIOR_HI: [f64; 4] = [1.5, 0.15, 2.0, 0.10];
pub const LV_INIT: [f64; 2] = [10.0, 5.0];
pub const LV_STEP: f64 = 0.01;
pub const LV_SUMMARY_TIMES: [f64; 5] = [4.0, 8.0, 12.0, 16.0, 20.0];
pub const LV_NOISE_STD: f64 = 0.5;

/// Prey/predator trajectories sampled at the summary times (both species at
/// each time → 10 values). Deterministic.
pub fn lotka_volterra_summaries(theta: &[f64]) -> Vec<f64> {
    let (alpha, beta, gamma, delta) = (theta[0], theta[1], theta[2], theta[3]);
    rk4_summaries(LV_INIT, LV_STEP, &LV_SUMMARY_TIMES, |y| {
        [
            alpha * y[0] - beta * y[0] * y[1],
            -gamma * y[1] + delta * y[0] * y[1],
        ]
    })
}

pub fn lotka_volterra(theta: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    lotka_volterra_summaries(theta)
        .into_iter()
        .map(|s| s + LV_NOISE_STD * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

pub fn lotka_volterra_log_likelihood(theta: &[f64], x: &[f64]) -> f64 {
    gaussian_summary_log_likelihood(&lotka_volterra_summaries(theta), x, LV_NOISE_STD)
}

// ---- SIR epidemic (ODE + Gaussian summary noise) ----------------------------

pub const SIR_DIM: usize = 2;
pub const SIR_PRIOR_LO: [f64; 2] = [0.2, 0.05];
pub const SIR_PRIOR_HI: [f64; 2] = [1.0, 0.40];
pub const SIR_POPULATION: f64 = 1e6;
pub const SIR_I0: f64 = 10.0;
pub const SIR_STEP: f64 = 0.05;
pub const SIR_SUMMARY_TIMES: [f64; 10] =
    [16.0, 32.0, 48.0, 64.0, 80.0, 96.0, 112.0, 128.0, 144.0, 160.0];
pub const SIR_NOISE_STD: f64 = 0.005;

/// Infected fraction I(t)/N at the summary times. Deterministic.
pub fn sir_summaries(theta: &[f64]) -> Vec<f64> {
    let (beta, gamma) = (theta[0], theta[1]);
    let n = SIR_POPULATION;
    let y0 = [n - SIR_I0, SIR_I0, 0.0];
    rk4_summaries(y0, SIR_STEP, &SIR_SUMMARY_TIMES, |y| {
        let inf = beta * y[0] * y[1] / n;
        [-inf, inf - gamma * y[1], gamma * y[1]]
    })
    .into_iter()
    .skip(1)
    .step_by(3) // keep the I component of each (S, I, R) triple
    .collect()
}

pub fn sir_epidemic(theta: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    sir_summaries(theta)
        .into_iter()
        .map(|s| s / SIR_POPULATION + SIR_NOISE_STD * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

pub fn sir_log_likelihood(theta: &[f64], x: &[f64]) -> f64 {
    let sums: Vec<f64> = sir_summaries(theta)
        .into_iter()
        .map(|s| s / SIR_POPULATION)
        .collect();
    gaussian_summary_log_likelihood(&sums, x, SIR_NOISE_STD)
}

// ---- shared numerics ---------------------------------------------------------

const LN_2PI: f64 = 1.8378770664093453;

fn log_normal_pdf(v: f64, mean: f64, std: f64) -> f64 {
    let z = (v - mean) / std;
    -0.5 * z * z - std.ln() - 0.5 * LN_2PI
}

fn gaussian_summary_log_likelihood(summaries: &[f64], x: &[f64], std: f64) -> f64 {
    summaries
        .iter()
        .zip(x)
        .map(|(s, xv)| log_normal_pdf(*xv, *s, std))
        .sum()
}

/// Classic fixed-step RK4, recording the full state at each requested time.
/// Times must be ascending multiples of `h` (they are, by construction of
/// the summary grids).
pub fn rk4_summaries<const D: usize>(
    y0: [f64; D],
    h: f64,
    times: &[f64],
    deriv: impl Fn(&[f64; D]) -> [f64; D],
) -> Vec<f64> {
    let mut y = y0;
    let mut out = Vec::with_capacity(times.len() * D);
    let total_steps = (times.last().unwrap() / h).round() as usize;
    let mut next = 0usize;
    for step in 1..=total_steps {
        let k1 = deriv(&y);
        let mut y2 = y;
        add_scaled(&mut y2, &k1, h / 2.0);
        let k2 = deriv(&y2);
        let mut y3 = y;
        add_scaled(&mut y3, &k2, h / 2.0);
        let k3 = deriv(&y3);
        let mut y4 = y;
        add_scaled(&mut y4, &k3, h);
        let k4 = deriv(&y4);
        for i in 0..D {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        let t = step as f64 * h;
        while next < times.len() && (t - times[next]).abs() < h / 2.0 {
            out.extend_from_slice(&y);
            next += 1;
        }
    }
    debug_assert_eq!(next, times.len(), "summary times must align with the step grid");
    out
}

#[inline]
fn add_scaled<const D: usize>(y: &mut [f64; D], k: &[f64; D], c: f64) {
    for i in 0..D {
        y[i] += c * k[i];
    }
}

/// Stable tag for per-task fixed streams (design matrices, observations).
pub fn name_tag(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
        })
}
