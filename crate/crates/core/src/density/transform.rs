//! Bijection between a bounded box and ℝᵈ, and the density wrapper built on
//! it.
//!
//! Training an estimator directly on box-supported parameters lets it place
//! probability mass outside the support; that mass is wasted ("leaks") and
//! has to be rejected away at sampling time. The alternative implemented
//! here maps each coordinate through a scaled logit,
//!
//! ```text
//! u = ln(s / (1 - s)),   s = (θ - lo) / (hi - lo),
//! ```
//!
//! trains on the unbounded u, and folds the change of variables back into
//! every reported density. A [`BoxConstrained`] wrapper then *is* a
//! θ-space estimator whose support equals the box exactly — its leakage is
//! zero by construction, not by training pressure.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use super::{Conditioned, DensityEstimator};
use crate::{Error, Result};

/// Widest sigmoid output allowed when mapping back into the box; keeps
/// [`BoxTransform::to_box`] strictly inside the open box even for extreme u.
const SIGMOID_CLAMP: f64 = 1e-15;

/// ln(1 + eˣ), computed without overflow for large |x|.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Per-dimension scaled-logit bijection between the open box (lo, hi) and ℝ.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxTransform {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl BoxTransform {
    /// Requires matching lengths, finite bounds, and `lo < hi` in every
    /// dimension.
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.is_empty() || lo.len() != hi.len() {
            return Err(Error::Config(format!(
                "box transform needs matching non-empty bounds, got {} and {}",
                lo.len(),
                hi.len()
            )));
        }
        for (d, (a, b)) in lo.iter().zip(&hi).enumerate() {
            if !a.is_finite() || !b.is_finite() || a >= b {
                return Err(Error::Config(format!(
                    "box transform dim {d}: bounds must be finite with lo < hi, got [{a}, {b}]"
                )));
            }
        }
        Ok(BoxTransform { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    /// Map a point strictly inside the box to ℝᵈ. Points on or outside the
    /// boundary have no finite image and are an error.
    pub fn to_unbounded(&self, theta: &[f64]) -> Result<Vec<f64>> {
        if theta.len() != self.dim() {
            return Err(Error::dim("box transform θ", self.dim(), theta.len()));
        }
        let mut u = Vec::with_capacity(self.dim());
        for (d, ((&t, &a), &b)) in theta.iter().zip(&self.lo).zip(&self.hi).enumerate() {
            let s = (t - a) / (b - a);
            if !(s > 0.0 && s < 1.0) {
                return Err(Error::Config(format!(
                    "cannot map θ[{d}] = {t} to unbounded coordinates: not strictly inside [{a}, {b}]"
                )));
            }
            u.push(s.ln() - (1.0 - s).ln());
        }
        Ok(u)
    }

    /// Map back into the box: θ = lo + (hi − lo)·σ(u). The sigmoid is
    /// clamped to (0, 1) so the result stays strictly inside even when u is
    /// large enough that σ(u) rounds to 0 or 1.
    pub fn to_box(&self, u: &[f64]) -> Vec<f64> {
        debug_assert_eq!(u.len(), self.dim());
        u.iter()
            .zip(&self.lo)
            .zip(&self.hi)
            .map(|((&u, &a), &b)| {
                let s = sigmoid(u).clamp(SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP);
                a + (b - a) * s
            })
            .collect()
    }

    /// log |dθ/du| at u: Σ_d [ ln(hi−lo) − softplus(u) − softplus(−u) ].
    ///
    /// Each factor is the derivative of the scaled sigmoid,
    /// (hi−lo)·σ(u)·(1−σ(u)), with ln σ(u) = −softplus(−u).
    pub fn log_det_to_box(&self, u: &[f64]) -> f64 {
        debug_assert_eq!(u.len(), self.dim());
        u.iter()
            .zip(&self.lo)
            .zip(&self.hi)
            .map(|((&u, &a), &b)| (b - a).ln() - softplus(u) - softplus(-u))
            .sum()
    }
}

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// A θ-space view of an estimator trained in unbounded coordinates.
///
/// `log_prob` is the inner density plus the logit Jacobian — exactly zero
/// mass outside the open box — and `sample` maps inner draws through the
/// sigmoid, so every draw lands inside the box without any rejection.
#[derive(Clone)]
pub struct BoxConstrained {
    transform: BoxTransform,
    inner: Arc<dyn DensityEstimator>,
}

impl BoxConstrained {
    /// Requires the transform and the inner estimator to agree on θ's
    /// dimension.
    pub fn new(transform: BoxTransform, inner: Arc<dyn DensityEstimator>) -> Result<Self> {
        if transform.dim() != inner.theta_dim() {
            return Err(Error::dim(
                "box-constrained wrapper θ",
                transform.dim(),
                inner.theta_dim(),
            ));
        }
        Ok(BoxConstrained { transform, inner })
    }

    pub fn transform(&self) -> &BoxTransform {
        &self.transform
    }

    pub fn inner(&self) -> &Arc<dyn DensityEstimator> {
        &self.inner
    }
}

struct BoxConstrainedConditioned<'a> {
    transform: &'a BoxTransform,
    inner: Box<dyn Conditioned + 'a>,
}

impl Conditioned for BoxConstrainedConditioned<'_> {
    fn theta_dim(&self) -> usize {
        self.transform.dim()
    }

    fn log_prob(&self, theta: &[f64]) -> Result<f64> {
        if theta.len() != self.transform.dim() {
            return Err(Error::dim(
                "box-constrained log_prob θ",
                self.transform.dim(),
                theta.len(),
            ));
        }
        // log p(θ) = log p_u(u(θ)) + log |du/dθ|, and log |du/dθ| per
        // dimension is −[ln(hi−lo) + ln s + ln(1−s)]. Anything on or past
        // the boundary is outside the support.
        let mut u = Vec::with_capacity(theta.len());
        let mut log_det_forward = 0.0;
        for ((&t, &a), &b) in theta.iter().zip(&self.transform.lo).zip(&self.transform.hi) {
            let s = (t - a) / (b - a);
            if !(s > 0.0 && s < 1.0) {
                return Ok(f64::NEG_INFINITY);
            }
            u.push(s.ln() - (1.0 - s).ln());
            log_det_forward += (b - a).ln() + s.ln() + (1.0 - s).ln();
        }
        Ok(self.inner.log_prob(&u)? - log_det_forward)
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.transform.to_box(&self.inner.sample(rng))
    }
}

impl DensityEstimator for BoxConstrained {
    fn theta_dim(&self) -> usize {
        self.transform.dim()
    }

    fn x_dim(&self) -> usize {
        self.inner.x_dim()
    }

    fn condition<'a>(&'a self, x: &[f64]) -> Result<Box<dyn Conditioned + 'a>> {
        Ok(Box::new(BoxConstrainedConditioned {
            transform: &self.transform,
            inner: self.inner.condition(x)?,
        }))
    }
}
