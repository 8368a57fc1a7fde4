//! Mixture density network: a dense trunk maps the (standardized)
//! conditioning value x to the parameters of a C-component diagonal-Gaussian
//! mixture over the (standardized) parameter vector θ.
//!
//! Trunk output layout, per conditioning value:
//! `[mixture logits (C) | component means (C·d) | raw scales (C·d)]`,
//! with scales mapped through `softplus(raw) + SCALE_FLOOR` so they stay
//! strictly positive and bounded away from collapse.
//!
//! A zeroed trunk therefore yields uniform weights, zero means and scale
//! `softplus(0) + floor = ln 2 + 1e-4` in standardized space — a fixed,
//! analytically checkable baseline density.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::nn::{logsumexp, Activation, DenseNet, Trace};
use crate::{Error, Result};

use super::{Conditioned, Standardizer};

/// Additive floor on component scales (standardized space).
pub const SCALE_FLOOR: f64 = 1e-4;

const LN_2PI: f64 = 1.837877066409345483560659472811;

#[derive(Debug, Clone)]
pub struct Mdn {
    pub(crate) theta_dim: usize,
    pub(crate) x_dim: usize,
    pub(crate) components: usize,
    pub(crate) trunk: DenseNet,
    pub(crate) theta_std: Standardizer,
    pub(crate) x_std: Standardizer,
}

/// Mixture parameters for one conditioning value, in standardized θ-space.
#[derive(Debug, Clone)]
pub struct MixtureParams {
    pub log_weights: Vec<f64>, // C, log-softmax of logits
    pub means: Vec<f64>,       // C·d
    pub scales: Vec<f64>,      // C·d
}

#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl Mdn {
    /// Fresh Xavier-initialized MDN. `hidden` sizes the trunk's hidden
    /// layers; the output width is fixed by `components` and the dims.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        theta_dim: usize,
        x_dim: usize,
        components: usize,
        hidden: &[usize],
        activation: Activation,
        theta_std: Standardizer,
        x_std: Standardizer,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if components == 0 {
            return Err(Error::Config("MDN needs at least one component".into()));
        }
        if theta_std.dim() != theta_dim || x_std.dim() != x_dim {
            return Err(Error::Config(
                "standardizer dims do not match estimator dims".into(),
            ));
        }
        let mut dims = vec![x_dim];
        dims.extend_from_slice(hidden);
        dims.push(components * (1 + 2 * theta_dim));
        let trunk = DenseNet::new(&dims, activation, rng)?;
        Ok(Mdn {
            theta_dim,
            x_dim,
            components,
            trunk,
            theta_std,
            x_std,
        })
    }

    /// Baseline with an all-zero trunk (uniform weights, zero means,
    /// scale = softplus(0) + floor). Used as a fixed reference in tests.
    pub fn zeroed_trunk(
        theta_dim: usize,
        x_dim: usize,
        components: usize,
        hidden: &[usize],
        activation: Activation,
        theta_std: Standardizer,
        x_std: Standardizer,
    ) -> Self {
        let mut dims = vec![x_dim];
        dims.extend_from_slice(hidden);
        dims.push(components * (1 + 2 * theta_dim));
        Mdn {
            theta_dim,
            x_dim,
            components,
            trunk: DenseNet::zeroed(&dims, activation),
            theta_std,
            x_std,
        }
    }

    /// Rebuild from parts (deserialization), checking the trunk's shape
    /// against the declared dims.
    pub(crate) fn from_parts(
        theta_dim: usize,
        x_dim: usize,
        components: usize,
        trunk: DenseNet,
        theta_std: Standardizer,
        x_std: Standardizer,
    ) -> Result<Self> {
        if components == 0
            || trunk.input_dim() != x_dim
            || trunk.output_dim() != components * (1 + 2 * theta_dim)
            || theta_std.dim() != theta_dim
            || x_std.dim() != x_dim
        {
            return Err(Error::Format("MDN trunk dims disagree with header".into()));
        }
        Ok(Mdn {
            theta_dim,
            x_dim,
            components,
            trunk,
            theta_std,
            x_std,
        })
    }

    pub fn theta_dim(&self) -> usize {
        self.theta_dim
    }

    pub fn x_dim(&self) -> usize {
        self.x_dim
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub(crate) fn trunk(&self) -> &DenseNet {
        &self.trunk
    }

    pub(crate) fn trunk_mut(&mut self) -> &mut DenseNet {
        &mut self.trunk
    }

    pub(crate) fn standardizers(&self) -> (&Standardizer, &Standardizer) {
        (&self.theta_std, &self.x_std)
    }

    /// Map a raw trunk output vector to mixture parameters.
    fn unpack(&self, out: &[f64]) -> MixtureParams {
        let (c, d) = (self.components, self.theta_dim);
        let logits = &out[..c];
        let lse = logsumexp(logits);
        MixtureParams {
            log_weights: logits.iter().map(|l| l - lse).collect(),
            means: out[c..c + c * d].to_vec(),
            scales: out[c + c * d..].iter().map(|&r| softplus(r) + SCALE_FLOOR).collect(),
        }
    }

    /// Mixture parameters at `x` (original space).
    pub fn mixture_at(&self, x: &[f64]) -> Result<MixtureParams> {
        if x.len() != self.x_dim {
            return Err(Error::dim("mdn condition", self.x_dim, x.len()));
        }
        let xs = self.x_std.forward(x);
        Ok(self.unpack(&self.trunk.forward(&xs)))
    }

    /// Log-density of the mixture in *standardized* θ-space.
    #[allow(clippy::needless_range_loop)]
    fn log_prob_std(params: &MixtureParams, theta_std: &[f64]) -> f64 {
        let c = params.log_weights.len();
        let d = theta_std.len();
        let mut comps = Vec::with_capacity(c);
        for k in 0..c {
            let mut lp = params.log_weights[k];
            for j in 0..d {
                let mu = params.means[k * d + j];
                let s = params.scales[k * d + j];
                let z = (theta_std[j] - mu) / s;
                lp += -0.5 * z * z - s.ln() - 0.5 * LN_2PI;
            }
            comps.push(lp);
        }
        logsumexp(&comps)
    }

    /// log q(θ|x) in original coordinates, including the standardizer's
    /// change-of-variables term so the density normalizes over θ.
    pub fn log_prob(&self, theta: &[f64], x: &[f64]) -> Result<f64> {
        if theta.len() != self.theta_dim {
            return Err(Error::dim("mdn log_prob θ", self.theta_dim, theta.len()));
        }
        let params = self.mixture_at(x)?;
        let ts = self.theta_std.forward(theta);
        Ok(Self::log_prob_std(&params, &ts) + self.theta_std.forward_log_det())
    }

    /// Accumulate ∂(λ·log q(θᵢ|x))/∂trunk-params into `grad` for several θ
    /// sharing one conditioning value. Returns the log-densities.
    ///
    /// Sharing the trunk pass across the θs is what makes atomic-loss
    /// training (many candidate θ per x) affordable.
    #[allow(clippy::needless_range_loop)]
    pub(crate) fn log_prob_backward_shared_x(
        &self,
        thetas: &[&[f64]],
        x: &[f64],
        lambdas: &[f64],
        grad: &mut [f64],
    ) -> Result<Vec<f64>> {
        assert_eq!(thetas.len(), lambdas.len());
        if x.len() != self.x_dim {
            return Err(Error::dim("mdn backward x", self.x_dim, x.len()));
        }
        let (c, d) = (self.components, self.theta_dim);
        let xs = self.x_std.forward(x);
        let mut trace = Trace::default();
        let out = self.trunk.forward_trace(&xs, &mut trace).to_vec();
        let params = self.unpack(&out);
        let weights: Vec<f64> = params.log_weights.iter().map(|lw| lw.exp()).collect();

        // Adjoint on the raw trunk output: [logits | means | raw scales].
        let mut out_adj = vec![0.0; out.len()];
        let mut log_probs = Vec::with_capacity(thetas.len());
        let mut comp_lp = vec![0.0; c];
        for (&theta, &lam) in thetas.iter().zip(lambdas) {
            if theta.len() != d {
                return Err(Error::dim("mdn backward θ", d, theta.len()));
            }
            let ts = self.theta_std.forward(theta);
            for k in 0..c {
                let mut lp = params.log_weights[k];
                for j in 0..d {
                    let mu = params.means[k * d + j];
                    let s = params.scales[k * d + j];
                    let z = (ts[j] - mu) / s;
                    lp += -0.5 * z * z - s.ln() - 0.5 * LN_2PI;
                }
                comp_lp[k] = lp;
            }
            let lse = logsumexp(&comp_lp);
            log_probs.push(lse + self.theta_std.forward_log_det());
            if lam == 0.0 {
                continue;
            }
            for k in 0..c {
                let resp = (comp_lp[k] - lse).exp();
                // logits: ∂log q/∂logit_k = resp_k − softmax_k
                out_adj[k] += lam * (resp - weights[k]);
                for j in 0..d {
                    let mu = params.means[k * d + j];
                    let s = params.scales[k * d + j];
                    let diff = ts[j] - mu;
                    let dmu = resp * diff / (s * s);
                    let dsigma = resp * (diff * diff / (s * s * s) - 1.0 / s);
                    out_adj[c + k * d + j] += lam * dmu;
                    // σ = softplus(raw) + floor ⇒ dσ/draw = sigmoid(raw)
                    let raw = out[c + c * d + k * d + j];
                    out_adj[c + c * d + k * d + j] += lam * dsigma * sigmoid(raw);
                }
            }
        }
        self.trunk.backward(&trace, &out_adj, grad);
        Ok(log_probs)
    }

    pub(crate) fn sample_std(params: &MixtureParams, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let c = params.log_weights.len();
        let d = params.means.len() / c;
        // Categorical over components via inverse-CDF on the weights.
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = c - 1;
        for (i, lw) in params.log_weights.iter().enumerate() {
            acc += lw.exp();
            if u < acc {
                k = i;
                break;
            }
        }
        (0..d)
            .map(|j| {
                let eps: f64 = rng.sample(StandardNormal);
                params.means[k * d + j] + params.scales[k * d + j] * eps
            })
            .collect()
    }
}

/// Mixture frozen at one x; lives only as long as the borrow of the MDN.
pub(crate) struct MdnConditioned<'a> {
    pub(crate) params: MixtureParams,
    pub(crate) mdn: &'a Mdn,
}

impl Conditioned for MdnConditioned<'_> {
    fn theta_dim(&self) -> usize {
        self.mdn.theta_dim
    }

    fn log_prob(&self, theta: &[f64]) -> Result<f64> {
        if theta.len() != self.mdn.theta_dim {
            return Err(Error::dim("mdn log_prob θ", self.mdn.theta_dim, theta.len()));
        }
        let ts = self.mdn.theta_std.forward(theta);
        Ok(Mdn::log_prob_std(&self.params, &ts) + self.mdn.theta_std.forward_log_det())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let ts = Mdn::sample_std(&self.params, rng);
        self.mdn.theta_std.inverse(&ts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn identity_std(dim: usize) -> Standardizer {
        Standardizer::identity(dim)
    }

    #[test]
    fn zero_trunk_single_component_is_a_fixed_gaussian() {
        let mdn = Mdn::zeroed_trunk(
            2,
            3,
            1,
            &[10],
            Activation::Tanh,
            identity_std(2),
            identity_std(3),
        );
        let sigma = softplus(0.0) + SCALE_FLOOR;
        let theta = [0.4, -1.1];
        let expect: f64 = theta
            .iter()
            .map(|t| -0.5 * (t / sigma).powi(2) - sigma.ln() - 0.5 * LN_2PI)
            .sum();
        let got = mdn.log_prob(&theta, &[0.0, 0.0, 0.0]).unwrap();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn log_prob_gradient_matches_central_differences() {
        let mut rng = seed::stream(11, &[0]);
        let mdn = Mdn::new(
            2,
            2,
            3,
            &[8],
            Activation::Tanh,
            identity_std(2),
            identity_std(2),
            &mut rng,
        )
        .unwrap();
        let theta = [0.3, -0.8];
        let x = [0.5, 0.1];
        let mut grad = vec![0.0; mdn.trunk.n_params()];
        mdn.log_prob_backward_shared_x(&[&theta], &x, &[1.0], &mut grad)
            .unwrap();

        let h = 1e-5;
        let mut m = mdn.clone();
        for i in 0..grad.len() {
            let orig = m.trunk.params()[i];
            m.trunk.params_mut()[i] = orig + h;
            let up = m.log_prob(&theta, &x).unwrap();
            m.trunk.params_mut()[i] = orig - h;
            let down = m.log_prob(&theta, &x).unwrap();
            m.trunk.params_mut()[i] = orig;
            let num = (up - down) / (2.0 * h);
            let denom = grad[i].abs().max(num.abs()).max(1e-8);
            assert!(
                ((grad[i] - num) / denom).abs() < 1e-4,
                "param {i}: {} vs {num}",
                grad[i]
            );
        }
    }

    #[test]
    fn shared_x_backward_matches_sum_of_single_calls() {
        let mut rng = seed::stream(11, &[1]);
        let mdn = Mdn::new(
            1,
            1,
            4,
            &[6],
            Activation::Tanh,
            identity_std(1),
            identity_std(1),
            &mut rng,
        )
        .unwrap();
        let x = [0.2];
        let thetas: Vec<Vec<f64>> = vec![vec![0.1], vec![-0.4], vec![1.2]];
        let lams = [0.5, -1.0, 2.0];

        let mut grad_joint = vec![0.0; mdn.trunk.n_params()];
        let refs: Vec<&[f64]> = thetas.iter().map(|t| t.as_slice()).collect();
        mdn.log_prob_backward_shared_x(&refs, &x, &lams, &mut grad_joint)
            .unwrap();

        let mut grad_sep = vec![0.0; mdn.trunk.n_params()];
        for (t, &l) in thetas.iter().zip(&lams) {
            mdn.log_prob_backward_shared_x(&[t.as_slice()], &x, &[l], &mut grad_sep)
                .unwrap();
        }
        for (a, b) in grad_joint.iter().zip(&grad_sep) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn scales_respect_the_floor() {
        let mut rng = seed::stream(11, &[2]);
        let mdn = Mdn::new(
            1,
            1,
            5,
            &[8],
            Activation::Tanh,
            identity_std(1),
            identity_std(1),
            &mut rng,
        )
        .unwrap();
        let params = mdn.mixture_at(&[0.7]).unwrap();
        assert!(params.scales.iter().all(|&s| s >= SCALE_FLOOR));
        let total: f64 = params.log_weights.iter().map(|lw| lw.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
