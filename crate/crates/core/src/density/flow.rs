//! Conditional affine coupling flow.
//!
//! Each coupling layer splits θ̃ (standardized θ) into a pass-through half A
//! and a transformed half B by an alternating even/odd index mask. A dense
//! conditioner eats `[θ̃_A | x̃]` and emits a shift t and a raw log-scale per
//! B-dimension; the raw log-scale is squashed to `s = CAP·tanh(raw/CAP)` so a
//! single wild conditioner output cannot blow up the Jacobian. Base density
//! is a standard normal, and the mask alternates between layers so every
//! dimension gets transformed (for 1-dim θ the pass-through half is empty and
//! the conditioner sees x̃ alone — the flow then degenerates to a conditional
//! Gaussian, which is why the mixture network stays the default backend for
//! one-dimensional problems).
//!
//! Density evaluation runs the inverse pass (data → base), accumulating
//! `−Σ s` as the log-Jacobian; training backpropagates through that inverse
//! pass by hand, layer by layer, using the cached per-layer values.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::nn::{Activation, DenseNet, Trace};
use crate::{Error, Result};

use super::{Conditioned, Standardizer};

/// Cap on |log scale| inside a coupling layer.
pub const SCALE_CAP: f64 = 3.0;

const LN_2PI: f64 = 1.837877066409345483560659472811;

#[derive(Debug, Clone)]
struct Coupling {
    a_idx: Vec<usize>,
    b_idx: Vec<usize>,
    net: DenseNet,
}

#[derive(Debug, Clone)]
pub struct CouplingFlow {
    pub(crate) theta_dim: usize,
    pub(crate) x_dim: usize,
    pub(crate) scale_cap: f64,
    layers: Vec<Coupling>,
    pub(crate) theta_std: Standardizer,
    pub(crate) x_std: Standardizer,
}

/// Alternating masks: even layers pass the even dims through and transform
/// the odd dims, odd layers the reverse. A 1-dim θ transforms its only
/// coordinate in every layer (empty pass-through half).
fn masks(theta_dim: usize, n_layers: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    let evens: Vec<usize> = (0..theta_dim).step_by(2).collect();
    let odds: Vec<usize> = (1..theta_dim).step_by(2).collect();
    (0..n_layers)
        .map(|l| {
            if odds.is_empty() {
                (Vec::new(), evens.clone())
            } else if l % 2 == 0 {
                (evens.clone(), odds.clone())
            } else {
                (odds.clone(), evens.clone())
            }
        })
        .collect()
}

impl CouplingFlow {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        theta_dim: usize,
        x_dim: usize,
        n_layers: usize,
        hidden: &[usize],
        activation: Activation,
        theta_std: Standardizer,
        x_std: Standardizer,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if n_layers == 0 {
            return Err(Error::Config("flow needs at least one coupling layer".into()));
        }
        if theta_std.dim() != theta_dim || x_std.dim() != x_dim {
            return Err(Error::Config(
                "standardizer dims do not match estimator dims".into(),
            ));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for (a_idx, b_idx) in masks(theta_dim, n_layers) {
            let mut dims = vec![a_idx.len() + x_dim];
            dims.extend_from_slice(hidden);
            dims.push(2 * b_idx.len());
            let net = DenseNet::new(&dims, activation, rng)?;
            layers.push(Coupling { a_idx, b_idx, net });
        }
        Ok(CouplingFlow {
            theta_dim,
            x_dim,
            scale_cap: SCALE_CAP,
            layers,
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

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub(crate) fn standardizers(&self) -> (&Standardizer, &Standardizer) {
        (&self.theta_std, &self.x_std)
    }

    pub(crate) fn nets(&self) -> impl Iterator<Item = &DenseNet> {
        self.layers.iter().map(|l| &l.net)
    }

    pub(crate) fn nets_mut(&mut self) -> impl Iterator<Item = &mut DenseNet> {
        self.layers.iter_mut().map(|l| &mut l.net)
    }

    /// Rebuild from parts (deserialization); masks are re-derived, so only
    /// the nets and dims need to be stored.
    pub(crate) fn from_parts(
        theta_dim: usize,
        x_dim: usize,
        scale_cap: f64,
        nets: Vec<DenseNet>,
        theta_std: Standardizer,
        x_std: Standardizer,
    ) -> Result<Self> {
        let m = masks(theta_dim, nets.len());
        let layers = m
            .into_iter()
            .zip(nets)
            .map(|((a_idx, b_idx), net)| {
                if net.input_dim() != a_idx.len() + x_dim || net.output_dim() != 2 * b_idx.len() {
                    return Err(Error::Format("coupling net dims disagree with header".into()));
                }
                Ok(Coupling { a_idx, b_idx, net })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CouplingFlow {
            theta_dim,
            x_dim,
            scale_cap,
            layers,
            theta_std,
            x_std,
        })
    }

    fn shift_scale(&self, layer: &Coupling, v: &[f64], xs: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut input = Vec::with_capacity(layer.a_idx.len() + xs.len());
        input.extend(layer.a_idx.iter().map(|&i| v[i]));
        input.extend_from_slice(xs);
        let out = layer.net.forward(&input);
        let nb = layer.b_idx.len();
        let t = out[..nb].to_vec();
        let s = out[nb..]
            .iter()
            .map(|&r| self.scale_cap * (r / self.scale_cap).tanh())
            .collect();
        (t, s)
    }

    /// Base → data direction on standardized coordinates.
    fn forward_std(&self, z: &[f64], xs: &[f64]) -> Vec<f64> {
        let mut v = z.to_vec();
        for layer in &self.layers {
            let (t, s) = self.shift_scale(layer, &v, xs);
            for (j, &bi) in layer.b_idx.iter().enumerate() {
                v[bi] = v[bi] * s[j].exp() + t[j];
            }
        }
        v
    }

    /// Data → base direction; returns (z, log q̃(θ̃|x̃)).
    fn inverse_std(&self, theta_std: &[f64], xs: &[f64]) -> (Vec<f64>, f64) {
        let mut u = theta_std.to_vec();
        let mut sum_s = 0.0;
        for layer in self.layers.iter().rev() {
            let (t, s) = self.shift_scale(layer, &u, xs);
            for (j, &bi) in layer.b_idx.iter().enumerate() {
                u[bi] = (u[bi] - t[j]) * (-s[j]).exp();
                sum_s += s[j];
            }
        }
        let log_base: f64 = u.iter().map(|z| -0.5 * z * z - 0.5 * LN_2PI).sum();
        (u, log_base - sum_s)
    }

    pub fn log_prob(&self, theta: &[f64], x: &[f64]) -> Result<f64> {
        if theta.len() != self.theta_dim {
            return Err(Error::dim("flow log_prob θ", self.theta_dim, theta.len()));
        }
        if x.len() != self.x_dim {
            return Err(Error::dim("flow log_prob x", self.x_dim, x.len()));
        }
        let ts = self.theta_std.forward(theta);
        let xs = self.x_std.forward(x);
        let (_, lp) = self.inverse_std(&ts, &xs);
        Ok(lp + self.theta_std.forward_log_det())
    }

    pub fn sample(&self, x: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        if x.len() != self.x_dim {
            return Err(Error::dim("flow sample x", self.x_dim, x.len()));
        }
        let xs = self.x_std.forward(x);
        let z: Vec<f64> = (0..self.theta_dim).map(|_| rng.sample(StandardNormal)).collect();
        Ok(self.theta_std.inverse(&self.forward_std(&z, &xs)))
    }

    /// Round-trip θ → z → θ; exposed so the invertibility property can be
    /// checked without peeking at internals.
    pub fn reconstruct(&self, theta: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        let ts = self.theta_std.forward(theta);
        let xs = self.x_std.forward(x);
        let (z, _) = self.inverse_std(&ts, &xs);
        Ok(self.theta_std.inverse(&self.forward_std(&z, &xs)))
    }

    /// Accumulate ∂(λ·log q(θ|x))/∂params into `grads` (one buffer per
    /// coupling net, layer order). Returns log q(θ|x).
    pub(crate) fn log_prob_backward(
        &self,
        theta: &[f64],
        x: &[f64],
        lambda: f64,
        grads: &mut [Vec<f64>],
    ) -> Result<f64> {
        assert_eq!(grads.len(), self.layers.len());
        if theta.len() != self.theta_dim {
            return Err(Error::dim("flow backward θ", self.theta_dim, theta.len()));
        }
        if x.len() != self.x_dim {
            return Err(Error::dim("flow backward x", self.x_dim, x.len()));
        }
        let ts = self.theta_std.forward(theta);
        let xs = self.x_std.forward(x);

        // Inverse pass, caching what the backward sweep needs. Entry order
        // follows the processing order: deepest layer first.
        struct Cache {
            trace: Trace,
            exp_neg_s: Vec<f64>,
            tanh_r: Vec<f64>,
            u_out_b: Vec<f64>,
        }
        let mut caches: Vec<Cache> = Vec::with_capacity(self.layers.len());
        let mut u = ts.clone();
        let mut sum_s = 0.0;
        for layer in self.layers.iter().rev() {
            let mut input = Vec::with_capacity(layer.a_idx.len() + xs.len());
            input.extend(layer.a_idx.iter().map(|&i| u[i]));
            input.extend_from_slice(&xs);
            let mut trace = Trace::default();
            let out = layer.net.forward_trace(&input, &mut trace).to_vec();
            let nb = layer.b_idx.len();
            let mut exp_neg_s = Vec::with_capacity(nb);
            let mut tanh_r = Vec::with_capacity(nb);
            let mut u_out_b = Vec::with_capacity(nb);
            for (j, &bi) in layer.b_idx.iter().enumerate() {
                let th = (out[nb + j] / self.scale_cap).tanh();
                let s = self.scale_cap * th;
                let e = (-s).exp();
                u[bi] = (u[bi] - out[j]) * e;
                sum_s += s;
                exp_neg_s.push(e);
                tanh_r.push(th);
                u_out_b.push(u[bi]);
            }
            caches.push(Cache {
                trace,
                exp_neg_s,
                tanh_r,
                u_out_b,
            });
        }
        let log_base: f64 = u.iter().map(|z| -0.5 * z * z - 0.5 * LN_2PI).sum();
        let log_prob = log_base + self.theta_std.forward_log_det() - sum_s;

        // Backward sweep: start at the base variable and walk the inversion
        // steps in reverse processing order (shallowest layer last).
        let mut ubar: Vec<f64> = u.iter().map(|&z| -lambda * z).collect();
        for (l, (cache, layer)) in caches.iter().rev().zip(self.layers.iter()).enumerate() {
            let nb = layer.b_idx.len();
            let mut out_adj = vec![0.0; 2 * nb];
            let mut vbar = vec![0.0; self.theta_dim];
            for (j, &bi) in layer.b_idx.iter().enumerate() {
                let ub = ubar[bi];
                let sbar = -ub * cache.u_out_b[j] - lambda;
                out_adj[j] = -ub * cache.exp_neg_s[j]; // shift adjoint
                out_adj[nb + j] = sbar * (1.0 - cache.tanh_r[j] * cache.tanh_r[j]);
                vbar[bi] = ub * cache.exp_neg_s[j];
            }
            let input_adj = layer.net.backward(&cache.trace, &out_adj, &mut grads[l]);
            for (k, &ai) in layer.a_idx.iter().enumerate() {
                vbar[ai] = ubar[ai] + input_adj[k];
            }
            ubar = vbar;
        }
        Ok(log_prob)
    }
}

pub(crate) struct FlowConditioned<'a> {
    pub(crate) flow: &'a CouplingFlow,
    pub(crate) xs: Vec<f64>, // standardized conditioning value
}

impl Conditioned for FlowConditioned<'_> {
    fn theta_dim(&self) -> usize {
        self.flow.theta_dim
    }

    fn log_prob(&self, theta: &[f64]) -> Result<f64> {
        if theta.len() != self.flow.theta_dim {
            return Err(Error::dim("flow log_prob θ", self.flow.theta_dim, theta.len()));
        }
        let ts = self.flow.theta_std.forward(theta);
        let (_, lp) = self.flow.inverse_std(&ts, &self.xs);
        Ok(lp + self.flow.theta_std.forward_log_det())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let z: Vec<f64> = (0..self.flow.theta_dim)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        self.flow
            .theta_std
            .inverse(&self.flow.forward_std(&z, &self.xs))
    }
}
