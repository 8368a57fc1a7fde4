//! Conditional density estimation q(θ|x).
//!
//! Two trainable backends share one interface: a mixture density network
//! ([`Mdn`], the default) and an affine coupling flow ([`CouplingFlow`]).
//! Both operate on standardized coordinates internally — a [`Standardizer`]
//! per θ and per x — and fold the standardizer's Jacobian into `log_prob`, so
//! reported densities always normalize in the *original* parameterization.
//!
//! [`DensityEstimator`] is the object-safe view the rest of the crate
//! consumes (truncation, coverage, the round loop). Its key access pattern is
//! [`DensityEstimator::condition`]: fixing x once and then evaluating or
//! sampling many θ, which lets the MDN run its trunk a single time for
//! thousands of mixture evaluations.
//!
//! Training lives in [`train`]; estimators are grouped into uniform-weight
//! [`Ensemble`]s (a single-member ensemble is exactly its member).

mod analytic;
mod flow;
mod mdn;
mod train;
mod transform;

pub use analytic::{FixedDiagGaussian, LinearGaussianPosterior};
pub use flow::{CouplingFlow, SCALE_CAP};
pub use mdn::{Mdn, MixtureParams, SCALE_FLOOR};
pub use train::{fit, fit_ensemble, Backend, FitOptions, Loss, TrainConfig, TrainReport};
pub use transform::{BoxConstrained, BoxTransform};

use std::io::{Read, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{logsumexp, DenseNet};
use crate::{Error, Result};

/// Smallest per-dimension standard deviation the standardizer will report;
/// constant columns standardize to zero instead of dividing by zero.
pub const STD_FLOOR: f64 = 1e-8;

/// Per-dimension affine map to zero mean and unit scale, with its
/// log-Jacobian. Fitted once (on first-round data, in the round loop) and
/// then shared by every estimator trained on that run's pooled data.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Standardizer {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Standardizer {
    /// Fit per-dimension mean and (population) standard deviation.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::Config("cannot fit a standardizer to no rows".into()));
        }
        let dim = rows[0].len();
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::dim("standardizer row", dim, r.len()));
            }
            if let Some(j) = r.iter().position(|v| !v.is_finite()) {
                return Err(Error::Config(format!(
                    "non-finite value in standardizer input (row {i}, dim {j})"
                )));
            }
        }
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .iter()
            .map(|v| (v / n as f64).sqrt().max(STD_FLOOR))
            .collect();
        Ok(Standardizer { mean, std })
    }

    /// No-op standardizer (zero mean, unit scale).
    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn forward(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.mean.len());
        v.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn inverse(&self, z: &[f64]) -> Vec<f64> {
        debug_assert_eq!(z.len(), self.mean.len());
        z.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((z, m), s)| z * s + m)
            .collect()
    }

    /// log |det ∂z/∂v| = −Σ ln σᵢ. Added to standardized-space log-densities
    /// so they normalize in original coordinates.
    pub fn forward_log_det(&self) -> f64 {
        -self.std.iter().map(|s| s.ln()).sum::<f64>()
    }

    fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&(self.mean.len() as u32).to_le_bytes())?;
        for v in self.mean.iter().chain(&self.std) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let dim = u32::from_le_bytes(b4) as usize;
        if dim == 0 || dim > 1 << 20 {
            return Err(Error::Format(format!("implausible standardizer dim {dim}")));
        }
        let mut read_vec = |n: usize| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(n);
            let mut b8 = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut b8)?;
                out.push(f64::from_le_bytes(b8));
            }
            Ok(out)
        };
        let mean = read_vec(dim)?;
        let std = read_vec(dim)?;
        Ok(Standardizer { mean, std })
    }
}

/// A conditional density with fixed conditioning value: evaluate and sample
/// θ at one x. Obtained from [`DensityEstimator::condition`].
pub trait Conditioned: Send + Sync {
    fn theta_dim(&self) -> usize;
    fn log_prob(&self, theta: &[f64]) -> Result<f64>;
    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64>;
}

/// Object-safe view of a conditional density estimator.
pub trait DensityEstimator: Send + Sync {
    fn theta_dim(&self) -> usize;
    fn x_dim(&self) -> usize;

    /// Freeze the conditioning value. Evaluating or sampling many θ at one x
    /// goes through this so per-x work (e.g. the MDN trunk) happens once.
    fn condition<'a>(&'a self, x: &[f64]) -> Result<Box<dyn Conditioned + 'a>>;

    fn log_prob(&self, theta: &[f64], x: &[f64]) -> Result<f64> {
        self.condition(x)?.log_prob(theta)
    }

    fn sample(&self, x: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        Ok(self.condition(x)?.sample(rng))
    }
}

impl DensityEstimator for Mdn {
    fn theta_dim(&self) -> usize {
        Mdn::theta_dim(self)
    }

    fn x_dim(&self) -> usize {
        Mdn::x_dim(self)
    }

    fn condition<'a>(&'a self, x: &[f64]) -> Result<Box<dyn Conditioned + 'a>> {
        Ok(Box::new(mdn::MdnConditioned {
            params: self.mixture_at(x)?,
            mdn: self,
        }))
    }
}

impl DensityEstimator for CouplingFlow {
    fn theta_dim(&self) -> usize {
        CouplingFlow::theta_dim(self)
    }

    fn x_dim(&self) -> usize {
        CouplingFlow::x_dim(self)
    }

    fn condition<'a>(&'a self, x: &[f64]) -> Result<Box<dyn Conditioned + 'a>> {
        if x.len() != self.x_dim {
            return Err(Error::dim("flow condition", self.x_dim, x.len()));
        }
        Ok(Box::new(flow::FlowConditioned {
            flow: self,
            xs: self.x_std.forward(x),
        }))
    }
}

/// A trained estimator of either backend.
#[derive(Debug, Clone)]
pub enum FittedEstimator {
    Mdn(Mdn),
    Flow(CouplingFlow),
}

impl FittedEstimator {
    pub fn as_dyn(&self) -> &dyn DensityEstimator {
        match self {
            FittedEstimator::Mdn(m) => m,
            FittedEstimator::Flow(f) => f,
        }
    }

    pub(crate) fn standardizers(&self) -> (&Standardizer, &Standardizer) {
        match self {
            FittedEstimator::Mdn(m) => m.standardizers(),
            FittedEstimator::Flow(f) => f.standardizers(),
        }
    }

    /// Flat snapshot of all trainable parameters (one buffer per net).
    pub(crate) fn snapshot(&self) -> Vec<Vec<f64>> {
        match self {
            FittedEstimator::Mdn(m) => vec![m.trunk().params().to_vec()],
            FittedEstimator::Flow(f) => f.nets().map(|n| n.params().to_vec()).collect(),
        }
    }

    pub(crate) fn restore(&mut self, snap: &[Vec<f64>]) {
        match self {
            FittedEstimator::Mdn(m) => m.trunk_mut().params_mut().copy_from_slice(&snap[0]),
            FittedEstimator::Flow(f) => {
                for (net, s) in f.nets_mut().zip(snap) {
                    net.params_mut().copy_from_slice(s);
                }
            }
        }
    }

    pub(crate) fn grad_buffers(&self) -> Vec<Vec<f64>> {
        match self {
            FittedEstimator::Mdn(m) => vec![vec![0.0; m.trunk().n_params()]],
            FittedEstimator::Flow(f) => f.nets().map(|n| vec![0.0; n.n_params()]).collect(),
        }
    }

    /// ∂(λᵢ·log q(θᵢ|x))/∂params accumulated into `grads`, all θᵢ sharing
    /// one x. Returns the log-densities.
    pub(crate) fn backward_shared_x(
        &self,
        thetas: &[&[f64]],
        x: &[f64],
        lambdas: &[f64],
        grads: &mut [Vec<f64>],
    ) -> Result<Vec<f64>> {
        match self {
            FittedEstimator::Mdn(m) => {
                m.log_prob_backward_shared_x(thetas, x, lambdas, &mut grads[0])
            }
            FittedEstimator::Flow(f) => thetas
                .iter()
                .zip(lambdas)
                .map(|(t, &l)| f.log_prob_backward(t, x, l, grads))
                .collect(),
        }
    }

    pub(crate) fn adam_apply(
        &mut self,
        grads: &[Vec<f64>],
        states: &mut [crate::nn::AdamState],
        cfg: &crate::nn::AdamConfig,
    ) -> Result<()> {
        match self {
            FittedEstimator::Mdn(m) => {
                crate::nn::adam_step(m.trunk_mut().params_mut(), &grads[0], &mut states[0], cfg)
            }
            FittedEstimator::Flow(f) => {
                for ((net, g), st) in f.nets_mut().zip(grads).zip(states) {
                    crate::nn::adam_step(net.params_mut(), g, st, cfg)?;
                }
                Ok(())
            }
        }
    }

    fn write_to(&self, w: &mut impl Write) -> Result<()> {
        match self {
            FittedEstimator::Mdn(m) => {
                w.write_all(&[0u8])?;
                w.write_all(&(m.theta_dim() as u32).to_le_bytes())?;
                w.write_all(&(m.x_dim() as u32).to_le_bytes())?;
                w.write_all(&(m.components() as u32).to_le_bytes())?;
                let (ts, xs) = m.standardizers();
                ts.write_to(w)?;
                xs.write_to(w)?;
                m.trunk().write_to(w)
            }
            FittedEstimator::Flow(f) => {
                w.write_all(&[1u8])?;
                w.write_all(&(f.theta_dim() as u32).to_le_bytes())?;
                w.write_all(&(f.x_dim() as u32).to_le_bytes())?;
                w.write_all(&(f.n_layers() as u32).to_le_bytes())?;
                w.write_all(&f.scale_cap.to_le_bytes())?;
                let (ts, xs) = f.standardizers();
                ts.write_to(w)?;
                xs.write_to(w)?;
                for net in f.nets() {
                    net.write_to(w)?;
                }
                Ok(())
            }
        }
    }

    fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut tag = [0u8];
        r.read_exact(&mut tag)?;
        let mut b4 = [0u8; 4];
        let mut u32_of = |r: &mut dyn Read| -> Result<u32> {
            r.read_exact(&mut b4)?;
            Ok(u32::from_le_bytes(b4))
        };
        match tag[0] {
            0 => {
                let theta_dim = u32_of(r)? as usize;
                let x_dim = u32_of(r)? as usize;
                let components = u32_of(r)? as usize;
                let theta_std = Standardizer::read_from(r)?;
                let x_std = Standardizer::read_from(r)?;
                let trunk = DenseNet::read_from(r)?;
                Mdn::from_parts(theta_dim, x_dim, components, trunk, theta_std, x_std)
                    .map(FittedEstimator::Mdn)
            }
            1 => {
                let theta_dim = u32_of(r)? as usize;
                let x_dim = u32_of(r)? as usize;
                let n_layers = u32_of(r)? as usize;
                let mut b8 = [0u8; 8];
                r.read_exact(&mut b8)?;
                let scale_cap = f64::from_le_bytes(b8);
                let theta_std = Standardizer::read_from(r)?;
                let x_std = Standardizer::read_from(r)?;
                let nets = (0..n_layers)
                    .map(|_| DenseNet::read_from(r))
                    .collect::<Result<Vec<_>>>()?;
                CouplingFlow::from_parts(theta_dim, x_dim, scale_cap, nets, theta_std, x_std)
                    .map(FittedEstimator::Flow)
            }
            other => Err(Error::Format(format!("unknown estimator backend tag {other}"))),
        }
    }
}

impl DensityEstimator for FittedEstimator {
    fn theta_dim(&self) -> usize {
        self.as_dyn().theta_dim()
    }

    fn x_dim(&self) -> usize {
        self.as_dyn().x_dim()
    }

    fn condition<'a>(&'a self, x: &[f64]) -> Result<Box<dyn Conditioned + 'a>> {
        self.as_dyn().condition(x)
    }
}

/// Uniform-weight deep ensemble: log q = logsumexp(members) − log E, samples
/// pick a member uniformly. A single-member ensemble is exactly its member.
#[derive(Debug, Clone)]
pub struct Ensemble {
    members: Vec<FittedEstimator>,
}

/// Magic + version header for the estimator artifact.
const ENSEMBLE_MAGIC: &[u8; 4] = b"TSPE";
const ENSEMBLE_VERSION: u32 = 1;

impl Ensemble {
    pub fn new(members: Vec<FittedEstimator>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Config("ensemble needs at least one member".into()));
        }
        let (td, xd) = (members[0].theta_dim(), members[0].x_dim());
        if members.iter().any(|m| m.theta_dim() != td || m.x_dim() != xd) {
            return Err(Error::Config("ensemble members disagree on dims".into()));
        }
        Ok(Ensemble { members })
    }

    pub fn members(&self) -> &[FittedEstimator] {
        &self.members
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(ENSEMBLE_MAGIC)?;
        w.write_all(&ENSEMBLE_VERSION.to_le_bytes())?;
        w.write_all(&(self.members.len() as u32).to_le_bytes())?;
        for m in &self.members {
            m.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != ENSEMBLE_MAGIC {
            return Err(Error::Format(format!(
                "bad estimator magic {magic:?}, expected {ENSEMBLE_MAGIC:?}"
            )));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != ENSEMBLE_VERSION {
            return Err(Error::Format(format!(
                "unsupported estimator format version {version}"
            )));
        }
        r.read_exact(&mut b4)?;
        let count = u32::from_le_bytes(b4) as usize;
        if count == 0 || count > 4096 {
            return Err(Error::Format(format!("implausible member count {count}")));
        }
        let members = (0..count)
            .map(|_| FittedEstimator::read_from(r))
            .collect::<Result<Vec<_>>>()?;
        Ensemble::new(members)
    }
}

struct EnsembleConditioned<'a> {
    members: Vec<Box<dyn Conditioned + 'a>>,
}

impl Conditioned for EnsembleConditioned<'_> {
    fn theta_dim(&self) -> usize {
        self.members[0].theta_dim()
    }

    fn log_prob(&self, theta: &[f64]) -> Result<f64> {
        let lps = self
            .members
            .iter()
            .map(|m| m.log_prob(theta))
            .collect::<Result<Vec<_>>>()?;
        Ok(logsumexp(&lps) - (self.members.len() as f64).ln())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let k = rng.random_range(0..self.members.len());
        self.members[k].sample(rng)
    }
}

impl DensityEstimator for Ensemble {
    fn theta_dim(&self) -> usize {
        self.members[0].theta_dim()
    }

    fn x_dim(&self) -> usize {
        self.members[0].x_dim()
    }

    fn condition<'a>(&'a self, x: &[f64]) -> Result<Box<dyn Conditioned + 'a>> {
        let members = self
            .members
            .iter()
            .map(|m| m.condition(x))
            .collect::<Result<Vec<_>>>()?;
        Ok(Box::new(EnsembleConditioned { members }))
    }
}

impl<T: DensityEstimator + ?Sized> DensityEstimator for std::sync::Arc<T> {
    fn theta_dim(&self) -> usize {
        (**self).theta_dim()
    }

    fn x_dim(&self) -> usize {
        (**self).x_dim()
    }

    fn condition<'a>(&'a self, x: &[f64]) -> Result<Box<dyn Conditioned + 'a>> {
        (**self).condition(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use crate::seed;

    #[test]
    fn standardizer_round_trips_and_reports_log_det() {
        let rows = vec![vec![1.0, 10.0], vec![3.0, 30.0], vec![5.0, 20.0]];
        let s = Standardizer::fit(&rows).unwrap();
        let z = s.forward(&rows[0]);
        let back = s.inverse(&z);
        for (a, b) in rows[0].iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
        let expect = -s.std().iter().map(|v| v.ln()).sum::<f64>();
        assert!((s.forward_log_det() - expect).abs() < 1e-12);
    }

    #[test]
    fn standardizer_floors_constant_columns() {
        let rows = vec![vec![2.0], vec![2.0], vec![2.0]];
        let s = Standardizer::fit(&rows).unwrap();
        assert_eq!(s.std()[0], STD_FLOOR);
        assert_eq!(s.forward(&[2.0])[0], 0.0);
    }

    #[test]
    fn standardizer_rejects_non_finite_rows() {
        let rows = vec![vec![1.0], vec![f64::NAN]];
        assert!(matches!(Standardizer::fit(&rows), Err(Error::Config(_))));
    }

    #[test]
    fn single_member_ensemble_equals_its_member() {
        let mut rng = seed::stream(31, &[0]);
        let mdn = Mdn::new(
            2,
            1,
            3,
            &[8],
            Activation::Tanh,
            Standardizer::identity(2),
            Standardizer::identity(1),
            &mut rng,
        )
        .unwrap();
        let single = FittedEstimator::Mdn(mdn.clone());
        let ens = Ensemble::new(vec![single]).unwrap();
        let theta = [0.3, -0.2];
        let x = [0.9];
        let a = mdn.log_prob(&theta, &x).unwrap();
        let b = DensityEstimator::log_prob(&ens, &theta, &x).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn ensemble_log_prob_is_logsumexp_minus_log_e() {
        let mut rng = seed::stream(31, &[1]);
        let members: Vec<FittedEstimator> = (0..3)
            .map(|_| {
                FittedEstimator::Mdn(
                    Mdn::new(
                        1,
                        1,
                        2,
                        &[6],
                        Activation::Tanh,
                        Standardizer::identity(1),
                        Standardizer::identity(1),
                        &mut rng,
                    )
                    .unwrap(),
                )
            })
            .collect();
        let theta = [0.4];
        let x = [-0.3];
        let lps: Vec<f64> = members
            .iter()
            .map(|m| m.as_dyn().log_prob(&theta, &x).unwrap())
            .collect();
        let expect = logsumexp(&lps) - 3f64.ln();
        let ens = Ensemble::new(members).unwrap();
        let got = DensityEstimator::log_prob(&ens, &theta, &x).unwrap();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn estimator_artifact_round_trips_both_backends() {
        let mut rng = seed::stream(31, &[2]);
        let mdn = Mdn::new(
            2,
            3,
            4,
            &[10, 10],
            Activation::Tanh,
            Standardizer::identity(2),
            Standardizer::identity(3),
            &mut rng,
        )
        .unwrap();
        let flow = CouplingFlow::new(
            2,
            3,
            3,
            &[10],
            Activation::Relu,
            Standardizer::identity(2),
            Standardizer::identity(3),
            &mut rng,
        )
        .unwrap();
        let ens = Ensemble::new(vec![
            FittedEstimator::Mdn(mdn),
            FittedEstimator::Flow(flow),
        ])
        .unwrap();
        let mut buf = Vec::new();
        ens.write_to(&mut buf).unwrap();
        let back = Ensemble::read_from(&mut buf.as_slice()).unwrap();
        let theta = [0.1, -0.5];
        let x = [0.2, 0.3, -0.1];
        let a = DensityEstimator::log_prob(&ens, &theta, &x).unwrap();
        let b = DensityEstimator::log_prob(&back, &theta, &x).unwrap();
        assert_eq!(a, b, "round trip must be bit-exact");
    }
}
