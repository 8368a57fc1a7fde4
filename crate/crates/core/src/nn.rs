//! Minimal dense-network substrate: forward pass, reverse-mode gradients,
//! Adam, and a versioned binary format. Everything is `f64` and single
//! threaded; parallelism belongs to callers, which keeps gradient results
//! bit-reproducible regardless of worker count.
//!
//! Networks are plain multilayer perceptrons — linear layers with tanh (or
//! ReLU) hidden activations and a linear output layer. Parameters live in one
//! flat `Vec<f64>` laid out layer by layer, row-major weights then biases,
//! which makes the optimizer, serialization, and finite-difference checks all
//! operate on the same contiguous view.

use std::io::{Read, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Hidden-layer nonlinearity. The output layer is always linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the *post*-activation value, so the
    /// forward trace only has to keep activations.
    #[inline]
    fn deriv_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn tag(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Tanh),
            1 => Ok(Activation::Relu),
            other => Err(Error::Format(format!("unknown activation tag {other}"))),
        }
    }
}

/// Per-layer slice boundaries into the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct LayerSpan {
    w: usize, // start of the row-major (out × in) weight block
    b: usize, // start of the bias block
    rows: usize,
    cols: usize,
}

/// A fully connected network with a fixed layer-size list `dims`
/// (`dims[0]` inputs, `dims.last()` outputs).
#[derive(Debug, Clone)]
pub struct DenseNet {
    dims: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
    spans: Vec<LayerSpan>,
}

/// Activations recorded by [`DenseNet::forward_trace`], consumed by
/// [`DenseNet::backward`]. Reusable across calls to avoid churn.
#[derive(Debug, Default, Clone)]
pub struct Trace {
    acts: Vec<Vec<f64>>,
}

impl DenseNet {
    /// Build a network with Xavier-uniform weights (±√(6/(fan_in+fan_out)))
    /// and zero biases.
    pub fn new(dims: &[usize], activation: Activation, rng: &mut ChaCha8Rng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!(
                "dense net needs at least input and output sizes, all nonzero; got {dims:?}"
            )));
        }
        let mut net = Self::zeroed(dims, activation);
        for l in 0..net.spans.len() {
            let span = net.spans[l];
            let limit = (6.0 / (span.cols + span.rows) as f64).sqrt();
            for w in &mut net.params[span.w..span.w + span.rows * span.cols] {
                *w = rng.random_range(-limit..limit);
            }
            // biases stay zero
        }
        Ok(net)
    }

    /// All-zero parameters; useful for fixed-baseline estimators and tests.
    pub fn zeroed(dims: &[usize], activation: Activation) -> Self {
        let mut spans = Vec::with_capacity(dims.len() - 1);
        let mut off = 0;
        for l in 0..dims.len() - 1 {
            let (cols, rows) = (dims[l], dims[l + 1]);
            spans.push(LayerSpan {
                w: off,
                b: off + rows * cols,
                rows,
                cols,
            });
            off += rows * cols + rows;
        }
        DenseNet {
            dims: dims.to_vec(),
            activation,
            params: vec![0.0; off],
            spans,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Plain forward pass.
    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        let mut trace = Trace::default();
        self.forward_trace(input, &mut trace);
        trace.acts.pop().unwrap()
    }

    /// Forward pass that records every layer's activations (input included)
    /// so [`Self::backward`] can run without recomputation. Returns a view of
    /// the output activation.
    pub fn forward_trace<'t>(&self, input: &[f64], trace: &'t mut Trace) -> &'t [f64] {
        assert_eq!(
            input.len(),
            self.dims[0],
            "dense net fed {} inputs, built for {}",
            input.len(),
            self.dims[0]
        );
        trace.acts.resize(self.dims.len(), Vec::new());
        trace.acts[0].clear();
        trace.acts[0].extend_from_slice(input);
        let last = self.spans.len() - 1;
        for (l, span) in self.spans.iter().enumerate() {
            let (before, after) = trace.acts.split_at_mut(l + 1);
            let prev = &before[l];
            let out = &mut after[0];
            out.clear();
            out.reserve(span.rows);
            for r in 0..span.rows {
                let row = &self.params[span.w + r * span.cols..span.w + (r + 1) * span.cols];
                let mut z = self.params[span.b + r];
                for (wi, ai) in row.iter().zip(prev.iter()) {
                    z += wi * ai;
                }
                out.push(if l == last { z } else { self.activation.apply(z) });
            }
        }
        trace.acts.last().unwrap()
    }

    /// Reverse-mode pass. `out_adjoint` is ∂L/∂output; gradients are
    /// *accumulated* into `grad` (same layout/length as [`Self::params`]),
    /// and ∂L/∂input is returned.
    pub fn backward(&self, trace: &Trace, out_adjoint: &[f64], grad: &mut [f64]) -> Vec<f64> {
        assert_eq!(out_adjoint.len(), self.output_dim());
        assert_eq!(grad.len(), self.params.len());
        let mut g = out_adjoint.to_vec();
        for (l, span) in self.spans.iter().enumerate().rev() {
            // Hidden layers: fold the activation derivative into the adjoint.
            if l != self.spans.len() - 1 {
                let act = &trace.acts[l + 1];
                for (gi, &ai) in g.iter_mut().zip(act.iter()) {
                    *gi *= self.activation.deriv_from_output(ai);
                }
            }
            let prev = &trace.acts[l];
            let mut g_prev = vec![0.0; span.cols];
            for r in 0..span.rows {
                let gr = g[r];
                grad[span.b + r] += gr;
                let wrow = span.w + r * span.cols;
                for c in 0..span.cols {
                    grad[wrow + c] += gr * prev[c];
                    g_prev[c] += self.params[wrow + c] * gr;
                }
            }
            g = g_prev;
        }
        g
    }

    // ---- binary format ------------------------------------------------

    /// Serialized layout (all little-endian):
    /// magic `b"NDNT"`, u32 format version (=1), u8 activation tag,
    /// u32 layer-size count, u32 layer sizes, then the flat parameter vector
    /// as f64 — per layer the row-major (out × in) weight block followed by
    /// the bias block, exactly the in-memory layout.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(b"NDNT")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&[self.activation.tag()])?;
        w.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for &d in &self.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"NDNT" {
            return Err(Error::Format(format!(
                "bad network magic {:?}, expected \"NDNT\"",
                magic
            )));
        }
        let version = read_u32(r)?;
        if version != 1 {
            return Err(Error::Format(format!(
                "unsupported network format version {version}"
            )));
        }
        let mut tag = [0u8];
        r.read_exact(&mut tag)?;
        let activation = Activation::from_tag(tag[0])?;
        let n_dims = read_u32(r)? as usize;
        if !(2..=64).contains(&n_dims) {
            return Err(Error::Format(format!("implausible layer count {n_dims}")));
        }
        let mut dims = Vec::with_capacity(n_dims);
        for _ in 0..n_dims {
            dims.push(read_u32(r)? as usize);
        }
        if dims.contains(&0) {
            return Err(Error::Format("zero-width layer in header".into()));
        }
        let mut net = Self::zeroed(&dims, activation);
        let mut buf = [0u8; 8];
        for p in &mut net.params {
            r.read_exact(&mut buf)?;
            *p = f64::from_le_bytes(buf);
        }
        Ok(net)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

// ---- Adam ---------------------------------------------------------------

/// Adam hyper-parameters. Defaults are the standard (β₁, β₂, ε) with the
/// learning rate left to the training config.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second-moment accumulators plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        AdamState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam update in place. Refuses non-finite gradients — a NaN here means
/// the loss upstream already went wrong, and silently absorbing it would turn
/// every later parameter into NaN.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Training(format!(
            "non-finite gradient at parameter {i} (step {})",
            state.t + 1
        )));
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// `log(Σ exp(v))` without overflow; `-inf` for an empty or all-`-inf` input.
pub fn logsumexp(vals: &[f64]) -> f64 {
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max; // empty, or every value -inf (or a NaN, which propagates)
    }
    let sum: f64 = vals.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}
