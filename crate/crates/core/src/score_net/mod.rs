//! Conditional noise-prediction network `eps_theta(x_t, c, t)`.
//!
//! A plain MLP on `[x || one_hot(c) || time_features(t / T)]` with a smooth
//! activation and a per-coordinate output clamp. The same layer kernels back
//! both the value-only forward pass and the differentiable [`tape`], so the
//! two agree bit for bit.

pub mod checkpoint;
pub mod finite_diff;
pub mod tape;

use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
pub use tape::{eval_loss, grad_loss, Graph, GraphStats, Matrix, Var};

pub const DEFAULT_OUTPUT_CLAMP: f64 = 10.0;

/// The toy "prompt": one of `C` labels, embedded one-hot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Condition {
    pub label: usize,
    pub count: usize,
}

impl Condition {
    pub fn new(label: usize, count: usize) -> Result<Self> {
        if label >= count {
            return Err(Error::config(format!("condition {label} out of range 0..{count}")));
        }
        Ok(Condition { label, count })
    }

    pub fn embedding(&self) -> Vec<f64> {
        let mut e = vec![0.0; self.count];
        e[self.label] = 1.0;
        e
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Silu,
    Tanh,
}

impl Activation {
    pub(crate) fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
        }
    }

    pub(crate) fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Tanh => 1.0 - x.tanh().powi(2),
        }
    }

    fn tag(self) -> u8 {
        match self {
            Activation::Silu => 0,
            Activation::Tanh => 1,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Silu),
            1 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

/// Shape of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub data_dim: usize,
    pub conditions: usize,
    /// Number of sinusoidal features of `t / T`; must be even.
    pub time_features: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub output_clamp: f64,
}

impl Architecture {
    pub fn new(data_dim: usize, conditions: usize) -> Self {
        Architecture {
            data_dim,
            conditions,
            time_features: 8,
            hidden: vec![64, 64],
            activation: Activation::Silu,
            output_clamp: DEFAULT_OUTPUT_CLAMP,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.conditions == 0 {
            return Err(Error::config("data dimension and condition count must be positive"));
        }
        if !self.time_features.is_multiple_of(2) {
            return Err(Error::config("time feature count must be even"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden widths must be positive"));
        }
        if !(self.output_clamp > 0.0) {
            return Err(Error::config("output clamp must be positive"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + self.conditions + self.time_features
    }

    pub(crate) fn layers(&self) -> Vec<LayerSpec> {
        let mut dims = vec![self.input_dim()];
        dims.extend(&self.hidden);
        dims.push(self.data_dim);
        let mut offset = 0;
        dims.windows(2)
            .map(|w| {
                let spec = LayerSpec { input: w[0], output: w[1], offset };
                offset += w[0] * w[1] + w[1];
                spec
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.input * l.output + l.output).sum()
    }
}

/// Row-major weight block followed by the bias, inside the flat vector.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerSpec {
    pub input: usize,
    pub output: usize,
    pub offset: usize,
}

impl LayerSpec {
    pub fn bias_offset(&self) -> usize {
        self.offset + self.input * self.output
    }
}

/// All weights of one score network, stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreModelParams {
    arch: Architecture,
    values: Vec<f64>,
}

impl ScoreModelParams {
    /// Fan-in scaled uniform hidden layers, zero output layer: the initial
    /// model predicts `eps_theta = 0` everywhere.
    pub fn init(arch: Architecture, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let layers = arch.layers();
        let mut values = vec![0.0; arch.param_count()];
        for layer in &layers[..layers.len() - 1] {
            let bound = 1.0 / (layer.input as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            for w in &mut values[layer.offset..layer.bias_offset()] {
                *w = dist.sample(rng);
            }
        }
        Ok(ScoreModelParams { arch, values })
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let n = arch.param_count();
        Ok(ScoreModelParams { arch, values: vec![0.0; n] })
    }

    pub fn from_flat(arch: Architecture, values: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if values.len() != arch.param_count() {
            return Err(Error::Dimension { expected: arch.param_count(), got: values.len() });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector".into()));
        }
        Ok(ScoreModelParams { arch, values })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn flat(&self) -> &[f64] {
        &self.values
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.values
    }

    pub(crate) fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `self + scale * direction`.
    pub fn perturbed(&self, direction: &[f64], scale: f64) -> Result<Self> {
        if direction.len() != self.len() {
            return Err(Error::Dimension { expected: self.len(), got: direction.len() });
        }
        let values = self.values.iter().zip(direction).map(|(v, d)| v + scale * d).collect();
        Self::from_flat(self.arch.clone(), values)
    }

    /// SHA-256 over the little-endian parameter bytes.
    pub fn checksum(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in &self.values {
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }
}

/// Sinusoidal features of `tau = t / T`.
pub fn time_features(t: usize, steps: usize, count: usize) -> Vec<f64> {
    let tau = t as f64 / steps as f64;
    (0..count / 2)
        .flat_map(|i| {
            let w = std::f64::consts::PI * (1u64 << i) as f64;
            [(w * tau).sin(), (w * tau).cos()]
        })
        .collect()
}

/// One row of network input per `(x, condition, t)` triple.
#[derive(Debug, Clone, Copy)]
pub struct ScoreQuery<'a> {
    pub x: &'a [f64],
    pub condition: usize,
    pub t: usize,
}

/// Assembles the input matrix for a batch of queries.
pub fn build_inputs(arch: &Architecture, queries: &[ScoreQuery<'_>], steps: usize) -> Result<Matrix> {
    let width = arch.input_dim();
    let mut data = Vec::with_capacity(queries.len() * width);
    for q in queries {
        if q.x.len() != arch.data_dim {
            return Err(Error::Dimension { expected: arch.data_dim, got: q.x.len() });
        }
        if q.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("score network input".into()));
        }
        if q.condition >= arch.conditions {
            return Err(Error::config(format!(
                "condition {} out of range 0..{}",
                q.condition, arch.conditions
            )));
        }
        if q.t == 0 || q.t > steps {
            return Err(Error::StepOutOfRange { t: q.t, steps });
        }
        data.extend_from_slice(q.x);
        data.extend((0..arch.conditions).map(|c| if c == q.condition { 1.0 } else { 0.0 }));
        data.extend(time_features(q.t, steps, arch.time_features));
    }
    Ok(Matrix::new(queries.len(), width, data))
}

/// Value-only forward pass over a prepared input matrix.
pub fn forward_batch(params: &ScoreModelParams, inputs: &Matrix) -> Matrix {
    let arch = params.arch();
    let layers = arch.layers();
    let mut h = inputs.clone();
    for (i, layer) in layers.iter().enumerate() {
        h = tape::linear_forward(params.flat(), layer, &h);
        if i + 1 < layers.len() {
            h.map_inplace(|v| arch.activation.apply(v));
        }
    }
    let b = arch.output_clamp;
    h.map_inplace(|v| v.clamp(-b, b));
    h
}

/// Batched `eps_theta` evaluation; one output row per query.
pub fn eval_scores(params: &ScoreModelParams, queries: &[ScoreQuery<'_>], steps: usize) -> Result<Matrix> {
    let inputs = build_inputs(params.arch(), queries, steps)?;
    Ok(forward_batch(params, &inputs))
}

/// `eps_theta(x, c, t)` for a single point.
pub fn eval_score(
    params: &ScoreModelParams,
    x: &[f64],
    condition: Condition,
    t: usize,
    steps: usize,
) -> Result<Vec<f64>> {
    let out = eval_scores(params, &[ScoreQuery { x, condition: condition.label, t }], steps)?;
    Ok(out.into_data())
}
