//! Feed-forward encoder `E(x; θ)` and regressor `R(z; β)`, their parameters,
//! and the Adam optimizer.
//!
//! Weights are stored `out×in`, so a layer computes `x·Wᵀ + b`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{dim_err, DsclError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub activation: Activation,
}

impl EncoderConfig {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, feature_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims,
            feature_dim,
            activation: Activation::Relu,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressorDepth {
    Linear,
    TwoLayer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressorConfig {
    pub feature_dim: usize,
    pub num_targets: usize,
    pub depth: RegressorDepth,
    /// Width of the tanh hidden layer; ignored for `Linear`.
    pub hidden_dim: usize,
}

/// Named parameter tensors in a fixed order: encoder layers, then regressor.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    entries: Vec<(String, Tensor)>,
}

impl ModelParams {
    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.entries[i].1
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }
}

/// Graph handles for one step, parallel to [`ModelParams::entries`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

/// Forward outputs of the regressor; the hidden activation is kept for the
/// Jacobian construction.
#[derive(Clone, Copy, Debug)]
pub struct RegressorOutput {
    pub prediction: Var,
    pub hidden: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder: EncoderConfig,
    pub regressor: RegressorConfig,
    pub params: ModelParams,
}

fn xavier(rng: &mut impl Rng, fan_out: usize, fan_in: usize) -> Tensor {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-s..=s)).collect();
    Tensor::matrix(fan_out, fan_in, data).expect("sized")
}

impl Model {
    /// Builds a model with Xavier-uniform weights and zero biases.
    pub fn new(encoder: EncoderConfig, regressor: RegressorConfig, rng: &mut impl Rng) -> Result<Self> {
        validate(&encoder, &regressor)?;
        let mut entries = Vec::new();
        let mut fan_in = encoder.input_dim;
        let widths = encoder.hidden_dims.iter().chain(std::iter::once(&encoder.feature_dim));
        for (i, &w) in widths.enumerate() {
            entries.push((format!("encoder.{i}.weight"), xavier(rng, w, fan_in)));
            entries.push((format!("encoder.{i}.bias"), Tensor::zeros(&[w])));
            fan_in = w;
        }
        match regressor.depth {
            RegressorDepth::Linear => {
                entries.push((
                    "regressor.0.weight".into(),
                    xavier(rng, regressor.num_targets, regressor.feature_dim),
                ));
                entries.push(("regressor.0.bias".into(), Tensor::zeros(&[regressor.num_targets])));
            }
            RegressorDepth::TwoLayer => {
                let h = regressor.hidden_dim;
                entries.push(("regressor.0.weight".into(), xavier(rng, h, regressor.feature_dim)));
                entries.push(("regressor.0.bias".into(), Tensor::zeros(&[h])));
                entries.push(("regressor.1.weight".into(), xavier(rng, regressor.num_targets, h)));
                entries.push(("regressor.1.bias".into(), Tensor::zeros(&[regressor.num_targets])));
            }
        }
        Ok(Self {
            encoder,
            regressor,
            params: ModelParams::from_entries(entries),
        })
    }

    /// Wraps existing parameters, checking names and shapes against the
    /// configuration.
    pub fn from_params(encoder: EncoderConfig, regressor: RegressorConfig, params: ModelParams) -> Result<Self> {
        validate(&encoder, &regressor)?;
        let template = Self::new(encoder.clone(), regressor.clone(), &mut rand::rngs::mock::StepRng::new(0, 0))?;
        if template.params.len() != params.len() {
            return Err(DsclError::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for ((tn, tt), (n, t)) in template.params.entries().iter().zip(params.entries()) {
            if tn != n || tt.shape() != t.shape() {
                return Err(DsclError::Checkpoint(format!(
                    "parameter `{n}` {:?} does not match expected `{tn}` {:?}",
                    t.shape(),
                    tt.shape()
                )));
            }
        }
        Ok(Self {
            encoder,
            regressor,
            params,
        })
    }

    pub fn num_targets(&self) -> usize {
        self.regressor.num_targets
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.feature_dim
    }

    fn encoder_layers(&self) -> usize {
        self.encoder.hidden_dims.len() + 1
    }

    /// Places every parameter on the graph as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        BoundParams {
            vars: self.params.entries().iter().map(|(_, t)| g.param(t.clone())).collect(),
        }
    }

    /// Places every parameter on the graph as a constant.
    pub fn bind_frozen(&self, g: &mut Graph) -> BoundParams {
        BoundParams {
            vars: self.params.entries().iter().map(|(_, t)| g.constant(t.clone())).collect(),
        }
    }

    fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
        let wt = g.transpose(w)?;
        let xw = g.matmul(x, wt)?;
        g.add_row(xw, b)
    }

    /// `Z = E(x)`: hidden layers use the configured activation, the feature
    /// layer is linear.
    pub fn encode(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        let width = g.value(x).cols();
        if g.value(x).shape().len() != 2 || width != self.encoder.input_dim {
            return dim_err(format!(
                "encoder expects width {}, got shape {:?}",
                self.encoder.input_dim,
                g.value(x).shape()
            ));
        }
        let mut h = x;
        let layers = self.encoder_layers();
        for i in 0..layers {
            h = Self::linear(g, h, p.vars[2 * i], p.vars[2 * i + 1])?;
            if i + 1 < layers {
                h = match self.encoder.activation {
                    Activation::Relu => g.relu(h),
                    Activation::Tanh => g.tanh(h),
                };
            }
        }
        Ok(h)
    }

    /// `Ŷ = R(Z)`.
    pub fn regress(&self, g: &mut Graph, p: &BoundParams, z: Var) -> Result<RegressorOutput> {
        let zv = g.value(z);
        if zv.shape().len() != 2 || zv.cols() != self.regressor.feature_dim {
            return dim_err(format!(
                "regressor expects width {}, got shape {:?}",
                self.regressor.feature_dim,
                zv.shape()
            ));
        }
        let base = 2 * self.encoder_layers();
        match self.regressor.depth {
            RegressorDepth::Linear => Ok(RegressorOutput {
                prediction: Self::linear(g, z, p.vars[base], p.vars[base + 1])?,
                hidden: None,
            }),
            RegressorDepth::TwoLayer => {
                let pre = Self::linear(g, z, p.vars[base], p.vars[base + 1])?;
                let h = g.tanh(pre);
                let y = Self::linear(g, h, p.vars[base + 2], p.vars[base + 3])?;
                Ok(RegressorOutput {
                    prediction: y,
                    hidden: Some(h),
                })
            }
        }
    }

    /// Per-sample regressor Jacobian rows as graph nodes: element `m` is the
    /// `B×N` matrix of `∂R^m/∂Z` evaluated at every row of the batch.
    ///
    /// For the two-layer regressor `R(z) = W₂·tanh(W₁z + b₁) + b₂` the
    /// Jacobian at `z_i` is `W₂·diag(1 − h_i²)·W₁`, which stays differentiable
    /// with respect to `W₁`, `W₂`, `b₁` and (through `h`) the features.
    pub fn jacobian_rows(&self, g: &mut Graph, p: &BoundParams, out: &RegressorOutput) -> Result<Vec<Var>> {
        let base = 2 * self.encoder_layers();
        let m = self.regressor.num_targets;
        match (self.regressor.depth, out.hidden) {
            (RegressorDepth::Linear, _) => {
                let b = g.value(out.prediction).rows();
                let ones = g.constant(Tensor::full(&[b, 1], 1.0));
                (0..m)
                    .map(|k| {
                        let w = g.select_row(p.vars[base], k)?;
                        g.matmul(ones, w)
                    })
                    .collect()
            }
            (RegressorDepth::TwoLayer, Some(h)) => {
                let h2 = g.square(h);
                let neg = g.scale(h2, -1.0);
                let d = g.add_scalar(neg, 1.0);
                (0..m)
                    .map(|k| {
                        let w2 = g.select_row(p.vars[base + 2], k)?;
                        let a = g.mul_row(d, w2)?;
                        g.matmul(a, p.vars[base])
                    })
                    .collect()
            }
            (RegressorDepth::TwoLayer, None) => Err(DsclError::Contract(
                "two-layer Jacobian needs the hidden activation".into(),
            )),
        }
    }

    /// Features for a batch without recording gradients.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let z = self.encode(&mut g, &p, xv)?;
        Ok(g.value(z).clone())
    }

    /// Predictions for a batch without recording gradients.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let z = self.encode(&mut g, &p, xv)?;
        let y = self.regress(&mut g, &p, z)?;
        Ok(g.value(y.prediction).clone())
    }

    /// Regressor outputs for given features without recording gradients.
    pub fn regress_values(&self, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind_frozen(&mut g);
        let zv = g.constant(z.clone());
        let y = self.regress(&mut g, &p, zv)?;
        Ok(g.value(y.prediction).clone())
    }

    /// Gradient of each bound parameter after `backward`.
    pub fn gradients(&self, g: &Graph, p: &BoundParams) -> Vec<Tensor> {
        p.vars
            .iter()
            .zip(self.params.entries())
            .map(|(&v, (_, t))| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

fn validate(encoder: &EncoderConfig, regressor: &RegressorConfig) -> Result<()> {
    let positive = encoder.input_dim > 0
        && encoder.feature_dim > 0
        && encoder.hidden_dims.iter().all(|&h| h > 0)
        && regressor.num_targets > 0
        && (regressor.depth == RegressorDepth::Linear || regressor.hidden_dim > 0);
    if !positive {
        return Err(DsclError::Config("layer widths must be positive".into()));
    }
    if regressor.feature_dim != encoder.feature_dim {
        return Err(DsclError::Config(format!(
            "regressor feature_dim {} differs from encoder feature_dim {}",
            regressor.feature_dim, encoder.feature_dim
        )));
    }
    if encoder.feature_dim < regressor.num_targets {
        return Err(DsclError::Config(format!(
            "feature_dim {} must be at least the number of targets {}",
            encoder.feature_dim, regressor.num_targets
        )));
    }
    Ok(())
}

/// Adam with bias correction; β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        let zeros: Vec<Tensor> = params.entries().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. A non-finite gradient aborts the step before any
    /// parameter changes.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return dim_err(format!("{} gradients for {} parameters", grads.len(), params.len()));
        }
        for ((name, t), g) in params.entries().iter().zip(grads) {
            if g.shape() != t.shape() {
                return dim_err(format!("gradient for `{name}` has shape {:?}", g.shape()));
            }
            if !g.is_finite() {
                return Err(DsclError::NonFiniteGradient(name.clone()));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (_, p)) in params.entries.iter_mut().enumerate() {
            let (m, v) = (self.first[i].data_mut(), self.second[i].data_mut());
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m).zip(v) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
