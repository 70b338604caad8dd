//! Dropout-equipped feed-forward rank scorer.
//!
//! The scorer maps a feature vector to a single real-valued rank score. Hidden
//! layers apply an activation followed by inverted dropout: a dropped unit
//! outputs zero and surviving units are rescaled by `1 / (1 - dropout_prob)`,
//! so the all-ones mask evaluates the expected network. The output unit is
//! never dropped.
//!
//! Weights are stored row-major with shape `(outputs, inputs)`. Gradients are
//! computed by hand-written backpropagation for this fixed architecture family;
//! there is no general autodiff.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

/// Default Adam learning rate.
pub const DEFAULT_LEARNING_RATE: f64 = 1e-5;
/// Default drop probability of a hidden unit.
pub const DEFAULT_DROPOUT: f64 = 0.2;
/// Default weight-decay coefficient.
pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-4;

const CHECKPOINT_FORMAT: &str = "alrank-params/1";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid layer sizes {0:?}: {1}")]
    InvalidLayers(Vec<usize>, &'static str),
    #[error("dropout probability {0} is outside [0, 1)")]
    InvalidDropout(f64),
    #[error("weight decay {0} must be finite and nonnegative")]
    InvalidWeightDecay(f64),
    #[error("input has {got} features, network expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("dropout mask does not match the hidden layer sizes")]
    MaskMismatch,
    #[error("shape mismatch between parameters and {0}")]
    ShapeMismatch(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation.
    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(format!("unknown activation `{other}` (expected relu or tanh)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Input dimension, hidden widths, then the scalar output (always 1).
    pub layer_sizes: Vec<usize>,
    /// Probability that a hidden unit is dropped.
    pub dropout_prob: f64,
    /// Coefficient of the squared Frobenius norm of every weight matrix.
    pub weight_decay: f64,
    #[serde(default)]
    pub activation: Activation,
}

impl NetworkConfig {
    /// Builds a config with default dropout, weight decay and activation.
    pub fn new(input_dim: usize, hidden: &[usize]) -> Self {
        let mut layer_sizes = Vec::with_capacity(hidden.len() + 2);
        layer_sizes.push(input_dim);
        layer_sizes.extend_from_slice(hidden);
        layer_sizes.push(1);
        NetworkConfig {
            layer_sizes,
            dropout_prob: DEFAULT_DROPOUT,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            activation: Activation::Relu,
        }
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.dropout_prob = p;
        self
    }

    pub fn with_weight_decay(mut self, lambda: f64) -> Self {
        self.weight_decay = lambda;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = &self.layer_sizes;
        if sizes.len() < 2 {
            return Err(ModelError::InvalidLayers(sizes.clone(), "need at least input and output"));
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(ModelError::InvalidLayers(sizes.clone(), "sizes must be positive"));
        }
        if *sizes.last().unwrap() != 1 {
            return Err(ModelError::InvalidLayers(sizes.clone(), "last layer must have exactly one unit"));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(ModelError::InvalidDropout(self.dropout_prob));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(ModelError::InvalidWeightDecay(self.weight_decay));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn hidden_sizes(&self) -> &[usize] {
        &self.layer_sizes[1..self.layer_sizes.len() - 1]
    }

    fn keep_scale(&self) -> f64 {
        1.0 / (1.0 - self.dropout_prob)
    }
}

/// One dense layer, weights row-major `(outputs, inputs)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl DenseLayer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        DenseLayer {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    #[inline]
    fn row(&self, o: usize) -> &[f64] {
        &self.weights[o * self.inputs..(o + 1) * self.inputs]
    }

    fn same_shape(&self, other: &DenseLayer) -> bool {
        self.inputs == other.inputs
            && self.outputs == other.outputs
            && self.weights.len() == other.weights.len()
            && self.biases.len() == other.biases.len()
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(self.biases.iter())
    }
}

fn zero_layers(config: &NetworkConfig) -> Vec<DenseLayer> {
    config
        .layer_sizes
        .windows(2)
        .map(|w| DenseLayer::zeros(w[0], w[1]))
        .collect()
}

/// All weights and biases of a scorer, together with the config they follow.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    pub config: NetworkConfig,
    pub layers: Vec<DenseLayer>,
}

/// Gradient of a scalar loss with respect to a [`ParameterSet`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gradient {
    pub layers: Vec<DenseLayer>,
}

impl Gradient {
    pub fn zeros_like(params: &ParameterSet) -> Self {
        Gradient { layers: zero_layers(&params.config) }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().flat_map(DenseLayer::values).all(|v| v.is_finite())
    }

    fn matches(&self, params: &ParameterSet) -> bool {
        self.layers.len() == params.layers.len()
            && self.layers.iter().zip(&params.layers).all(|(a, b)| a.same_shape(b))
    }

    /// Flattened view: every layer's weights followed by its biases.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers.iter().flat_map(DenseLayer::values).copied().collect()
    }
}

/// Per-hidden-unit keep indicators, one vector per hidden layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropoutMask {
    pub layers: Vec<Vec<bool>>,
}

impl DropoutMask {
    pub fn all_ones(config: &NetworkConfig) -> Self {
        DropoutMask {
            layers: config.hidden_sizes().iter().map(|&n| vec![true; n]).collect(),
        }
    }

    pub fn all_zeros(config: &NetworkConfig) -> Self {
        DropoutMask {
            layers: config.hidden_sizes().iter().map(|&n| vec![false; n]).collect(),
        }
    }

    /// Fraction of hidden units that are dropped.
    pub fn drop_fraction(&self) -> f64 {
        let total: usize = self.layers.iter().map(Vec::len).sum();
        if total == 0 {
            return 0.0;
        }
        let dropped = self.layers.iter().flatten().filter(|&&keep| !keep).count();
        dropped as f64 / total as f64
    }

    fn matches(&self, config: &NetworkConfig) -> bool {
        let hidden = config.hidden_sizes();
        self.layers.len() == hidden.len() && self.layers.iter().zip(hidden).all(|(m, &n)| m.len() == n)
    }
}

/// Draws initial parameters: weights from `N(0, 2 / fan_in)` for relu and
/// `N(0, 1 / fan_in)` for tanh, biases zero.
pub fn init_params(config: &NetworkConfig, seed: u64) -> Result<ParameterSet> {
    config.validate()?;
    let mut rng = rng::rng(seed);
    let gain = match config.activation {
        Activation::Relu => 2.0,
        Activation::Tanh => 1.0,
    };
    let mut layers = zero_layers(config);
    for layer in &mut layers {
        let std = (gain / layer.inputs as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("fan-in scale is positive");
        for w in &mut layer.weights {
            *w = normal.sample(&mut rng);
        }
    }
    Ok(ParameterSet { config: config.clone(), layers })
}

/// Samples a dropout mask from an existing generator.
pub fn sample_mask_with(config: &NetworkConfig, rng: &mut rng::Rng) -> DropoutMask {
    let p = config.dropout_prob;
    if p <= 0.0 {
        return DropoutMask::all_ones(config);
    }
    DropoutMask {
        layers: config
            .hidden_sizes()
            .iter()
            .map(|&n| (0..n).map(|_| rng.random::<f64>() >= p).collect())
            .collect(),
    }
}

pub fn sample_mask(config: &NetworkConfig, seed: u64) -> DropoutMask {
    sample_mask_with(config, &mut rng::rng(seed))
}

/// Intermediate values of one forward pass, kept for backpropagation.
pub(crate) struct Trace {
    /// Input to each layer (the last entry feeds the output layer).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of each hidden layer.
    pre: Vec<Vec<f64>>,
}

impl ParameterSet {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().flat_map(DenseLayer::values).all(|v| v.is_finite())
    }

    /// Sum of squared Frobenius norms of the weight matrices (biases excluded).
    pub fn weight_norm_sq(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter())
            .map(|w| w * w)
            .sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers.iter().flat_map(DenseLayer::values).copied().collect()
    }

    /// Writes back values produced by [`ParameterSet::flatten`].
    pub fn set_flat(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.num_parameters(), "flat parameter length");
        let mut it = values.iter().copied();
        for layer in &mut self.layers {
            for w in layer.weights.iter_mut().chain(layer.biases.iter_mut()) {
                *w = it.next().unwrap();
            }
        }
    }

    fn check_input(&self, x: &[f64], mask: &DropoutMask) -> Result<()> {
        let expected = self.config.input_dim();
        if x.len() != expected {
            return Err(ModelError::DimensionMismatch { expected, got: x.len() });
        }
        if !mask.matches(&self.config) {
            return Err(ModelError::MaskMismatch);
        }
        Ok(())
    }

    pub(crate) fn forward_trace(&self, x: &[f64], mask: &DropoutMask) -> Result<(f64, Trace)> {
        self.check_input(x, mask)?;
        let act = self.config.activation;
        let scale = self.config.keep_scale();
        let hidden = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(hidden);
        inputs.push(x.to_vec());
        for (layer, keep) in self.layers[..hidden].iter().zip(&mask.layers) {
            let h = inputs.last().unwrap();
            let z: Vec<f64> = (0..layer.outputs)
                .map(|o| dot(layer.row(o), h) + layer.biases[o])
                .collect();
            let out = z
                .iter()
                .zip(keep)
                .map(|(&zi, &k)| if k { act.apply(zi) * scale } else { 0.0 })
                .collect();
            pre.push(z);
            inputs.push(out);
        }
        let last = &self.layers[hidden];
        let score = dot(last.row(0), inputs.last().unwrap()) + last.biases[0];
        Ok((score, Trace { inputs, pre }))
    }

    /// Accumulates `d_score * d(score)/d(params)` into `grad`.
    pub(crate) fn backward(&self, trace: &Trace, mask: &DropoutMask, d_score: f64, grad: &mut Gradient) {
        let act = self.config.activation;
        let scale = self.config.keep_scale();
        let hidden = self.layers.len() - 1;

        let last = &self.layers[hidden];
        let h = &trace.inputs[hidden];
        let g_last = &mut grad.layers[hidden];
        for (gw, &hi) in g_last.weights.iter_mut().zip(h) {
            *gw += d_score * hi;
        }
        g_last.biases[0] += d_score;
        let mut upstream: Vec<f64> = last.row(0).iter().map(|w| w * d_score).collect();

        for l in (0..hidden).rev() {
            let layer = &self.layers[l];
            let keep = &mask.layers[l];
            let dz: Vec<f64> = trace.pre[l]
                .iter()
                .zip(keep)
                .zip(&upstream)
                .map(|((&z, &k), &g)| if k { g * scale * act.derivative(z) } else { 0.0 })
                .collect();
            let input = &trace.inputs[l];
            let g = &mut grad.layers[l];
            for (o, &d) in dz.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (gw, &xi) in row.iter_mut().zip(input) {
                    *gw += d * xi;
                }
                g.biases[o] += d;
            }
            if l > 0 {
                let mut next = vec![0.0; layer.inputs];
                for (o, &d) in dz.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    for (n, &w) in next.iter_mut().zip(layer.row(o)) {
                        *n += w * d;
                    }
                }
                upstream = next;
            }
        }
    }

    /// Serializes as the flat JSON checkpoint document.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&CheckpointDoc {
            format: CHECKPOINT_FORMAT.to_string(),
            config: self.config.clone(),
            layers: self.layers.clone(),
        })
        .expect("parameters serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: CheckpointDoc =
            serde_json::from_str(text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if doc.format != CHECKPOINT_FORMAT {
            return Err(ModelError::Checkpoint(format!("unsupported format `{}`", doc.format)));
        }
        doc.config.validate()?;
        let params = ParameterSet { config: doc.config, layers: doc.layers };
        let expected = zero_layers(&params.config);
        if expected.len() != params.layers.len()
            || !expected.iter().zip(&params.layers).all(|(a, b)| a.same_shape(b))
        {
            return Err(ModelError::ShapeMismatch("checkpoint layer sizes"));
        }
        if !params.is_finite() {
            return Err(ModelError::NonFinite("checkpoint"));
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    format: String,
    config: NetworkConfig,
    layers: Vec<DenseLayer>,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Rank score of `x` under `mask`.
pub fn forward(params: &ParameterSet, x: &[f64], mask: &DropoutMask) -> Result<f64> {
    params.forward_trace(x, mask).map(|(score, _)| score)
}

/// Score of the expected (no-dropout) network.
pub fn forward_mean(params: &ParameterSet, x: &[f64]) -> Result<f64> {
    forward(params, x, &DropoutMask::all_ones(&params.config))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub first_moment: Gradient,
    pub second_moment: Gradient,
}

impl OptimizerState {
    pub fn new(params: &ParameterSet, learning_rate: f64) -> Self {
        OptimizerState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first_moment: Gradient::zeros_like(params),
            second_moment: Gradient::zeros_like(params),
        }
    }

    /// In-place Adam update with bias correction.
    pub fn apply(&mut self, params: &mut ParameterSet, grad: &Gradient) -> Result<()> {
        if !grad.matches(params) || !self.first_moment.matches(params) {
            return Err(ModelError::ShapeMismatch("gradient"));
        }
        if !grad.is_finite() {
            return Err(ModelError::NonFinite("gradient"));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let lr = self.learning_rate;
        let eps = self.epsilon;
        for (((p, g), m), v) in params
            .layers
            .iter_mut()
            .zip(&grad.layers)
            .zip(&mut self.first_moment.layers)
            .zip(&mut self.second_moment.layers)
        {
            let pv = p.weights.iter_mut().chain(p.biases.iter_mut());
            let gv = g.weights.iter().chain(g.biases.iter());
            let mv = m.weights.iter_mut().chain(m.biases.iter_mut());
            let vv = v.weights.iter_mut().chain(v.biases.iter_mut());
            for (((w, &gi), mi), vi) in pv.zip(gv).zip(mv).zip(vv) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Pure Adam step: returns updated parameters and optimizer state.
pub fn adam_step(
    state: &OptimizerState,
    params: &ParameterSet,
    grad: &Gradient,
) -> Result<(ParameterSet, OptimizerState)> {
    let mut state = state.clone();
    let mut params = params.clone();
    state.apply(&mut params, grad)?;
    Ok((params, state))
}
