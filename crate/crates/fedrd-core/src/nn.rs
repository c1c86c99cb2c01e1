//! Minimal dense neural-network engine with exact manual backpropagation.
//!
//! Models are stacks of affine layers, each optionally followed by a
//! per-sample layer normalization (with learnable scale and shift) and an
//! element-wise activation. Forward passes record a [`Tape`]; [`backward`]
//! consumes the tape and returns exact reverse-mode gradients with respect
//! to both parameters and the layer input.
//!
//! Embedding models end in `tanh` so outputs live in `[-1, 1]`; the fusion
//! model ends in `sigmoid` so predictions live in `(0, 1)`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::math;
use crate::rng::StreamRng;

/// Epsilon inside the layer-norm denominator.
pub const NORM_EPS: f64 = 1e-5;

/// Predictions are clamped to `[PRED_CLAMP, 1 - PRED_CLAMP]` before the loss.
pub const PRED_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub enum NnError {
    InvalidSpec(String),
    ShapeMismatch { expected: usize, got: usize },
    NonFiniteInput,
    NonFiniteGradient { layer: usize },
    InvalidLabel(u8),
}

impl fmt::Display for NnError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NnError::InvalidSpec(msg) => write!(f, "invalid model spec: {msg}"),
            NnError::ShapeMismatch { expected, got } => {
                write!(f, "shape mismatch: expected width {expected}, got {got}")
            }
            NnError::NonFiniteInput => write!(f, "non-finite input"),
            NnError::NonFiniteGradient { layer } => {
                write!(f, "non-finite gradient in layer {layer}")
            }
            NnError::InvalidLabel(l) => write!(f, "label {l} is not in {{0, 1}}"),
        }
    }
}

impl core::error::Error for NnError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::None => z,
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Tanh => math::tanh(z),
            Activation::Sigmoid => math::sigmoid(z),
        }
    }

    /// Derivative given the activation input and output.
    #[inline]
    fn grad(self, input: f64, output: f64) -> f64 {
        match self {
            Activation::None => 1.0,
            Activation::Relu => {
                if input > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - output * output,
            Activation::Sigmoid => output * (1.0 - output),
        }
    }
}

/// One layer: affine transform, optional layer norm, activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub inputs: usize,
    pub outputs: usize,
    pub normalize: bool,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    layers: Vec<LayerSpec>,
}

impl ModelSpec {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::InvalidSpec(String::from("no layers")));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.inputs == 0 || layer.outputs == 0 {
                return Err(NnError::InvalidSpec(alloc::format!(
                    "layer {i} has zero width"
                )));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs != pair[1].inputs {
                return Err(NnError::InvalidSpec(alloc::format!(
                    "layer {} outputs {} but layer {} expects {}",
                    i,
                    pair[0].outputs,
                    i + 1,
                    pair[1].inputs
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Embedding body: normalized hidden layers and a `tanh` output layer,
    /// so every output component lies in `[-1, 1]`. With two hidden layers
    /// the first is norm-only and the second norm + ReLU; a single hidden
    /// layer gets norm + ReLU.
    pub fn embedding(input: usize, hidden: &[usize], embedding_dim: usize) -> Result<Self, NnError> {
        let mut layers = Vec::new();
        let mut width = input;
        for (i, &h) in hidden.iter().enumerate() {
            let activation = if hidden.len() >= 2 && i == 0 {
                Activation::None
            } else {
                Activation::Relu
            };
            layers.push(LayerSpec {
                inputs: width,
                outputs: h,
                normalize: true,
                activation,
            });
            width = h;
        }
        layers.push(LayerSpec {
            inputs: width,
            outputs: embedding_dim,
            normalize: false,
            activation: Activation::Tanh,
        });
        Self::new(layers)
    }

    /// Fusion body: normalized sigmoid hidden layers and a single sigmoid
    /// output unit, so the prediction lies in `(0, 1)`.
    pub fn fusion(input: usize, hidden: &[usize]) -> Result<Self, NnError> {
        let mut layers = Vec::new();
        let mut width = input;
        for &h in hidden {
            layers.push(LayerSpec {
                inputs: width,
                outputs: h,
                normalize: true,
                activation: Activation::Sigmoid,
            });
            width = h;
        }
        layers.push(LayerSpec {
            inputs: width,
            outputs: 1,
            normalize: false,
            activation: Activation::Sigmoid,
        });
        Self::new(layers)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    /// Total scalar parameter count: weights and biases, plus norm scale and
    /// shift for normalized layers.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                let affine = l.inputs * l.outputs + l.outputs;
                let norm = if l.normalize { 2 * l.outputs } else { 0 };
                affine + norm
            })
            .sum()
    }
}

/// Parameters of one layer. `weights` is row-major `(outputs, inputs)`;
/// `norm_scale`/`norm_shift` are empty when the layer has no normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub norm_scale: Vec<f64>,
    pub norm_shift: Vec<f64>,
}

/// Full parameter set of one model, shape-bound to its [`ModelSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    spec: ModelSpec,
    pub layers: Vec<LayerParams>,
}

impl ParamSet {
    pub fn zeros(spec: &ModelSpec) -> Self {
        let layers = spec
            .layers()
            .iter()
            .map(|l| LayerParams {
                weights: vec![0.0; l.inputs * l.outputs],
                bias: vec![0.0; l.outputs],
                norm_scale: if l.normalize { vec![0.0; l.outputs] } else { Vec::new() },
                norm_shift: if l.normalize { vec![0.0; l.outputs] } else { Vec::new() },
            })
            .collect();
        Self {
            spec: spec.clone(),
            layers,
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn scalar_count(&self) -> usize {
        self.spec.param_count()
    }

    fn slices(&self) -> impl Iterator<Item = &[f64]> {
        self.layers.iter().flat_map(|l| {
            [
                l.weights.as_slice(),
                l.bias.as_slice(),
                l.norm_scale.as_slice(),
                l.norm_shift.as_slice(),
            ]
        })
    }

    fn slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers.iter_mut().flat_map(|l| {
            [
                l.weights.as_mut_slice(),
                l.bias.as_mut_slice(),
                l.norm_scale.as_mut_slice(),
                l.norm_shift.as_mut_slice(),
            ]
        })
    }

    /// Flattens all scalars in a fixed order (per layer: weights, bias,
    /// norm scale, norm shift).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.scalar_count());
        for s in self.slices() {
            out.extend_from_slice(s);
        }
        out
    }

    /// Rebuilds a parameter set from a flat vector in [`flatten`] order.
    pub fn from_flat(spec: &ModelSpec, flat: &[f64]) -> Result<Self, NnError> {
        if flat.len() != spec.param_count() {
            return Err(NnError::ShapeMismatch {
                expected: spec.param_count(),
                got: flat.len(),
            });
        }
        let mut out = Self::zeros(spec);
        let mut offset = 0;
        for s in out.slices_mut() {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        }
        Ok(out)
    }

    /// `self += factor * other`, shape-checked.
    pub fn add_scaled(&mut self, other: &ParamSet, factor: f64) -> Result<(), NnError> {
        if self.spec != other.spec {
            return Err(NnError::ShapeMismatch {
                expected: self.scalar_count(),
                got: other.scalar_count(),
            });
        }
        for (dst, src) in self.slices_mut().zip(other.slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += factor * s;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for s in self.slices_mut() {
            for v in s {
                *v *= factor;
            }
        }
    }

    pub fn fill(&mut self, value: f64) {
        for s in self.slices_mut() {
            for v in s {
                *v = value;
            }
        }
    }

    /// Bit-exact equality of every scalar (distinguishes `-0.0`, `NaN`s).
    pub fn bits_eq(&self, other: &ParamSet) -> bool {
        self.spec == other.spec
            && self
                .slices()
                .zip(other.slices())
                .all(|(a, b)| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()))
    }

    /// Index of the first layer containing a non-finite scalar, if any.
    pub fn first_non_finite_layer(&self) -> Option<usize> {
        for (i, l) in self.layers.iter().enumerate() {
            let all = l
                .weights
                .iter()
                .chain(&l.bias)
                .chain(&l.norm_scale)
                .chain(&l.norm_shift);
            for v in all {
                if !v.is_finite() {
                    return Some(i);
                }
            }
        }
        None
    }
}

/// Builds a parameter set deterministically from a seed. Weights and biases
/// are uniform in `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`; norm scale starts at
/// 1 and norm shift at 0. Identical `(spec, seed)` gives bit-identical
/// parameters.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<ParamSet, NnError> {
    let mut params = ParamSet::zeros(spec);
    for (i, (layer_spec, layer)) in spec.layers().iter().zip(&mut params.layers).enumerate() {
        let mut rng = StreamRng::from_path(seed, &[i as u64]);
        let limit = 1.0 / math::sqrt(layer_spec.inputs as f64);
        for w in &mut layer.weights {
            *w = rng.next_range(-limit, limit);
        }
        for b in &mut layer.bias {
            *b = rng.next_range(-limit, limit);
        }
        for g in &mut layer.norm_scale {
            *g = 1.0;
        }
        // norm_shift stays 0
    }
    Ok(params)
}

#[derive(Debug, Clone)]
struct NormTape {
    inv_std: f64,
    /// Normalized pre-scale values ((z - mean) * inv_std).
    normalized: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LayerTape {
    input: Vec<f64>,
    norm: Option<NormTape>,
    /// Values fed into the activation (post-norm when normalizing).
    act_input: Vec<f64>,
    output: Vec<f64>,
}

/// Cached intermediate values of one forward pass. Consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    layers: Vec<LayerTape>,
    output: Vec<f64>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

/// Forward pass for a single sample, recording a tape.
pub fn forward(params: &ParamSet, x: &[f64]) -> Result<(Vec<f64>, Tape), NnError> {
    let spec = params.spec();
    if x.len() != spec.input_width() {
        return Err(NnError::ShapeMismatch {
            expected: spec.input_width(),
            got: x.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(NnError::NonFiniteInput);
    }

    let mut layers = Vec::with_capacity(spec.layers().len());
    let mut current = x.to_vec();
    for (layer_spec, layer) in spec.layers().iter().zip(&params.layers) {
        let input = current;
        let mut z = layer.bias.clone();
        for (o, zo) in z.iter_mut().enumerate() {
            let row = &layer.weights[o * layer_spec.inputs..(o + 1) * layer_spec.inputs];
            for (w, xi) in row.iter().zip(&input) {
                *zo += w * xi;
            }
        }

        let (norm, act_input) = if layer_spec.normalize {
            let mean = math::mean(&z);
            let var = math::variance(&z);
            let inv_std = 1.0 / math::sqrt(var + NORM_EPS);
            let normalized: Vec<f64> = z.iter().map(|&v| (v - mean) * inv_std).collect();
            let scaled: Vec<f64> = normalized
                .iter()
                .zip(&layer.norm_scale)
                .zip(&layer.norm_shift)
                .map(|((n, g), d)| n * g + d)
                .collect();
            (Some(NormTape { inv_std, normalized }), scaled)
        } else {
            (None, z)
        };

        let output: Vec<f64> = act_input
            .iter()
            .map(|&v| layer_spec.activation.apply(v))
            .collect();
        current = output.clone();
        layers.push(LayerTape {
            input,
            norm,
            act_input,
            output,
        });
    }

    let tape = Tape {
        layers,
        output: current.clone(),
    };
    Ok((current, tape))
}

/// Reverse-mode pass. Consumes the tape and returns the exact gradients of
/// `output . grad_out` with respect to the parameters and the input.
pub fn backward(
    params: &ParamSet,
    tape: Tape,
    grad_out: &[f64],
) -> Result<(ParamSet, Vec<f64>), NnError> {
    let mut grads = ParamSet::zeros(params.spec());
    let grad_in = backward_accumulate(params, tape, grad_out, &mut grads)?;
    Ok((grads, grad_in))
}

/// Like [`backward`] but accumulates parameter gradients into `grads`
/// (useful for minibatch sums). Returns the input gradient.
pub fn backward_accumulate(
    params: &ParamSet,
    tape: Tape,
    grad_out: &[f64],
    grads: &mut ParamSet,
) -> Result<Vec<f64>, NnError> {
    let spec = params.spec();
    if grad_out.len() != spec.output_width() {
        return Err(NnError::ShapeMismatch {
            expected: spec.output_width(),
            got: grad_out.len(),
        });
    }
    if tape.layers.len() != spec.layers().len()
        || tape
            .layers
            .iter()
            .zip(spec.layers())
            .any(|(t, l)| t.input.len() != l.inputs || t.output.len() != l.outputs)
    {
        return Err(NnError::ShapeMismatch {
            expected: spec.layers().len(),
            got: tape.layers.len(),
        });
    }
    if grads.spec() != spec {
        return Err(NnError::ShapeMismatch {
            expected: spec.param_count(),
            got: grads.scalar_count(),
        });
    }

    let mut upstream = grad_out.to_vec();
    for (idx, layer_spec) in spec.layers().iter().enumerate().rev() {
        let layer = &params.layers[idx];
        let layer_tape = &tape.layers[idx];
        let grad_layer = &mut grads.layers[idx];

        // Through the activation.
        let d_act: Vec<f64> = upstream
            .iter()
            .zip(&layer_tape.act_input)
            .zip(&layer_tape.output)
            .map(|((g, &zin), &out)| g * layer_spec.activation.grad(zin, out))
            .collect();

        // Through the normalization, if present.
        let dz: Vec<f64> = if let Some(norm) = &layer_tape.norm {
            let n = layer_spec.outputs as f64;
            for (o, &g) in d_act.iter().enumerate() {
                grad_layer.norm_scale[o] += g * norm.normalized[o];
                grad_layer.norm_shift[o] += g;
            }
            let d_norm: Vec<f64> = d_act
                .iter()
                .zip(&layer.norm_scale)
                .map(|(g, s)| g * s)
                .collect();
            let mean_d = d_norm.iter().sum::<f64>() / n;
            let mean_dxhat = d_norm
                .iter()
                .zip(&norm.normalized)
                .map(|(d, x)| d * x)
                .sum::<f64>()
                / n;
            d_norm
                .iter()
                .zip(&norm.normalized)
                .map(|(d, x)| norm.inv_std * (d - mean_d - x * mean_dxhat))
                .collect()
        } else {
            d_act
        };

        // Through the affine transform.
        let mut d_input = vec![0.0; layer_spec.inputs];
        for (o, &g) in dz.iter().enumerate() {
            grad_layer.bias[o] += g;
            let row = o * layer_spec.inputs;
            let w_row = &layer.weights[row..row + layer_spec.inputs];
            let gw_row = &mut grad_layer.weights[row..row + layer_spec.inputs];
            for i in 0..layer_spec.inputs {
                gw_row[i] += g * layer_tape.input[i];
                d_input[i] += w_row[i] * g;
            }
        }
        upstream = d_input;
    }
    Ok(upstream)
}

/// Binary cross-entropy for a single prediction. Returns the loss and its
/// exact derivative with respect to the (clamped) prediction.
pub fn bce_loss(pred: f64, label: u8) -> Result<(f64, f64), NnError> {
    if label > 1 {
        return Err(NnError::InvalidLabel(label));
    }
    let p = pred.clamp(PRED_CLAMP, 1.0 - PRED_CLAMP);
    let y = label as f64;
    let loss = -(y * math::ln(p) + (1.0 - y) * math::ln(1.0 - p));
    let dpred = (p - y) / (p * (1.0 - p));
    Ok((loss, dpred))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Adam moment-decay constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct AdamState {
    constants: AdamParams,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step: u64,
}

/// Optimizer for one model; owns the Adam accumulators when used.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: OptimizerKind,
    learning_rate: f64,
    spec: ModelSpec,
    adam: Option<AdamState>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, learning_rate: f64, spec: &ModelSpec) -> Self {
        let adam = match kind {
            OptimizerKind::Sgd => None,
            OptimizerKind::Adam => Some(AdamState {
                constants: AdamParams::default(),
                first_moment: vec![0.0; spec.param_count()],
                second_moment: vec![0.0; spec.param_count()],
                step: 0,
            }),
        };
        Self {
            kind,
            learning_rate,
            spec: spec.clone(),
            adam,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    /// Advances the optimizer state and returns the parameter delta for this
    /// step (to be added to the parameters). Splitting the delta from its
    /// application lets identical replicas apply one shared update.
    pub fn compute_update(&mut self, grads: &ParamSet) -> Result<ParamSet, NnError> {
        if grads.spec() != &self.spec {
            return Err(NnError::ShapeMismatch {
                expected: self.spec.param_count(),
                got: grads.scalar_count(),
            });
        }
        if let Some(layer) = grads.first_non_finite_layer() {
            return Err(NnError::NonFiniteGradient { layer });
        }
        let flat = grads.flatten();
        let eta = self.learning_rate;
        let delta: Vec<f64> = match (&self.kind, &mut self.adam) {
            (OptimizerKind::Sgd, _) => flat.iter().map(|g| -eta * g).collect(),
            (OptimizerKind::Adam, Some(state)) => {
                state.step += 1;
                let t = state.step as i32;
                let AdamParams {
                    beta1,
                    beta2,
                    epsilon,
                } = state.constants;
                let bc1 = 1.0 - libm::pow(beta1, t as f64);
                let bc2 = 1.0 - libm::pow(beta2, t as f64);
                flat.iter()
                    .enumerate()
                    .map(|(i, &g)| {
                        let m = beta1 * state.first_moment[i] + (1.0 - beta1) * g;
                        let v = beta2 * state.second_moment[i] + (1.0 - beta2) * g * g;
                        state.first_moment[i] = m;
                        state.second_moment[i] = v;
                        let m_hat = m / bc1;
                        let v_hat = v / bc2;
                        -eta * m_hat / (math::sqrt(v_hat) + epsilon)
                    })
                    .collect()
            }
            (OptimizerKind::Adam, None) => unreachable!("adam state initialized in new"),
        };
        ParamSet::from_flat(&self.spec, &delta)
    }

    /// One descent step applied in place.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<(), NnError> {
        let delta = self.compute_update(grads)?;
        params.add_scaled(&delta, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_spec(inputs: usize, outputs: usize) -> ModelSpec {
        ModelSpec::new(vec![LayerSpec {
            inputs,
            outputs,
            normalize: false,
            activation: Activation::None,
        }])
        .unwrap()
    }

    #[test]
    fn build_is_deterministic() {
        let spec = linear_spec(2, 2);
        let a = build_model(&spec, 7).unwrap();
        let b = build_model(&spec, 7).unwrap();
        assert!(a.bits_eq(&b));
        let c = build_model(&spec, 8).unwrap();
        assert!(!a.bits_eq(&c));
    }

    #[test]
    fn zero_width_layer_is_invalid() {
        let err = ModelSpec::new(vec![LayerSpec {
            inputs: 2,
            outputs: 0,
            normalize: false,
            activation: Activation::None,
        }])
        .unwrap_err();
        assert!(matches!(err, NnError::InvalidSpec(_)));
    }

    #[test]
    fn param_count_matches_hand_count() {
        // 2 -> 3 -> 1 without norm: 2*3+3 + 3*1+1 = 13 scalars.
        let spec = ModelSpec::new(vec![
            LayerSpec {
                inputs: 2,
                outputs: 3,
                normalize: false,
                activation: Activation::Relu,
            },
            LayerSpec {
                inputs: 3,
                outputs: 1,
                normalize: false,
                activation: Activation::None,
            },
        ])
        .unwrap();
        assert_eq!(spec.param_count(), 13);
        assert_eq!(build_model(&spec, 1).unwrap().scalar_count(), 13);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let spec = linear_spec(2, 2);
        let mut params = ParamSet::zeros(&spec);
        params.layers[0].weights = vec![1.0, 0.0, 0.0, 1.0];
        let (out, _) = forward(&params, &[0.3, -0.7]).unwrap();
        assert_eq!(out, vec![0.3, -0.7]);
    }

    #[test]
    fn zero_sigmoid_layer_outputs_half() {
        let spec = ModelSpec::new(vec![LayerSpec {
            inputs: 3,
            outputs: 2,
            normalize: false,
            activation: Activation::Sigmoid,
        }])
        .unwrap();
        let params = ParamSet::zeros(&spec);
        let (out, _) = forward(&params, &[1.5, -0.2, 9.0]).unwrap();
        assert_eq!(out, vec![0.5, 0.5]);
    }

    #[test]
    fn forward_rejects_bad_shapes_and_nonfinite() {
        let spec = linear_spec(2, 2);
        let params = build_model(&spec, 1).unwrap();
        assert!(matches!(
            forward(&params, &[1.0]),
            Err(NnError::ShapeMismatch { expected: 2, got: 1 })
        ));
        assert!(matches!(
            forward(&params, &[1.0, f64::NAN]),
            Err(NnError::NonFiniteInput)
        ));
    }

    #[test]
    fn tanh_model_outputs_stay_bounded() {
        let spec = ModelSpec::embedding(4, &[3], 2).unwrap();
        let params = build_model(&spec, 3).unwrap();
        let mut rng = StreamRng::from_key(99);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..4).map(|_| rng.normal() * 3.0).collect();
            let (out, _) = forward(&params, &x).unwrap();
            for v in out {
                assert!((-1.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn linear_bias_gradient_equals_upstream() {
        let spec = linear_spec(3, 2);
        let params = build_model(&spec, 5).unwrap();
        let (_, tape) = forward(&params, &[0.1, 0.2, 0.3]).unwrap();
        let (grads, _) = backward(&params, tape, &[0.7, -1.3]).unwrap();
        assert_eq!(grads.layers[0].bias, vec![0.7, -1.3]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let spec = ModelSpec::embedding(3, &[4], 2).unwrap();
        let params = build_model(&spec, 5).unwrap();
        let (_, tape) = forward(&params, &[0.1, -0.4, 0.2]).unwrap();
        let (grads, grad_in) = backward(&params, tape, &[0.0, 0.0]).unwrap();
        assert!(grads.flatten().iter().all(|&g| g == 0.0));
        assert!(grad_in.iter().all(|&g| g == 0.0));
    }

    /// Central finite differences of `output . grad_out` on every scalar.
    fn check_gradients(spec: &ModelSpec, seed: u64, tolerance: f64) {
        let params = build_model(spec, seed).unwrap();
        let mut rng = StreamRng::from_path(seed, &[1000]);
        let x: Vec<f64> = (0..spec.input_width()).map(|_| rng.normal()).collect();
        let g: Vec<f64> = (0..spec.output_width()).map(|_| rng.normal()).collect();

        let objective = |p: &ParamSet, input: &[f64]| -> f64 {
            let (out, _) = forward(p, input).unwrap();
            out.iter().zip(&g).map(|(o, gi)| o * gi).sum()
        };

        let (_, tape) = forward(&params, &x).unwrap();
        let (grads, grad_in) = backward(&params, tape, &g).unwrap();

        let step = 1e-5;
        let flat = params.flatten();
        let analytic = grads.flatten();
        let mut max_rel: f64 = 0.0;
        for i in 0..flat.len() {
            let mut plus = flat.clone();
            plus[i] += step;
            let mut minus = flat.clone();
            minus[i] -= step;
            let fp = objective(&ParamSet::from_flat(spec, &plus).unwrap(), &x);
            let fm = objective(&ParamSet::from_flat(spec, &minus).unwrap(), &x);
            let numeric = (fp - fm) / (2.0 * step);
            let denom = analytic[i].abs().max(numeric.abs()).max(1.0);
            max_rel = max_rel.max((analytic[i] - numeric).abs() / denom);
        }
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus[i] += step;
            let mut minus = x.clone();
            minus[i] -= step;
            let numeric = (objective(&params, &plus) - objective(&params, &minus)) / (2.0 * step);
            let denom = grad_in[i].abs().max(numeric.abs()).max(1.0);
            max_rel = max_rel.max((grad_in[i] - numeric).abs() / denom);
        }
        assert!(max_rel < tolerance, "max relative error {max_rel}");
    }

    #[test]
    fn gradients_match_finite_differences_across_layer_kinds() {
        // Covers every activation, with and without normalization, single
        // and stacked layers.
        let specs: Vec<ModelSpec> = vec![
            linear_spec(3, 2),
            ModelSpec::new(vec![LayerSpec {
                inputs: 4,
                outputs: 3,
                normalize: true,
                activation: Activation::Tanh,
            }])
            .unwrap(),
            ModelSpec::new(vec![
                LayerSpec {
                    inputs: 5,
                    outputs: 6,
                    normalize: true,
                    activation: Activation::None,
                },
                LayerSpec {
                    inputs: 6,
                    outputs: 4,
                    normalize: true,
                    activation: Activation::Relu,
                },
                LayerSpec {
                    inputs: 4,
                    outputs: 3,
                    normalize: false,
                    activation: Activation::Tanh,
                },
            ])
            .unwrap(),
            ModelSpec::fusion(6, &[4]).unwrap(),
            ModelSpec::embedding(4, &[5, 3], 2).unwrap(),
        ];
        let mut cases = 0;
        for (si, spec) in specs.iter().enumerate() {
            for seed in 0..20 {
                check_gradients(spec, 31 * si as u64 + seed, 1e-4);
                cases += 1;
            }
        }
        assert_eq!(cases, 100);
    }

    #[test]
    fn bce_matches_analytic_values() {
        let (loss, _) = bce_loss(0.5, 1).unwrap();
        assert!((loss - core::f64::consts::LN_2).abs() < 1e-12);
        let (loss, _) = bce_loss(1.0, 1).unwrap();
        assert!(loss < 1e-6);
        assert!(matches!(bce_loss(0.5, 2), Err(NnError::InvalidLabel(2))));
    }

    #[test]
    fn bce_derivative_matches_finite_difference() {
        let step = 1e-6;
        let (_, dpred) = bce_loss(0.3, 0).unwrap();
        let (lp, _) = bce_loss(0.3 + step, 0).unwrap();
        let (lm, _) = bce_loss(0.3 - step, 0).unwrap();
        let numeric = (lp - lm) / (2.0 * step);
        assert!((dpred - numeric).abs() < 1e-6, "{dpred} vs {numeric}");
    }

    #[test]
    fn bce_is_nonnegative() {
        let mut rng = StreamRng::from_key(3);
        for _ in 0..1000 {
            let p = rng.next_f64();
            for label in [0u8, 1u8] {
                let (loss, _) = bce_loss(p, label).unwrap();
                assert!(loss >= 0.0);
            }
        }
    }

    #[test]
    fn sgd_step_is_plain_descent() {
        let spec = linear_spec(1, 1);
        let mut params = ParamSet::zeros(&spec);
        params.layers[0].weights[0] = 1.0;
        let mut grads = ParamSet::zeros(&spec);
        grads.layers[0].weights[0] = 2.0;
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, 0.1, &spec);
        opt.step(&mut params, &grads).unwrap();
        assert!((params.layers[0].weights[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_gradient_leaves_params_unchanged() {
        let spec = linear_spec(2, 2);
        let mut params = build_model(&spec, 9).unwrap();
        let before = params.clone();
        let grads = ParamSet::zeros(&spec);
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, 0.5, &spec);
        opt.step(&mut params, &grads).unwrap();
        assert!(params.bits_eq(&before));
    }

    #[test]
    fn adam_first_step_has_learning_rate_magnitude() {
        // At t = 1, m_hat = g and v_hat = g^2, so the update is
        // -eta * g / (|g| + eps) which is approximately -eta * sign(g).
        let spec = linear_spec(1, 1);
        let mut grads = ParamSet::zeros(&spec);
        grads.layers[0].weights[0] = 3.7;
        grads.layers[0].bias[0] = -0.002;
        let mut opt = OptimizerState::new(OptimizerKind::Adam, 0.001, &spec);
        let delta = opt.compute_update(&grads).unwrap();
        assert!((delta.layers[0].weights[0] + 0.001).abs() < 1e-8);
        assert!((delta.layers[0].bias[0] - 0.001).abs() < 1e-8);
    }

    #[test]
    fn non_finite_gradient_names_the_layer() {
        let spec = ModelSpec::new(vec![
            LayerSpec {
                inputs: 2,
                outputs: 2,
                normalize: false,
                activation: Activation::Relu,
            },
            LayerSpec {
                inputs: 2,
                outputs: 1,
                normalize: false,
                activation: Activation::None,
            },
        ])
        .unwrap();
        let mut grads = ParamSet::zeros(&spec);
        grads.layers[1].bias[0] = f64::NAN;
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, 0.1, &spec);
        let mut params = ParamSet::zeros(&spec);
        assert!(matches!(
            opt.step(&mut params, &grads),
            Err(NnError::NonFiniteGradient { layer: 1 })
        ));
    }

    #[test]
    fn optimizer_trajectory_is_bit_deterministic() {
        let spec = ModelSpec::embedding(3, &[4], 2).unwrap();
        let run = || {
            let mut params = build_model(&spec, 21).unwrap();
            let mut opt = OptimizerState::new(OptimizerKind::Adam, 0.01, &spec);
            let mut rng = StreamRng::from_key(77);
            for _ in 0..25 {
                let x: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
                let (out, tape) = forward(&params, &x).unwrap();
                let g: Vec<f64> = out.iter().map(|o| o - 0.1).collect();
                let (grads, _) = backward(&params, tape, &g).unwrap();
                opt.step(&mut params, &grads).unwrap();
            }
            params
        };
        assert!(run().bits_eq(&run()));
    }
}
