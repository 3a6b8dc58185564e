//! Fixed-architecture multilayer perceptrons with hand-written backward passes.
//!
//! Parameters live in a single flat `f64` vector so the evolution strategy can
//! treat a network as a point in R^n. The flat layout is, layer by layer, the
//! row-major weight matrix `(output_dim, input_dim)` followed by the bias
//! vector.
//!
//! A critic layout may name one layer whose input is the previous layer's
//! output concatenated with the action (`[h ; a]`).

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{invalid_arg, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `y`.
    #[inline]
    fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }

    pub(crate) fn code(self) -> u32 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LayerSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(input_dim: usize, output_dim: usize, activation: Activation) -> Self {
        Self {
            input_dim,
            output_dim,
            activation,
        }
    }

    pub fn weight_count(&self) -> usize {
        self.input_dim * self.output_dim
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + self.output_dim
    }
}

/// Shape of a network and of its flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NetLayout {
    layers: Vec<LayerSpec>,
    action_injection: Option<usize>,
    action_dim: usize,
    offsets: Vec<usize>,
    total_params: usize,
}

impl NetLayout {
    /// Validates dimension chaining. When `action_injection` is
    /// `Some((layer, action_dim))`, that layer's `input_dim` must equal the
    /// previous output (or the network input for layer 0) plus `action_dim`.
    pub fn new(layers: Vec<LayerSpec>, action_injection: Option<(usize, usize)>) -> Result<Self> {
        if layers.is_empty() {
            return Err(invalid_arg("layout needs at least one layer"));
        }
        if layers.iter().any(|l| l.input_dim == 0 || l.output_dim == 0) {
            return Err(invalid_arg("layer dims must be >= 1"));
        }
        let (injection, action_dim) = match action_injection {
            Some((idx, dim)) => {
                if idx >= layers.len() {
                    return Err(invalid_arg(format!("injection layer {idx} out of range")));
                }
                if dim == 0 {
                    return Err(invalid_arg("action_dim must be >= 1"));
                }
                if idx == 0 && layers[0].input_dim <= dim {
                    return Err(invalid_arg("layer 0 too narrow for injected action"));
                }
                (Some(idx), dim)
            }
            None => (None, 0),
        };
        for i in 1..layers.len() {
            let extra = if injection == Some(i) { action_dim } else { 0 };
            if layers[i].input_dim != layers[i - 1].output_dim + extra {
                return Err(invalid_arg(format!(
                    "layer {i} input_dim {} does not chain from {} (+{extra})",
                    layers[i].input_dim,
                    layers[i - 1].output_dim
                )));
            }
        }
        let mut offsets = Vec::with_capacity(layers.len());
        let mut total = 0;
        for l in &layers {
            offsets.push(total);
            total += l.param_count();
        }
        Ok(Self {
            layers,
            action_injection: injection,
            action_dim,
            offsets,
            total_params: total,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn action_injection(&self) -> Option<usize> {
        self.action_injection
    }

    /// Width of the injected action, zero for plain networks.
    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn total_params(&self) -> usize {
        self.total_params
    }

    /// Dimension of the primary (observation) input.
    pub fn input_dim(&self) -> usize {
        let first = self.layers[0].input_dim;
        if self.action_injection == Some(0) {
            first - self.action_dim
        } else {
            first
        }
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim
    }

    fn layer_range(&self, i: usize) -> (usize, usize, usize) {
        let start = self.offsets[i];
        let w_end = start + self.layers[i].weight_count();
        (start, w_end, w_end + self.layers[i].output_dim)
    }
}

fn check_dims(obs: usize, action: usize, hidden: usize) -> Result<()> {
    if obs == 0 || action == 0 || hidden == 0 {
        return Err(invalid_arg(format!(
            "dims must be >= 1 (obs={obs}, action={action}, hidden={hidden})"
        )));
    }
    Ok(())
}

/// `obs -> hidden (relu) -> hidden (relu) -> action (tanh)`.
pub fn build_actor_layout(obs_dim: usize, action_dim: usize, hidden: usize) -> Result<NetLayout> {
    check_dims(obs_dim, action_dim, hidden)?;
    NetLayout::new(
        vec![
            LayerSpec::new(obs_dim, hidden, Activation::Relu),
            LayerSpec::new(hidden, hidden, Activation::Relu),
            LayerSpec::new(hidden, action_dim, Activation::Tanh),
        ],
        None,
    )
}

/// `obs -> hidden (relu) -> [h ; action] -> hidden (relu) -> 1 (identity)`.
pub fn build_critic_layout(obs_dim: usize, action_dim: usize, hidden: usize) -> Result<NetLayout> {
    check_dims(obs_dim, action_dim, hidden)?;
    NetLayout::new(
        vec![
            LayerSpec::new(obs_dim, hidden, Activation::Relu),
            LayerSpec::new(hidden + action_dim, hidden, Activation::Relu),
            LayerSpec::new(hidden, 1, Activation::Identity),
        ],
        Some((1, action_dim)),
    )
}

/// Weights and biases of one layer, detached from the flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// A flat parameter vector tied to its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatParams {
    layout: Arc<NetLayout>,
    values: Vec<f64>,
}

impl FlatParams {
    pub fn new(layout: Arc<NetLayout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total_params() {
            return Err(invalid_arg(format!(
                "expected {} params, got {}",
                layout.total_params(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(invalid_arg(format!("param {i} is not finite")));
        }
        Ok(Self { layout, values })
    }

    /// Caller guarantees length; finiteness is not checked.
    pub(crate) fn from_raw(layout: Arc<NetLayout>, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), layout.total_params());
        Self { layout, values }
    }

    pub fn zeros(layout: Arc<NetLayout>) -> Self {
        let n = layout.total_params();
        Self {
            layout,
            values: vec![0.0; n],
        }
    }

    pub fn layout(&self) -> &Arc<NetLayout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `(weights, biases)` slices of layer `i`.
    pub fn layer(&self, i: usize) -> (&[f64], &[f64]) {
        let (s, w, e) = self.layout.layer_range(i);
        (&self.values[s..w], &self.values[w..e])
    }

    pub fn unflatten(&self) -> Vec<LayerParams> {
        (0..self.layout.layers().len())
            .map(|i| {
                let (w, b) = self.layer(i);
                LayerParams {
                    weights: w.to_vec(),
                    biases: b.to_vec(),
                }
            })
            .collect()
    }

    pub fn flatten(layout: Arc<NetLayout>, layers: &[LayerParams]) -> Result<Self> {
        if layers.len() != layout.layers().len() {
            return Err(invalid_arg("layer count mismatch"));
        }
        let mut values = Vec::with_capacity(layout.total_params());
        for (spec, lp) in layout.layers().iter().zip(layers) {
            if lp.weights.len() != spec.weight_count() || lp.biases.len() != spec.output_dim {
                return Err(invalid_arg("layer shape mismatch"));
            }
            values.extend_from_slice(&lp.weights);
            values.extend_from_slice(&lp.biases);
        }
        Self::new(layout, values)
    }

    /// `self + scale * direction`, elementwise.
    pub fn axpy(&self, scale: f64, direction: &[f64]) -> Result<Self> {
        if direction.len() != self.values.len() {
            return Err(invalid_arg("direction length mismatch"));
        }
        let values = self.values.iter().zip(direction).map(|(v, d)| v + scale * d).collect();
        Ok(Self::from_raw(self.layout.clone(), values))
    }
}

/// Glorot-uniform weights in `(-L, L)`, `L = sqrt(6 / (fan_in + fan_out))`; zero biases.
pub fn xavier_init<R: Rng + ?Sized>(layout: &Arc<NetLayout>, rng: &mut R) -> FlatParams {
    let mut values = vec![0.0; layout.total_params()];
    for (i, spec) in layout.layers().iter().enumerate() {
        let limit = (6.0 / (spec.input_dim + spec.output_dim) as f64).sqrt();
        let dist = Uniform::new(-limit, limit).expect("finite positive limit");
        let (s, w, _) = layout.layer_range(i);
        for v in &mut values[s..w] {
            *v = dist.sample(rng);
        }
    }
    FlatParams::from_raw(layout.clone(), values)
}

/// Gradients of a scalar objective with respect to parameters and inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct BackpropResult {
    pub param_grads: Vec<f64>,
    pub input_grads: Vec<f64>,
}

/// Activations recorded by a forward pass, consumed by [`Trace::backward_into`].
#[derive(Debug, Clone)]
pub struct Trace {
    /// Input seen by each layer (after any action concatenation).
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

/// Gradients flowing out of the network's inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGrads {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
}

fn check_inputs(layout: &NetLayout, input: &[f64], action: Option<&[f64]>) -> Result<()> {
    if input.len() != layout.input_dim() {
        return Err(invalid_arg(format!(
            "input has {} dims, layout expects {}",
            input.len(),
            layout.input_dim()
        )));
    }
    match (layout.action_injection(), action) {
        (Some(_), Some(a)) if a.len() == layout.action_dim() => Ok(()),
        (Some(_), Some(a)) => Err(invalid_arg(format!(
            "action has {} dims, layout expects {}",
            a.len(),
            layout.action_dim()
        ))),
        (Some(_), None) => Err(invalid_arg("layout requires an action input")),
        (None, Some(_)) => Err(invalid_arg("layout takes no action input")),
        (None, None) => Ok(()),
    }
}

#[inline]
fn affine(weights: &[f64], biases: &[f64], x: &[f64], out: &mut Vec<f64>) {
    let n_in = x.len();
    out.clear();
    out.extend(biases.iter().enumerate().map(|(o, &b)| {
        let row = &weights[o * n_in..(o + 1) * n_in];
        b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>()
    }));
}

/// Forward pass without recording intermediates.
pub fn forward(params: &FlatParams, input: &[f64], action: Option<&[f64]>) -> Result<Vec<f64>> {
    let layout = params.layout();
    check_inputs(layout, input, action)?;
    let mut x = input.to_vec();
    let mut z = Vec::new();
    for (i, spec) in layout.layers().iter().enumerate() {
        if layout.action_injection() == Some(i) {
            x.extend_from_slice(action.expect("checked"));
        }
        let (w, b) = params.layer(i);
        affine(w, b, &x, &mut z);
        for v in &mut z {
            *v = spec.activation.apply(*v);
        }
        std::mem::swap(&mut x, &mut z);
    }
    Ok(x)
}

/// Forward pass that keeps what the backward pass needs.
pub fn trace(params: &FlatParams, input: &[f64], action: Option<&[f64]>) -> Result<Trace> {
    let layout = params.layout();
    check_inputs(layout, input, action)?;
    let n = layout.layers().len();
    let mut inputs = Vec::with_capacity(n);
    let mut pre = Vec::with_capacity(n);
    let mut x = input.to_vec();
    for (i, spec) in layout.layers().iter().enumerate() {
        if layout.action_injection() == Some(i) {
            x.extend_from_slice(action.expect("checked"));
        }
        let (w, b) = params.layer(i);
        let mut z = Vec::with_capacity(spec.output_dim);
        affine(w, b, &x, &mut z);
        let y: Vec<f64> = z.iter().map(|&v| spec.activation.apply(v)).collect();
        inputs.push(x);
        pre.push(z);
        x = y;
    }
    Ok(Trace { inputs, pre, output: x })
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    /// Back-propagates `upstream` (dL/d output) and adds the parameter
    /// gradient into `param_grads`. Returns the gradient with respect to the
    /// observation input and the injected action (empty if none).
    pub fn backward_into(&self, params: &FlatParams, upstream: &[f64], param_grads: &mut [f64]) -> Result<InputGrads> {
        let layout = params.layout();
        if upstream.len() != self.output.len() {
            return Err(invalid_arg(format!(
                "upstream has {} dims, output has {}",
                upstream.len(),
                self.output.len()
            )));
        }
        if param_grads.len() != layout.total_params() {
            return Err(invalid_arg("param_grads length mismatch"));
        }
        let mut action_grad = Vec::new();
        let mut dy = upstream.to_vec();
        for i in (0..layout.layers().len()).rev() {
            let spec = layout.layers()[i];
            let x = &self.inputs[i];
            let z = &self.pre[i];
            let y_of = |o: usize| -> f64 {
                if i + 1 == layout.layers().len() {
                    self.output[o]
                } else {
                    spec.activation.apply(z[o])
                }
            };
            let dz: Vec<f64> = (0..spec.output_dim)
                .map(|o| dy[o] * spec.activation.derivative(z[o], y_of(o)))
                .collect();
            let (s, w_end, _) = layout.layer_range(i);
            let n_in = spec.input_dim;
            let (w, _) = params.layer(i);
            let mut dx = vec![0.0; n_in];
            {
                let (gw, gb) = param_grads[s..s + spec.param_count()].split_at_mut(w_end - s);
                for (o, &d) in dz.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    let grow = &mut gw[o * n_in..(o + 1) * n_in];
                    let wrow = &w[o * n_in..(o + 1) * n_in];
                    for k in 0..n_in {
                        grow[k] += d * x[k];
                        dx[k] += d * wrow[k];
                    }
                }
            }
            if layout.action_injection() == Some(i) {
                let split = n_in - layout.action_dim();
                action_grad = dx.split_off(split);
            }
            dy = dx;
        }
        Ok(InputGrads {
            obs: dy,
            action: action_grad,
        })
    }
}

fn require_actor(params: &FlatParams) -> Result<()> {
    if params.layout().action_injection().is_some() {
        return Err(invalid_arg("expected an actor layout"));
    }
    Ok(())
}

fn require_critic(params: &FlatParams) -> Result<()> {
    let l = params.layout();
    if l.action_injection().is_none() || l.output_dim() != 1 {
        return Err(invalid_arg("expected a scalar critic layout with action injection"));
    }
    Ok(())
}

/// Deterministic policy `a = mu(s)`.
pub fn actor_forward(params: &FlatParams, obs: &[f64]) -> Result<Vec<f64>> {
    require_actor(params)?;
    forward(params, obs, None)
}

/// `Q(s, a)`.
pub fn critic_forward(params: &FlatParams, obs: &[f64], action: &[f64]) -> Result<f64> {
    require_critic(params)?;
    Ok(forward(params, obs, Some(action))?[0])
}

/// `upstream * dQ/dparams` and `upstream * dQ/da`; `input_grads` holds the action gradient.
pub fn critic_backward(params: &FlatParams, obs: &[f64], action: &[f64], upstream: f64) -> Result<BackpropResult> {
    require_critic(params)?;
    let t = trace(params, obs, Some(action))?;
    let mut param_grads = vec![0.0; params.len()];
    let g = t.backward_into(params, &[upstream], &mut param_grads)?;
    Ok(BackpropResult {
        param_grads,
        input_grads: g.action,
    })
}

/// Parameter gradient of `upstream . mu(s)`.
pub fn actor_backward(params: &FlatParams, obs: &[f64], upstream_action_grad: &[f64]) -> Result<Vec<f64>> {
    require_actor(params)?;
    let t = trace(params, obs, None)?;
    let mut grads = vec![0.0; params.len()];
    t.backward_into(params, upstream_action_grad, &mut grads)?;
    Ok(grads)
}
