//! Named network models: ordered layer stacks over the autodiff tape.
//!
//! A [`NetworkModel`] owns its parameters as named tensors and replays its
//! topology onto a [`Tape`] for each forward pass. Parameter names are
//! `"{model}.{layer}.{slot}"`, e.g. `"flow.l0.w"`, which keeps gradients,
//! optimizer state, and checkpoints keyed consistently.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{PadMode, Tape, Var};
use crate::tensor::Tensor;

const LAYER_NORM_EPS: f64 = 1e-5;

/// One step of a model's topology.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    /// Dense map on the last axis: `y = x·w + b`.
    Affine { inputs: usize, outputs: usize },
    Tanh,
    LeakyRelu { slope: f64 },
    /// 1-D convolution over time with bias.
    Conv1d { in_channels: usize, out_channels: usize, kernel: usize, dilation: usize, pad: PadMode },
    /// Per-channel 1-D convolution over time with bias.
    DepthwiseConv1d { channels: usize, kernel: usize, dilation: usize, pad: PadMode },
    /// Single-head scaled-dot-product self-attention over the time axis.
    SelfAttention { dim: usize },
    /// Last-axis normalisation with learned gain and shift.
    LayerNorm { dim: usize },
    /// `y = x + body(x)`; the body must preserve the feature dimension.
    Residual { body: Vec<LayerSpec> },
}

impl LayerSpec {
    fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Affine { .. } => "affine",
            LayerSpec::Tanh => "tanh",
            LayerSpec::LeakyRelu { .. } => "leaky_relu",
            LayerSpec::Conv1d { .. } => "conv1d",
            LayerSpec::DepthwiseConv1d { .. } => "depthwise_conv1d",
            LayerSpec::SelfAttention { .. } => "self_attention",
            LayerSpec::LayerNorm { .. } => "layer_norm",
            LayerSpec::Residual { .. } => "residual",
        }
    }

    /// Feature dimension produced from `dim` inputs, or an error when the
    /// layer cannot accept that dimension.
    fn out_dim(&self, dim: usize) -> Result<usize> {
        match self {
            LayerSpec::Affine { inputs, outputs } => {
                if *inputs != dim {
                    return Err(Error::shape(format!(
                        "affine expects {inputs} features, preceding layer yields {dim}"
                    )));
                }
                Ok(*outputs)
            }
            LayerSpec::Tanh | LayerSpec::LeakyRelu { .. } => Ok(dim),
            LayerSpec::Conv1d { in_channels, out_channels, .. } => {
                if *in_channels != dim {
                    return Err(Error::shape(format!(
                        "conv1d expects {in_channels} channels, preceding layer yields {dim}"
                    )));
                }
                Ok(*out_channels)
            }
            LayerSpec::DepthwiseConv1d { channels, .. }
            | LayerSpec::SelfAttention { dim: channels }
            | LayerSpec::LayerNorm { dim: channels } => {
                if *channels != dim {
                    return Err(Error::shape(format!(
                        "{} expects {channels} channels, preceding layer yields {dim}",
                        self.kind()
                    )));
                }
                Ok(dim)
            }
            LayerSpec::Residual { body } => {
                let mut d = dim;
                for l in body {
                    d = l.out_dim(d)?;
                }
                if d != dim {
                    return Err(Error::shape(format!(
                        "residual body maps {dim} features to {d}; it must preserve the dimension"
                    )));
                }
                Ok(dim)
            }
        }
    }

    /// Appends `(suffix, shape, init)` descriptors for this layer's params.
    fn param_slots(&self, out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str) {
        match self {
            LayerSpec::Affine { inputs, outputs } => {
                out.push((format!("{prefix}.w"), vec![*inputs, *outputs], Init::Glorot {
                    fan_in: *inputs,
                    fan_out: *outputs,
                }));
                out.push((format!("{prefix}.b"), vec![*outputs], Init::Zero));
            }
            LayerSpec::Conv1d { in_channels, out_channels, kernel, .. } => {
                out.push((format!("{prefix}.w"), vec![*out_channels, *in_channels, *kernel], Init::Glorot {
                    fan_in: in_channels * kernel,
                    fan_out: out_channels * kernel,
                }));
                out.push((format!("{prefix}.b"), vec![*out_channels], Init::Zero));
            }
            LayerSpec::DepthwiseConv1d { channels, kernel, .. } => {
                out.push((format!("{prefix}.w"), vec![*channels, *kernel], Init::Glorot {
                    fan_in: *kernel,
                    fan_out: *kernel,
                }));
                out.push((format!("{prefix}.b"), vec![*channels], Init::Zero));
            }
            LayerSpec::SelfAttention { dim } => {
                for slot in ["wq", "wk", "wv", "wo"] {
                    out.push((format!("{prefix}.{slot}"), vec![*dim, *dim], Init::Glorot {
                        fan_in: *dim,
                        fan_out: *dim,
                    }));
                }
            }
            LayerSpec::LayerNorm { dim } => {
                out.push((format!("{prefix}.g"), vec![*dim], Init::One));
                out.push((format!("{prefix}.b"), vec![*dim], Init::Zero));
            }
            LayerSpec::Residual { body } => {
                for (j, l) in body.iter().enumerate() {
                    l.param_slots(out, &format!("{prefix}.b{j}"));
                }
            }
            LayerSpec::Tanh | LayerSpec::LeakyRelu { .. } => {}
        }
    }
}

enum Init {
    Zero,
    One,
    Glorot { fan_in: usize, fan_out: usize },
}

/// Ordered, uniquely named parameter storage. Iteration follows insertion
/// order, so everything downstream (init draws, optimizer state, checkpoint
/// layout) is deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    fn insert(&mut self, name: String, value: Tensor) -> Result<()> {
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name '{name}'")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        match self.index.get(name) {
            Some(&i) => Some(&mut self.entries[i].1),
            None => None,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A named stack of layers with owned parameters.
#[derive(Debug, Clone)]
pub struct NetworkModel {
    name: String,
    input_dim: usize,
    output_dim: usize,
    layers: Vec<LayerSpec>,
    params: ParamSet,
    rng_seed: u64,
}

impl NetworkModel {
    /// Validates the topology and initialises parameters from `rng_seed`:
    /// weights uniform in ±sqrt(6/(fan_in+fan_out)), biases zero, gains one.
    pub fn new(name: &str, input_dim: usize, layers: Vec<LayerSpec>, rng_seed: u64) -> Result<Self> {
        if name.is_empty() || name.contains('.') {
            return Err(Error::invalid(format!(
                "model name '{name}' must be non-empty and contain no '.'"
            )));
        }
        if input_dim == 0 {
            return Err(Error::invalid("model input dimension must be positive"));
        }
        if layers.is_empty() {
            return Err(Error::invalid("model needs at least one layer"));
        }
        let mut dim = input_dim;
        for (i, l) in layers.iter().enumerate() {
            dim = l.out_dim(dim).map_err(|e| {
                Error::shape(format!("model '{name}' layer l{i} ({}): {e}", l.kind()))
            })?;
        }

        let mut slots = Vec::new();
        for (i, l) in layers.iter().enumerate() {
            l.param_slots(&mut slots, &format!("l{i}"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut params = ParamSet::default();
        for (pname, shape, init) in slots {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zero => vec![0.0; n],
                Init::One => vec![1.0; n],
                Init::Glorot { fan_in, fan_out } => {
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
            };
            params.insert(pname, Tensor::new(&shape, data)?)?;
        }

        Ok(NetworkModel {
            name: name.to_string(),
            input_dim,
            output_dim: dim,
            layers,
            params,
            rng_seed,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Parameter by unqualified name (without the model prefix).
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    /// `(unqualified name, tensor)` pairs in declaration order.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Total scalar parameter count.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    /// Name under which a parameter appears on tapes and in checkpoints.
    pub fn qualified(&self, pname: &str) -> String {
        format!("{}.{}", self.name, pname)
    }

    /// Overwrites a parameter; the shape must match.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let t = self.params.get_mut(name).ok_or_else(|| {
            Error::invalid(format!("model '{}' has no parameter '{name}'", self.name))
        })?;
        if t.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter '{name}' has shape {:?}, got {:?}",
                t.shape(),
                value.shape()
            )));
        }
        *t = value;
        Ok(())
    }

    /// Plain evaluation without gradient tracking.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.input(input.clone());
        let y = self.forward_traced(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    /// Replays the topology onto `tape`, registering parameters by qualified
    /// name so several models (or repeated calls) can share one tape.
    pub fn forward_traced(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let got = tape.value(input).last_dim().map_err(|_| {
            Error::shape(format!("model '{}' cannot take a scalar input", self.name))
        })?;
        if got != self.input_dim {
            return Err(Error::shape(format!(
                "model '{}' expects {} input features, got shape {:?}",
                self.name,
                self.input_dim,
                tape.value(input).shape()
            )));
        }
        let mut x = input;
        for (i, layer) in self.layers.iter().enumerate() {
            x = self
                .apply(tape, layer, &format!("l{i}"), x)
                .map_err(|e| match e {
                    Error::Shape(m) => Error::shape(format!(
                        "model '{}' layer l{i} ({}): {m}",
                        self.name,
                        layer.kind()
                    )),
                    other => other,
                })?;
        }
        Ok(x)
    }

    fn apply(&self, tape: &mut Tape, layer: &LayerSpec, prefix: &str, x: Var) -> Result<Var> {
        let p = |tape: &mut Tape, this: &Self, slot: &str| -> Result<Var> {
            let pname = format!("{prefix}.{slot}");
            let t = this.params.get(&pname).expect("topology and params in sync");
            tape.param(&this.qualified(&pname), t)
        };
        match layer {
            LayerSpec::Affine { .. } => {
                let w = p(tape, self, "w")?;
                let b = p(tape, self, "b")?;
                let y = tape.matmul(x, w)?;
                tape.add_row(y, b)
            }
            LayerSpec::Tanh => Ok(tape.tanh(x)),
            LayerSpec::LeakyRelu { slope } => Ok(tape.leaky_relu(x, *slope)),
            LayerSpec::Conv1d { dilation, pad, .. } => {
                let w = p(tape, self, "w")?;
                let b = p(tape, self, "b")?;
                let y = tape.conv1d(x, w, *dilation, *pad)?;
                tape.add_row(y, b)
            }
            LayerSpec::DepthwiseConv1d { dilation, pad, .. } => {
                let w = p(tape, self, "w")?;
                let b = p(tape, self, "b")?;
                let y = tape.dw_conv1d(x, w, *dilation, *pad)?;
                tape.add_row(y, b)
            }
            LayerSpec::SelfAttention { dim } => {
                let wq = p(tape, self, "wq")?;
                let wk = p(tape, self, "wk")?;
                let wv = p(tape, self, "wv")?;
                let wo = p(tape, self, "wo")?;
                let q = tape.matmul(x, wq)?;
                let k = tape.matmul(x, wk)?;
                let v = tape.matmul(x, wv)?;
                let scores = tape.bmm_nt(q, k)?;
                let scaled = tape.scale(scores, 1.0 / (*dim as f64).sqrt());
                let attn = tape.softmax_last(scaled)?;
                let ctx = tape.bmm_nn(attn, v)?;
                tape.matmul(ctx, wo)
            }
            LayerSpec::LayerNorm { .. } => {
                let g = p(tape, self, "g")?;
                let b = p(tape, self, "b")?;
                let y = tape.layer_norm(x, LAYER_NORM_EPS)?;
                let y = tape.mul_row(y, g)?;
                tape.add_row(y, b)
            }
            LayerSpec::Residual { body } => {
                let mut y = x;
                for (j, l) in body.iter().enumerate() {
                    y = self.apply(tape, l, &format!("{prefix}.b{j}"), y)?;
                }
                tape.add(x, y)
            }
        }
    }

    /// Gradients for every parameter after `tape.backward` has run; params
    /// the loss does not reach get zeros.
    pub fn param_grads(&self, tape: &Tape) -> Result<Vec<(String, Tensor)>> {
        self.params
            .iter()
            .map(|(n, t)| {
                let g = match tape.param_var(&self.qualified(n)) {
                    Some(v) => tape.grad(v)?,
                    None => Tensor::zeros(t.shape()),
                };
                Ok((n.to_string(), g))
            })
            .collect()
    }
}

/// Fluent topology construction that tracks the running feature dimension.
pub struct NetBuilder {
    name: String,
    input_dim: usize,
    cur_dim: usize,
    layers: Vec<LayerSpec>,
}

impl NetBuilder {
    pub fn new(name: &str, input_dim: usize) -> Self {
        NetBuilder {
            name: name.to_string(),
            input_dim,
            cur_dim: input_dim,
            layers: Vec::new(),
        }
    }

    pub fn affine(mut self, outputs: usize) -> Self {
        self.layers.push(LayerSpec::Affine { inputs: self.cur_dim, outputs });
        self.cur_dim = outputs;
        self
    }

    pub fn tanh(mut self) -> Self {
        self.layers.push(LayerSpec::Tanh);
        self
    }

    pub fn leaky_relu(mut self, slope: f64) -> Self {
        self.layers.push(LayerSpec::LeakyRelu { slope });
        self
    }

    pub fn conv1d(mut self, out_channels: usize, kernel: usize, dilation: usize, pad: PadMode) -> Self {
        self.layers.push(LayerSpec::Conv1d {
            in_channels: self.cur_dim,
            out_channels,
            kernel,
            dilation,
            pad,
        });
        self.cur_dim = out_channels;
        self
    }

    pub fn depthwise_conv1d(mut self, kernel: usize, dilation: usize, pad: PadMode) -> Self {
        self.layers.push(LayerSpec::DepthwiseConv1d {
            channels: self.cur_dim,
            kernel,
            dilation,
            pad,
        });
        self
    }

    pub fn self_attention(mut self) -> Self {
        self.layers.push(LayerSpec::SelfAttention { dim: self.cur_dim });
        self
    }

    pub fn layer_norm(mut self) -> Self {
        self.layers.push(LayerSpec::LayerNorm { dim: self.cur_dim });
        self
    }

    /// Wraps the layers built inside `f` in a residual connection.
    pub fn residual(mut self, f: impl FnOnce(NetBuilder) -> NetBuilder) -> Self {
        let inner = f(NetBuilder::new("body", self.cur_dim));
        self.layers.push(LayerSpec::Residual { body: inner.layers });
        self
    }

    pub fn build(self, rng_seed: u64) -> Result<NetworkModel> {
        NetworkModel::new(&self.name, self.input_dim, self.layers, rng_seed)
    }
}

/// Max relative disagreement between tape gradients and central differences
/// for every parameter of `model` under `loss_fn`. `step` must lie in
/// `(0, 1e-3]`.
pub fn grad_check<F>(model: &NetworkModel, input: &Tensor, loss_fn: F, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(&[model.clone()], step, |tape, models| {
        let x = tape.input(input.clone());
        let y = models[0].forward_traced(tape, x)?;
        loss_fn(tape, y)
    })
}

/// Gradient check over several jointly trained models; `build` must assemble
/// the full scalar loss from the given model set.
pub fn grad_check_many<B>(models: &[NetworkModel], step: f64, build: B) -> Result<f64>
where
    B: Fn(&mut Tape, &[NetworkModel]) -> Result<Var>,
{
    if !(step > 0.0 && step <= 1e-3) {
        return Err(Error::invalid(format!(
            "grad_check step must lie in (0, 1e-3], got {step}"
        )));
    }

    let eval = |ms: &[NetworkModel]| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = build(&mut tape, ms)?;
        tape.value(loss).item()
    };

    let mut tape = Tape::new();
    let loss = build(&mut tape, models)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::invalid("grad_check loss must be scalar"));
    }
    tape.backward(loss)?;

    let mut analytic: Vec<Vec<Tensor>> = Vec::with_capacity(models.len());
    for m in models {
        analytic.push(
            m.param_grads(&tape)?
                .into_iter()
                .map(|(_, g)| g)
                .collect(),
        );
    }

    let mut work: Vec<NetworkModel> = models.to_vec();
    let mut worst: f64 = 0.0;
    for mi in 0..models.len() {
        let pnames: Vec<String> = models[mi].params().map(|(n, _)| n.to_string()).collect();
        for (pi, pname) in pnames.iter().enumerate() {
            let count = models[mi].param(pname).unwrap().len();
            for e in 0..count {
                let orig = work[mi].param(pname).unwrap().data()[e];
                work[mi].param_mut(pname).unwrap().data_mut()[e] = orig + step;
                let plus = eval(&work)?;
                work[mi].param_mut(pname).unwrap().data_mut()[e] = orig - step;
                let minus = eval(&work)?;
                work[mi].param_mut(pname).unwrap().data_mut()[e] = orig;
                let cd = (plus - minus) / (2.0 * step);
                let a = analytic[mi][pi].data()[e];
                let rel = (a - cd).abs() / (a.abs() + cd.abs() + 1e-12);
                worst = worst.max(rel);
            }
        }
    }
    Ok(worst)
}
