//! Differentiable layer primitives and the node type that wraps them.
//!
//! Every layer kind has a forward map and an exact analytic backward map. The
//! free functions in the submodules work on plain tensors; [`LayerNode`] binds a
//! [`Layer`] configuration to its named parameters and state so the graph in
//! [`crate::graph`] can drive them uniformly.

pub mod conv;
pub mod dense;
pub mod merge;
pub mod norm;
pub mod pool;

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use conv::{conv2d, conv2d_backward, depthwise_conv2d, depthwise_conv2d_backward, Window};
pub use dense::{activation, activation_backward, dense, dense_backward, sigmoid, softmax};
pub use merge::{
    channel_scale, channel_scale_backward, concat_channels, residual_add, split_channels,
};
pub use norm::{batchnorm, batchnorm_backward, dropout_mask};
pub use pool::{global_pool, global_pool_backward, pool2d, pool2d_backward};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    Same,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationKind {
    Relu,
    Sigmoid,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

pub const DEFAULT_BN_MOMENTUM: f64 = 0.99;
pub const DEFAULT_BN_EPS: f64 = 1e-3;

/// Layer kind plus its hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// Graph entry; carries the per-sample `[H, W, C]` shape.
    Input {
        shape: Vec<usize>,
    },
    Conv2d {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    },
    SeparableConv2d {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    },
    Pool2d {
        kind: PoolKind,
        window: usize,
        stride: usize,
        padding: Padding,
    },
    GlobalPool {
        kind: PoolKind,
    },
    Dense {
        units: usize,
    },
    Activation {
        kind: ActivationKind,
    },
    BatchNorm {
        momentum: f64,
        eps: f64,
    },
    Dropout {
        rate: f64,
    },
    Flatten,
    ResidualAdd,
    ChannelScale,
    Concat,
}

impl Layer {
    pub fn batchnorm() -> Self {
        Layer::BatchNorm {
            momentum: DEFAULT_BN_MOMENTUM,
            eps: DEFAULT_BN_EPS,
        }
    }

    /// Short identifier used in summaries and gradient-check reports.
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Input { .. } => "input",
            Layer::Conv2d { .. } => "conv2d",
            Layer::SeparableConv2d { .. } => "separable_conv2d",
            Layer::Pool2d {
                kind: PoolKind::Max,
                ..
            } => "max_pool2d",
            Layer::Pool2d {
                kind: PoolKind::Avg,
                ..
            } => "avg_pool2d",
            Layer::GlobalPool {
                kind: PoolKind::Max,
            } => "global_max_pool",
            Layer::GlobalPool {
                kind: PoolKind::Avg,
            } => "global_avg_pool",
            Layer::Dense { .. } => "dense",
            Layer::Activation {
                kind: ActivationKind::Relu,
            } => "relu",
            Layer::Activation {
                kind: ActivationKind::Sigmoid,
            } => "sigmoid",
            Layer::Activation {
                kind: ActivationKind::Softmax,
            } => "softmax",
            Layer::BatchNorm { .. } => "batchnorm",
            Layer::Dropout { .. } => "dropout",
            Layer::Flatten => "flatten",
            Layer::ResidualAdd => "residual_add",
            Layer::ChannelScale => "channel_scale",
            Layer::Concat => "concat",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Layer::Input { .. } => Some(0),
            Layer::ResidualAdd | Layer::ChannelScale => Some(2),
            Layer::Concat => None,
            _ => Some(1),
        }
    }

    /// Per-sample output shape (batch axis excluded) for the given per-sample input shapes.
    pub fn output_shape(&self, inputs: &[Vec<usize>]) -> Result<Vec<usize>> {
        match self.arity() {
            Some(n) if n != inputs.len() => {
                return Err(Error::shape(format!(
                    "{} takes {n} input(s), got {}",
                    self.kind_name(),
                    inputs.len()
                )))
            }
            None if inputs.is_empty() => {
                return Err(Error::shape("concat needs at least one input"))
            }
            _ => {}
        }
        let spatial = |s: &Vec<usize>| -> Result<(usize, usize, usize)> {
            match s[..] {
                [h, w, c] => Ok((h, w, c)),
                _ => Err(Error::shape(format!(
                    "{} expects [H, W, C] input, got {s:?}",
                    self.kind_name()
                ))),
            }
        };
        match self {
            Layer::Input { shape } => Ok(shape.clone()),
            Layer::Conv2d {
                filters,
                kernel,
                stride,
                padding,
            }
            | Layer::SeparableConv2d {
                filters,
                kernel,
                stride,
                padding,
            } => {
                let (h, w, _) = spatial(&inputs[0])?;
                let win = Window::new(h, w, *kernel, *stride, *padding)?;
                Ok(vec![win.out_h, win.out_w, *filters])
            }
            Layer::Pool2d {
                window,
                stride,
                padding,
                ..
            } => {
                let (h, w, c) = spatial(&inputs[0])?;
                let win = Window::new(h, w, *window, *stride, *padding).map_err(|_| {
                    Error::shape(format!("pool window {window} larger than input {h}x{w}"))
                })?;
                Ok(vec![win.out_h, win.out_w, c])
            }
            Layer::GlobalPool { .. } => {
                let (_, _, c) = spatial(&inputs[0])?;
                Ok(vec![c])
            }
            Layer::Dense { units } => match inputs[0][..] {
                [_] => Ok(vec![*units]),
                _ => Err(Error::shape(format!(
                    "dense expects flat input, got {:?}",
                    inputs[0]
                ))),
            },
            Layer::Activation { .. } | Layer::BatchNorm { .. } | Layer::Dropout { .. } => {
                Ok(inputs[0].clone())
            }
            Layer::Flatten => Ok(vec![inputs[0].iter().product()]),
            Layer::ResidualAdd => {
                if inputs[0] != inputs[1] {
                    return Err(Error::shape(format!(
                        "residual add shapes differ: {:?} vs {:?}",
                        inputs[0], inputs[1]
                    )));
                }
                Ok(inputs[0].clone())
            }
            Layer::ChannelScale => {
                let (_, _, c) = spatial(&inputs[0])?;
                if inputs[1] != [c] {
                    return Err(Error::shape(format!(
                        "channel gate {:?} does not match {c} channels",
                        inputs[1]
                    )));
                }
                Ok(inputs[0].clone())
            }
            Layer::Concat => {
                let lead = &inputs[0][..inputs[0].len() - 1];
                let mut channels = 0;
                for s in inputs {
                    if s.len() != inputs[0].len() || &s[..s.len() - 1] != lead {
                        return Err(Error::shape(format!(
                            "concat inputs differ spatially: {inputs:?}"
                        )));
                    }
                    channels += s[s.len() - 1];
                }
                let mut out = lead.to_vec();
                out.push(channels);
                Ok(out)
            }
        }
    }
}

/// A named tensor owned by a node.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
}

impl<T: Real> NamedTensor<T> {
    fn new(name: &str, value: Tensor<T>) -> Self {
        NamedTensor {
            name: name.to_string(),
            value,
        }
    }
}

/// Index of a node within its graph.
pub type NodeId = usize;

/// One layer instance: configuration, parameters, state and graph wiring.
#[derive(Debug, Clone)]
pub struct LayerNode<T: Real = f32> {
    pub name: String,
    pub layer: Layer,
    pub inputs: Vec<NodeId>,
    pub params: Vec<NamedTensor<T>>,
    /// Non-trainable buffers (batchnorm moving statistics).
    pub state: Vec<NamedTensor<T>>,
    pub trainable: bool,
    /// Per-sample output shape.
    pub output_shape: Vec<usize>,
}

/// Forward intermediates a node needs for its backward pass.
#[derive(Debug, Clone)]
pub enum NodeCache<T: Real> {
    None,
    Argmax(Vec<usize>),
    BatchNorm(norm::BatchNormCache<T>),
    Mask(Vec<T>),
    Depthwise(Tensor<T>),
}

pub struct NodeForward<T: Real> {
    pub output: Tensor<T>,
    pub cache: NodeCache<T>,
    /// Replacement state tensors (training-mode batchnorm).
    pub new_state: Option<Vec<Tensor<T>>>,
}

/// Gradients produced by one node's backward pass.
#[derive(Debug, Clone)]
pub struct NodeGrads<T: Real> {
    /// One entry per input; `None` where the caller did not ask for it.
    pub inputs: Vec<Option<Tensor<T>>>,
    /// Aligned with `LayerNode::params`; empty for frozen nodes.
    pub params: Vec<Tensor<T>>,
}

/// He-style fan-in scaled uniform initialization: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
fn fan_in_uniform<T: Real>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>> {
    let limit = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n)
            .map(|_| T::from_f64(rng.gen_range(-limit..limit)))
            .collect(),
    )
}

impl<T: Real> LayerNode<T> {
    /// Creates a node, inferring its output shape and initializing parameters from `rng`.
    pub fn new(
        name: impl Into<String>,
        layer: Layer,
        inputs: Vec<NodeId>,
        input_shapes: &[Vec<usize>],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let output_shape = layer.output_shape(input_shapes)?;
        let last = |s: &Vec<usize>| *s.last().expect("non-empty shape");
        let mut params = Vec::new();
        let mut state = Vec::new();
        match &layer {
            Layer::Conv2d {
                filters, kernel, ..
            } => {
                let c = last(&input_shapes[0]);
                let fan_in = kernel * kernel * c;
                params.push(NamedTensor::new(
                    "kernel",
                    fan_in_uniform(&[*kernel, *kernel, c, *filters], fan_in, rng)?,
                ));
                params.push(NamedTensor::new("bias", Tensor::zeros(&[*filters])?));
            }
            Layer::SeparableConv2d {
                filters, kernel, ..
            } => {
                let c = last(&input_shapes[0]);
                params.push(NamedTensor::new(
                    "depthwise_kernel",
                    fan_in_uniform(&[*kernel, *kernel, c], kernel * kernel, rng)?,
                ));
                params.push(NamedTensor::new("depthwise_bias", Tensor::zeros(&[c])?));
                params.push(NamedTensor::new(
                    "pointwise_kernel",
                    fan_in_uniform(&[1, 1, c, *filters], c, rng)?,
                ));
                params.push(NamedTensor::new(
                    "pointwise_bias",
                    Tensor::zeros(&[*filters])?,
                ));
            }
            Layer::Dense { units } => {
                let n = input_shapes[0][0];
                params.push(NamedTensor::new(
                    "kernel",
                    fan_in_uniform(&[n, *units], n, rng)?,
                ));
                params.push(NamedTensor::new("bias", Tensor::zeros(&[*units])?));
            }
            Layer::BatchNorm { .. } => {
                let c = last(&input_shapes[0]);
                params.push(NamedTensor::new("gamma", Tensor::full(&[c], T::one())?));
                params.push(NamedTensor::new("beta", Tensor::zeros(&[c])?));
                state.push(NamedTensor::new("moving_mean", Tensor::zeros(&[c])?));
                state.push(NamedTensor::new(
                    "moving_var",
                    Tensor::full(&[c], T::one())?,
                ));
            }
            Layer::Dropout { rate } if !(0.0..1.0).contains(rate) => {
                return Err(Error::config(format!(
                    "dropout rate {rate} must be in [0, 1)"
                )));
            }
            _ => {}
        }
        Ok(LayerNode {
            name: name.into(),
            layer,
            inputs,
            params,
            state,
            trainable: true,
            output_shape,
        })
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.value)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn state_count(&self) -> usize {
        self.state.iter().map(|p| p.value.len()).sum()
    }

    fn p(&self, i: usize) -> &Tensor<T> {
        &self.params[i].value
    }

    fn uses_batch_stats(&self, mode: Mode) -> bool {
        mode == Mode::Train && self.trainable
    }

    /// Runs the layer on batched inputs. Batchnorm in a frozen node always uses its
    /// moving statistics, so frozen state never changes.
    pub fn forward(
        &self,
        xs: &[&Tensor<T>],
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeForward<T>> {
        let done = |output: Tensor<T>| NodeForward {
            output,
            cache: NodeCache::None,
            new_state: None,
        };
        let x = || {
            xs.first()
                .copied()
                .ok_or_else(|| Error::shape("missing input"))
        };
        Ok(match &self.layer {
            Layer::Input { .. } => done(x()?.clone()),
            Layer::Conv2d {
                stride, padding, ..
            } => done(conv2d(x()?, self.p(0), self.p(1), *stride, *padding)?),
            Layer::SeparableConv2d {
                stride, padding, ..
            } => {
                let d = depthwise_conv2d(x()?, self.p(0), self.p(1), *stride, *padding)?;
                let out = conv2d(&d, self.p(2), self.p(3), 1, Padding::Valid)?;
                NodeForward {
                    output: out,
                    cache: NodeCache::Depthwise(d),
                    new_state: None,
                }
            }
            Layer::Pool2d {
                kind,
                window,
                stride,
                padding,
            } => {
                let p = pool2d(x()?, *kind, *window, *stride, *padding)?;
                NodeForward {
                    output: p.out,
                    cache: NodeCache::Argmax(p.argmax),
                    new_state: None,
                }
            }
            Layer::GlobalPool { kind } => {
                let p = global_pool(x()?, *kind)?;
                NodeForward {
                    output: p.out,
                    cache: NodeCache::Argmax(p.argmax),
                    new_state: None,
                }
            }
            Layer::Dense { .. } => done(dense(x()?, self.p(0), self.p(1))?),
            Layer::Activation { kind } => done(activation(x()?, *kind)),
            Layer::BatchNorm { momentum, eps } => {
                let train = self.uses_batch_stats(mode);
                let (out, cache) = batchnorm(
                    x()?,
                    self.p(0),
                    self.p(1),
                    &self.state[0].value,
                    &self.state[1].value,
                    *eps,
                    train,
                )?;
                let new_state = cache.batch_stats.as_ref().map(|(mean, var)| {
                    vec![
                        norm::update_moving(&self.state[0].value, mean, *momentum),
                        norm::update_moving(&self.state[1].value, var, *momentum),
                    ]
                });
                NodeForward {
                    output: out,
                    cache: NodeCache::BatchNorm(cache),
                    new_state,
                }
            }
            Layer::Dropout { rate } => {
                let x = x()?;
                if mode == Mode::Infer || *rate == 0.0 {
                    done(x.clone())
                } else {
                    let mask = dropout_mask(x.len(), *rate, rng)?;
                    NodeForward {
                        output: norm::apply_mask(x, &mask),
                        cache: NodeCache::Mask(mask),
                        new_state: None,
                    }
                }
            }
            Layer::Flatten => {
                let x = x()?;
                let b = x.shape()[0];
                done(x.reshape(&[b, x.len() / b])?)
            }
            Layer::ResidualAdd => done(residual_add(xs[0], xs[1])?),
            Layer::ChannelScale => done(channel_scale(xs[0], xs[1])?),
            Layer::Concat => done(concat_channels(xs)?),
        })
    }

    /// Exact backward pass. `need_inputs[i]` selects which input gradients to build.
    pub fn backward(
        &self,
        xs: &[&Tensor<T>],
        output: &Tensor<T>,
        cache: &NodeCache<T>,
        grad_out: &Tensor<T>,
        need_inputs: &[bool],
    ) -> Result<NodeGrads<T>> {
        if grad_out.shape() != output.shape() {
            return Err(Error::shape(format!(
                "{}: gradient {:?} does not match output {:?}",
                self.name,
                grad_out.shape(),
                output.shape()
            )));
        }
        let need = |i: usize| need_inputs.get(i).copied().unwrap_or(false);
        let keep_params = |p: Vec<Tensor<T>>| if self.trainable { p } else { Vec::new() };
        let single = |g: Tensor<T>| NodeGrads {
            inputs: vec![need(0).then_some(g)],
            params: Vec::new(),
        };
        let cache_mismatch = || Error::shape(format!("{}: tape does not match node", self.name));
        Ok(match &self.layer {
            Layer::Input { .. } => NodeGrads {
                inputs: Vec::new(),
                params: Vec::new(),
            },
            Layer::Conv2d {
                stride, padding, ..
            } => {
                let g = conv2d_backward(
                    xs[0],
                    self.p(0),
                    self.p(1),
                    *stride,
                    *padding,
                    grad_out,
                    need(0),
                )?;
                NodeGrads {
                    inputs: vec![need(0).then_some(g.x)],
                    params: keep_params(vec![g.kernel, g.bias]),
                }
            }
            Layer::SeparableConv2d {
                stride, padding, ..
            } => {
                let NodeCache::Depthwise(d) = cache else {
                    return Err(cache_mismatch());
                };
                let pw =
                    conv2d_backward(d, self.p(2), self.p(3), 1, Padding::Valid, grad_out, true)?;
                let dw = depthwise_conv2d_backward(
                    xs[0],
                    self.p(0),
                    self.p(1),
                    *stride,
                    *padding,
                    &pw.x,
                    need(0),
                )?;
                NodeGrads {
                    inputs: vec![need(0).then_some(dw.x)],
                    params: keep_params(vec![dw.kernel, dw.bias, pw.kernel, pw.bias]),
                }
            }
            Layer::Pool2d {
                kind,
                window,
                stride,
                padding,
            } => {
                let NodeCache::Argmax(idx) = cache else {
                    return Err(cache_mismatch());
                };
                single(pool2d_backward(
                    xs[0], *kind, *window, *stride, *padding, idx, grad_out,
                )?)
            }
            Layer::GlobalPool { kind } => {
                let NodeCache::Argmax(idx) = cache else {
                    return Err(cache_mismatch());
                };
                single(global_pool_backward(xs[0], *kind, idx, grad_out)?)
            }
            Layer::Dense { .. } => {
                let (gx, gk, gb) = dense_backward(xs[0], self.p(0), self.p(1), grad_out)?;
                NodeGrads {
                    inputs: vec![need(0).then_some(gx)],
                    params: keep_params(vec![gk, gb]),
                }
            }
            Layer::Activation { kind } => single(activation_backward(output, *kind, grad_out)?),
            Layer::BatchNorm { .. } => {
                let NodeCache::BatchNorm(c) = cache else {
                    return Err(cache_mismatch());
                };
                let (gx, gg, gb) = batchnorm_backward(self.p(0), c, grad_out)?;
                NodeGrads {
                    inputs: vec![need(0).then_some(gx)],
                    params: keep_params(vec![gg, gb]),
                }
            }
            Layer::Dropout { .. } => match cache {
                NodeCache::Mask(mask) => single(norm::apply_mask(grad_out, mask)),
                _ => single(grad_out.clone()),
            },
            Layer::Flatten => single(grad_out.reshape(xs[0].shape())?),
            Layer::ResidualAdd => NodeGrads {
                inputs: vec![
                    need(0).then(|| grad_out.clone()),
                    need(1).then(|| grad_out.clone()),
                ],
                params: Vec::new(),
            },
            Layer::ChannelScale => {
                let (gt, gg) = channel_scale_backward(xs[0], xs[1], grad_out)?;
                NodeGrads {
                    inputs: vec![need(0).then_some(gt), need(1).then_some(gg)],
                    params: Vec::new(),
                }
            }
            Layer::Concat => {
                let widths: Vec<usize> = xs
                    .iter()
                    .map(|x| *x.shape().last().expect("rank >= 1"))
                    .collect();
                let parts = split_channels(grad_out, &widths)?;
                NodeGrads {
                    inputs: parts
                        .into_iter()
                        .enumerate()
                        .map(|(i, p)| need(i).then_some(p))
                        .collect(),
                    params: Vec::new(),
                }
            }
        })
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pad = |p: &Padding| match p {
            Padding::Valid => "valid",
            Padding::Same => "same",
        };
        match self {
            Layer::Conv2d {
                filters,
                kernel,
                stride,
                padding,
            }
            | Layer::SeparableConv2d {
                filters,
                kernel,
                stride,
                padding,
            } => {
                write!(
                    f,
                    "{} {filters}@{kernel}x{kernel}/{stride} {}",
                    self.kind_name(),
                    pad(padding)
                )
            }
            Layer::Pool2d {
                window,
                stride,
                padding,
                ..
            } => {
                write!(
                    f,
                    "{} {window}x{window}/{stride} {}",
                    self.kind_name(),
                    pad(padding)
                )
            }
            Layer::Dense { units } => write!(f, "dense {units}"),
            Layer::Dropout { rate } => write!(f, "dropout {rate}"),
            other => f.write_str(other.kind_name()),
        }
    }
}
