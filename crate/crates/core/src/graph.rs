//! Layer graphs with reverse-mode differentiation.
//!
//! A [`Model`] is an ordered list of [`LayerNode`]s where each node reads only
//! from earlier nodes, so insertion order is a topological order. Node 0 is the
//! input. Forward passes record a [`Tape`]; `backward` consumes it.

use std::collections::HashSet;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{Layer, LayerNode, Mode, NodeCache, NodeId};
use crate::tensor::{Real, Tensor};

/// Forward intermediates of one pass. Consumed by [`Model::backward`].
pub struct Tape<T: Real> {
    outputs: Vec<Tensor<T>>,
    caches: Vec<NodeCache<T>>,
}

impl<T: Real> Tape<T> {
    pub fn output(&self, id: NodeId) -> &Tensor<T> {
        &self.outputs[id]
    }
}

/// Parameter gradients, aligned with `Model::nodes()[i].params`. Entries are
/// empty for nodes that are frozen or received no gradient.
#[derive(Debug, Clone)]
pub struct Gradients<T: Real> {
    pub per_node: Vec<Vec<Tensor<T>>>,
}

#[derive(Debug, Clone)]
pub struct Model<T: Real = f32> {
    pub name: String,
    /// Per-sample `[H, W, C]`.
    pub input_shape: Vec<usize>,
    pub scale: f64,
    pub head_only_trainable: bool,
    /// Output activation as described for the architecture, kept for reporting.
    /// Training always uses the softmax head.
    pub stated_output_activation: String,
    nodes: Vec<LayerNode<T>>,
}

impl<T: Real> Model<T> {
    pub fn new(
        name: impl Into<String>,
        input_shape: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        crate::tensor::check_shape(input_shape)?;
        let input = LayerNode::new(
            "input",
            Layer::Input {
                shape: input_shape.to_vec(),
            },
            Vec::new(),
            &[],
            rng,
        )?;
        Ok(Model {
            name: name.into(),
            input_shape: input_shape.to_vec(),
            scale: 1.0,
            head_only_trainable: false,
            stated_output_activation: "softmax".to_string(),
            nodes: vec![input],
        })
    }

    /// Appends a node reading from `inputs` and returns its id.
    pub fn add(
        &mut self,
        name: impl Into<String>,
        layer: Layer,
        inputs: &[NodeId],
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        let name = name.into();
        if self.nodes.iter().any(|n| n.name == name) {
            return Err(Error::config(format!("duplicate node name {name}")));
        }
        if let Some(&bad) = inputs.iter().find(|&&i| i >= self.nodes.len()) {
            return Err(Error::config(format!(
                "{name}: input {bad} does not exist yet"
            )));
        }
        let shapes: Vec<Vec<usize>> = inputs
            .iter()
            .map(|&i| self.nodes[i].output_shape.clone())
            .collect();
        let node = LayerNode::new(name.clone(), layer, inputs.to_vec(), &shapes, rng).map_err(
            |e| match e {
                Error::Shape(m) => Error::Shape(format!("{name}: {m}")),
                other => other,
            },
        )?;
        self.nodes.push(node);
        Ok(self.nodes.len() - 1)
    }

    pub fn nodes(&self) -> &[LayerNode<T>] {
        &self.nodes
    }

    pub fn nodes_mut(&mut self) -> &mut [LayerNode<T>] {
        &mut self.nodes
    }

    pub fn output_id(&self) -> NodeId {
        self.nodes.len() - 1
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.nodes[self.output_id()].output_shape
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name)
    }

    /// Marks nodes `0..end` frozen.
    pub fn freeze_before(&mut self, end: NodeId) {
        for n in &mut self.nodes[..end] {
            n.trainable = false;
        }
    }

    /// Node whose gradient training seeds: the softmax input when the graph ends
    /// in softmax (fused loss), otherwise the output.
    pub fn logits_id(&self) -> NodeId {
        let out = self.output_id();
        match self.nodes[out].layer {
            Layer::Activation {
                kind: crate::layers::ActivationKind::Softmax,
            } => self.nodes[out].inputs[0],
            _ => out,
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.rank() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::shape(format!(
                "{} expects [batch, {:?}], got {:?}",
                self.name,
                self.input_shape,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Forward pass recording a tape. Training mode also updates batchnorm
    /// moving statistics of trainable nodes.
    pub fn forward(
        &mut self,
        x: &Tensor<T>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor<T>, Tape<T>)> {
        self.check_input(x)?;
        let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        let mut caches = Vec::with_capacity(self.nodes.len());
        let mut updates = Vec::new();
        for (id, node) in self.nodes.iter().enumerate() {
            let fwd = if id == 0 {
                node.forward(&[x], mode, rng)?
            } else {
                let xs: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| &outputs[i]).collect();
                node.forward(&xs, mode, rng)?
            };
            if let Some(s) = fwd.new_state {
                updates.push((id, s));
            }
            outputs.push(fwd.output);
            caches.push(fwd.cache);
        }
        for (id, state) in updates {
            for (slot, value) in self.nodes[id].state.iter_mut().zip(state) {
                slot.value = value;
            }
        }
        let out = outputs[self.output_id()].clone();
        Ok((out, Tape { outputs, caches }))
    }

    /// Inference-mode forward pass. Never mutates the model; intermediate
    /// activations are dropped as soon as their last consumer has run.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut last_use = vec![0; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            for &i in &node.inputs {
                last_use[i] = id;
            }
        }
        let mut outputs: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        // dropout is the identity in inference mode, so this stream is never drawn from
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        for (id, node) in self.nodes.iter().enumerate() {
            let out = if id == 0 {
                node.forward(&[x], Mode::Infer, &mut rng)?.output
            } else {
                let xs: Vec<&Tensor<T>> = node
                    .inputs
                    .iter()
                    .map(|&i| outputs[i].as_ref().expect("input still live"))
                    .collect();
                node.forward(&xs, Mode::Infer, &mut rng)?.output
            };
            outputs[id] = Some(out);
            for &i in &node.inputs {
                if last_use[i] == id {
                    outputs[i] = None;
                }
            }
        }
        Ok(outputs[self.output_id()].take().expect("output computed"))
    }

    /// Nodes whose output gradient matters: they own trainable parameters or
    /// feed (transitively) from one that does.
    fn requires_grad(&self) -> Vec<bool> {
        let mut req = vec![false; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            req[id] =
                (node.trainable && !node.params.is_empty()) || node.inputs.iter().any(|&i| req[i]);
        }
        req
    }

    /// Backpropagates `grad` (the gradient of the loss with respect to node
    /// `from`'s output) and returns parameter gradients.
    pub fn backward(&self, tape: Tape<T>, grad: Tensor<T>, from: NodeId) -> Result<Gradients<T>> {
        let Tape { outputs, caches } = tape;
        if outputs.len() != self.nodes.len() {
            return Err(Error::shape("tape was recorded on a different graph"));
        }
        if grad.shape() != outputs[from].shape() {
            return Err(Error::shape(format!(
                "seed gradient {:?} does not match node output {:?}",
                grad.shape(),
                outputs[from].shape()
            )));
        }
        let req = self.requires_grad();
        let mut pending: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        pending[from] = Some(grad);
        let mut per_node = vec![Vec::new(); self.nodes.len()];
        for id in (1..=from).rev() {
            let Some(g) = pending[id].take() else {
                continue;
            };
            if !req[id] {
                continue;
            }
            let node = &self.nodes[id];
            let xs: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| &outputs[i]).collect();
            let need: Vec<bool> = node.inputs.iter().map(|&i| i != 0 && req[i]).collect();
            let grads = node.backward(&xs, &outputs[id], &caches[id], &g, &need)?;
            per_node[id] = grads.params;
            for (&src, gi) in node.inputs.iter().zip(grads.inputs) {
                let Some(gi) = gi else { continue };
                pending[src] = Some(match pending[src].take() {
                    Some(acc) => acc.add(&gi)?,
                    None => gi,
                });
            }
        }
        Ok(Gradients { per_node })
    }

    /// `(full name, tensor, trainable)` for every parameter, in graph order.
    pub fn named_params(&self) -> impl Iterator<Item = (String, &Tensor<T>, bool)> {
        self.nodes.iter().flat_map(|n| {
            n.params
                .iter()
                .map(move |p| (format!("{}/{}", n.name, p.name), &p.value, n.trainable))
        })
    }

    /// `(full name, tensor)` for every state buffer, in graph order.
    pub fn named_state(&self) -> impl Iterator<Item = (String, &Tensor<T>)> {
        self.nodes.iter().flat_map(|n| {
            n.state
                .iter()
                .map(move |p| (format!("{}/{}", n.name, p.name), &p.value))
        })
    }

    /// Replaces a parameter or state tensor by full name. Shapes must agree.
    pub fn set_tensor(&mut self, full_name: &str, value: Tensor<T>) -> Result<()> {
        let (node_name, tensor_name) = full_name
            .split_once('/')
            .ok_or_else(|| Error::config(format!("malformed tensor name {full_name}")))?;
        let node = self
            .nodes
            .iter_mut()
            .find(|n| n.name == node_name)
            .ok_or_else(|| Error::config(format!("no node named {node_name}")))?;
        let slot = node
            .params
            .iter_mut()
            .chain(node.state.iter_mut())
            .find(|p| p.name == tensor_name)
            .ok_or_else(|| {
                Error::config(format!("node {node_name} has no tensor {tensor_name}"))
            })?;
        if slot.value.shape() != value.shape() {
            return Err(Error::shape(format!(
                "{full_name}: expected {:?}, got {:?}",
                slot.value.shape(),
                value.shape()
            )));
        }
        slot.value = value;
        Ok(())
    }

    /// Names of all parameter and state tensors.
    pub fn tensor_names(&self) -> HashSet<String> {
        self.named_params()
            .map(|(n, _, _)| n)
            .chain(self.named_state().map(|(n, _)| n))
            .collect()
    }
}
