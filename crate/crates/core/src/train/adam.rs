use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Model};
use crate::tensor::{Real, Tensor};

use super::TrainConfig;

/// First and second moment estimates keyed by full parameter name, plus the step count.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState<T: Real> {
    pub step: u64,
    pub moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new() -> Self {
        OptimizerState {
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

/// One Adam update of every trainable parameter that received a gradient.
/// Frozen nodes are never touched.
pub fn adam_step<T: Real>(
    model: &mut Model<T>,
    grads: &Gradients<T>,
    state: &mut OptimizerState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.per_node.len() != model.nodes().len() {
        return Err(Error::shape("gradients do not belong to this model"));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let bias1 = 1.0 - b1.powi(t);
    let bias2 = 1.0 - b2.powi(t);
    let lr = cfg.learning_rate;
    for (node, node_grads) in model.nodes_mut().iter_mut().zip(&grads.per_node) {
        if !node.trainable || node_grads.is_empty() {
            continue;
        }
        if node_grads.len() != node.params.len() {
            return Err(Error::shape(format!(
                "{}: gradient count mismatch",
                node.name
            )));
        }
        for (param, g) in node.params.iter_mut().zip(node_grads) {
            if param.value.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "{}/{}: gradient {:?} vs parameter {:?}",
                    node.name,
                    param.name,
                    g.shape(),
                    param.value.shape()
                )));
            }
            let key = format!("{}/{}", node.name, param.name);
            let (m, v) = state
                .moments
                .entry(key)
                .or_insert_with(|| (param.value.zeros_like(), param.value.zeros_like()));
            let theta = param.value.data_mut();
            for (((p, mi), vi), &gi) in theta
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                let gi = gi.as_f64();
                let m_new = b1 * mi.as_f64() + (1.0 - b1) * gi;
                let v_new = b2 * vi.as_f64() + (1.0 - b2) * gi * gi;
                *mi = T::from_f64(m_new);
                *vi = T::from_f64(v_new);
                let m_hat = m_new / bias1;
                let v_hat = v_new / bias2;
                let update = lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
                if update != 0.0 {
                    *p = T::from_f64(p.as_f64() - update);
                }
            }
        }
    }
    Ok(())
}
