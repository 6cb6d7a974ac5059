//! Ops that combine several activations: residual sum, channel gating, concatenation.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub fn residual_add<T: Real>(trunk: &Tensor<T>, branch: &Tensor<T>) -> Result<Tensor<T>> {
    if trunk.shape() != branch.shape() {
        return Err(Error::shape(format!(
            "residual add needs equal shapes, got {:?} and {:?}",
            trunk.shape(),
            branch.shape()
        )));
    }
    trunk.add(branch)
}

fn gate_dims<T: Real>(trunk: &Tensor<T>, gate: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match (trunk.shape(), gate.shape()) {
        (&[b, h, w, c], &[gb, gc]) if gb == b && gc == c => Ok((b, h * w, c)),
        _ => Err(Error::shape(format!(
            "channel scale needs trunk [B,H,W,C] and gate [B,C], got {:?} and {:?}",
            trunk.shape(),
            gate.shape()
        ))),
    }
}

/// Multiplies every spatial position of channel `c` in sample `b` by `gate[b, c]`.
pub fn channel_scale<T: Real>(trunk: &Tensor<T>, gate: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, spatial, c) = gate_dims(trunk, gate)?;
    let mut out = trunk.data().to_vec();
    for bi in 0..b {
        let g = &gate.data()[bi * c..(bi + 1) * c];
        for row in out[bi * spatial * c..(bi + 1) * spatial * c].chunks_mut(c) {
            for (v, &s) in row.iter_mut().zip(g) {
                *v *= s;
            }
        }
    }
    Ok(Tensor::from_parts(trunk.shape().to_vec(), out))
}

/// Returns `(grad_trunk, grad_gate)`.
pub fn channel_scale_backward<T: Real>(
    trunk: &Tensor<T>,
    gate: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (b, spatial, c) = gate_dims(trunk, gate)?;
    if grad_out.shape() != trunk.shape() {
        return Err(Error::shape("channel scale gradient does not match trunk"));
    }
    let gt = channel_scale(grad_out, gate)?;
    let mut gg = vec![T::zero(); b * c];
    let td = trunk.data();
    let gd = grad_out.data();
    for bi in 0..b {
        let acc = &mut gg[bi * c..(bi + 1) * c];
        let range = bi * spatial * c..(bi + 1) * spatial * c;
        for (t_row, g_row) in td[range.clone()].chunks(c).zip(gd[range].chunks(c)) {
            for ((a, &t), &g) in acc.iter_mut().zip(t_row).zip(g_row) {
                *a += t * g;
            }
        }
    }
    Ok((gt, Tensor::from_parts(vec![b, c], gg)))
}

/// Concatenates along the trailing (channel) axis in argument order.
pub fn concat_channels<T: Real>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::shape("concat needs at least one input"))?;
    let lead = &first.shape()[..first.rank() - 1];
    for x in xs {
        if x.rank() != first.rank() || &x.shape()[..x.rank() - 1] != lead {
            return Err(Error::shape(format!(
                "concat inputs differ outside the channel axis: {:?} vs {:?}",
                first.shape(),
                x.shape()
            )));
        }
    }
    let widths: Vec<usize> = xs
        .iter()
        .map(|x| *x.shape().last().expect("rank >= 1"))
        .collect();
    let total: usize = widths.iter().sum();
    let rows = first.len() / widths[0];
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (x, &w) in xs.iter().zip(&widths) {
            out.extend_from_slice(&x.data()[r * w..(r + 1) * w]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Ok(Tensor::from_parts(shape, out))
}

/// Splits a channel-concatenated tensor back into pieces of the given widths.
pub fn split_channels<T: Real>(x: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    let total = *x.shape().last().expect("rank >= 1");
    if widths.iter().sum::<usize>() != total || widths.contains(&0) {
        return Err(Error::shape(format!(
            "split widths {widths:?} do not partition {total} channels"
        )));
    }
    let rows = x.len() / total;
    let lead = &x.shape()[..x.rank() - 1];
    let mut parts: Vec<Vec<T>> = widths
        .iter()
        .map(|&w| Vec::with_capacity(rows * w))
        .collect();
    for row in x.data().chunks(total) {
        let mut off = 0;
        for (part, &w) in parts.iter_mut().zip(widths) {
            part.extend_from_slice(&row[off..off + w]);
            off += w;
        }
    }
    Ok(parts
        .into_iter()
        .zip(widths)
        .map(|(data, &w)| {
            let mut shape = lead.to_vec();
            shape.push(w);
            Tensor::from_parts(shape, data)
        })
        .collect())
}
