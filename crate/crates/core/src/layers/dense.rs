//! Affine layer and pointwise activations.

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Real, Tensor};

use super::ActivationKind;

fn check_dense<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    let (b, n) = match *x.shape() {
        [b, n] => (b, n),
        _ => {
            return Err(Error::shape(format!(
                "dense expects [batch, features], got {:?}",
                x.shape()
            )))
        }
    };
    match *kernel.shape() {
        [kn, u] if kn == n && bias.shape() == [u] => Ok((b, n, u)),
        _ => Err(Error::shape(format!(
            "dense weights {:?}/{:?} do not fit input width {n}",
            kernel.shape(),
            bias.shape()
        ))),
    }
}

/// `x . W + b`
pub fn dense<T: Real>(x: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, n, u) = check_dense(x, kernel, bias)?;
    let mut out = Vec::with_capacity(b * u);
    for _ in 0..b {
        out.extend_from_slice(bias.data());
    }
    gemm_nn(x.data(), kernel.data(), &mut out, b, n, u);
    Ok(Tensor::from_parts(vec![b, u], out))
}

/// Returns `(grad_x, grad_kernel, grad_bias)`.
pub fn dense_backward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, n, u) = check_dense(x, kernel, bias)?;
    if grad_out.shape() != [b, u] {
        return Err(Error::shape(format!(
            "dense gradient {:?} should be [{b}, {u}]",
            grad_out.shape()
        )));
    }
    let mut gx = vec![T::zero(); b * n];
    gemm_nt(grad_out.data(), kernel.data(), &mut gx, b, u, n);
    let mut gk = vec![T::zero(); n * u];
    gemm_tn(x.data(), grad_out.data(), &mut gk, b, n, u);
    let mut gb = vec![T::zero(); u];
    for row in grad_out.data().chunks(u) {
        for (g, &v) in gb.iter_mut().zip(row) {
            *g += v;
        }
    }
    Ok((
        Tensor::from_parts(vec![b, n], gx),
        Tensor::from_parts(vec![n, u], gk),
        Tensor::from_parts(vec![u], gb),
    ))
}

pub fn sigmoid<T: Real>(v: T) -> T {
    let v = v.max(-T::EXP_CLAMP).min(T::EXP_CLAMP);
    T::one() / (T::one() + (-v).exp())
}

/// Softmax over the trailing axis in log-sum-exp form.
pub fn softmax<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let width = *x.shape().last().expect("non-empty shape");
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(width) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        for v in row.iter_mut() {
            *v = (*v - m - lse).exp();
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub fn activation<T: Real>(x: &Tensor<T>, kind: ActivationKind) -> Tensor<T> {
    match kind {
        ActivationKind::Relu => x.map(|v| v.max(T::zero())),
        ActivationKind::Sigmoid => x.map(sigmoid),
        ActivationKind::Softmax => softmax(x),
    }
}

/// Jacobian-vector product of an activation, expressed through its output `y`.
pub fn activation_backward<T: Real>(
    y: &Tensor<T>,
    kind: ActivationKind,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if y.shape() != grad_out.shape() {
        return Err(Error::shape(format!(
            "activation gradient {:?} does not match output {:?}",
            grad_out.shape(),
            y.shape()
        )));
    }
    let yd = y.data();
    let gd = grad_out.data();
    let data = match kind {
        ActivationKind::Relu => yd
            .iter()
            .zip(gd)
            .map(|(&o, &g)| if o > T::zero() { g } else { T::zero() })
            .collect(),
        ActivationKind::Sigmoid => yd
            .iter()
            .zip(gd)
            .map(|(&o, &g)| g * o * (T::one() - o))
            .collect(),
        ActivationKind::Softmax => {
            let width = *y.shape().last().expect("non-empty shape");
            let mut out = Vec::with_capacity(yd.len());
            for (p, g) in yd.chunks(width).zip(gd.chunks(width)) {
                let dot: T = p.iter().zip(g).map(|(&a, &b)| a * b).sum();
                out.extend(p.iter().zip(g).map(|(&pi, &gi)| pi * (gi - dot)));
            }
            out
        }
    };
    Ok(Tensor::from_parts(y.shape().to_vec(), data))
}
