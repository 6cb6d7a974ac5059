//! Windowed and global pooling.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

use super::conv::Window;
use super::{Padding, PoolKind};

fn rank4(x: &Tensor<impl Real>) -> Result<[usize; 4]> {
    match *x.shape() {
        [b, h, w, c] => Ok([b, h, w, c]),
        _ => Err(Error::shape(format!(
            "pooling expects [batch, height, width, channels], got {:?}",
            x.shape()
        ))),
    }
}

/// Forward result of a pooling op. `argmax` holds, for max pooling, the flat input
/// index each output element was taken from.
pub struct Pooled<T: Real> {
    pub out: Tensor<T>,
    pub argmax: Vec<usize>,
}

/// Max or average pooling with a square window. Padded cells never contribute;
/// average pooling divides by the number of in-bounds cells. Max ties go to the
/// first cell in row-major window order.
pub fn pool2d<T: Real>(
    x: &Tensor<T>,
    kind: PoolKind,
    window: usize,
    stride: usize,
    padding: Padding,
) -> Result<Pooled<T>> {
    let [b, h, w, c] = rank4(x)?;
    let win = Window::new(h, w, window, stride, padding)
        .map_err(|_| Error::shape(format!("pool window {window} larger than input {h}x{w}")))?;
    let xd = x.data();
    let n_out = b * win.out_h * win.out_w * c;
    let mut out = vec![T::zero(); n_out];
    let mut argmax = if kind == PoolKind::Max {
        vec![0; n_out]
    } else {
        Vec::new()
    };
    for bi in 0..b {
        for oy in 0..win.out_h {
            for ox in 0..win.out_w {
                let o = ((bi * win.out_h + oy) * win.out_w + ox) * c;
                for ch in 0..c {
                    let mut best = T::neg_infinity();
                    let mut best_idx = usize::MAX;
                    let mut sum = 0.0f64;
                    let mut count = 0usize;
                    for ky in 0..window {
                        let Some(iy) = win.src_y(oy, ky) else {
                            continue;
                        };
                        for kx in 0..window {
                            let Some(ix) = win.src_x(ox, kx) else {
                                continue;
                            };
                            let idx = ((bi * h + iy) * w + ix) * c + ch;
                            let v = xd[idx];
                            if best_idx == usize::MAX || v > best {
                                best = v;
                                best_idx = idx;
                            }
                            sum += v.as_f64();
                            count += 1;
                        }
                    }
                    match kind {
                        PoolKind::Max => {
                            out[o + ch] = best;
                            argmax[o + ch] = best_idx;
                        }
                        PoolKind::Avg => out[o + ch] = T::from_f64(sum / count as f64),
                    }
                }
            }
        }
    }
    Ok(Pooled {
        out: Tensor::from_parts(vec![b, win.out_h, win.out_w, c], out),
        argmax,
    })
}

pub fn pool2d_backward<T: Real>(
    x: &Tensor<T>,
    kind: PoolKind,
    window: usize,
    stride: usize,
    padding: Padding,
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [b, h, w, c] = rank4(x)?;
    let win = Window::new(h, w, window, stride, padding)?;
    if grad_out.shape() != [b, win.out_h, win.out_w, c] {
        return Err(Error::shape(format!(
            "pool gradient {:?} does not match forward output",
            grad_out.shape()
        )));
    }
    let mut gx = vec![T::zero(); x.len()];
    let gd = grad_out.data();
    match kind {
        PoolKind::Max => {
            for (&src, &g) in argmax.iter().zip(gd) {
                gx[src] += g;
            }
        }
        PoolKind::Avg => {
            for bi in 0..b {
                for oy in 0..win.out_h {
                    for ox in 0..win.out_w {
                        let o = ((bi * win.out_h + oy) * win.out_w + ox) * c;
                        let cells: Vec<usize> = (0..window)
                            .filter_map(|ky| win.src_y(oy, ky))
                            .flat_map(|iy| {
                                (0..window)
                                    .filter_map(move |kx| win.src_x(ox, kx))
                                    .map(move |ix| (bi * h + iy) * w + ix)
                            })
                            .collect();
                        let share = T::one() / T::from_f64(cells.len() as f64);
                        for ch in 0..c {
                            let g = gd[o + ch] * share;
                            for &cell in &cells {
                                gx[cell * c + ch] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), gx))
}

/// Reduces every spatial position of each channel: `[B,H,W,C] -> [B,C]`.
pub fn global_pool<T: Real>(x: &Tensor<T>, kind: PoolKind) -> Result<Pooled<T>> {
    let [b, h, w, c] = rank4(x)?;
    let xd = x.data();
    let spatial = h * w;
    let mut out = vec![T::zero(); b * c];
    let mut argmax = if kind == PoolKind::Max {
        vec![0; b * c]
    } else {
        Vec::new()
    };
    for bi in 0..b {
        for ch in 0..c {
            let base = bi * spatial * c + ch;
            match kind {
                PoolKind::Avg => {
                    let s: f64 = (0..spatial).map(|p| xd[base + p * c].as_f64()).sum();
                    out[bi * c + ch] = T::from_f64(s / spatial as f64);
                }
                PoolKind::Max => {
                    let mut best_idx = base;
                    for p in 1..spatial {
                        if xd[base + p * c] > xd[best_idx] {
                            best_idx = base + p * c;
                        }
                    }
                    out[bi * c + ch] = xd[best_idx];
                    argmax[bi * c + ch] = best_idx;
                }
            }
        }
    }
    Ok(Pooled {
        out: Tensor::from_parts(vec![b, c], out),
        argmax,
    })
}

pub fn global_pool_backward<T: Real>(
    x: &Tensor<T>,
    kind: PoolKind,
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [b, h, w, c] = rank4(x)?;
    if grad_out.shape() != [b, c] {
        return Err(Error::shape(format!(
            "global pool gradient {:?} should be [{b}, {c}]",
            grad_out.shape()
        )));
    }
    let spatial = h * w;
    let gd = grad_out.data();
    let mut gx = vec![T::zero(); x.len()];
    match kind {
        PoolKind::Max => {
            for (&src, &g) in argmax.iter().zip(gd) {
                gx[src] += g;
            }
        }
        PoolKind::Avg => {
            let share = T::one() / T::from_f64(spatial as f64);
            for bi in 0..b {
                for p in 0..spatial {
                    let row = &mut gx[(bi * spatial + p) * c..(bi * spatial + p + 1) * c];
                    for (g, &v) in row.iter_mut().zip(&gd[bi * c..(bi + 1) * c]) {
                        *g = v * share;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), gx))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(&[1, 2, 2, 1], v).unwrap()
    }

    #[test]
    fn max_and_avg_of_two_by_two() {
        let x = square(&[1.0, 2.0, 3.0, 4.0]);
        let m = pool2d(&x, PoolKind::Max, 2, 2, Padding::Valid).unwrap();
        assert_eq!(m.out.data(), &[4.0]);
        let a = pool2d(&x, PoolKind::Avg, 2, 2, Padding::Valid).unwrap();
        assert_eq!(a.out.data(), &[2.5]);
    }

    #[test]
    fn three_by_three_stride_two_shape() {
        let x = Tensor::<f64>::zeros(&[1, 14, 14, 3]).unwrap();
        let p = pool2d(&x, PoolKind::Max, 3, 2, Padding::Valid).unwrap();
        assert_eq!(p.out.shape(), &[1, 6, 6, 3]);
    }

    #[test]
    fn window_too_large() {
        let x = square(&[1.0, 2.0, 3.0, 4.0]);
        assert!(matches!(
            pool2d(&x, PoolKind::Max, 3, 1, Padding::Valid),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn max_tie_routes_to_first_cell() {
        let x = square(&[5.0, 5.0, 5.0, 5.0]);
        let p = pool2d(&x, PoolKind::Max, 2, 2, Padding::Valid).unwrap();
        let g = pool2d_backward(
            &x,
            PoolKind::Max,
            2,
            2,
            Padding::Valid,
            &p.argmax,
            &Tensor::from_f64_slice(&[1, 1, 1, 1], &[1.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
        let gp = global_pool(&x, PoolKind::Max).unwrap();
        assert_eq!(gp.argmax, vec![0]);
    }

    #[test]
    fn avg_backward_spreads_uniformly() {
        let x = square(&[1.0, 2.0, 3.0, 4.0]);
        let g = Tensor::from_f64_slice(&[1, 1, 1, 1], &[1.0]).unwrap();
        let gx = pool2d_backward(&x, PoolKind::Avg, 2, 2, Padding::Valid, &[], &g).unwrap();
        assert_eq!(gx.data(), &[0.25; 4]);
    }

    #[test]
    fn global_pool_examples() {
        let c = Tensor::<f64>::full(&[1, 3, 3, 1], 2.5).unwrap();
        assert_eq!(global_pool(&c, PoolKind::Avg).unwrap().out.data(), &[2.5]);
        let x = square(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(global_pool(&x, PoolKind::Avg).unwrap().out.data(), &[2.5]);
        assert_eq!(global_pool(&x, PoolKind::Max).unwrap().out.data(), &[4.0]);
        let big = Tensor::<f32>::zeros(&[32, 16, 16, 128]).unwrap();
        assert_eq!(
            global_pool(&big, PoolKind::Avg).unwrap().out.shape(),
            &[32, 128]
        );
        let flat = Tensor::<f64>::zeros(&[2, 3]).unwrap();
        assert!(matches!(
            global_pool(&flat, PoolKind::Avg),
            Err(Error::Shape(_))
        ));
    }
}
