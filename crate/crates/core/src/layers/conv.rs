//! Standard and depthwise-separable 2-D convolution (cross-correlation, no kernel flip).

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Real, Tensor};

use super::Padding;

/// Spatial geometry of a sliding-window op along both axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

/// Output extent and leading pad along one axis.
///
/// `Valid`: `floor((n - k) / s) + 1`, no padding. `Same`: `ceil(n / s)`, with any odd
/// padding remainder going to the bottom/right.
pub fn axis_extent(n: usize, k: usize, s: usize, padding: Padding) -> Result<(usize, usize)> {
    if k == 0 || s == 0 {
        return Err(Error::config("kernel and stride must be at least 1"));
    }
    match padding {
        Padding::Valid => {
            if k > n {
                return Err(Error::shape(format!(
                    "kernel {k} larger than input extent {n}"
                )));
            }
            Ok(((n - k) / s + 1, 0))
        }
        Padding::Same => {
            let out = n.div_ceil(s);
            let total = ((out - 1) * s + k).saturating_sub(n);
            Ok((out, total / 2))
        }
    }
}

impl Window {
    pub fn new(
        in_h: usize,
        in_w: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let (out_h, pad_top) = axis_extent(in_h, kernel, stride, padding)?;
        let (out_w, pad_left) = axis_extent(in_w, kernel, stride, padding)?;
        Ok(Window {
            in_h,
            in_w,
            out_h,
            out_w,
            kernel,
            stride,
            pad_top,
            pad_left,
        })
    }

    /// Input row for output row `oy` and kernel row `ky`, or `None` inside padding.
    #[inline]
    pub(crate) fn src_y(&self, oy: usize, ky: usize) -> Option<usize> {
        (oy * self.stride + ky)
            .checked_sub(self.pad_top)
            .filter(|&y| y < self.in_h)
    }

    #[inline]
    pub(crate) fn src_x(&self, ox: usize, kx: usize) -> Option<usize> {
        (ox * self.stride + kx)
            .checked_sub(self.pad_left)
            .filter(|&x| x < self.in_w)
    }
}

fn rank4(x: &Tensor<impl Real>, what: &str) -> Result<[usize; 4]> {
    match *x.shape() {
        [b, h, w, c] => Ok([b, h, w, c]),
        _ => Err(Error::shape(format!(
            "{what} expects [batch, height, width, channels], got {:?}",
            x.shape()
        ))),
    }
}

/// Unfolds input patches into rows `(b, oy, ox)` by columns `(ky, kx, c)`.
fn im2col<T: Real>(x: &[T], batch: usize, win: &Window, c: usize) -> Vec<T> {
    let k = win.kernel;
    let cols = k * k * c;
    let mut out = vec![T::zero(); batch * win.out_h * win.out_w * cols];
    let mut row = 0;
    for b in 0..batch {
        let img = &x[b * win.in_h * win.in_w * c..];
        for oy in 0..win.out_h {
            for ox in 0..win.out_w {
                let dst = &mut out[row * cols..(row + 1) * cols];
                for ky in 0..k {
                    let Some(iy) = win.src_y(oy, ky) else {
                        continue;
                    };
                    for kx in 0..k {
                        let Some(ix) = win.src_x(ox, kx) else {
                            continue;
                        };
                        let src = (iy * win.in_w + ix) * c;
                        let d = (ky * k + kx) * c;
                        dst[d..d + c].copy_from_slice(&img[src..src + c]);
                    }
                }
                row += 1;
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input grid.
fn col2im<T: Real>(cols: &[T], batch: usize, win: &Window, c: usize) -> Vec<T> {
    let k = win.kernel;
    let width = k * k * c;
    let mut out = vec![T::zero(); batch * win.in_h * win.in_w * c];
    let mut row = 0;
    for b in 0..batch {
        let img = &mut out[b * win.in_h * win.in_w * c..(b + 1) * win.in_h * win.in_w * c];
        for oy in 0..win.out_h {
            for ox in 0..win.out_w {
                let src = &cols[row * width..(row + 1) * width];
                for ky in 0..k {
                    let Some(iy) = win.src_y(oy, ky) else {
                        continue;
                    };
                    for kx in 0..k {
                        let Some(ix) = win.src_x(ox, kx) else {
                            continue;
                        };
                        let dst = (iy * win.in_w + ix) * c;
                        let s = (ky * k + kx) * c;
                        for (d, &v) in img[dst..dst + c].iter_mut().zip(&src[s..s + c]) {
                            *d += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    out
}

pub struct ConvGrads<T: Real> {
    pub x: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

fn conv_window<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<([usize; 4], usize, Window)> {
    let [b, h, w, c] = rank4(x, "conv2d")?;
    let (k, filters) = match *kernel.shape() {
        [k1, k2, cin, f] if k1 == k2 && cin == c => (k1, f),
        _ => {
            return Err(Error::shape(format!(
                "conv2d kernel {:?} does not fit input channels {c}",
                kernel.shape()
            )))
        }
    };
    if bias.shape() != [filters] {
        return Err(Error::shape(format!(
            "conv2d bias {:?} should be [{filters}]",
            bias.shape()
        )));
    }
    Ok((
        [b, h, w, c],
        filters,
        Window::new(h, w, k, stride, padding)?,
    ))
}

/// `y[b,oy,ox,f] = bias[f] + sum_{ky,kx,c} x[b, oy*s+ky-pt, ox*s+kx-pl, c] * kernel[ky,kx,c,f]`
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let ([b, _, _, c], filters, win) = conv_window(x, kernel, bias, stride, padding)?;
    let rows = b * win.out_h * win.out_w;
    let depth = win.kernel * win.kernel * c;
    let cols = im2col(x.data(), b, &win, c);
    let mut out = Vec::with_capacity(rows * filters);
    for _ in 0..rows {
        out.extend_from_slice(bias.data());
    }
    gemm_nn(&cols, kernel.data(), &mut out, rows, depth, filters);
    Ok(Tensor::from_parts(
        vec![b, win.out_h, win.out_w, filters],
        out,
    ))
}

/// Exact gradients of [`conv2d`] given the forward input and the output gradient.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: Padding,
    grad_out: &Tensor<T>,
    need_x: bool,
) -> Result<ConvGrads<T>> {
    let ([b, h, w, c], filters, win) = conv_window(x, kernel, bias, stride, padding)?;
    if grad_out.shape() != [b, win.out_h, win.out_w, filters] {
        return Err(Error::shape(format!(
            "conv2d gradient {:?} does not match forward output [{b}, {}, {}, {filters}]",
            grad_out.shape(),
            win.out_h,
            win.out_w
        )));
    }
    let rows = b * win.out_h * win.out_w;
    let depth = win.kernel * win.kernel * c;
    let cols = im2col(x.data(), b, &win, c);
    let mut gk = vec![T::zero(); depth * filters];
    gemm_tn(&cols, grad_out.data(), &mut gk, rows, depth, filters);
    let mut gb = vec![T::zero(); filters];
    for row in grad_out.data().chunks(filters) {
        for (g, &v) in gb.iter_mut().zip(row) {
            *g += v;
        }
    }
    let gx = if need_x {
        let mut gcols = vec![T::zero(); rows * depth];
        gemm_nt(
            grad_out.data(),
            kernel.data(),
            &mut gcols,
            rows,
            filters,
            depth,
        );
        Tensor::from_parts(vec![b, h, w, c], col2im(&gcols, b, &win, c))
    } else {
        x.zeros_like()
    };
    Ok(ConvGrads {
        x: gx,
        kernel: Tensor::from_parts(kernel.shape().to_vec(), gk),
        bias: Tensor::from_parts(vec![filters], gb),
    })
}

fn depthwise_window<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<([usize; 4], Window)> {
    let [b, h, w, c] = rank4(x, "depthwise conv")?;
    let k = match *kernel.shape() {
        [k1, k2, kc] if k1 == k2 && kc == c => k1,
        _ => {
            return Err(Error::shape(format!(
                "depthwise kernel {:?} should be [k, k, {c}]",
                kernel.shape()
            )))
        }
    };
    if bias.shape() != [c] {
        return Err(Error::shape(format!(
            "depthwise bias {:?} should be [{c}]",
            bias.shape()
        )));
    }
    Ok(([b, h, w, c], Window::new(h, w, k, stride, padding)?))
}

/// Per-channel spatial convolution: `kernel` is `[k, k, C]`, output keeps `C` channels.
pub fn depthwise_conv2d<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let ([b, h, w, c], win) = depthwise_window(x, kernel, bias, stride, padding)?;
    let k = win.kernel;
    let xd = x.data();
    let kd = kernel.data();
    let mut out = vec![T::zero(); b * win.out_h * win.out_w * c];
    for bi in 0..b {
        for oy in 0..win.out_h {
            for ox in 0..win.out_w {
                let o = ((bi * win.out_h + oy) * win.out_w + ox) * c;
                let dst = &mut out[o..o + c];
                dst.copy_from_slice(bias.data());
                for ky in 0..k {
                    let Some(iy) = win.src_y(oy, ky) else {
                        continue;
                    };
                    for kx in 0..k {
                        let Some(ix) = win.src_x(ox, kx) else {
                            continue;
                        };
                        let src = ((bi * h + iy) * w + ix) * c;
                        let kw = &kd[(ky * k + kx) * c..(ky * k + kx + 1) * c];
                        for ((d, &xv), &wv) in dst.iter_mut().zip(&xd[src..src + c]).zip(kw) {
                            *d += xv * wv;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, win.out_h, win.out_w, c], out))
}

pub fn depthwise_conv2d_backward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: Padding,
    grad_out: &Tensor<T>,
    need_x: bool,
) -> Result<ConvGrads<T>> {
    let ([b, h, w, c], win) = depthwise_window(x, kernel, bias, stride, padding)?;
    if grad_out.shape() != [b, win.out_h, win.out_w, c] {
        return Err(Error::shape(format!(
            "depthwise gradient {:?} does not match forward output [{b}, {}, {}, {c}]",
            grad_out.shape(),
            win.out_h,
            win.out_w
        )));
    }
    let k = win.kernel;
    let xd = x.data();
    let kd = kernel.data();
    let gd = grad_out.data();
    let mut gx = vec![T::zero(); if need_x { xd.len() } else { 0 }];
    let mut gk = vec![T::zero(); kd.len()];
    let mut gb = vec![T::zero(); c];
    for bi in 0..b {
        for oy in 0..win.out_h {
            for ox in 0..win.out_w {
                let o = ((bi * win.out_h + oy) * win.out_w + ox) * c;
                let g = &gd[o..o + c];
                for (acc, &v) in gb.iter_mut().zip(g) {
                    *acc += v;
                }
                for ky in 0..k {
                    let Some(iy) = win.src_y(oy, ky) else {
                        continue;
                    };
                    for kx in 0..k {
                        let Some(ix) = win.src_x(ox, kx) else {
                            continue;
                        };
                        let src = ((bi * h + iy) * w + ix) * c;
                        let kidx = (ky * k + kx) * c;
                        for ch in 0..c {
                            gk[kidx + ch] += g[ch] * xd[src + ch];
                        }
                        if need_x {
                            for ch in 0..c {
                                gx[src + ch] += g[ch] * kd[kidx + ch];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        x: if need_x {
            Tensor::from_parts(x.shape().to_vec(), gx)
        } else {
            x.zeros_like()
        },
        kernel: Tensor::from_parts(kernel.shape().to_vec(), gk),
        bias: Tensor::from_parts(vec![c], gb),
    })
}

/// Parameter count of a biased depthwise-separable conv: `k*k*C + C + C*F + F`.
pub fn separable_param_count(kernel: usize, channels: usize, filters: usize) -> usize {
    kernel * kernel * channels + channels + channels * filters + filters
}

/// Parameter count of a biased standard conv: `k*k*C*F + F`.
pub fn conv_param_count(kernel: usize, channels: usize, filters: usize) -> usize {
    kernel * kernel * channels * filters + filters
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(shape, v).unwrap()
    }

    /// Six nested loops straight from the definition.
    fn conv_oracle(
        x: &Tensor<f64>,
        k: &Tensor<f64>,
        bias: &Tensor<f64>,
        s: usize,
        p: Padding,
    ) -> Tensor<f64> {
        let [b, h, w, c] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let (kk, f) = (k.shape()[0], k.shape()[3]);
        let (oh, pt) = axis_extent(h, kk, s, p).unwrap();
        let (ow, pl) = axis_extent(w, kk, s, p).unwrap();
        let mut out = vec![0.0; b * oh * ow * f];
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    for fi in 0..f {
                        let mut acc = bias.data()[fi];
                        for ky in 0..kk {
                            for kx in 0..kk {
                                let iy = (oy * s + ky) as isize - pt as isize;
                                let ix = (ox * s + kx) as isize - pl as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                for ci in 0..c {
                                    let xv = x.data()
                                        [((bi * h + iy as usize) * w + ix as usize) * c + ci];
                                    let kv = k.data()[((ky * kk + kx) * c + ci) * f + fi];
                                    acc += xv * kv;
                                }
                            }
                        }
                        out[((bi * oh + oy) * ow + ox) * f + fi] = acc;
                    }
                }
            }
        }
        Tensor::from_vec(&[b, oh, ow, f], out).unwrap()
    }

    #[test]
    fn identity_kernel() {
        let x = t(&[1, 2, 2, 1], &[1.0, -2.0, 3.0, 4.5]);
        let y = conv2d(
            &x,
            &t(&[1, 1, 1, 1], &[1.0]),
            &t(&[1], &[0.0]),
            1,
            Padding::Valid,
        )
        .unwrap();
        assert_eq!(y, x);
        let g = conv2d_backward(
            &x,
            &t(&[1, 1, 1, 1], &[1.0]),
            &t(&[1], &[0.0]),
            1,
            Padding::Valid,
            &x,
            true,
        )
        .unwrap();
        assert_eq!(g.x, x);
    }

    #[test]
    fn sliding_window_sum() {
        let x = t(
            &[1, 3, 3, 1],
            &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        );
        let y = conv2d(
            &x,
            &t(&[2, 2, 1, 1], &[1.0; 4]),
            &t(&[1], &[0.0]),
            1,
            Padding::Valid,
        )
        .unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 1]);
        assert_eq!(y.data(), &[12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn alexnet_stem_shape() {
        let win = Window::new(128, 128, 11, 4, Padding::Valid).unwrap();
        assert_eq!((win.out_h, win.out_w), (30, 30));
    }

    #[test]
    fn kernel_larger_than_input() {
        let x = Tensor::<f64>::zeros(&[1, 2, 2, 1]).unwrap();
        let r = conv2d(
            &x,
            &Tensor::zeros(&[3, 3, 1, 1]).unwrap(),
            &Tensor::zeros(&[1]).unwrap(),
            1,
            Padding::Valid,
        );
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn zero_grad_gives_zero_gradients() {
        let x = t(
            &[1, 3, 3, 1],
            &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        );
        let k = t(&[2, 2, 1, 1], &[0.5, -1.0, 2.0, 1.0]);
        let b = t(&[1], &[0.3]);
        let g = conv2d_backward(
            &x,
            &k,
            &b,
            1,
            Padding::Valid,
            &Tensor::zeros(&[1, 2, 2, 1]).unwrap(),
            true,
        )
        .unwrap();
        assert!(g
            .x
            .data()
            .iter()
            .chain(g.kernel.data())
            .chain(g.bias.data())
            .all(|&v| v == 0.0));
    }

    #[test]
    fn output_extent_formula_exhaustive() {
        for n in 1..=16 {
            for k in 1..=16 {
                for s in 1..=16 {
                    match axis_extent(n, k, s, Padding::Valid) {
                        Ok((out, pad)) => {
                            assert_eq!(pad, 0);
                            assert_eq!(out, (n - k) / s + 1);
                        }
                        Err(_) => assert!(k > n),
                    }
                    let (out, before) = axis_extent(n, k, s, Padding::Same).unwrap();
                    assert_eq!(out, n.div_ceil(s));
                    let total = ((out - 1) * s + k).saturating_sub(n);
                    assert_eq!(before, total / 2);
                    // same-padding output also satisfies the padded valid formula
                    assert_eq!(out, (n + total - k) / s + 1);
                }
            }
        }
    }

    #[test]
    fn matches_nested_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for trial in 0..40 {
            let h = rng.gen_range(1..=5);
            let w = rng.gen_range(1..=5);
            let c = rng.gen_range(1..=3);
            let k = rng.gen_range(1..=3);
            let s = rng.gen_range(1..=2);
            let p = if trial % 2 == 0 {
                Padding::Same
            } else {
                Padding::Valid
            };
            if p == Padding::Valid && (k > h || k > w) {
                continue;
            }
            let mut rnd = |n: usize| {
                (0..n)
                    .map(|_| rng.gen_range(-1.0..1.0))
                    .collect::<Vec<f64>>()
            };
            let x = t(&[2, h, w, c], &rnd(2 * h * w * c));
            let kern = t(&[k, k, c, 2], &rnd(k * k * c * 2));
            let bias = t(&[2], &rnd(2));
            let got = conv2d(&x, &kern, &bias, s, p).unwrap();
            let want = conv_oracle(&x, &kern, &bias, s, p);
            assert_eq!(got.shape(), want.shape());
            // identical summation order is not guaranteed, so compare to rounding
            assert!(got.max_abs_diff(&want) < 1e-13, "trial {trial}");
        }
    }

    #[test]
    fn depthwise_identity_and_shape() {
        let x = t(&[1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let y = depthwise_conv2d(
            &x,
            &t(&[1, 1, 2], &[1.0, 1.0]),
            &t(&[2], &[0.0, 0.0]),
            1,
            Padding::Same,
        )
        .unwrap();
        assert_eq!(y, x);
        let x = Tensor::<f64>::zeros(&[1, 8, 8, 2]).unwrap();
        let y = depthwise_conv2d(
            &x,
            &Tensor::zeros(&[3, 3, 2]).unwrap(),
            &Tensor::zeros(&[2]).unwrap(),
            1,
            Padding::Same,
        )
        .unwrap();
        assert_eq!(y.shape(), &[1, 8, 8, 2]);
    }

    #[test]
    fn separable_is_cheaper() {
        assert_eq!(separable_param_count(3, 2, 4), 32);
        assert_eq!(conv_param_count(3, 2, 4), 76);
        for k in 2..=7 {
            for c in 1..=16 {
                for f in 2..=16 {
                    assert!(separable_param_count(k, c, f) < conv_param_count(k, c, f));
                }
            }
        }
    }
}
