//! Central finite-difference validation of the analytic backward passes.
//!
//! The scalar probed is `L = sum_i w_i * y_i` with fixed pseudo-random weights `w`.
//! A plain sum would make several exact gradients identically zero (batchnorm
//! input, softmax) and leave only rounding noise to compare.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{ActivationKind, Layer, LayerNode, Mode, NodeGrads, Padding, PoolKind};
use crate::tensor::Tensor;
use crate::train::loss::softmax_cross_entropy;

/// Tolerance every layer kind must meet in the suite.
pub const SUITE_TOLERANCE: f64 = 1e-4;
/// Finite-difference step used by the suite.
pub const SUITE_EPS: f64 = 1e-5;

/// `|a - f| / max(|a|, |f|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorError {
    pub tensor: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub layer: String,
    pub entries: Vec<TensorError>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }
}

const DROPOUT_STREAM: u64 = 0x5eed;

fn sample_inputs(
    node: &LayerNode<f64>,
    shapes: &[Vec<usize>],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Tensor<f64>>> {
    shapes
        .iter()
        .enumerate()
        .map(|(i, shape)| {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match &node.layer {
                // keep every probe at least 0.1 away from the kink
                Layer::Activation {
                    kind: ActivationKind::Relu,
                } => (0..n)
                    .map(|_| {
                        let m = rng.gen_range(0.1..1.0);
                        if rng.gen_bool(0.5) {
                            m
                        } else {
                            -m
                        }
                    })
                    .collect(),
                // distinct, well-separated values so no argmax flips under perturbation
                Layer::Pool2d {
                    kind: PoolKind::Max,
                    ..
                }
                | Layer::GlobalPool {
                    kind: PoolKind::Max,
                } => {
                    let mut ranks: Vec<usize> = (0..n).collect();
                    ranks.shuffle(rng);
                    ranks
                        .into_iter()
                        .map(|r| 2.0 * r as f64 / n as f64 - 1.0)
                        .collect()
                }
                Layer::ChannelScale if i == 1 => {
                    (0..n).map(|_| rng.gen_range(0.05..0.95)).collect()
                }
                _ => (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            };
            Tensor::from_vec(shape, data)
        })
        .collect()
}

fn probe_loss(
    node: &LayerNode<f64>,
    inputs: &[Tensor<f64>],
    weights: &[f64],
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(DROPOUT_STREAM);
    let refs: Vec<&Tensor<f64>> = inputs.iter().collect();
    let y = node.forward(&refs, Mode::Train, &mut rng)?.output;
    if !y.all_finite() {
        return Err(Error::Numeric(format!(
            "{}: non-finite forward output",
            node.name
        )));
    }
    Ok(y.data().iter().zip(weights).map(|(a, b)| a * b).sum())
}

/// Compares analytic gradients of `node` with central differences for every
/// input and parameter. Batched `input_shapes`; training mode throughout.
pub fn gradcheck(
    node: &LayerNode<f64>,
    input_shapes: &[Vec<usize>],
    eps: f64,
    seed: u64,
) -> Result<GradcheckReport> {
    gradcheck_with(node, input_shapes, eps, seed, &|_| {})
}

/// [`gradcheck`] with a hook that may alter the analytic gradients before comparison.
pub fn gradcheck_with(
    node: &LayerNode<f64>,
    input_shapes: &[Vec<usize>],
    eps: f64,
    seed: u64,
    tamper: &dyn Fn(&mut NodeGrads<f64>),
) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = sample_inputs(node, input_shapes, &mut rng)?;
    let refs: Vec<&Tensor<f64>> = inputs.iter().collect();
    let mut drop_rng = ChaCha8Rng::seed_from_u64(seed);
    drop_rng.set_stream(DROPOUT_STREAM);
    let fwd = node.forward(&refs, Mode::Train, &mut drop_rng)?;
    if !fwd.output.all_finite() {
        return Err(Error::Numeric(format!(
            "{}: non-finite forward output",
            node.name
        )));
    }
    let weights: Vec<f64> = (0..fwd.output.len())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let grad_out = Tensor::from_vec(fwd.output.shape(), weights.clone())?;
    let need = vec![true; inputs.len()];
    let mut analytic = node.backward(&refs, &fwd.output, &fwd.cache, &grad_out, &need)?;
    tamper(&mut analytic);

    let mut entries = Vec::new();
    for (i, grad) in analytic.inputs.iter().enumerate() {
        let grad = grad
            .as_ref()
            .ok_or_else(|| Error::shape("missing input gradient"))?;
        let mut worst = 0.0f64;
        for j in 0..inputs[i].len() {
            let mut probe = inputs.clone();
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let up = probe_loss(node, &probe, &weights, seed)?;
            probe[i].data_mut()[j] = orig - eps;
            let down = probe_loss(node, &probe, &weights, seed)?;
            worst = worst.max(relative_error(grad.data()[j], (up - down) / (2.0 * eps)));
        }
        entries.push(TensorError {
            tensor: format!("input{i}"),
            max_rel_err: worst,
        });
    }
    for (p, grad) in analytic.params.iter().enumerate() {
        let mut probe = node.clone();
        let mut worst = 0.0f64;
        for j in 0..grad.len() {
            let orig = node.params[p].value.data()[j];
            probe.params[p].value.data_mut()[j] = orig + eps;
            let up = probe_loss(&probe, &inputs, &weights, seed)?;
            probe.params[p].value.data_mut()[j] = orig - eps;
            let down = probe_loss(&probe, &inputs, &weights, seed)?;
            probe.params[p].value.data_mut()[j] = orig;
            worst = worst.max(relative_error(grad.data()[j], (up - down) / (2.0 * eps)));
        }
        entries.push(TensorError {
            tensor: node.params[p].name.clone(),
            max_rel_err: worst,
        });
    }
    Ok(GradcheckReport {
        layer: node.name.clone(),
        entries,
    })
}

/// Checks the fused softmax + cross-entropy gradient `(p - y) / B` against central
/// differences of the composed loss with respect to the logits.
pub fn gradcheck_softmax_cross_entropy(batch: usize, eps: f64, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits: Vec<f64> = (0..batch * 2).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let logits = Tensor::from_vec(&[batch, 2], logits)?;
    let mut onehot = vec![0.0; batch * 2];
    for b in 0..batch {
        onehot[b * 2 + rng.gen_range(0..2)] = 1.0;
    }
    let onehot = Tensor::from_vec(&[batch, 2], onehot)?;
    let fused = softmax_cross_entropy(&logits, &onehot)?;
    let mut worst = 0.0f64;
    for j in 0..logits.len() {
        let mut probe = logits.clone();
        probe.data_mut()[j] += eps;
        let up = softmax_cross_entropy(&probe, &onehot)?.loss;
        probe.data_mut()[j] -= 2.0 * eps;
        let down = softmax_cross_entropy(&probe, &onehot)?.loss;
        worst = worst.max(relative_error(
            fused.grad_logits.data()[j],
            (up - down) / (2.0 * eps),
        ));
    }
    Ok(worst)
}

/// Hook that may alter analytic gradients per layer kind before comparison.
pub type GradTamper<'a> = &'a dyn Fn(&str, &mut NodeGrads<f64>);

/// Outcome for one layer kind in the suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub kind: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

struct Case {
    layer: Layer,
    shapes: Vec<Vec<usize>>,
}

fn case(layer: Layer, shapes: &[&[usize]]) -> Case {
    Case {
        layer,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

/// Layer configurations exercised by the suite, grouped by kind name.
fn suite_cases() -> Vec<(&'static str, Vec<Case>)> {
    use ActivationKind::*;
    use Padding::*;
    vec![
        (
            "conv2d",
            vec![
                case(
                    Layer::Conv2d {
                        filters: 2,
                        kernel: 2,
                        stride: 1,
                        padding: Valid,
                    },
                    &[&[1, 4, 4, 1]],
                ),
                case(
                    Layer::Conv2d {
                        filters: 3,
                        kernel: 3,
                        stride: 2,
                        padding: Same,
                    },
                    &[&[2, 5, 4, 2]],
                ),
            ],
        ),
        (
            "separable_conv2d",
            vec![
                case(
                    Layer::SeparableConv2d {
                        filters: 3,
                        kernel: 3,
                        stride: 1,
                        padding: Same,
                    },
                    &[&[2, 4, 4, 2]],
                ),
                case(
                    Layer::SeparableConv2d {
                        filters: 2,
                        kernel: 2,
                        stride: 2,
                        padding: Valid,
                    },
                    &[&[1, 5, 5, 3]],
                ),
            ],
        ),
        (
            "max_pool2d",
            vec![
                case(
                    Layer::Pool2d {
                        kind: PoolKind::Max,
                        window: 2,
                        stride: 2,
                        padding: Valid,
                    },
                    &[&[2, 4, 4, 2]],
                ),
                case(
                    Layer::Pool2d {
                        kind: PoolKind::Max,
                        window: 3,
                        stride: 2,
                        padding: Same,
                    },
                    &[&[1, 5, 5, 2]],
                ),
            ],
        ),
        (
            "avg_pool2d",
            vec![
                case(
                    Layer::Pool2d {
                        kind: PoolKind::Avg,
                        window: 2,
                        stride: 2,
                        padding: Valid,
                    },
                    &[&[2, 4, 4, 2]],
                ),
                case(
                    Layer::Pool2d {
                        kind: PoolKind::Avg,
                        window: 3,
                        stride: 2,
                        padding: Same,
                    },
                    &[&[1, 5, 5, 2]],
                ),
            ],
        ),
        (
            "global_avg_pool",
            vec![case(
                Layer::GlobalPool {
                    kind: PoolKind::Avg,
                },
                &[&[2, 3, 3, 4]],
            )],
        ),
        (
            "global_max_pool",
            vec![case(
                Layer::GlobalPool {
                    kind: PoolKind::Max,
                },
                &[&[2, 3, 3, 4]],
            )],
        ),
        ("dense", vec![case(Layer::Dense { units: 3 }, &[&[2, 4]])]),
        (
            "batchnorm",
            vec![
                case(Layer::batchnorm(), &[&[8, 3]]),
                case(Layer::batchnorm(), &[&[2, 3, 3, 2]]),
            ],
        ),
        (
            "dropout",
            vec![case(Layer::Dropout { rate: 0.3 }, &[&[4, 5]])],
        ),
        (
            "relu",
            vec![case(Layer::Activation { kind: Relu }, &[&[3, 4]])],
        ),
        (
            "sigmoid",
            vec![case(Layer::Activation { kind: Sigmoid }, &[&[3, 4]])],
        ),
        (
            "softmax",
            vec![case(Layer::Activation { kind: Softmax }, &[&[3, 4]])],
        ),
        ("flatten", vec![case(Layer::Flatten, &[&[2, 2, 2, 3]])]),
        (
            "residual_add",
            vec![case(Layer::ResidualAdd, &[&[2, 2, 2, 3], &[2, 2, 2, 3]])],
        ),
        (
            "channel_scale",
            vec![case(Layer::ChannelScale, &[&[2, 3, 3, 4], &[2, 4]])],
        ),
        (
            "concat",
            vec![case(Layer::Concat, &[&[2, 2, 2, 1], &[2, 2, 2, 3]])],
        ),
    ]
}

/// Name reported for the fused loss entry of the suite.
pub const FUSED_LOSS_KIND: &str = "softmax_cross_entropy";

/// Runs every layer kind once at fixed seeds. `tamper` may perturb analytic
/// gradients per kind, which lets tests confirm the harness notices a broken backward.
pub fn run_suite(tamper: Option<GradTamper<'_>>) -> Result<Vec<SuiteResult>> {
    let mut results = Vec::new();
    for (kind, cases) in suite_cases() {
        let mut worst = 0.0f64;
        for (i, c) in cases.into_iter().enumerate() {
            let seed = 1000 + i as u64;
            let mut init = ChaCha8Rng::seed_from_u64(seed);
            let per_sample: Vec<Vec<usize>> = c.shapes.iter().map(|s| s[1..].to_vec()).collect();
            let inputs: Vec<usize> = (0..c.shapes.len()).collect();
            let mut node = LayerNode::<f64>::new(kind, c.layer, inputs, &per_sample, &mut init)?;
            // non-trivial affine parameters so their gradients are exercised
            for p in &mut node.params {
                if p.name == "gamma" || p.name.ends_with("bias") || p.name == "beta" {
                    for v in p.value.data_mut() {
                        *v += init.gen_range(-0.5..0.5);
                    }
                }
            }
            let hook = |g: &mut NodeGrads<f64>| {
                if let Some(t) = tamper {
                    t(kind, g)
                }
            };
            let report = gradcheck_with(&node, &c.shapes, SUITE_EPS, seed, &hook)?;
            worst = worst.max(report.max_rel_err());
        }
        results.push(SuiteResult {
            kind: kind.to_string(),
            max_rel_err: worst,
            passed: worst <= SUITE_TOLERANCE,
        });
    }
    let fused = gradcheck_softmax_cross_entropy(6, SUITE_EPS, 77)?;
    results.push(SuiteResult {
        kind: FUSED_LOSS_KIND.to_string(),
        max_rel_err: fused,
        passed: fused <= SUITE_TOLERANCE,
    });
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(layer: Layer, per_sample: &[Vec<usize>]) -> LayerNode<f64> {
        let inputs = (0..per_sample.len()).collect();
        LayerNode::new(
            "n",
            layer,
            inputs,
            per_sample,
            &mut ChaCha8Rng::seed_from_u64(11),
        )
        .unwrap()
    }

    #[test]
    fn dense_four_to_three() {
        let n = node(Layer::Dense { units: 3 }, &[vec![4]]);
        let r = gradcheck(&n, &[vec![5, 4]], 1e-5, 2).unwrap();
        assert!(r.max_rel_err() <= 1e-6, "{r:?}");
        assert_eq!(r.entries.len(), 3);
    }

    #[test]
    fn conv_random_four_by_four() {
        let n = node(
            Layer::Conv2d {
                filters: 1,
                kernel: 2,
                stride: 1,
                padding: Padding::Valid,
            },
            &[vec![4, 4, 1]],
        );
        let r = gradcheck(&n, &[vec![1, 4, 4, 1]], 1e-5, 3).unwrap();
        assert!(r.max_rel_err() <= 1e-6, "{r:?}");
    }

    #[test]
    fn relu_away_from_kink() {
        let n = node(
            Layer::Activation {
                kind: ActivationKind::Relu,
            },
            &[vec![6]],
        );
        let r = gradcheck(&n, &[vec![4, 6]], 1e-5, 4).unwrap();
        assert!(r.max_rel_err() <= 1e-6, "{r:?}");
    }

    #[test]
    fn batchnorm_batch_eight() {
        let n = node(Layer::batchnorm(), &[vec![3]]);
        let r = gradcheck(&n, &[vec![8, 3]], 1e-5, 5).unwrap();
        assert!(r.max_rel_err() <= 1e-4, "{r:?}");
    }

    #[test]
    fn fused_loss_gradient() {
        assert!(gradcheck_softmax_cross_entropy(5, 1e-5, 9).unwrap() <= 1e-6);
    }

    #[test]
    fn suite_passes_and_covers_each_kind_once() {
        let results = run_suite(None).unwrap();
        let mut kinds: Vec<&str> = results.iter().map(|r| r.kind.as_str()).collect();
        let n = kinds.len();
        kinds.sort();
        kinds.dedup();
        assert_eq!(kinds.len(), n);
        for r in &results {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn tampered_dense_is_caught() {
        let tamper = |kind: &str, g: &mut NodeGrads<f64>| {
            if kind == "dense" {
                for v in g.params[0].data_mut() {
                    *v *= 1.01;
                }
            }
        };
        let results = run_suite(Some(&tamper)).unwrap();
        for r in &results {
            assert_eq!(r.passed, r.kind != "dense", "{r:?}");
        }
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut n = node(Layer::Dense { units: 1 }, &[vec![2]]);
        n.params[0].value.data_mut()[0] = f64::NAN;
        assert!(matches!(
            gradcheck(&n, &[vec![1, 2]], 1e-5, 0),
            Err(Error::Numeric(_))
        ));
    }
}
