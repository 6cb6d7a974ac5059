//! Loss, optimizer, training loop and checkpointing.

pub mod adam;
pub mod checkpoint;
pub mod loss;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::graph::Model;
use crate::layers::Mode;
use crate::tensor::{Real, Tensor};

pub use adam::{adam_step, OptimizerState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, StoredTensor};
pub use loss::{categorical_cross_entropy, softmax_cross_entropy, FusedLoss};

/// Optimizer and loop settings. Defaults: lr 0.001, batch 32, Adam(0.9, 0.999, 1e-8).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 32,
            epochs: 10,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 42,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // lr 0 is accepted as a null-update run
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning rate {} must be non-negative",
                self.learning_rate
            )));
        }
        for (name, b) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config(format!("{name} = {b} must lie in (0, 1)")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return Err(Error::config("adam_eps must be positive"));
        }
        Ok(())
    }
}

/// Stream id of the dropout generator; shuffles and initialization use others.
pub const DROPOUT_STREAM: u64 = 1;

/// Mutable state carried across epochs.
#[derive(Debug, Clone)]
pub struct Trainer<T: Real> {
    pub cfg: TrainConfig,
    pub optimizer: OptimizerState<T>,
    pub dropout_rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: u64,
}

impl<T: Real> Trainer<T> {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        dropout_rng.set_stream(DROPOUT_STREAM);
        Ok(Trainer {
            cfg,
            optimizer: OptimizerState::new(),
            dropout_rng,
            epoch: 0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub accuracy: f64,
    pub samples: usize,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[impl Real]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn count_correct<T: Real>(probs: &Tensor<T>, onehot: &Tensor<T>) -> usize {
    let k = probs.shape()[1];
    probs
        .data()
        .chunks(k)
        .zip(onehot.data().chunks(k))
        .filter(|(p, y)| argmax(p) == argmax(y))
        .count()
}

/// One pass over `batches`: forward, fused softmax cross-entropy, backward, Adam.
/// Reports the sample-weighted mean loss and accuracy seen during the pass.
pub fn train_epoch<T: Real>(
    model: &mut Model<T>,
    batches: impl IntoIterator<Item = Batch<T>>,
    trainer: &mut Trainer<T>,
) -> Result<EpochStats> {
    crate::tensor::set_deterministic(trainer.cfg.deterministic);
    let logits_id = model.logits_id();
    let mut loss_sum = 0.0;
    let mut correct = 0;
    let mut samples = 0;
    for (index, batch) in batches.into_iter().enumerate() {
        let (_, tape) = model.forward(&batch.images, Mode::Train, &mut trainer.dropout_rng)?;
        let fused = softmax_cross_entropy(tape.output(logits_id), &batch.onehot)?;
        if !fused.loss.is_finite() {
            return Err(Error::Divergence { batch: index });
        }
        let n = batch.len();
        loss_sum += fused.loss * n as f64;
        correct += count_correct(&fused.probs, &batch.onehot);
        samples += n;
        let grads = model.backward(tape, fused.grad_logits, logits_id)?;
        adam_step(model, &grads, &mut trainer.optimizer, &trainer.cfg)?;
    }
    trainer.epoch += 1;
    Ok(EpochStats {
        loss: if samples > 0 {
            loss_sum / samples as f64
        } else {
            0.0
        },
        accuracy: if samples > 0 {
            correct as f64 / samples as f64
        } else {
            0.0
        },
        samples,
    })
}

/// Inference-mode results over a batch stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    /// Argmax accuracy, ties to the first class.
    pub accuracy: f64,
    /// Probability of the positive (parasitized, index 1) class per sample.
    pub positive_probs: Vec<f64>,
    pub labels: Vec<u8>,
}

/// Evaluates without touching parameters or state.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    batches: impl IntoIterator<Item = Batch<T>>,
) -> Result<Evaluation> {
    let mut loss_sum = 0.0;
    let mut correct = 0;
    let mut positive_probs = Vec::new();
    let mut labels = Vec::new();
    for (index, batch) in batches.into_iter().enumerate() {
        let probs = model.infer(&batch.images)?;
        let (loss, _) = categorical_cross_entropy(&probs, &batch.onehot)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { batch: index });
        }
        loss_sum += loss * batch.len() as f64;
        correct += count_correct(&probs, &batch.onehot);
        let k = probs.shape()[1];
        for (p, y) in probs.data().chunks(k).zip(batch.onehot.data().chunks(k)) {
            positive_probs.push(p[1].as_f64());
            labels.push(argmax(y) as u8);
        }
    }
    let n = labels.len();
    Ok(Evaluation {
        loss: if n > 0 { loss_sum / n as f64 } else { 0.0 },
        accuracy: if n > 0 {
            correct as f64 / n as f64
        } else {
            0.0
        },
        positive_probs,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{ActivationKind, Layer};

    fn toy_model(seed: u64) -> Model<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Model::new("toy", &[1, 1, 2], &mut r).unwrap();
        let f = m.add("flat", Layer::Flatten, &[0], &mut r).unwrap();
        let d = m
            .add("fc", Layer::Dense { units: 2 }, &[f], &mut r)
            .unwrap();
        m.add(
            "softmax",
            Layer::Activation {
                kind: ActivationKind::Softmax,
            },
            &[d],
            &mut r,
        )
        .unwrap();
        m
    }

    fn toy_batch() -> Batch<f64> {
        Batch {
            images: Tensor::from_f64_slice(&[2, 1, 1, 2], &[1.0, 0.2, -0.3, -1.0]).unwrap(),
            onehot: Tensor::from_f64_slice(&[2, 2], &[0.0, 1.0, 1.0, 0.0]).unwrap(),
        }
    }

    #[test]
    fn loss_decreases_on_separable_pair() {
        let mut m = toy_model(1);
        let mut tr = Trainer::new(TrainConfig {
            learning_rate: 0.01,
            ..TrainConfig::default()
        })
        .unwrap();
        let mut last = f64::INFINITY;
        for _ in 0..50 {
            let s = train_epoch(&mut m, [toy_batch()], &mut tr).unwrap();
            assert!(s.loss < last, "{} !< {last}", s.loss);
            last = s.loss;
        }
        assert_eq!(tr.optimizer.step, 50);
    }

    #[test]
    fn zero_learning_rate_is_a_null_update() {
        let mut m = toy_model(2);
        let initial = m.clone();
        let eval = evaluate(&initial, [toy_batch()]).unwrap();
        let mut tr = Trainer::new(TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        })
        .unwrap();
        let s = train_epoch(&mut m, [toy_batch()], &mut tr).unwrap();
        for ((_, a, _), (_, b, _)) in m.named_params().zip(initial.named_params()) {
            assert_eq!(a, b);
        }
        assert!((s.loss - eval.loss).abs() < 1e-12);
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut m = toy_model(3);
            let mut tr = Trainer::new(TrainConfig::default()).unwrap();
            (0..5)
                .map(|_| train_epoch(&mut m, [toy_batch()], &mut tr).unwrap())
                .map(|s| (s.loss.to_bits(), s.accuracy.to_bits()))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn divergence_names_the_batch() {
        let mut m = toy_model(4);
        m.set_tensor(
            "fc/bias",
            Tensor::from_f64_slice(&[2], &[f64::NAN, 0.0]).unwrap(),
        )
        .unwrap();
        let mut tr = Trainer::new(TrainConfig::default()).unwrap();
        let err = train_epoch(&mut m, [toy_batch(), toy_batch()], &mut tr).unwrap_err();
        assert!(matches!(err, Error::Divergence { batch: 0 }));
    }

    #[test]
    fn uniform_predictions_evaluate_to_ln2_and_first_class_ties() {
        let mut m = toy_model(5);
        m.set_tensor("fc/kernel", Tensor::zeros(&[2, 2]).unwrap())
            .unwrap();
        m.set_tensor("fc/bias", Tensor::zeros(&[2]).unwrap())
            .unwrap();
        let batch = Batch {
            images: Tensor::from_f64_slice(
                &[4, 1, 1, 2],
                &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
            )
            .unwrap(),
            onehot: Tensor::from_f64_slice(&[4, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0])
                .unwrap(),
        };
        let e = evaluate(&m, [batch.clone()]).unwrap();
        assert!((e.loss - std::f64::consts::LN_2).abs() <= 1e-4);
        assert_eq!(e.accuracy, 0.5);
        assert_eq!(e, evaluate(&m, [batch]).unwrap());
    }

    #[test]
    fn config_validation() {
        let bad = [
            TrainConfig {
                learning_rate: -1.0,
                ..Default::default()
            },
            TrainConfig {
                adam_beta1: 1.0,
                ..Default::default()
            },
            TrainConfig {
                adam_beta2: 0.0,
                ..Default::default()
            },
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }
}
