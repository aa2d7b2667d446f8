use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::zoo::{head_predictions, GradModel, GradTargets, Pass, IMAGE_PIXELS};
use crate::autograd::{Reduction, Tape};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum,
}

/// Training hyperparameters. The seed fixes initialization, shuffling and
/// dropout masks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplier applied to the learning rate after every epoch.
    pub lr_decay: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 3,
            batch_size: 64,
            learning_rate: 0.01,
            lr_decay: 1.0,
            optimizer: OptimizerKind::SgdMomentum,
            momentum: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Accuracy of the training-mode predictions seen during the epoch.
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    pub fn total_seconds(&self) -> f64 {
        self.epochs.iter().map(|e| e.seconds).sum()
    }
}

// Independent ChaCha streams derived from the one training seed.
const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Eval-mode accuracy of `model` on `ds`.
pub fn test_accuracy(model: &GradModel<f32>, ds: &Dataset, chunk: usize) -> Result<f64> {
    let preds = model.predict_all(ds.pixels(), chunk)?;
    let records = metrics::records(&preds, ds.labels());
    metrics::accuracy(&records)
}

/// Minibatch SGD on the mean training loss.
pub fn train(
    mut model: GradModel<f32>,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(GradModel<f32>, TrainHistory)> {
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config(
            "epochs and batch_size must be positive".into(),
        ));
    }
    let labels: Vec<usize> = train_set.labels().iter().map(|&l| l as usize).collect();
    model.check_labels(&labels)?;

    let mut shuffle_rng = stream(cfg.seed, SHUFFLE_STREAM);
    let mut dropout_rng = stream(cfg.seed, DROPOUT_STREAM);
    let mut velocity: Vec<Vec<f32>> = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = TrainHistory::default();
    let mut lr = cfg.learning_rate as f32;
    let momentum = match cfg.optimizer {
        OptimizerKind::Sgd => 0.0,
        OptimizerKind::SgdMomentum => cfg.momentum as f32,
    };
    let mut batch_pixels = Vec::with_capacity(cfg.batch_size * IMAGE_PIXELS);
    let mut batch_labels = Vec::with_capacity(cfg.batch_size);

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            batch_pixels.clear();
            batch_labels.clear();
            for &i in idx {
                batch_pixels.extend_from_slice(train_set.example(i).pixels);
                batch_labels.push(labels[i]);
            }
            let diverged = || Error::DivergedLoss { epoch, step };

            let mut tape = Tape::new();
            let targets = GradTargets {
                input: false,
                params: true,
            };
            let fwd = model
                .forward(
                    &mut tape,
                    &batch_pixels,
                    idx.len(),
                    targets,
                    Pass::Train(&mut dropout_rng),
                )
                .map_err(|e| match e {
                    Error::NonFinite(_) => diverged(),
                    other => other,
                })?;
            let loss = model
                .loss_node(&mut tape, &fwd, &batch_labels, Reduction::Mean)
                .map_err(|e| match e {
                    Error::NonFinite(_) => diverged(),
                    other => other,
                })?;
            let loss_value = tape.value(loss).data()[0] as f64;
            if !loss_value.is_finite() {
                return Err(diverged());
            }
            loss_sum += loss_value * idx.len() as f64;
            correct += head_predictions(model.head(), tape.value(fwd.output))
                .iter()
                .zip(&batch_labels)
                .filter(|(p, &t)| p.label() == t)
                .count();

            let mut grads = tape.backward(loss)?;
            for ((param, vel), var) in model
                .params_mut()
                .iter_mut()
                .zip(&mut velocity)
                .zip(&fwd.params)
            {
                let grad = grads.take(*var).ok_or_else(diverged)?;
                for ((w, v), &g) in param
                    .data_mut()
                    .iter_mut()
                    .zip(vel.iter_mut())
                    .zip(grad.data())
                {
                    *v = momentum * *v + g;
                    *w -= lr * *v;
                }
            }
        }
        let test_accuracy = test_set
            .map(|ds| test_accuracy(&model, ds, 256))
            .transpose()?;
        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / train_set.len() as f64,
            train_accuracy: correct as f64 / train_set.len() as f64,
            test_accuracy,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "seed {} epoch {}: loss {:.5} train acc {:.4} test acc {:?} ({:.1}s)",
            cfg.seed,
            epoch,
            stats.mean_loss,
            stats.train_accuracy,
            stats.test_accuracy,
            stats.seconds
        );
        history.epochs.push(stats);
        lr *= cfg.lr_decay as f32;
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, Architecture};

    // two separable blobs: label 1 lights the left half, label 0 the right
    fn toy(n: usize) -> Dataset {
        let mut pixels = Vec::with_capacity(n * IMAGE_PIXELS);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = (i % 2) as u8;
            for p in 0..IMAGE_PIXELS {
                let left = p % 28 < 14;
                let jitter = ((i * 7 + p * 3) % 11) as f32 * 0.01;
                pixels.push(if left == (label == 1) {
                    1.0 - jitter
                } else {
                    jitter
                });
            }
            labels.push(label);
        }
        Dataset::from_parts(28, 28, pixels, labels).unwrap()
    }

    fn cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            epochs: 2,
            batch_size: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn learns_a_separable_task() {
        let ds = toy(64);
        for arch in [Architecture::MlpSmall, Architecture::CnnRef] {
            let model = build_model::<f32>(arch, 2, 0).unwrap();
            let (model, history) = train(model, &ds, Some(&ds), &cfg(0)).unwrap();
            assert_eq!(history.epochs.len(), 2);
            assert!(history.epochs.iter().all(|e| e.mean_loss.is_finite()));
            assert_eq!(test_accuracy(&model, &ds, 16).unwrap(), 1.0, "{arch:?}");
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let ds = toy(40);
        let run = |seed| {
            let model = build_model::<f32>(Architecture::CnnRef, 1, seed).unwrap();
            train(model, &ds, None, &cfg(seed)).unwrap().0
        };
        let (a, b, c) = (run(3), run(3), run(4));
        let bits = |m: &GradModel<f32>| -> Vec<u32> {
            m.params()
                .iter()
                .flat_map(|p| p.data().iter().map(|v| v.to_bits()))
                .collect()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let ds = toy(64);
        let model = build_model::<f32>(Architecture::MlpSmall, 10, 0).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e30,
            ..cfg(0)
        };
        assert!(matches!(
            train(model, &ds, None, &cfg),
            Err(Error::DivergedLoss { .. })
        ));
    }

    #[test]
    fn zero_epochs_rejected() {
        let model = build_model::<f32>(Architecture::MlpSmall, 2, 0).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..cfg(0)
        };
        assert!(matches!(
            train(model, &toy(4), None, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn labels_outside_the_head_rejected() {
        let mut ds = toy(8);
        ds = Dataset::from_parts(28, 28, ds.pixels().to_vec(), vec![0, 1, 2, 0, 1, 2, 0, 1])
            .unwrap();
        let model = build_model::<f32>(Architecture::MlpSmall, 2, 0).unwrap();
        assert!(train(model, &ds, None, &cfg(0)).is_err());
    }
}
