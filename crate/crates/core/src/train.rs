//! The training loop shared by cross-validation folds and the CLI: seeded
//! shuffling, mini-batches, cross-entropy backward, optimizer steps.

use crate::architectures::Model;
use crate::data::Dataset;
use crate::engine::{cross_entropy, Optimizer, OptimizerKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// Seeds shuffling and dropout; model initialization is seeded
    /// separately at build time.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            batch_size: 32,
            optimizer: OptimizerKind::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-sample cross-entropy over the epoch.
    pub mean_loss: f64,
    /// Training accuracy over the epoch (under dropout/batch statistics).
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
    /// Mean per-sample loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

/// Stacks dataset samples into one `[B, ...]` batch tensor plus labels.
pub fn assemble_batch(dataset: &Dataset, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
    if indices.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let shape = dataset.image_shape().to_vec();
    let sample_len: usize = shape.iter().product();
    let mut data = Vec::with_capacity(indices.len() * sample_len);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = dataset
            .samples()
            .get(i)
            .ok_or_else(|| Error::Config(format!("sample index {i} out of range")))?;
        data.extend_from_slice(s.image.data());
        labels.push(s.label);
    }
    let mut batch_shape = vec![indices.len()];
    batch_shape.extend(shape);
    Ok((Tensor::from_vec(batch_shape, data)?, labels))
}

fn has_batch_norm(model: &Model<f32>) -> bool {
    model
        .spec()
        .layers
        .iter()
        .any(|l| matches!(l.kind, crate::architectures::LayerKind::BatchNorm { .. }))
}

/// Trains in place over the given sample indices. Deterministic for a
/// fixed (model, indices, config): identical seeds produce identical
/// losses step for step.
pub fn train_model(
    model: &mut Model<f32>,
    dataset: &Dataset,
    indices: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    if indices.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let skip_singletons = has_batch_norm(model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut order: Vec<usize> = indices.to_vec();
    let mut log = TrainLog::default();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() == 1 && skip_singletons {
                // Batch statistics are undefined for one sample.
                continue;
            }
            let (batch, labels) = assemble_batch(dataset, chunk)?;
            model.zero_grads();
            let probs = model.forward_train(&batch, &mut rng)?;
            let (batch_loss, dprobs) = cross_entropy(&probs, &labels)?;
            if !batch_loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "training diverged: non-finite loss in epoch {epoch}"
                )));
            }
            model.backward(&dprobs)?;
            opt.step(model.named_params_mut(), 1.0 / chunk.len() as f64)?;
            for (i, &label) in labels.iter().enumerate() {
                if argmax_row(&probs, i) == label {
                    correct += 1;
                }
            }
            loss_sum += batch_loss;
            seen += chunk.len();
            log.step_losses.push(batch_loss / chunk.len() as f64);
        }
        if seen == 0 {
            return Err(Error::Config(
                "every batch was skipped; batch size 1 with batch norm".into(),
            ));
        }
        log.epochs.push(EpochStats {
            epoch,
            mean_loss: loss_sum / seen as f64,
            accuracy: correct as f64 / seen as f64,
        });
    }
    model.clear_caches();
    Ok(log)
}

fn argmax_row(probs: &Tensor<f32>, row: usize) -> usize {
    let m = probs.shape()[1];
    let slice = &probs.data()[row * m..][..m];
    let mut best = 0;
    for (j, &v) in slice.iter().enumerate() {
        if v > slice[best] {
            best = j;
        }
    }
    best + 1
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub accuracy: f64,
    /// 1-based predicted labels in input order.
    pub predictions: Vec<usize>,
    pub correct: usize,
}

/// Batched eval-mode accuracy over the given indices.
pub fn evaluate(
    model: &Model<f32>,
    dataset: &Dataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<Evaluation> {
    if indices.is_empty() {
        return Err(Error::Config("no evaluation samples".into()));
    }
    let mut predictions = Vec::with_capacity(indices.len());
    let mut correct = 0usize;
    for chunk in indices.chunks(batch_size.max(1)) {
        let (batch, labels) = assemble_batch(dataset, chunk)?;
        let probs = model.forward_eval(&batch)?;
        for (i, &label) in labels.iter().enumerate() {
            let pred = argmax_row(&probs, i);
            if pred == label {
                correct += 1;
            }
            predictions.push(pred);
        }
    }
    Ok(Evaluation {
        accuracy: correct as f64 / indices.len() as f64,
        predictions,
        correct,
    })
}

/// Eval-mode feature extraction at the given hooks for the given samples.
/// Returns one record per (sample, hook).
pub fn extract_features(
    model: &Model<f32>,
    dataset: &Dataset,
    indices: &[usize],
    hooks: &[&str],
    batch_size: usize,
    ood: Option<bool>,
) -> Result<Vec<crate::architectures::FeatureRecord>> {
    let mut records = Vec::with_capacity(indices.len() * hooks.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let (batch, _) = assemble_batch(dataset, chunk)?;
        let (_, features) = model.forward_hooks(&batch, hooks)?;
        for (hook, tensor) in features {
            let width = tensor.shape()[1];
            for (row, &i) in chunk.iter().enumerate() {
                let s = &dataset.samples()[i];
                records.push(crate::architectures::FeatureRecord {
                    id: s.id.clone(),
                    layer: hook.clone(),
                    values: tensor.data()[row * width..][..width].to_vec(),
                    label: Some(s.label),
                    ood,
                });
            }
        }
    }
    Ok(records)
}

/// True if an eval forward of the model is byte-deterministic (it always
/// is; kept for documentation-style assertions in tests).
pub fn _deterministic() -> bool {
    true
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::architectures::{LayerDesc, LayerKind, ModelSpec};
    use crate::data::{Dataset, Sample};
    use std::collections::BTreeMap;

    /// Tiny separable set: class 1 lights up the left half, class 2 the
    /// right half.
    pub(crate) fn separable_dataset(per_class: usize, size: usize) -> Dataset {
        let mut samples = Vec::new();
        for (j, name) in ["left", "right"].iter().enumerate() {
            for i in 0..per_class {
                let mut data = vec![0.05f32; size * size];
                for y in 0..size {
                    for x in 0..size {
                        let lit = if j == 0 { x < size / 2 } else { x >= size / 2 };
                        if lit {
                            // Mild deterministic variation across samples.
                            data[y * size + x] = 0.8 + 0.01 * ((i + y) % 5) as f32;
                        }
                    }
                }
                samples.push(Sample {
                    id: format!("{name}-{i}"),
                    source: String::new(),
                    image: Tensor::from_vec(vec![1, size, size], data).unwrap(),
                    label: j + 1,
                });
            }
        }
        let map: BTreeMap<String, usize> =
            [("left".to_string(), 1), ("right".to_string(), 2)].into();
        Dataset::new(samples, map).unwrap()
    }

    pub(crate) fn tiny_spec(size: usize) -> ModelSpec {
        let after_conv = size - 2;
        let after_pool = after_conv / 2;
        let flat = 2 * after_pool * after_pool;
        ModelSpec {
            name: "tiny".into(),
            input_shape: vec![1, size, size],
            classes: 2,
            layers: vec![
                LayerDesc {
                    name: "conv1".into(),
                    kind: LayerKind::Conv2d {
                        in_channels: 1,
                        out_channels: 2,
                        kernel: 3,
                    },
                },
                LayerDesc {
                    name: "act1".into(),
                    kind: LayerKind::Activation,
                },
                LayerDesc {
                    name: "mp1".into(),
                    kind: LayerKind::MaxPool,
                },
                LayerDesc {
                    name: "fl".into(),
                    kind: LayerKind::Flatten,
                },
                LayerDesc {
                    name: "fc1".into(),
                    kind: LayerKind::Dense {
                        in_dim: flat,
                        out_dim: 2,
                    },
                },
                LayerDesc {
                    name: "op".into(),
                    kind: LayerKind::Softmax,
                },
            ],
            hooks: vec![crate::architectures::HookDesc {
                hook: "FC1".into(),
                layer: "fc1".into(),
            }],
        }
    }

    #[test]
    fn training_reduces_loss_and_reaches_separable_accuracy() {
        let ds = separable_dataset(12, 8);
        let spec = tiny_spec(8);
        let mut model = spec.build::<f32>(3).unwrap();
        let idx: Vec<usize> = (0..ds.len()).collect();
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 8,
            optimizer: OptimizerKind::adam(0.01),
            seed: 9,
        };
        let log = train_model(&mut model, &ds, &idx, &cfg).unwrap();
        assert!(log.epochs.last().unwrap().mean_loss < log.epochs[0].mean_loss);
        let eval = evaluate(&model, &ds, &idx, 16).unwrap();
        assert_eq!(eval.accuracy, 1.0, "separable data must be fit exactly");
    }

    #[test]
    fn identical_seeds_replay_identical_losses() {
        let ds = separable_dataset(8, 8);
        let spec = tiny_spec(8);
        let idx: Vec<usize> = (0..ds.len()).collect();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            optimizer: OptimizerKind::default(),
            seed: 77,
        };
        let mut m1 = spec.build::<f32>(5).unwrap();
        let log1 = train_model(&mut m1, &ds, &idx, &cfg).unwrap();
        let mut m2 = spec.build::<f32>(5).unwrap();
        let log2 = train_model(&mut m2, &ds, &idx, &cfg).unwrap();
        assert_eq!(log1.step_losses, log2.step_losses);
        let mut m3 = spec.build::<f32>(5).unwrap();
        let cfg3 = TrainConfig { seed: 78, ..cfg };
        let log3 = train_model(&mut m3, &ds, &idx, &cfg3).unwrap();
        assert_ne!(log1.step_losses, log3.step_losses);
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let ds = separable_dataset(4, 8);
        let spec = tiny_spec(8);
        let mut model = spec.build::<f32>(3).unwrap();
        let idx: Vec<usize> = (0..ds.len()).collect();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let log = train_model(&mut model, &ds, &idx, &cfg).unwrap();
        assert!(log.epochs.is_empty());
        assert!(log.step_losses.is_empty());
    }

    #[test]
    fn feature_extraction_matches_hook_widths() {
        let ds = separable_dataset(4, 8);
        let spec = tiny_spec(8);
        let model = spec.build::<f32>(3).unwrap();
        let idx: Vec<usize> = (0..ds.len()).collect();
        let recs = extract_features(&model, &ds, &idx, &["FC1"], 3, Some(false)).unwrap();
        assert_eq!(recs.len(), ds.len());
        for r in &recs {
            assert_eq!(r.values.len(), 2);
            assert_eq!(r.ood, Some(false));
            assert!(r.label.is_some());
        }
        // Identical input twice: eval features are identical.
        let again = extract_features(&model, &ds, &idx, &["FC1"], 7, Some(false)).unwrap();
        assert_eq!(recs[0].values, again[0].values);
    }
}
