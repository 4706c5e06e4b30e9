//! Desk-scale training: SGD with momentum on softmax cross-entropy, plus a
//! synthetic shape/color dataset generator for smoke tests.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::Model;
use crate::error::{Result, SalgError};
use crate::par;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor};

/// One training example.
#[derive(Clone, Debug)]
pub struct LabeledImage {
    /// `[S, S, 3]` pixels in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct TrainSettings {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Stop once training accuracy reaches this value (acceptance runs);
    /// `None` always runs all epochs (the CLI contract).
    pub stop_at_accuracy: Option<f64>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 100,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 20,
            stop_at_accuracy: None,
        }
    }
}

/// One epoch of the training curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainRecord {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Trains `model` in place. Examples within a batch run data-parallel, each
/// on its own graph; gradients reduce in example order, so fixed seeds give
/// bit-identical curves at any thread count.
pub fn toy_train(
    model: &Model,
    store: &mut ParamStore,
    data: &[LabeledImage],
    settings: &TrainSettings,
    seed: u64,
) -> Result<Vec<TrainRecord>> {
    if data.is_empty() {
        return Err(SalgError::Usage("toy_train: empty dataset".into()));
    }
    let size = model.config.input_size;
    for (i, ex) in data.iter().enumerate() {
        if ex.image.shape() != [size, size, 3] {
            return Err(SalgError::Usage(format!(
                "toy_train: example {i} has shape {:?}, config wants {size}x{size}x3",
                ex.image.shape()
            )));
        }
        if ex.label >= model.config.num_classes {
            return Err(SalgError::Usage(format!(
                "toy_train: example {i} labeled {} with only {} classes",
                ex.label, model.config.num_classes
            )));
        }
    }
    if settings.batch_size == 0 {
        return Err(SalgError::Usage("toy_train: batch_size must be >= 1".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut velocity = store.velocity_like();
    let mut curve = Vec::with_capacity(settings.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..settings.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (step, batch) in order.chunks(settings.batch_size).enumerate() {
            let results: Vec<Result<ExampleGrad>> = par::map_indexed(batch.len(), |i| {
                run_example(model, store, &data[batch[i]])
            });
            store.zero_grads();
            for r in results {
                let r = r?;
                if !r.loss.is_finite() {
                    return Err(SalgError::NonFiniteLoss { epoch, step, value: r.loss });
                }
                loss_sum += r.loss;
                correct += r.correct as usize;
                for (id, grad) in &r.grads {
                    store.accumulate_grad(*id, grad);
                }
            }
            store.scale_grads(1.0 / batch.len() as f64);
            store.sgd_momentum_step(&mut velocity, settings.learning_rate, settings.momentum);
        }
        let record = TrainRecord {
            epoch,
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        };
        curve.push(record);
        if settings.stop_at_accuracy.is_some_and(|t| record.accuracy >= t) {
            break;
        }
    }
    Ok(curve)
}

struct ExampleGrad {
    loss: f64,
    correct: bool,
    grads: Vec<(ParamId, Vec<f64>)>,
}

fn run_example(model: &Model, store: &ParamStore, ex: &LabeledImage) -> Result<ExampleGrad> {
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, store, &ex.image)?;
    let loss = g.cross_entropy(fwd.logits, ex.label)?;
    let grads = g.backward(loss)?;
    let logits = g.data(fwd.logits).data();
    let predicted = argmax(logits);
    let mut collected = Vec::new();
    for id in store.ids() {
        if let Some(node) = g.param_node(id) {
            if let Some(grad) = grads.of(node) {
                collected.push((id, grad.to_vec()));
            }
        }
    }
    Ok(ExampleGrad {
        loss: g.data(loss).data()[0],
        correct: predicted == ex.label,
        grads: collected,
    })
}

/// Index of the maximal logit (first on ties).
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Mean loss and accuracy of `model` over `data` without updating weights.
pub fn evaluate(model: &Model, store: &ParamStore, data: &[LabeledImage]) -> Result<(f64, f64)> {
    let results: Vec<Result<(f64, bool)>> = par::map_indexed(data.len(), |i| {
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, store, &data[i].image)?;
        let loss = g.cross_entropy(fwd.logits, data[i].label)?;
        let predicted = argmax(g.data(fwd.logits).data());
        Ok((g.data(loss).data()[0], predicted == data[i].label))
    });
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for r in results {
        let (l, c) = r?;
        loss_sum += l;
        correct += c as usize;
    }
    Ok((loss_sum / data.len() as f64, correct as f64 / data.len() as f64))
}

/// Deterministic pseudo-random `[size, size, 3]` image in `[0, 1)`.
pub fn random_image(size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(vec![size, size, 3], |_| rng.random_range(0.0..1.0))
}

// ── Synthetic dataset ───────────────────────────────────────────────────

const PALETTE: [[f64; 3]; 10] = [
    [0.95, 0.10, 0.10], // red
    [0.10, 0.90, 0.10], // green
    [0.15, 0.20, 0.95], // blue
    [0.95, 0.90, 0.10], // yellow
    [0.10, 0.90, 0.90], // cyan
    [0.90, 0.10, 0.90], // magenta
    [0.95, 0.95, 0.95], // white
    [0.95, 0.55, 0.10], // orange
    [0.55, 0.15, 0.90], // purple
    [0.10, 0.60, 0.50], // teal
];

/// Deterministic shape/color dataset: each class pairs a palette color with
/// a shape family (disk, square, ring, cross, bars), drawn at a jittered
/// position and scale over a dark noisy background.
pub fn synthetic_shapes(
    classes: usize,
    per_class: usize,
    size: usize,
    seed: u64,
) -> Vec<LabeledImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(classes * per_class);
    for label in 0..classes {
        let color = PALETTE[label % PALETTE.len()];
        let shape = label % 5;
        for _ in 0..per_class {
            let mut pixels = vec![0.0f64; size * size * 3];
            for p in pixels.iter_mut() {
                *p = rng.random_range(0.0..0.08);
            }
            let s = size as f64;
            let cx = rng.random_range(0.35 * s..0.65 * s);
            let cy = rng.random_range(0.35 * s..0.65 * s);
            let r = rng.random_range(0.18 * s..0.30 * s);
            for y in 0..size {
                for x in 0..size {
                    let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                    let inside = match shape {
                        0 => dx * dx + dy * dy <= r * r,
                        1 => dx.abs() <= r && dy.abs() <= r,
                        2 => {
                            let d2 = dx * dx + dy * dy;
                            d2 <= r * r && d2 >= 0.35 * r * r
                        }
                        3 => dx.abs() <= 0.35 * r || dy.abs() <= 0.35 * r,
                        _ => ((dy / 4.0).floor() as i64).rem_euclid(2) == 0 && dx.abs() <= r,
                    };
                    if inside {
                        let base = (y * size + x) * 3;
                        for ch in 0..3 {
                            pixels[base + ch] = (color[ch] + rng.random_range(-0.04..0.04))
                                .clamp(0.0, 1.0);
                        }
                    }
                }
            }
            out.push(LabeledImage {
                image: Tensor::new(vec![size, size, 3], pixels).expect("sized buffer"),
                label,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_dataset_is_deterministic_and_labeled() {
        let a = synthetic_shapes(3, 2, 16, 9);
        let b = synthetic_shapes(3, 2, 16, 9);
        assert_eq!(a.len(), 6);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.label, y.label);
            assert_eq!(x.image.data(), y.image.data());
        }
        assert!(a.iter().all(|e| e.image.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
    }
}
