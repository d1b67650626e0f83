//! Optimization loop, evaluation and the on-disk formats it reads and writes.

mod bytes;
mod checkpoint;
mod config;
mod data;
mod loss;
mod optim;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, StoredTensor, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::{
    cosine_lr, parse_lr_pair, OptimizerKind, RunConfig, Schedule, TrainConfig, LR_PAIRS,
};
pub use data::{
    load_dataset, save_dataset, synth_dataset, Dataset, SynthSpec, DATASET_MAGIC, DATASET_VERSION,
};
pub use loss::label_smoothing_ce;
pub use optim::Optimizer;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamGroup;
use crate::tensor::{no_grad, Element, Tensor};

/// Per-step losses and per-epoch running train accuracy (train-mode logits).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub losses: Vec<f64>,
    pub epoch_accuracy: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct StepReport {
    pub step: usize,
    pub total: usize,
    pub loss: f64,
    pub lr_conv: f64,
    pub lr_ste: f64,
}

fn check_compatible<T: Element>(m: &Model<T>, data: &Dataset) -> Result<()> {
    if data.channels != 3 {
        return Err(Error::Config(format!(
            "model expects 3-channel images, dataset has {}",
            data.channels
        )));
    }
    if data.class_count > m.config.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model predicts {}",
            data.class_count, m.config.num_classes
        )));
    }
    Ok(())
}

/// Index of the largest logit per row; ties go to the lowest index.
pub fn predictions<T: Element>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape().last().copied().unwrap_or(1).max(1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

/// See [`train_with`].
pub fn train<T: Element>(
    model: &mut Model<T>,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<History> {
    train_with(model, data, cfg, |_| {})
}

/// Runs seeded, shuffled mini-batch training and calls `on_step` after every
/// update. Batches of a single sample are skipped since batch norm needs at
/// least two values per channel. A non-finite loss aborts with
/// [`Error::Diverged`].
pub fn train_with<T: Element>(
    model: &mut Model<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepReport),
) -> Result<History> {
    cfg.validate()?;
    check_compatible(model, data)?;
    if data.len() < 2 {
        return Err(Error::Config("training needs at least two samples".into()));
    }
    let total = cfg.total_steps(data.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, &model.store);
    let mut history = History::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    while step < total {
        order.shuffle(&mut rng);
        let (mut correct, mut seen) = (0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if step == total {
                break;
            }
            if chunk.len() < 2 {
                continue;
            }
            let (x, labels) = data.batch::<T>(chunk)?;
            let logits = model.forward_train(&x)?;
            let loss = label_smoothing_ce(&logits, &labels, cfg.label_smooth_eps)?;
            let value = loss.item()?.as_f64();
            if !value.is_finite() {
                return Err(Error::Diverged { step, loss: value });
            }
            loss.backward()?;
            opt.step(&mut model.store, cfg, step, total)?;
            correct += predictions(&logits)
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p == l)
                .count();
            seen += labels.len();
            history.losses.push(value);
            on_step(&StepReport {
                step,
                total,
                loss: value,
                lr_conv: cfg.lr_at(ParamGroup::Conv, step, total),
                lr_ste: cfg.lr_at(ParamGroup::Ste, step, total),
            });
            step += 1;
        }
        if seen > 0 {
            history.epoch_accuracy.push(correct as f64 / seen as f64);
        }
    }
    Ok(history)
}

/// Top-1 accuracy in inference mode.
pub fn evaluate<T: Element>(model: &Model<T>, data: &Dataset, batch_size: usize) -> Result<f64> {
    check_compatible(model, data)?;
    if data.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty dataset".into()));
    }
    let order: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in order.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch::<T>(chunk)?;
        let logits = no_grad(|| model.infer(&x))?;
        correct += predictions(&logits)
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_network, ModelConfig};

    fn setup() -> (Model<f64>, Dataset) {
        let m = build_network::<f64>(&ModelConfig::tiny(2), 1).unwrap();
        let d = synth_dataset(&SynthSpec::new(2, 16, [32, 32], 3)).unwrap();
        (m, d)
    }

    #[test]
    fn argmax_ties_take_first() {
        let t = Tensor::<f64>::from_vec(vec![1.0, 3.0, 3.0, 0.0, -1.0, -2.0], &[2, 3]).unwrap();
        assert_eq!(predictions(&t), vec![1, 0]);
    }

    #[test]
    fn zero_rate_freezes_full_batch_loss() {
        let (mut m, d) = setup();
        let mut cfg = TrainConfig::sgd();
        cfg.lr_conv = 0.0;
        cfg.lr_ste = 0.0;
        cfg.weight_decay = 0.0;
        cfg.batch_size = d.len();
        cfg.steps = Some(3);
        let before = m.store.params()[0].tensor.to_vec();
        let h = train(&mut m, &d, &cfg).unwrap();
        assert_eq!(h.losses.len(), 3);
        // same samples each step, only the summation order is reshuffled
        assert!(
            h.losses.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-12),
            "{:?}",
            h.losses
        );
        assert_eq!(m.store.params()[0].tensor.to_vec(), before);
    }

    #[test]
    fn seeded_runs_repeat() {
        let run = || {
            let (mut m, d) = setup();
            let mut cfg = TrainConfig::adamw();
            cfg.batch_size = 4;
            cfg.steps = Some(6);
            train(&mut m, &d, &cfg).unwrap().losses
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn evaluation_ignores_batch_size() {
        let (m, d) = setup();
        let a = evaluate(&m, &d, 1).unwrap();
        let b = evaluate(&m, &d, 5).unwrap();
        let c = evaluate(&m, &d, 16).unwrap();
        assert!(a == b && b == c);
    }

    #[test]
    fn divergence_is_reported() {
        let (mut m, d) = setup();
        let mut cfg = TrainConfig::sgd();
        cfg.lr_conv = 1e300;
        cfg.lr_ste = 1e300;
        cfg.schedule = Schedule::Constant;
        cfg.batch_size = 8;
        cfg.steps = Some(20);
        assert!(matches!(
            train(&mut m, &d, &cfg),
            Err(Error::Diverged { .. })
        ));
    }

    #[test]
    fn too_many_classes_rejected() {
        let (mut m, _) = setup();
        let d = synth_dataset(&SynthSpec::new(3, 6, [32, 32], 0)).unwrap();
        assert!(matches!(
            train(&mut m, &d, &TrainConfig::sgd()),
            Err(Error::Config(_))
        ));
    }
}
