use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::Element;

use super::config::{OptimizerKind, TrainConfig};

/// Per-parameter optimizer state, indexed like the store.
///
/// SGD keeps one velocity buffer and folds weight decay into the gradient.
/// AdamW keeps first and second moments and decays weights directly. Decay
/// applies only to weight matrices and conv kernels.
#[derive(Clone, Debug)]
pub struct Optimizer<T: Element> {
    kind: OptimizerKind,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    steps_taken: usize,
}

impl<T: Element> Optimizer<T> {
    pub fn new(kind: OptimizerKind, store: &ParameterStore<T>) -> Self {
        let zeros = || {
            store
                .params()
                .iter()
                .map(|p| vec![T::zero(); p.tensor.numel()])
                .collect::<Vec<_>>()
        };
        Optimizer {
            kind,
            first: zeros(),
            second: if kind == OptimizerKind::AdamW {
                zeros()
            } else {
                Vec::new()
            },
            steps_taken: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }

    /// Applies one update at schedule position `step` of `total` and leaves
    /// every parameter as a fresh leaf with no gradient.
    pub fn step(
        &mut self,
        store: &mut ParameterStore<T>,
        cfg: &TrainConfig,
        step: usize,
        total: usize,
    ) -> Result<()> {
        if self.first.len() != store.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first.len(),
                store.len()
            )));
        }
        // collect first so a missing gradient leaves the store untouched
        let grads = store
            .params()
            .iter()
            .map(|p| {
                p.tensor
                    .grad()
                    .ok_or_else(|| Error::Contract(format!("parameter {} has no gradient", p.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        self.steps_taken += 1;
        let t = self.steps_taken as i32;
        let ids: Vec<_> = store.ids().collect();
        for (i, (id, grad)) in ids.into_iter().zip(grads).enumerate() {
            let p = store.param(id);
            let lr = T::of(cfg.lr_at(p.group, step, total));
            let wd = T::of(if p.kind.decays() {
                cfg.weight_decay
            } else {
                0.0
            });
            let mut theta = p.tensor.to_vec();
            match self.kind {
                OptimizerKind::Sgd => {
                    let mu = T::of(cfg.momentum);
                    let vel = &mut self.first[i];
                    for ((w, g), v) in theta.iter_mut().zip(&grad).zip(vel.iter_mut()) {
                        *v = mu * *v + *g + wd * *w;
                        *w -= lr * *v;
                    }
                }
                OptimizerKind::AdamW => {
                    let [b1, b2] = cfg.betas;
                    let c1 = T::of(1.0 - b1.powi(t));
                    let c2 = T::of(1.0 - b2.powi(t));
                    let (b1, b2, eps) = (T::of(b1), T::of(b2), T::of(cfg.adam_eps));
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for (((w, g), m), v) in theta
                        .iter_mut()
                        .zip(&grad)
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        *w -= lr * wd * *w;
                        *m = b1 * *m + (T::one() - b1) * *g;
                        *v = b2 * *v + (T::one() - b2) * *g * *g;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
            store.set(id, theta)?;
        }
        Ok(())
    }
}
