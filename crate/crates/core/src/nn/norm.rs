use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Infer,
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Batch-norm parameters plus running statistics.
#[derive(Clone, Debug)]
pub struct BatchNormState<T: Element> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
    pub mode: NormMode,
}

impl<T: Element> BatchNormState<T> {
    /// Unit gain, zero bias, running mean 0 and variance 1.
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gain: Tensor::ones(&[channels]).into_leaf(true),
            bias: Tensor::zeros(&[channels]).into_leaf(true),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            mode: NormMode::Train,
        }
    }
}

/// Normalizes `x` per channel and, in train mode, folds the batch statistics
/// into the running ones.
pub fn batch_norm<T: Element>(x: &Tensor<T>, s: &mut BatchNormState<T>) -> Result<Tensor<T>> {
    let (y, update) = batch_norm_raw(
        x,
        &s.gain,
        &s.bias,
        &s.running_mean,
        &s.running_var,
        s.momentum,
        s.eps,
        s.mode,
    )?;
    if let Some(stats) = update {
        s.running_mean = stats.mean;
        s.running_var = stats.var;
    }
    Ok(y)
}

/// Updated running statistics produced by a train-mode pass.
#[derive(Clone, Debug)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Stateless core of [`batch_norm`]. Running variance is updated with the
/// unbiased batch variance; normalization uses the biased one.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm_raw<T: Element>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    running_mean: &[T],
    running_var: &[T],
    momentum: f64,
    eps: f64,
    mode: NormMode,
) -> Result<(Tensor<T>, Option<RunningStats<T>>)> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(Error::invalid(
            "batch_norm",
            format!("input must be NCHW, got {xs:?}"),
        ));
    }
    let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
    if gain.shape() != [c]
        || bias.shape() != [c]
        || running_mean.len() != c
        || running_var.len() != c
    {
        return Err(Error::shape("batch_norm", xs, gain.shape()));
    }
    let count = n * hw;
    if mode == NormMode::Train && count < 2 {
        return Err(Error::Contract(format!(
            "train-mode batch norm needs at least 2 values per channel, got {count}"
        )));
    }
    let data = x.data();
    let at = move |ni: usize, ci: usize| (ni * c + ci) * hw;
    let cnt = T::from_usize(count).unwrap();
    let eps_t = T::of(eps);

    let (mean, var, update) = match mode {
        NormMode::Infer => (running_mean.to_vec(), running_var.to_vec(), None),
        NormMode::Train => {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ci in 0..c {
                let mut s = T::zero();
                for ni in 0..n {
                    s += data[at(ni, ci)..][..hw].iter().copied().sum::<T>();
                }
                let m = s / cnt;
                let mut q = T::zero();
                for ni in 0..n {
                    q += data[at(ni, ci)..][..hw]
                        .iter()
                        .map(|&v| (v - m) * (v - m))
                        .sum::<T>();
                }
                mean[ci] = m;
                var[ci] = q / cnt;
            }
            let mom = T::of(momentum);
            let unbias = cnt / (cnt - T::one());
            let stats = RunningStats {
                mean: running_mean
                    .iter()
                    .zip(&mean)
                    .map(|(&r, &b)| (T::one() - mom) * r + mom * b)
                    .collect(),
                var: running_var
                    .iter()
                    .zip(&var)
                    .map(|(&r, &b)| (T::one() - mom) * r + mom * b * unbias)
                    .collect(),
            };
            (mean, var, Some(stats))
        }
    };
    let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
    let (gv, bv) = (gain.data(), bias.data());
    let mut xhat = vec![T::zero(); data.len()];
    let mut y = vec![T::zero(); data.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = at(ni, ci);
            for i in base..base + hw {
                let h = (data[i] - mean[ci]) * rstd[ci];
                xhat[i] = h;
                y[i] = h * gv[ci] + bv[ci];
            }
        }
    }
    let train = mode == NormMode::Train;
    let out = Tensor::from_op(
        y,
        xs.to_vec(),
        "batch_norm",
        vec![x.clone(), gain.clone(), bias.clone()],
        Box::new(move |g, _, inputs| {
            let gv = inputs[1].data();
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gh = vec![T::zero(); c];
            for ni in 0..n {
                for ci in 0..c {
                    let base = at(ni, ci);
                    for i in base..base + hw {
                        sum_g[ci] += g[i];
                        sum_gh[ci] += g[i] * xhat[i];
                    }
                }
            }
            let gx = inputs[0].requires_grad().then(|| {
                let mut gx = vec![T::zero(); g.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = at(ni, ci);
                        let scale = gv[ci] * rstd[ci];
                        for i in base..base + hw {
                            gx[i] = if train {
                                scale * (g[i] - sum_g[ci] / cnt - xhat[i] * sum_gh[ci] / cnt)
                            } else {
                                scale * g[i]
                            };
                        }
                    }
                }
                gx
            });
            vec![
                gx,
                inputs[1].requires_grad().then(|| sum_gh.clone()),
                inputs[2].requires_grad().then(|| sum_g.clone()),
            ]
        }),
    );
    Ok((out, update))
}
