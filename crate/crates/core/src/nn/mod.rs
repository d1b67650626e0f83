//! Convolution, pooling, normalization and dense layers.

mod conv;
mod norm;
mod pool;

pub use conv::{conv2d, window_out, Conv2dParams};
pub use norm::{
    batch_norm, batch_norm_raw, BatchNormState, NormMode, RunningStats, BN_EPS, BN_MOMENTUM,
};
pub use pool::{global_avg_pool, pool2d, PoolKind};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Affine map over the last axis: `x @ weight + bias` with `weight` of shape
/// `[C_in, C_out]`.
pub fn linear<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let ws = weight.shape();
    let Some(&c_in) = x.shape().last() else {
        return Err(Error::shape("linear", x.shape(), ws));
    };
    if ws.len() != 2 || ws[0] != c_in {
        return Err(Error::shape("linear", x.shape(), ws));
    }
    let y = if x.rank() == 1 {
        x.reshape(&[1, c_in])?.matmul(weight)?.reshape(&[ws[1]])?
    } else {
        x.matmul(weight)?
    };
    match bias {
        Some(b) => {
            if b.shape() != [ws[1]] {
                return Err(Error::shape("linear bias", ws, b.shape()));
            }
            y.add(b)
        }
        None => Ok(y),
    }
}
