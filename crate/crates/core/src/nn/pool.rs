use super::conv::window_out;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    /// Window mean; padded positions count as zeros.
    Avg,
}

/// 2-D max or average pooling over NCHW input.
///
/// Max-pool gradients go to the first maximal element of each window.
pub fn pool2d<T: Element>(
    x: &Tensor<T>,
    kind: PoolKind,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(Error::invalid(
            "pool2d",
            format!("input must be NCHW, got {xs:?}"),
        ));
    }
    if k == 0 || stride == 0 {
        return Err(Error::invalid(
            "pool2d",
            "window and stride must be positive",
        ));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (Some(oh), Some(ow)) = (
        window_out(h, k, stride, padding),
        window_out(w, k, stride, padding),
    ) else {
        return Err(Error::invalid(
            "pool2d",
            format!("window {k} larger than padded input {h}x{w} (padding {padding})"),
        ));
    };
    let planes = n * c;
    let mut out = vec![T::zero(); planes * oh * ow];
    // source index of each max, or usize::MAX when the window is all padding
    let mut argmax = match kind {
        PoolKind::Max => vec![usize::MAX; out.len()],
        PoolKind::Avg => Vec::new(),
    };
    let area = T::from_usize(k * k).unwrap();
    let data = x.data();
    for pl in 0..planes {
        let plane = &data[pl * h * w..(pl + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let o = (pl * oh + oy) * ow + ox;
                let mut best = T::neg_infinity();
                let mut best_at = usize::MAX;
                let mut total = T::zero();
                for a in 0..k {
                    let iy = (oy * stride + a) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for b in 0..k {
                        let ix = (ox * stride + b) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let at = iy as usize * w + ix as usize;
                        let v = plane[at];
                        total += v;
                        if v > best {
                            best = v;
                            best_at = at;
                        }
                    }
                }
                match kind {
                    PoolKind::Max => {
                        out[o] = if best_at == usize::MAX {
                            T::zero()
                        } else {
                            best
                        };
                        argmax[o] = best_at;
                    }
                    PoolKind::Avg => out[o] = total / area,
                }
            }
        }
    }
    let name = match kind {
        PoolKind::Max => "max_pool2d",
        PoolKind::Avg => "avg_pool2d",
    };
    Ok(Tensor::from_op(
        out,
        vec![n, c, oh, ow],
        name,
        vec![x.clone()],
        Box::new(move |g, _, _| {
            let mut gx = vec![T::zero(); planes * h * w];
            for pl in 0..planes {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let o = (pl * oh + oy) * ow + ox;
                        match kind {
                            PoolKind::Max => {
                                if argmax[o] != usize::MAX {
                                    gx[pl * h * w + argmax[o]] += g[o];
                                }
                            }
                            PoolKind::Avg => {
                                let share = g[o] / area;
                                for a in 0..k {
                                    let iy = (oy * stride + a) as isize - padding as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for b in 0..k {
                                        let ix = (ox * stride + b) as isize - padding as isize;
                                        if ix >= 0 && ix < w as isize {
                                            gx[pl * h * w + iy as usize * w + ix as usize] += share;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            vec![Some(gx)]
        }),
    ))
}

/// Spatial mean per channel: `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    if xs.len() != 4 || xs[2] == 0 || xs[3] == 0 {
        return Err(Error::invalid(
            "global_avg_pool",
            format!("input must be NCHW with H, W >= 1, got {xs:?}"),
        ));
    }
    let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
    let inv = T::one() / T::from_usize(hw).unwrap();
    let out: Vec<T> = x
        .data()
        .chunks(hw)
        .map(|plane| plane.iter().copied().sum::<T>() * inv)
        .collect();
    Ok(Tensor::from_op(
        out,
        vec![n, c],
        "global_avg_pool",
        vec![x.clone()],
        Box::new(move |g, _, _| {
            vec![Some(
                g.iter()
                    .flat_map(|&v| std::iter::repeat_n(v * inv, hw))
                    .collect(),
            )]
        }),
    ))
}
