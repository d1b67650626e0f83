use crate::error::{Error, Result};
use crate::tensor::{gemm, Element, Tensor};

/// Weights and geometry of a 2-D convolution.
///
/// `weight` is `[C_out, C_in / groups, k, k]`.
#[derive(Clone, Debug)]
pub struct Conv2dParams<T: Element> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl<T: Element> Conv2dParams<T> {
    pub fn new(weight: Tensor<T>, stride: usize, padding: usize, groups: usize) -> Result<Self> {
        let p = Conv2dParams {
            weight,
            bias: None,
            stride,
            padding,
            groups,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_bias(mut self, bias: Tensor<T>) -> Result<Self> {
        self.bias = Some(bias);
        self.validate()?;
        Ok(self)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1] * self.groups
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.as_ref().map_or(0, |b| b.numel())
    }

    fn validate(&self) -> Result<()> {
        let w = self.weight.shape();
        if w.len() != 4 || w[2] != w[3] {
            return Err(Error::invalid(
                "conv2d",
                format!("weight must be [C_out, C_in/g, k, k], got {w:?}"),
            ));
        }
        if self.stride == 0 || self.groups == 0 {
            return Err(Error::invalid(
                "conv2d",
                "stride and groups must be positive",
            ));
        }
        if w[2].is_multiple_of(2) {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel size {} is even", w[2]),
            ));
        }
        if !w[0].is_multiple_of(self.groups) {
            return Err(Error::invalid(
                "conv2d",
                format!("groups {} does not divide C_out {}", self.groups, w[0]),
            ));
        }
        if let Some(b) = &self.bias {
            if b.shape() != [w[0]] {
                return Err(Error::shape("conv2d bias", w, b.shape()));
            }
        }
        Ok(())
    }
}

/// Output extent of a sliding window.
pub fn window_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    (padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds `x` (`[c, h, w]`) into `[c*k*k, oh*ow]` patch columns.
fn im2col<T: Element>(x: &[T], g: &Geometry, col: &mut [T]) {
    let cols = g.col_cols();
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[c * g.h * g.w + iy as usize * g.w..][..g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `x`.
fn col2im<T: Element>(col: &[T], g: &Geometry, x: &mut [T]) {
    let cols = g.col_cols();
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = c * g.h * g.w + iy as usize * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            x[base + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Grouped 2-D cross-correlation (no kernel flip) via im2col + GEMM.
pub fn conv2d<T: Element>(x: &Tensor<T>, p: &Conv2dParams<T>) -> Result<Tensor<T>> {
    p.validate()?;
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(Error::invalid(
            "conv2d",
            format!("input must be NCHW, got {xs:?}"),
        ));
    }
    let (n, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let groups = p.groups;
    if c_in % groups != 0 {
        return Err(Error::invalid(
            "conv2d",
            format!("groups {groups} does not divide C_in {c_in}"),
        ));
    }
    if c_in != p.in_channels() {
        return Err(Error::shape("conv2d", xs, p.weight.shape()));
    }
    let k = p.kernel();
    let (Some(oh), Some(ow)) = (
        window_out(h, k, p.stride, p.padding),
        window_out(w, k, p.stride, p.padding),
    ) else {
        return Err(Error::invalid(
            "conv2d",
            format!("kernel {k} larger than padded input {h}x{w}"),
        ));
    };
    let c_out = p.out_channels();
    let (cg, og) = (c_in / groups, c_out / groups);
    let geo = Geometry {
        c: cg,
        h,
        w,
        k,
        stride: p.stride,
        pad: p.padding,
        oh,
        ow,
    };
    let (rows, cols) = (geo.col_rows(), geo.col_cols());
    let wdata = p.weight.data();
    let mut out = vec![T::zero(); n * c_out * cols];
    let mut col = vec![T::zero(); rows * cols];
    for ni in 0..n {
        for gi in 0..groups {
            let xg = &x.data()[(ni * c_in + gi * cg) * h * w..][..cg * h * w];
            im2col(xg, &geo, &mut col);
            let wg = &wdata[gi * og * rows..(gi + 1) * og * rows];
            let dst = &mut out[(ni * c_out + gi * og) * cols..][..og * cols];
            gemm(og, rows, cols, wg, false, &col, false, dst, false, true);
        }
        if let Some(b) = &p.bias {
            for (co, &bv) in b.data().iter().enumerate() {
                out[(ni * c_out + co) * cols..][..cols]
                    .iter_mut()
                    .for_each(|v| *v += bv);
            }
        }
    }

    let mut inputs = vec![x.clone(), p.weight.clone()];
    if let Some(b) = &p.bias {
        inputs.push(b.clone());
    }
    let has_bias = p.bias.is_some();
    Ok(Tensor::from_op(
        out,
        vec![n, c_out, oh, ow],
        "conv2d",
        inputs,
        Box::new(move |g, _, inputs| {
            let (x, wt) = (inputs[0].data(), inputs[1].data());
            let need_x = inputs[0].requires_grad();
            let need_w = inputs[1].requires_grad();
            let mut gx = need_x.then(|| vec![T::zero(); x.len()]);
            let mut gw = need_w.then(|| vec![T::zero(); wt.len()]);
            let mut col = vec![T::zero(); rows * cols];
            let mut dcol = vec![T::zero(); rows * cols];
            for ni in 0..n {
                for gi in 0..groups {
                    let gout = &g[(ni * c_out + gi * og) * cols..][..og * cols];
                    if let Some(gw) = gw.as_mut() {
                        let xg = &x[(ni * c_in + gi * cg) * h * w..][..cg * h * w];
                        im2col(xg, &geo, &mut col);
                        let dst = &mut gw[gi * og * rows..(gi + 1) * og * rows];
                        gemm(og, cols, rows, gout, false, &col, true, dst, true, false);
                    }
                    if let Some(gx) = gx.as_mut() {
                        let wg = &wt[gi * og * rows..(gi + 1) * og * rows];
                        gemm(
                            rows, og, cols, wg, true, gout, false, &mut dcol, false, false,
                        );
                        let dst = &mut gx[(ni * c_in + gi * cg) * h * w..][..cg * h * w];
                        col2im(&dcol, &geo, dst);
                    }
                }
            }
            let gb = (has_bias && inputs[2].requires_grad()).then(|| {
                let mut gb = vec![T::zero(); c_out];
                for ni in 0..n {
                    for (co, acc) in gb.iter_mut().enumerate() {
                        *acc += g[(ni * c_out + co) * cols..][..cols].iter().copied().sum();
                    }
                }
                gb
            });
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(gb);
            }
            grads
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_inputs;

    fn seq(n: usize, f: f64) -> Vec<f64> {
        (0..n).map(|i| (i as f64 * f + 0.3).sin()).collect()
    }

    /// Direct summation over the window, independent of im2col.
    fn direct(x: &Tensor<f64>, p: &Conv2dParams<f64>) -> Vec<f64> {
        let (n, c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (c_out, k, s, pad, g) = (p.out_channels(), p.kernel(), p.stride, p.padding, p.groups);
        let oh = (h + 2 * pad - k) / s + 1;
        let ow = (w + 2 * pad - k) / s + 1;
        let (cg, og) = (c_in / g, c_out / g);
        let mut out = vec![0.0; n * c_out * oh * ow];
        for ni in 0..n {
            for co in 0..c_out {
                let grp = co / og;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = p.bias.as_ref().map_or(0.0, |b| b.data()[co]);
                        for ci in 0..cg {
                            for a in 0..k {
                                for b in 0..k {
                                    let iy = (oy * s + a) as isize - pad as isize;
                                    let ix = (ox * s + b) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((ni * c_in + grp * cg + ci) * h
                                        + iy as usize)
                                        * w
                                        + ix as usize];
                                    let wv = p.weight.data()[((co * cg + ci) * k + a) * k + b];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out[((ni * c_out + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn one_by_one_identity() {
        let x = Tensor::<f64>::from_vec(seq(16, 0.7), &[1, 1, 4, 4]).unwrap();
        let p = Conv2dParams::new(Tensor::ones(&[1, 1, 1, 1]), 1, 0, 1).unwrap();
        assert!(conv2d(&x, &p).unwrap().same_values(&x));
    }

    #[test]
    fn all_ones_three_by_three() {
        let x = Tensor::<f64>::ones(&[1, 1, 4, 4]);
        let p = Conv2dParams::new(Tensor::ones(&[1, 1, 3, 3]), 1, 1, 1).unwrap();
        let y = conv2d(&x, &p).unwrap();
        let want = [
            4.0, 6.0, 6.0, 4.0, //
            6.0, 9.0, 9.0, 6.0, //
            6.0, 9.0, 9.0, 6.0, //
            4.0, 6.0, 6.0, 4.0,
        ];
        assert_eq!(y.data(), &want);
    }

    #[test]
    fn matches_direct_summation() {
        for (groups, stride, pad) in [(1, 1, 1), (2, 2, 1), (4, 1, 0), (4, 2, 1)] {
            let x = Tensor::<f64>::from_vec(seq(2 * 4 * 5 * 5, 0.37), &[2, 4, 5, 5]).unwrap();
            let w =
                Tensor::from_vec(seq(8 * (4 / groups) * 9, 0.11), &[8, 4 / groups, 3, 3]).unwrap();
            let p = Conv2dParams::new(w, stride, pad, groups)
                .unwrap()
                .with_bias(Tensor::from_vec(seq(8, 1.3), &[8]).unwrap())
                .unwrap();
            let y = conv2d(&x, &p).unwrap();
            for (a, b) in y.data().iter().zip(direct(&x, &p)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn group_divisibility_and_channel_errors() {
        assert!(Conv2dParams::<f64>::new(Tensor::zeros(&[6, 1, 3, 3]), 1, 1, 4).is_err());
        let p = Conv2dParams::<f64>::new(Tensor::zeros(&[4, 2, 3, 3]), 1, 1, 1).unwrap();
        assert!(conv2d(&Tensor::zeros(&[1, 3, 4, 4]), &p).is_err());
        let p = Conv2dParams::<f64>::new(Tensor::zeros(&[4, 1, 3, 3]), 1, 1, 2).unwrap();
        assert!(conv2d(&Tensor::zeros(&[1, 3, 4, 4]), &p).is_err());
    }

    #[test]
    fn nine_c_squared_parameters() {
        let p = Conv2dParams::<f32>::new(Tensor::zeros(&[64, 64, 3, 3]), 1, 1, 1).unwrap();
        assert_eq!(p.param_count(), 36_864);
        assert_eq!(p.param_count(), 9 * 64 * 64);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (groups, stride) in [(1, 1), (2, 2)] {
            let x = Tensor::<f64>::from_vec(seq(2 * 4 * 5 * 5, 0.41), &[2, 4, 5, 5]).unwrap();
            let w =
                Tensor::from_vec(seq(6 * (4 / groups) * 9, 0.23), &[6, 4 / groups, 3, 3]).unwrap();
            let b = Tensor::from_vec(seq(6, 0.9), &[6]).unwrap();
            let r = Tensor::<f64>::from_vec(seq(2 * 6 * 25, 0.17), &[2, 6, 5, 5]).unwrap();
            let err = grad_check_inputs(
                |xs| {
                    let p = Conv2dParams::new(xs[1].clone(), stride, 1, groups)?
                        .with_bias(xs[2].clone())?;
                    let y = conv2d(&xs[0], &p)?;
                    let r = r.narrow(2, 0, y.shape()[2])?.narrow(3, 0, y.shape()[3])?;
                    Ok(y.mul(&r)?.sum())
                },
                &[x, w, b],
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-6, "groups {groups}: {err}");
        }
    }
}
