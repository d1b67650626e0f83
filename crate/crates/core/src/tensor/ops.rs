use super::gemm::gemm;
use super::{numel_of, strides_of, Element, Tensor};
use crate::error::{Error, Result};

/// How the smaller operand of a binary op repeats over the larger one.
#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    /// `rhs` repeats every `inner` elements of `lhs`.
    Rhs {
        inner: usize,
    },
    /// `lhs` repeats every `inner` elements of `rhs`.
    Lhs {
        inner: usize,
    },
}

/// Only leading-batch (suffix) and scalar broadcasting are allowed.
fn broadcast_rule(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Broadcast, Vec<usize>)> {
    if a == b {
        return Ok((Broadcast::Same, a.to_vec()));
    }
    let is_suffix = |big: &[usize], small: &[usize]| {
        numel_of(small) == 1 || (small.len() <= big.len() && big.ends_with(small))
    };
    if is_suffix(a, b) && numel_of(a) >= numel_of(b) {
        Ok((Broadcast::Rhs { inner: numel_of(b) }, a.to_vec()))
    } else if is_suffix(b, a) {
        Ok((Broadcast::Lhs { inner: numel_of(a) }, b.to_vec()))
    } else {
        Err(Error::shape(op, a, b))
    }
}

fn fold_repeated<T: Element>(g: &[T], inner: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); inner];
    for chunk in g.chunks(inner) {
        acc.iter_mut().zip(chunk).for_each(|(a, &v)| *a += v);
    }
    acc
}

fn binary<T: Element>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<(Vec<T>, Vec<usize>, Broadcast)> {
    let (bc, shape) = broadcast_rule(op, a.shape(), b.shape())?;
    let (x, y) = (a.data(), b.data());
    let data = match bc {
        Broadcast::Same => x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect(),
        Broadcast::Rhs { inner } => x
            .iter()
            .enumerate()
            .map(|(i, &p)| f(p, y[i % inner]))
            .collect(),
        Broadcast::Lhs { inner } => y
            .iter()
            .enumerate()
            .map(|(i, &q)| f(x[i % inner], q))
            .collect(),
    };
    Ok((data, shape, bc))
}

/// Reduces a full-size gradient down to an operand's own extent.
fn reduce_generic<T: Element>(bc: Broadcast, g: Vec<T>, lhs: bool) -> Vec<T> {
    match (bc, lhs) {
        (Broadcast::Rhs { inner }, false) | (Broadcast::Lhs { inner }, true) => {
            fold_repeated(&g, inner)
        }
        _ => g,
    }
}

/// Gathers `x` (of `shape`) into the layout given by `axes`.
pub(crate) fn permute_data<T: Copy>(x: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    if rank == 0 {
        return x.to_vec();
    }
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.len());
    if x.is_empty() {
        return out;
    }
    let last = rank - 1;
    let (last_n, last_s) = (out_shape[last], src_strides[last]);
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        if last_s == 1 {
            out.extend_from_slice(&x[base..base + last_n]);
        } else {
            out.extend((0..last_n).map(|j| x[base + j * last_s]));
        }
        // odometer over all axes but the last
        let mut d = last;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            base += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// `(outer, n, inner)` split of `shape` around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Element> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (data, shape, bc) = binary("add", self, other, |p, q| p + q)?;
        Ok(Tensor::from_op(
            data,
            shape,
            "add",
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, inputs| {
                vec![
                    inputs[0]
                        .requires_grad()
                        .then(|| reduce_generic(bc, g.to_vec(), true)),
                    inputs[1]
                        .requires_grad()
                        .then(|| reduce_generic(bc, g.to_vec(), false)),
                ]
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (data, shape, bc) = binary("sub", self, other, |p, q| p - q)?;
        Ok(Tensor::from_op(
            data,
            shape,
            "sub",
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, inputs| {
                vec![
                    inputs[0]
                        .requires_grad()
                        .then(|| reduce_generic(bc, g.to_vec(), true)),
                    inputs[1]
                        .requires_grad()
                        .then(|| reduce_generic(bc, g.iter().map(|&v| -v).collect(), false)),
                ]
            }),
        ))
    }

    /// Elementwise product with leading-batch or scalar broadcasting.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (data, shape, bc) = binary("mul", self, other, |p, q| p * q)?;
        Ok(Tensor::from_op(
            data,
            shape,
            "mul",
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, inputs| {
                let (a, b) = (inputs[0].data(), inputs[1].data());
                let pick = |x: &[T], i: usize, is_lhs: bool| match (bc, is_lhs) {
                    (Broadcast::Rhs { inner }, false) | (Broadcast::Lhs { inner }, true) => {
                        x[i % inner]
                    }
                    _ => x[i],
                };
                let ga = inputs[0].requires_grad().then(|| {
                    let full = g
                        .iter()
                        .enumerate()
                        .map(|(i, &v)| v * pick(b, i, false))
                        .collect();
                    reduce_generic(bc, full, true)
                });
                let gb = inputs[1].requires_grad().then(|| {
                    let full = g
                        .iter()
                        .enumerate()
                        .map(|(i, &v)| v * pick(a, i, true))
                        .collect();
                    reduce_generic(bc, full, false)
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn scale(&self, factor: f64) -> Tensor<T> {
        let f = T::of(factor);
        Tensor::from_op(
            self.data().iter().map(|&v| v * f).collect(),
            self.shape().to_vec(),
            "scale",
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.iter().map(|&v| v * f).collect())]),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<T> {
        let c = T::of(c);
        Tensor::from_op(
            self.data().iter().map(|&v| v + c).collect(),
            self.shape().to_vec(),
            "add_scalar",
            vec![self.clone()],
            Box::new(|g, _, _| vec![Some(g.to_vec())]),
        )
    }

    pub fn relu(&self) -> Tensor<T> {
        Tensor::from_op(
            self.data().iter().map(|&v| v.max(T::zero())).collect(),
            self.shape().to_vec(),
            "relu",
            vec![self.clone()],
            Box::new(|g, _, inputs| {
                let x = inputs[0].data();
                vec![Some(
                    g.iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect(),
                )]
            }),
        )
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Tensor<T> {
        let n = self.numel();
        Tensor::from_op(
            vec![self.data().iter().copied().sum()],
            vec![],
            "sum",
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel_of(shape) != self.numel() {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            self.data().to_vec(),
            shape.to_vec(),
            "reshape",
            vec![self.clone()],
            Box::new(|g, _, _| vec![Some(g.to_vec())]),
        ))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank
            || axes
                .iter()
                .any(|&a| a >= rank || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::invalid(
                "permute",
                format!("{axes:?} is not a permutation of {rank} axes"),
            ));
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let inv = inverse_axes(axes);
        let out_shape_bw = out_shape.clone();
        Ok(Tensor::from_op(
            permute_data(self.data(), &in_shape, axes),
            out_shape,
            "permute",
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(permute_data(g, &out_shape_bw, &inv))]),
        ))
    }

    pub fn transpose(&self, d0: usize, d1: usize) -> Result<Tensor<T>> {
        let rank = self.rank();
        if d0 >= rank || d1 >= rank {
            return Err(Error::invalid(
                "transpose",
                format!("axes ({d0}, {d1}) out of range for rank {rank}"),
            ));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(d0, d1);
        self.permute(&axes)
    }

    /// Matrix product over the last two axes.
    ///
    /// `self` is `[..., M, K]`; `other` is either `[K, N]` (shared across the
    /// leading axes) or `[..., K, N]` with identical leading axes.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::shape("matmul", a, b));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(Error::shape("matmul", a, b));
        }
        let lead = &a[..a.len() - 2];
        let batch: usize = lead.iter().product();
        let shared_rhs = b.len() == 2;
        if !shared_rhs && &b[..b.len() - 2] != lead {
            return Err(Error::shape("matmul", a, b));
        }
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);

        let mut out = vec![T::zero(); batch * m * n];
        if shared_rhs {
            gemm(
                batch * m,
                k,
                n,
                self.data(),
                false,
                other.data(),
                false,
                &mut out,
                false,
                true,
            );
        } else {
            for bi in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &self.data()[bi * m * k..(bi + 1) * m * k],
                    false,
                    &other.data()[bi * k * n..(bi + 1) * k * n],
                    false,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    false,
                    true,
                );
            }
        }
        Ok(Tensor::from_op(
            out,
            out_shape,
            "matmul",
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, inputs| {
                let (x, y) = (inputs[0].data(), inputs[1].data());
                let ga = inputs[0].requires_grad().then(|| {
                    let mut ga = vec![T::zero(); x.len()];
                    if shared_rhs {
                        gemm(batch * m, n, k, g, false, y, true, &mut ga, false, false);
                    } else {
                        for bi in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &g[bi * m * n..(bi + 1) * m * n],
                                false,
                                &y[bi * k * n..(bi + 1) * k * n],
                                true,
                                &mut ga[bi * m * k..(bi + 1) * m * k],
                                false,
                                false,
                            );
                        }
                    }
                    ga
                });
                let gb = inputs[1].requires_grad().then(|| {
                    let mut gb = vec![T::zero(); y.len()];
                    if shared_rhs {
                        gemm(k, batch * m, n, x, true, g, false, &mut gb, false, false);
                    } else {
                        for bi in 0..batch {
                            gemm(
                                k,
                                m,
                                n,
                                &x[bi * m * k..(bi + 1) * m * k],
                                true,
                                &g[bi * m * n..(bi + 1) * m * n],
                                false,
                                &mut gb[bi * k * n..(bi + 1) * k * n],
                                false,
                                false,
                            );
                        }
                    }
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(Error::invalid(
                "softmax",
                format!("axis {axis} out of range for shape {:?}", self.shape()),
            ));
        }
        let (outer, n, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| x[at(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..n {
                    let e = (x[at(j)] - max).exp();
                    y[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    y[at(j)] /= total;
                }
            }
        }
        Ok(Tensor::from_op(
            y,
            self.shape().to_vec(),
            "softmax",
            vec![self.clone()],
            Box::new(move |g, y, _| {
                let mut gx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * n * inner + j * inner + i;
                        let dot: T = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Normalizes over the last axis to zero mean and unit variance, then
    /// applies `gain` and `bias` (both of the last-axis extent).
    pub fn layer_norm(&self, gain: &Tensor<T>, bias: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let c = *self
            .shape()
            .last()
            .ok_or_else(|| Error::invalid("layer_norm", "rank-0 input"))?;
        if gain.shape() != [c] {
            return Err(Error::shape("layer_norm", self.shape(), gain.shape()));
        }
        if bias.shape() != [c] {
            return Err(Error::shape("layer_norm", self.shape(), bias.shape()));
        }
        let eps = T::of(eps);
        let rows = self.numel() / c.max(1);
        let cf = T::from_usize(c).unwrap();
        let x = self.data();
        let (gv, bv) = (gain.data(), bias.data());
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut y = vec![T::zero(); x.len()];
        for r in 0..rows {
            let row = &x[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                y[r * c + j] = h * gv[j] + bv[j];
            }
        }
        Ok(Tensor::from_op(
            y,
            self.shape().to_vec(),
            "layer_norm",
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |g, _, inputs| {
                let gv = inputs[1].data();
                let gx = inputs[0].requires_grad().then(|| {
                    let mut gx = vec![T::zero(); g.len()];
                    for r in 0..rows {
                        let gr = &g[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for j in 0..c {
                            let d = gr[j] * gv[j];
                            mean_d += d;
                            mean_dh += d * hr[j];
                        }
                        mean_d /= cf;
                        mean_dh /= cf;
                        for j in 0..c {
                            let d = gr[j] * gv[j];
                            gx[r * c + j] = rstd[r] * (d - mean_d - hr[j] * mean_dh);
                        }
                    }
                    gx
                });
                let ggain = inputs[1].requires_grad().then(|| {
                    let mut acc = vec![T::zero(); c];
                    for (i, (&gi, &hi)) in g.iter().zip(&xhat).enumerate() {
                        acc[i % c] += gi * hi;
                    }
                    acc
                });
                let gbias = inputs[2].requires_grad().then(|| fold_repeated(g, c));
                vec![gx, ggain, gbias]
            }),
        ))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() || start + len > self.shape()[axis] {
            return Err(Error::invalid(
                "narrow",
                format!(
                    "range {start}..{} on axis {axis} of shape {:?}",
                    start + len,
                    self.shape()
                ),
            ));
        }
        let (outer, n, inner) = split_axis(self.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let full = self.numel();
        Ok(Tensor::from_op(
            out,
            shape,
            "narrow",
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![T::zero(); full];
                for o in 0..outer {
                    let base = o * n * inner + start * inner;
                    gx[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn cat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("cat", "no tensors to concatenate"))?;
        if axis >= first.rank() {
            return Err(Error::invalid("cat", format!("axis {axis} out of range")));
        }
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(Error::shape("cat", first.shape(), p.shape()));
            }
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &s) in parts.iter().zip(&sizes) {
                out.extend_from_slice(&p.data()[o * s * inner..(o + 1) * s * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Tensor::from_op(
            out,
            shape,
            "cat",
            parts.to_vec(),
            Box::new(move |g, _, inputs| {
                let mut grads: Vec<Vec<T>> = sizes
                    .iter()
                    .map(|&s| Vec::with_capacity(outer * s * inner))
                    .collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (gi, &s) in grads.iter_mut().zip(&sizes) {
                        gi.extend_from_slice(&g[off..off + s * inner]);
                        off += s * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(inputs)
                    .map(|(gi, t)| t.requires_grad().then_some(gi))
                    .collect()
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_inputs;

    fn t(v: &[f64], s: &[usize]) -> Tensor<f64> {
        Tensor::from_f64(v, s).unwrap()
    }

    #[test]
    fn matmul_hand_values() {
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t(&[1.0, 1.0], &[2, 1]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_identity() {
        let eye = t(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[3, 3]);
        let b = t(&[0.5, -1.0, 2.0, 3.0, 7.0, -4.0], &[3, 2]);
        assert!(eye.matmul(&b).unwrap().same_values(&b));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let a = t(&[0.3, -0.7, 1.1, 0.2, 0.5, -1.3], &[2, 3]);
        let b = t(&[0.9, -0.4, 0.6, 1.5, -0.2, 0.8], &[3, 2]);
        let err = grad_check_inputs(|xs| Ok(xs[0].matmul(&xs[1])?.sum()), &[a, b], 1e-6).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn batched_matmul_gradients() {
        let a = t(
            &(0..12).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>(),
            &[2, 2, 3],
        );
        let b = t(
            &(0..12).map(|i| (i as f64 * 0.71).cos()).collect::<Vec<_>>(),
            &[2, 3, 2],
        );
        let w = t(
            &(0..8).map(|i| i as f64 - 3.5).collect::<Vec<_>>(),
            &[2, 2, 2],
        );
        let err = grad_check_inputs(|xs| Ok(xs[0].matmul(&xs[1])?.mul(&w)?.sum()), &[a, b], 1e-6)
            .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn softmax_cases() {
        let s = t(&[0.0, 0.0], &[2]).softmax(0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = t(&[3.0; 4], &[4]).softmax(0).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let s = t(&[1000.0, 0.0], &[2]).softmax(0).unwrap();
        assert!(s.data().iter().all(|v| v.is_finite()));
        assert_eq!(s.data()[0], 1.0);
        assert!(s.data()[1] < 1e-300);
        assert!(t(&[1.0], &[1]).softmax(1).is_err());
    }

    #[test]
    fn softmax_slices_sum_to_one_on_any_axis() {
        let x = t(
            &(0..24)
                .map(|i| (i as f64 * 1.3).sin() * 4.0)
                .collect::<Vec<_>>(),
            &[2, 3, 4],
        );
        for axis in 0..3 {
            let y = x.softmax(axis).unwrap();
            let (outer, n, inner) = split_axis(y.shape(), axis);
            for o in 0..outer {
                for i in 0..inner {
                    let s: f64 = (0..n)
                        .map(|j| y.data()[o * n * inner + j * inner + i])
                        .sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn layer_norm_closed_form() {
        let g = Tensor::<f64>::ones(&[2]);
        let b = Tensor::<f64>::zeros(&[2]);
        let y = t(&[1.0, 3.0], &[2]).layer_norm(&g, &b, 0.0).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
        let y = t(&[5.0; 4], &[4])
            .layer_norm(&Tensor::ones(&[4]), &Tensor::zeros(&[4]), 1e-5)
            .unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_moments() {
        let x = t(
            &(0..40)
                .map(|i| (i as f64 * 0.91).sin() * 3.0 + 1.0)
                .collect::<Vec<_>>(),
            &[5, 8],
        );
        let y = x
            .layer_norm(&Tensor::ones(&[8]), &Tensor::zeros(&[8]), 1e-5)
            .unwrap();
        for row in y.data().chunks(8) {
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn broadcasting_rules() {
        let a = Tensor::<f64>::ones(&[2, 3, 4]);
        assert!(a.add(&Tensor::ones(&[3, 4])).is_ok());
        assert!(a.add(&Tensor::scalar(2.0)).is_ok());
        assert!(Tensor::<f64>::ones(&[4]).add(&a).is_ok());
        // trailing-axis broadcasting is not supported
        assert!(a.add(&Tensor::ones(&[2, 3])).is_err());
        assert!(a.add(&Tensor::ones(&[2, 1, 4])).is_err());
    }

    #[test]
    fn broadcast_gradients() {
        let a = t(
            &(0..12).map(|i| i as f64 * 0.1 - 0.4).collect::<Vec<_>>(),
            &[2, 2, 3],
        );
        let b = t(&[0.3, -0.2, 0.9, 1.4, -0.6, 0.2], &[2, 3]);
        let w = t(
            &(0..12).map(|i| (i as f64).cos()).collect::<Vec<_>>(),
            &[2, 2, 3],
        );
        for op in 0..3 {
            let err = grad_check_inputs(
                |xs| {
                    let y = match op {
                        0 => xs[0].add(&xs[1])?,
                        1 => xs[0].sub(&xs[1])?,
                        _ => xs[0].mul(&xs[1])?,
                    };
                    Ok(y.mul(&w)?.sum())
                },
                &[a.clone(), b.clone()],
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-8, "op {op}: {err}");
        }
        // reversed operand order broadcasts too
        let err =
            grad_check_inputs(|xs| Ok(xs[1].sub(&xs[0])?.mul(&w)?.sum()), &[a, b], 1e-6).unwrap();
        assert!(err < 1e-8);
    }

    #[test]
    fn permute_round_trip_and_values() {
        let x = t(&(0..24).map(f64::from).collect::<Vec<_>>(), &[2, 3, 4]);
        let y = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        // y[k, i, j] == x[i, j, k]
        assert_eq!(y.data()[6 + 3 + 2], x.data()[12 + 2 * 4 + 1]);
        let back = y.permute(&[1, 2, 0]).unwrap();
        assert!(back.same_values(&x));
        assert!(x.permute(&[0, 0, 1]).is_err());
    }

    #[test]
    fn narrow_and_cat_invert() {
        let x = t(&(0..24).map(f64::from).collect::<Vec<_>>(), &[2, 4, 3]);
        let a = x.narrow(1, 0, 1).unwrap();
        let b = x.narrow(1, 1, 3).unwrap();
        assert!(Tensor::cat(&[a, b], 1).unwrap().same_values(&x));
    }

    #[test]
    fn structural_op_gradients() {
        // offset keeps every entry away from the relu kink at zero
        let x = t(
            &(0..24)
                .map(|i| (i as f64 * 0.3 + 0.1).sin())
                .collect::<Vec<_>>(),
            &[2, 3, 4],
        );
        let w = t(
            &(0..24).map(|i| (i as f64 * 0.7).cos()).collect::<Vec<_>>(),
            &[4, 2, 3],
        );
        let err = grad_check_inputs(
            |xs| Ok(xs[0].permute(&[2, 0, 1])?.mul(&w)?.sum()),
            std::slice::from_ref(&x),
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8);
        let err = grad_check_inputs(
            |xs| {
                let a = xs[0].narrow(2, 1, 2)?;
                let b = xs[0].narrow(2, 0, 1)?.relu();
                let c = Tensor::cat(&[a, b], 2)?;
                Ok(c.mul(&c)?.sum())
            },
            std::slice::from_ref(&x),
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
        let err = grad_check_inputs(
            |xs| Ok(xs[0].softmax(1)?.mul(&xs[0].reshape(&[2, 3, 4])?)?.sum()),
            &[x],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn layer_norm_gradients() {
        let x = t(
            &(0..24)
                .map(|i| (i as f64 * 0.53).sin() * 2.0)
                .collect::<Vec<_>>(),
            &[2, 3, 4],
        );
        let g = t(&[1.2, 0.7, -0.3, 0.9], &[4]);
        let b = t(&[0.1, -0.2, 0.3, 0.0], &[4]);
        let w = t(
            &(0..24).map(|i| (i as f64 * 0.29).cos()).collect::<Vec<_>>(),
            &[2, 3, 4],
        );
        let err = grad_check_inputs(
            |xs| Ok(xs[0].layer_norm(&xs[1], &xs[2], 1e-5)?.mul(&w)?.sum()),
            &[x, g, b],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
