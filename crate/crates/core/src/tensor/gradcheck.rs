use super::{no_grad, Tensor};
use crate::error::{Error, Result};

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Worst relative error between the autodiff gradient of scalar-valued `f`
/// at `x` and central differences with step `eps`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    grad_check_inputs(|xs| f(&xs[0]), std::slice::from_ref(x), eps)
}

/// Worst disagreement found in one input of a gradient check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LeafCheck {
    pub max_error: f64,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// [`grad_check`] over several inputs at once; every element of every input
/// is perturbed.
pub fn grad_check_inputs<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    Ok(grad_check_report(f, inputs, eps)?
        .iter()
        .map(|c| c.max_error)
        .fold(0.0, f64::max))
}

/// Per-input detail behind [`grad_check_inputs`].
pub fn grad_check_report<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<Vec<LeafCheck>>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    grad_check_steps(f, inputs, &[eps], 0.0)
}

/// Like [`grad_check_report`], but each element is scored against the
/// closest of several central differences, tried in the order of `steps`
/// until one agrees within `accept`.
///
/// A small step loses tiny gradients to round-off, a large one straddles
/// ReLU and max-pool kinks; whole networks need both. A wrong analytic
/// gradient disagrees with every step.
pub fn grad_check_steps<F>(
    f: F,
    inputs: &[Tensor<f64>],
    steps: &[f64],
    accept: f64,
) -> Result<Vec<LeafCheck>>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    if steps.is_empty() || steps.iter().any(|&h| !(h > 0.0 && h.is_finite())) {
        return Err(Error::Contract(format!(
            "finite-difference steps must be positive, got {steps:?}"
        )));
    }
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| t.detach().into_leaf(true)).collect();
    let out = f(&leaves)?;
    if out.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            out.shape()
        )));
    }
    out.backward()?;

    let mut report = Vec::with_capacity(leaves.len());
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let mut worst = LeafCheck {
            max_error: 0.0,
            index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..leaf.numel() {
            let eval = |delta: f64| -> Result<f64> {
                let probe: Vec<Tensor<f64>> = leaves
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        if j == k {
                            let mut v = t.to_vec();
                            v[i] += delta;
                            Tensor::from_vec(v, t.shape()).expect("same shape")
                        } else {
                            t.detach()
                        }
                    })
                    .collect();
                no_grad(|| f(&probe)?.item())
            };
            let (mut e, mut numeric) = (f64::INFINITY, 0.0);
            for &h in steps {
                let n = (eval(h)? - eval(-h)?) / (2.0 * h);
                let err = relative_error(analytic[i], n);
                if err < e {
                    (e, numeric) = (err, n);
                }
                if e < accept {
                    break;
                }
            }
            if e > worst.max_error {
                worst = LeafCheck {
                    max_error: e,
                    index: i,
                    analytic: analytic[i],
                    numeric,
                };
            }
        }
        report.push(worst);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let x = Tensor::from_vec(vec![0.3, -1.7, 2.2, 0.01, 5.0, -0.4], &[2, 3]).unwrap();
        // central differences are exact on a quadratic, so a wide step only
        // trades away round-off
        let err = grad_check(|t| Ok(t.mul(t)?.sum()), &x, 1e-3).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn later_steps_resolve_kinks() {
        // relu just right of its kink: a step of 1e-4 straddles it, 1e-6 does not
        let x = Tensor::from_vec(vec![5e-5], &[1]).unwrap();
        let f = |xs: &[Tensor<f64>]| Ok(xs[0].relu().sum());
        let one = grad_check_steps(f, std::slice::from_ref(&x), &[1e-4], 1e-4).unwrap();
        assert!(one[0].max_error > 0.1);
        let two = grad_check_steps(f, std::slice::from_ref(&x), &[1e-4, 1e-6], 1e-4).unwrap();
        assert!(two[0].max_error < 1e-8, "{:?}", two);
    }

    #[test]
    fn wrong_gradient_fails_every_step() {
        let x = Tensor::from_vec(vec![0.7, -0.2], &[2]).unwrap();
        // forward x³, backward (3 + 0.02/3)x²
        let f = |xs: &[Tensor<f64>]| {
            let x = &xs[0];
            let cube = x.mul(x)?.mul(x)?;
            let bump = x.mul(x)?.mul(&x.detach())?.scale(0.01 / 3.0);
            let fix = bump.detach();
            Ok(cube.add(&bump)?.sub(&fix)?.sum())
        };
        let r = grad_check_steps(f, std::slice::from_ref(&x), &[1e-4, 1e-5, 1e-3], 1e-4).unwrap();
        assert!(r[0].max_error > 1e-3, "{:?}", r);
        assert!(grad_check_steps(f, std::slice::from_ref(&x), &[], 1e-4).is_err());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-12);
    }
}
