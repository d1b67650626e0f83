use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Batch-mean cross-entropy of `[N, K]` logits against a smoothed target that
/// puts `1 - eps + eps/K` on the label and `eps/K` on every other class.
pub fn label_smoothing_ce<T: Element>(
    logits: &Tensor<T>,
    labels: &[usize],
    eps: f64,
) -> Result<Tensor<T>> {
    let s = logits.shape();
    if s.len() != 2 || s[0] == 0 || s[1] == 0 {
        return Err(Error::invalid(
            "label_smoothing_ce",
            format!("expected non-empty [N, K] logits, got {s:?}"),
        ));
    }
    let (n, k) = (s[0], s[1]);
    if labels.len() != n {
        return Err(Error::shape("label_smoothing_ce", s, &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Contract(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Contract(format!(
            "label smoothing eps must be in [0, 1), got {eps}"
        )));
    }
    let x = logits.data();
    let off = eps / k as f64;
    let mut probs = vec![0.0f64; n * k];
    let mut loss = 0.0f64;
    for (i, &label) in labels.iter().enumerate() {
        let row = &x[i * k..(i + 1) * k];
        let max = row
            .iter()
            .map(|v| v.as_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
        let log_z = max + z.ln();
        for j in 0..k {
            let logp = row[j].as_f64() - log_z;
            probs[i * k + j] = logp.exp();
            let target = off + if j == label { 1.0 - eps } else { 0.0 };
            loss -= target * logp;
        }
    }
    let labels = labels.to_vec();
    Ok(Tensor::from_op(
        vec![T::of(loss / n as f64)],
        vec![],
        "label_smoothing_ce",
        vec![logits.clone()],
        Box::new(move |g, _, _| {
            let scale = g[0].as_f64() / n as f64;
            let grad = probs
                .iter()
                .enumerate()
                .map(|(idx, &p)| {
                    let target = off
                        + if idx % k == labels[idx / k] {
                            1.0 - eps
                        } else {
                            0.0
                        };
                    T::of((p - target) * scale)
                })
                .collect();
            vec![Some(grad)]
        }),
    ))
}
