//! 64-bit finite-difference checks of every differentiable op and of a whole
//! network.

use crate::error::Result;
use crate::model::{build_network, Model, ModelConfig};
use crate::nn::{
    batch_norm_raw, conv2d, global_avg_pool, linear, pool2d, Conv2dParams, NormMode, PoolKind,
};
use crate::params::{Param, ParamId, ParamKind};
use crate::patching::{
    add_positional_encoding, apply_ste_patchwise, merge_patches, split_patches, PePlacement,
    PeTable, PositionalEncoding,
};
use crate::tensor::{grad_check_inputs, grad_check_steps, Tensor};
use crate::train::label_smoothing_ce;
use crate::transformer::{ffn, mhsa, single_head_attention, ste_forward, Activation, STEParams};

/// Worst relative error a check may report.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Central-difference step for single ops.
pub const FD_STEP: f64 = 1e-6;
/// Central-difference steps for whole networks, tried in order per element.
pub const NETWORK_FD_STEPS: [f64; 3] = [1e-4, 1e-5, 1e-3];

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_error: f64,
    /// Number of perturbed scalars.
    pub elements: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_error < GRAD_TOLERANCE
    }
}

/// Smooth, distinct, kink-avoiding test values.
fn probe(shape: &[usize], f: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v = (0..n)
        .map(|i| 0.8 * ((i as f64 + 0.5) * f).sin() + 0.05 * (i as f64 * 0.37).cos())
        .collect();
    Tensor::from_vec(v, shape).expect("probe shape")
}

/// Generic scalar readout so every output element gets a distinct upstream
/// gradient.
fn readout(y: &Tensor<f64>) -> Result<Tensor<f64>> {
    Ok(y.mul(&probe(y.shape(), 0.91))?.sum())
}

fn check(
    name: &str,
    inputs: Vec<Tensor<f64>>,
    f: impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
) -> Result<CheckResult> {
    let elements = inputs.iter().map(|t| t.numel()).sum();
    let max_error = grad_check_inputs(|xs| readout(&f(xs)?), &inputs, FD_STEP)?;
    Ok(CheckResult {
        name: name.to_string(),
        max_error,
        elements,
    })
}

/// Encoder weights laid out as a flat list: `[wq, wk, wv, bq, bv, wo, bo, w1,
/// b1, w2, b2, g1, n1, g2, n2]`.
fn ste_inputs(c: usize, f: usize) -> Vec<Tensor<f64>> {
    let mut v = vec![
        probe(&[c, c], 0.71).scale(0.6),
        probe(&[c, c], 1.13).scale(0.6),
        probe(&[c, c], 0.37).scale(0.6),
        probe(&[c], 0.9).scale(0.1),
        probe(&[c], 1.7).scale(0.1),
        probe(&[c, c], 0.53).scale(0.6),
        probe(&[c], 2.3).scale(0.1),
        probe(&[c, f], 0.29).scale(0.6),
        probe(&[f], 0.61).scale(0.1),
        probe(&[f, c], 0.83).scale(0.6),
        probe(&[c], 1.9).scale(0.1),
    ];
    v.push(probe(&[c], 0.4).scale(0.2).add_scalar(1.0));
    v.push(probe(&[c], 0.8).scale(0.1));
    v.push(probe(&[c], 0.6).scale(0.2).add_scalar(1.0));
    v.push(probe(&[c], 1.2).scale(0.1));
    v
}

fn ste_from(w: &[Tensor<f64>], heads: usize, pe: PositionalEncoding<f64>) -> STEParams<f64> {
    STEParams {
        wq: w[0].clone(),
        wk: w[1].clone(),
        wv: w[2].clone(),
        bq: Some(w[3].clone()),
        bk: None,
        bv: Some(w[4].clone()),
        wo: w[5].clone(),
        bo: Some(w[6].clone()),
        w1: w[7].clone(),
        b1: Some(w[8].clone()),
        w2: w[9].clone(),
        b2: Some(w[10].clone()),
        ln1: (w[11].clone(), w[12].clone()),
        ln2: (w[13].clone(), w[14].clone()),
        heads,
        activation: Activation::Relu,
        pe,
    }
}

fn with(mut v: Vec<Tensor<f64>>, extra: impl IntoIterator<Item = Tensor<f64>>) -> Vec<Tensor<f64>> {
    v.extend(extra);
    v
}

/// Every differentiable primitive and composite op on small inputs.
pub fn primitive_suite() -> Result<Vec<CheckResult>> {
    let a = probe(&[2, 3, 4], 0.7);
    let b = probe(&[3, 4], 1.3);
    let mut out = vec![
        check("add (broadcast)", vec![a.clone(), b.clone()], |x| {
            x[0].add(&x[1])
        })?,
        check("sub (broadcast)", vec![a.clone(), b.clone()], |x| {
            x[0].sub(&x[1])
        })?,
        check("mul (broadcast)", vec![a.clone(), b.clone()], |x| {
            x[0].mul(&x[1])
        })?,
        check("mul (scalar)", vec![a.clone(), probe(&[], 0.4)], |x| {
            x[0].mul(&x[1])
        })?,
        check("scale", vec![a.clone()], |x| Ok(x[0].scale(-1.7)))?,
        check("add_scalar", vec![a.clone()], |x| Ok(x[0].add_scalar(0.3)))?,
        check("relu", vec![a.clone()], |x| Ok(x[0].relu()))?,
        check("sum", vec![a.clone()], |x| x[0].sum().mul(&x[0].sum()))?,
        check("mean", vec![a.clone()], |x| x[0].mean().mul(&x[0].mean()))?,
        check("reshape", vec![a.clone()], |x| x[0].reshape(&[4, 6]))?,
        check("permute", vec![a.clone()], |x| x[0].permute(&[2, 0, 1]))?,
        check("transpose", vec![a.clone()], |x| x[0].transpose(1, 2))?,
        check("narrow", vec![a.clone()], |x| x[0].narrow(2, 1, 2))?,
        check("cat", vec![a.clone(), probe(&[2, 1, 4], 2.1)], |x| {
            Tensor::cat(&[x[0].clone(), x[1].clone()], 1)
        })?,
        check(
            "matmul (shared rhs)",
            vec![a.clone(), probe(&[4, 5], 0.3)],
            |x| x[0].matmul(&x[1]),
        )?,
        check(
            "matmul (batched)",
            vec![a.clone(), probe(&[2, 4, 5], 0.45)],
            |x| x[0].matmul(&x[1]),
        )?,
        check("softmax", vec![a.scale(2.0)], |x| x[0].softmax(2))?,
        check(
            "layer_norm",
            vec![
                a.clone(),
                probe(&[4], 0.2).add_scalar(1.0),
                probe(&[4], 0.6),
            ],
            |x| x[0].layer_norm(&x[1], &x[2], 1e-5),
        )?,
    ];

    let img = probe(&[2, 4, 6, 6], 0.23);
    out.extend([
        check(
            "conv2d",
            vec![img.clone(), probe(&[6, 4, 3, 3], 0.17)],
            |x| conv2d(&x[0], &Conv2dParams::new(x[1].clone(), 1, 1, 1)?),
        )?,
        check(
            "conv2d (bias)",
            vec![img.clone(), probe(&[3, 4, 1, 1], 0.5), probe(&[3], 1.1)],
            |x| {
                conv2d(
                    &x[0],
                    &Conv2dParams::new(x[1].clone(), 1, 0, 1)?.with_bias(x[2].clone())?,
                )
            },
        )?,
        check(
            "conv2d (groups 2, stride 2)",
            vec![img.clone(), probe(&[4, 2, 3, 3], 0.31)],
            |x| conv2d(&x[0], &Conv2dParams::new(x[1].clone(), 2, 1, 2)?),
        )?,
        check(
            "conv2d (depthwise)",
            vec![img.clone(), probe(&[4, 1, 3, 3], 0.41)],
            |x| conv2d(&x[0], &Conv2dParams::new(x[1].clone(), 1, 1, 4)?),
        )?,
        check(
            "conv2d (7x7 stride 2)",
            vec![probe(&[1, 3, 9, 9], 0.13), probe(&[2, 3, 7, 7], 0.19)],
            |x| conv2d(&x[0], &Conv2dParams::new(x[1].clone(), 2, 3, 1)?),
        )?,
        check("max_pool", vec![img.clone()], |x| {
            pool2d(&x[0], PoolKind::Max, 3, 2, 1)
        })?,
        check("avg_pool", vec![img.clone()], |x| {
            pool2d(&x[0], PoolKind::Avg, 2, 2, 0)
        })?,
        check("global_avg_pool", vec![img.clone()], |x| {
            global_avg_pool(&x[0])
        })?,
        check(
            "linear",
            vec![probe(&[3, 5], 0.6), probe(&[5, 2], 0.8), probe(&[2], 0.2)],
            |x| linear(&x[0], &x[1], Some(&x[2])),
        )?,
    ]);
    let (rm, rv) = (vec![0.1, -0.2, 0.05, 0.3], vec![1.2, 0.8, 1.5, 0.9]);
    for mode in [NormMode::Train, NormMode::Infer] {
        let name = format!(
            "batch_norm ({})",
            if mode == NormMode::Train {
                "train"
            } else {
                "infer"
            }
        );
        let (rm, rv) = (rm.clone(), rv.clone());
        out.push(check(
            &name,
            vec![
                img.clone(),
                probe(&[4], 0.3).add_scalar(1.0),
                probe(&[4], 0.7),
            ],
            move |x| Ok(batch_norm_raw(&x[0], &x[1], &x[2], &rm, &rv, 0.1, 1e-5, mode)?.0),
        )?);
    }
    out.push(check(
        "label_smoothing_ce",
        vec![probe(&[3, 4], 1.4)],
        |x| label_smoothing_ce(&x[0], &[1, 3, 0], 0.1),
    )?);

    // patching and positional encodings
    let map = probe(&[2, 4, 4, 4], 0.27);
    out.extend([
        check("split/merge patches", vec![map.clone()], |x| {
            let g = split_patches(&x[0], 2)?;
            let seq = g.sequences()?.mul(&g.sequences()?)?;
            merge_patches(&g.with_sequences(&seq)?)
        })?,
        check(
            "positional encoding (2-D)",
            vec![map.clone(), probe(&[2, 4], 0.5), probe(&[2, 4], 0.9)],
            |x| {
                let pe = PositionalEncoding {
                    table: PeTable::Factored {
                        rows: x[1].clone(),
                        cols: x[2].clone(),
                    },
                    placement: PePlacement::PatchWise,
                };
                merge_patches(&add_positional_encoding(&split_patches(&x[0], 2)?, &pe)?)
            },
        )?,
        check(
            "positional encoding (1-D, image-wise)",
            vec![map.clone(), probe(&[16, 4], 0.35)],
            |x| {
                let pe = PositionalEncoding {
                    table: PeTable::Flat(x[1].clone()),
                    placement: PePlacement::ImageWise,
                };
                merge_patches(&add_positional_encoding(&split_patches(&x[0], 2)?, &pe)?)
            },
        )?,
    ]);

    // attention and encoders
    let seq = probe(&[4, 4], 0.57);
    out.extend([
        check(
            "single-head attention (relative)",
            vec![
                seq.clone(),
                probe(&[4, 2], 0.3),
                probe(&[4, 2], 0.7),
                probe(&[4, 2], 1.1),
                probe(&[7, 2], 0.9),
            ],
            |x| single_head_attention(&x[0], &x[1], &x[2], &x[3], Some(&x[4])),
        )?,
        check(
            "mhsa (2 heads)",
            with(vec![probe(&[2, 4, 4], 0.57)], ste_inputs(4, 8)),
            |x| mhsa(&x[0], &ste_from(&x[1..], 2, PositionalEncoding::none())),
        )?,
        check(
            "ffn",
            with(vec![probe(&[2, 4, 4], 0.61)], ste_inputs(4, 8)),
            |x| ffn(&x[0], &ste_from(&x[1..], 2, PositionalEncoding::none())),
        )?,
        check(
            "ste (relative)",
            with(
                with(vec![probe(&[2, 4, 4], 0.49)], ste_inputs(4, 8)),
                [probe(&[2, 7, 2], 0.8)],
            ),
            |x| {
                let pe = PositionalEncoding {
                    table: PeTable::Relative(x[16].clone()),
                    placement: PePlacement::PatchWise,
                };
                ste_forward(&x[0], &ste_from(&x[1..16], 2, pe))
            },
        )?,
        check(
            "ste patch-wise (2-D encoding)",
            with(
                with(vec![map.clone()], ste_inputs(4, 8)),
                [probe(&[2, 4], 0.5), probe(&[2, 4], 0.9)],
            ),
            |x| {
                let pe = PositionalEncoding {
                    table: PeTable::Factored {
                        rows: x[16].clone(),
                        cols: x[17].clone(),
                    },
                    placement: PePlacement::PatchWise,
                };
                apply_ste_patchwise(&x[0], &ste_from(&x[1..16], 2, pe), 2)
            },
        )?,
    ]);
    Ok(out)
}

/// Model whose parameters are the given tensors, in store order.
fn substitute(m: &Model<f64>, ids: &[ParamId], values: &[Tensor<f64>]) -> Result<Model<f64>> {
    let mut m = m.clone();
    for (&id, v) in ids.iter().zip(values) {
        m.store.replace(id, v.clone())?;
    }
    Ok(m)
}

/// Values of order `1/sqrt(fan_in)` for weights, near one for gains and
/// small for the rest. Freshly initialized encoders attend almost uniformly,
/// which leaves query and key gradients near 1e-8 where central differences
/// are dominated by round-off.
fn generic_values(p: &Param<f64>, salt: usize) -> Tensor<f64> {
    let shape = p.tensor.shape();
    let f = 0.3 + 0.618 * ((salt % 97) as f64 + 1.0) / 97.0;
    let v = probe(shape, f);
    match p.kind {
        ParamKind::Weight => {
            let fan_in = if shape.len() == 4 {
                shape[1] * shape[2] * shape[3]
            } else {
                shape[0]
            };
            v.scale(1.5 / (fan_in as f64).sqrt())
        }
        ParamKind::NormGain => v.scale(0.2).add_scalar(1.0),
        ParamKind::Positional => v.scale(0.3),
        ParamKind::Bias | ParamKind::NormBias => v.scale(0.1),
    }
}

/// Checks the gradient of the smoothed cross-entropy of a whole network with
/// respect to every parameter and the input batch, at generic parameter
/// values.
pub fn network_check(
    cfg: &ModelConfig,
    seed: u64,
    batch: usize,
    mode: NormMode,
    steps: &[f64],
) -> Result<CheckResult> {
    let m = build_network::<f64>(cfg, seed)?;
    let ids: Vec<ParamId> = m.store.ids().collect();
    let [h, w] = cfg.input_size;
    let x = probe(&[batch, 3, h, w], 0.173);
    let labels: Vec<usize> = (0..batch).map(|i| i % cfg.num_classes).collect();
    let mut inputs: Vec<Tensor<f64>> = ids
        .iter()
        .map(|&id| generic_values(m.store.param(id), id.index() + seed as usize))
        .collect();
    inputs.push(x);
    let elements = inputs.iter().map(|t| t.numel()).sum();
    let n = ids.len();
    let report = grad_check_steps(
        |xs| {
            let net = substitute(&m, &ids, &xs[..n])?;
            let logits = net.forward(&xs[n], mode)?.logits;
            label_smoothing_ce(&logits, &labels, 0.1)
        },
        &inputs,
        steps,
        GRAD_TOLERANCE,
    )?;
    let (worst_at, worst) = report.iter().enumerate().fold((0, 0.0), |b, (i, c)| {
        if c.max_error > b.1 {
            (i, c.max_error)
        } else {
            b
        }
    });
    let max_error = worst;
    let worst_name = m
        .store
        .params()
        .get(worst_at)
        .map_or("input", |p| p.name.as_str())
        .to_string();
    if std::env::var_os("CONTNET_GRAD_DETAIL").is_some() {
        for (i, c) in report.iter().enumerate() {
            let name = m.store.params().get(i).map_or("input", |p| p.name.as_str());
            eprintln!(
                "{name:48} {:.3e} a={:e} n={:e}",
                c.max_error, c.analytic, c.numeric
            );
        }
        eprintln!("worst: {worst_name}");
    }
    let mode = if mode == NormMode::Train {
        "train"
    } else {
        "infer"
    };
    Ok(CheckResult {
        name: format!("network ({mode} mode)"),
        max_error,
        elements,
    })
}

/// Primitive suite followed by whole-network checks in both norm modes.
pub fn gradient_suite(cfg: &ModelConfig, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = primitive_suite()?;
    out.push(network_check(
        cfg,
        seed,
        4,
        NormMode::Train,
        &NETWORK_FD_STEPS,
    )?);
    out.push(network_check(
        cfg,
        seed,
        2,
        NormMode::Infer,
        &NETWORK_FD_STEPS,
    )?);
    Ok(out)
}
