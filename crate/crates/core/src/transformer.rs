//! Standard transformer encoder: post-norm multi-head self-attention followed
//! by a post-norm two-layer feed-forward network.

use crate::error::{Error, Result};
use crate::nn::linear;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::patching::{PeKind, PePlacement, PeTable, PositionalEncoding};
use crate::tensor::{Element, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// Nonlinearity between the two FFN maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// No nonlinearity; the FFN is a product of two linear maps.
    Identity,
}

/// Weights of one encoder. Projections are `[in, out]`.
#[derive(Clone, Debug)]
pub struct STEParams<T: Element> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bq: Option<Tensor<T>>,
    pub bk: Option<Tensor<T>>,
    pub bv: Option<Tensor<T>>,
    /// Output projection `[D, C]`.
    pub wo: Tensor<T>,
    pub bo: Option<Tensor<T>>,
    pub w1: Tensor<T>,
    pub b1: Option<Tensor<T>>,
    pub w2: Tensor<T>,
    pub b2: Option<Tensor<T>>,
    pub ln1: (Tensor<T>, Tensor<T>),
    pub ln2: (Tensor<T>, Tensor<T>),
    pub heads: usize,
    pub activation: Activation,
    pub pe: PositionalEncoding<T>,
}

impl<T: Element> STEParams<T> {
    pub fn channels(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.wq.shape()[1]
    }

    pub fn ffn_width(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn head_dim(&self) -> usize {
        self.width() / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let (c, d, f) = (self.channels(), self.width(), self.ffn_width());
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::invalid(
                "STE",
                format!("width {d} is not divisible by {} heads", self.heads),
            ));
        }
        let expect = |t: &Tensor<T>, shape: &[usize], what: &str| {
            if t.shape() != shape {
                Err(Error::invalid(
                    "STE",
                    format!("{what} has shape {:?}, expected {shape:?}", t.shape()),
                ))
            } else {
                Ok(())
            }
        };
        expect(&self.wk, &[c, d], "W_k")?;
        expect(&self.wv, &[c, d], "W_v")?;
        expect(&self.wo, &[d, c], "W_o")?;
        expect(&self.w2, &[f, c], "W_2")?;
        for (b, n, what) in [
            (&self.bq, d, "b_q"),
            (&self.bk, d, "b_k"),
            (&self.bv, d, "b_v"),
            (&self.bo, c, "b_o"),
            (&self.b1, f, "b_1"),
            (&self.b2, c, "b_2"),
        ] {
            if let Some(b) = b {
                expect(b, &[n], what)?;
            }
        }
        for (t, what) in [
            (&self.ln1.0, "ln1 gain"),
            (&self.ln1.1, "ln1 bias"),
            (&self.ln2.0, "ln2 gain"),
            (&self.ln2.1, "ln2 bias"),
        ] {
            expect(t, &[c], what)?;
        }
        if let PeTable::Relative(t) = &self.pe.table {
            let s = t.shape();
            if s.len() != 3 || s[0] != self.heads || s[2] != self.head_dim() || s[1] % 2 == 0 {
                return Err(Error::invalid(
                    "STE",
                    format!(
                        "relative table {s:?} does not fit {} heads of width {}",
                        self.heads,
                        self.head_dim()
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// Attention probabilities captured during a forward pass.
#[derive(Clone, Debug)]
pub struct AttentionTrace<T: Element> {
    /// `[B, H, L, L]`; row `i` of head `h` holds the weights query `i` puts
    /// on each key.
    pub weights: Tensor<T>,
}

impl<T: Element> AttentionTrace<T> {
    pub fn max_row_sum_error(&self) -> f64 {
        let l = *self.weights.shape().last().unwrap_or(&1);
        self.weights
            .data()
            .chunks(l)
            .map(|row| (row.iter().map(|v| v.as_f64()).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Turns per-query offset logits `[.., L, 2L-1]` into `[.., L, L]` with
/// `out[i, j] = table[i, j - i + L - 1]`.
fn gather_relative<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape().to_vec();
    let r = s.len();
    if r < 2 || s[r - 1] + 1 != 2 * s[r - 2] {
        return Err(Error::invalid(
            "gather_relative",
            format!("expected [.., L, 2L-1], got {s:?}"),
        ));
    }
    let l = s[r - 2];
    let w = 2 * l - 1;
    let outer: usize = s[..r - 2].iter().product();
    let src = x.data();
    let mut out = Vec::with_capacity(outer * l * l);
    for o in 0..outer {
        for i in 0..l {
            let row = &src[(o * l + i) * w..][..w];
            out.extend((0..l).map(|j| row[j + l - 1 - i]));
        }
    }
    let mut shape = s[..r - 2].to_vec();
    shape.extend([l, l]);
    Ok(Tensor::from_op(
        out,
        shape,
        "gather_relative",
        vec![x.clone()],
        Box::new(move |g, _, _| {
            let mut gx = vec![T::zero(); outer * l * w];
            for o in 0..outer {
                for i in 0..l {
                    for j in 0..l {
                        gx[(o * l + i) * w + j + l - 1 - i] += g[(o * l + i) * l + j];
                    }
                }
            }
            vec![Some(gx)]
        }),
    ))
}

/// Scaled dot-product attention over `[B, H, L, D_h]` inputs.
///
/// `rel` is a `[H, 2L-1, D_h]` key-offset table whose logits `q·r_{j-i}` are
/// added to the scaled content logits.
fn attend<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    rel: Option<&Tensor<T>>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = q.shape().to_vec();
    let (b, h, l, dh) = (s[0], s[1], s[2], s[3]);
    let mut logits = q
        .matmul(&k.permute(&[0, 1, 3, 2])?)?
        .scale(1.0 / (dh as f64).sqrt());
    if let Some(table) = rel {
        if table.shape() != [h, 2 * l - 1, dh] {
            return Err(Error::shape("relative attention", &s, table.shape()));
        }
        let per_head = q.permute(&[1, 0, 2, 3])?.reshape(&[h, b * l, dh])?;
        let offsets = per_head
            .matmul(&table.permute(&[0, 2, 1])?)?
            .reshape(&[h, b, l, 2 * l - 1])?
            .permute(&[1, 0, 2, 3])?;
        logits = logits.add(&gather_relative(&offsets)?)?;
    }
    let attn = logits.softmax(3)?;
    Ok((attn.matmul(v)?, attn))
}

/// One attention head on a `[L, C]` sequence with `[C, D_h]` projections.
pub fn single_head_attention<T: Element>(
    x: &Tensor<T>,
    wq: &Tensor<T>,
    wk: &Tensor<T>,
    wv: &Tensor<T>,
    rel: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return Err(Error::invalid(
            "single_head_attention",
            format!("expected [L, C], got {:?}", x.shape()),
        ));
    }
    let l = x.shape()[0];
    let head = |w: &Tensor<T>| -> Result<Tensor<T>> {
        let y = linear(x, w, None)?;
        let dh = y.shape()[1];
        y.reshape(&[1, 1, l, dh])
    };
    let (q, k, v) = (head(wq)?, head(wk)?, head(wv)?);
    let dh = q.shape()[3];
    let rel = match rel {
        Some(t) => Some(t.reshape(&[1, t.shape()[0], t.shape()[1]])?),
        None => None,
    };
    let (out, _) = attend(&q, &k, &v, rel.as_ref())?;
    out.reshape(&[l, dh])
}

/// `[L, C]` becomes `[1, L, C]`; `[B, L, C]` passes through.
fn as_batch<T: Element>(x: &Tensor<T>, op: &'static str) -> Result<(Tensor<T>, bool)> {
    match x.rank() {
        2 => Ok((x.reshape(&[1, x.shape()[0], x.shape()[1]])?, true)),
        3 => Ok((x.clone(), false)),
        _ => Err(Error::invalid(
            op,
            format!("expected [L, C] or [B, L, C], got {:?}", x.shape()),
        )),
    }
}

fn unbatch<T: Element>(y: Tensor<T>, squeeze: bool) -> Result<Tensor<T>> {
    if squeeze {
        let s = y.shape().to_vec();
        y.reshape(&s[1..])
    } else {
        Ok(y)
    }
}

/// `LN(concat_h(attention_h) W_o + x)` over `[L, C]` or `[B, L, C]`.
pub fn mhsa<T: Element>(x: &Tensor<T>, p: &STEParams<T>) -> Result<Tensor<T>> {
    mhsa_traced(x, p, None)
}

fn mhsa_traced<T: Element>(
    x: &Tensor<T>,
    p: &STEParams<T>,
    trace: Option<&mut Option<AttentionTrace<T>>>,
) -> Result<Tensor<T>> {
    p.validate()?;
    let (xb, squeeze) = as_batch(x, "mhsa")?;
    let s = xb.shape().to_vec();
    let (b, l, c) = (s[0], s[1], s[2]);
    if c != p.channels() {
        return Err(Error::shape("mhsa", &s, p.wq.shape()));
    }
    let (h, dh, d) = (p.heads, p.head_dim(), p.width());
    let split_heads = |w: &Tensor<T>, bias: Option<&Tensor<T>>| -> Result<Tensor<T>> {
        linear(&xb, w, bias)?
            .reshape(&[b, l, h, dh])?
            .permute(&[0, 2, 1, 3])
    };
    let q = split_heads(&p.wq, p.bq.as_ref())?;
    let k = split_heads(&p.wk, p.bk.as_ref())?;
    let v = split_heads(&p.wv, p.bv.as_ref())?;
    let rel = match &p.pe.table {
        PeTable::Relative(t) => Some(t),
        _ => None,
    };
    let (heads, attn) = attend(&q, &k, &v, rel)?;
    if let Some(slot) = trace {
        *slot = Some(AttentionTrace {
            weights: attn.detach(),
        });
    }
    let merged = heads.permute(&[0, 2, 1, 3])?.reshape(&[b, l, d])?;
    let y = linear(&merged, &p.wo, p.bo.as_ref())?
        .add(&xb)?
        .layer_norm(&p.ln1.0, &p.ln1.1, LN_EPS)?;
    unbatch(y, squeeze)
}

/// `LN(W_2 act(W_1 x) + x)` over the last axis.
pub fn ffn<T: Element>(x: &Tensor<T>, p: &STEParams<T>) -> Result<Tensor<T>> {
    let hidden = linear(x, &p.w1, p.b1.as_ref())?;
    let hidden = match p.activation {
        Activation::Relu => hidden.relu(),
        Activation::Identity => hidden,
    };
    linear(&hidden, &p.w2, p.b2.as_ref())?
        .add(x)?
        .layer_norm(&p.ln2.0, &p.ln2.1, LN_EPS)
}

/// `FFN(MHSA(x + PE))` on one `[L, C]` sequence or a `[B, L, C]` batch.
///
/// Patch-wise tables must have `L` rows. Image-wise tables are skipped here:
/// they belong to the whole map and are added by the patch-wise driver.
pub fn ste_forward<T: Element>(seq: &Tensor<T>, p: &STEParams<T>) -> Result<Tensor<T>> {
    ste_body(seq, p, p.pe.placement == PePlacement::PatchWise, None)
}

/// [`ste_forward`] that also returns the attention probabilities.
pub fn ste_forward_traced<T: Element>(
    seq: &Tensor<T>,
    p: &STEParams<T>,
) -> Result<(Tensor<T>, AttentionTrace<T>)> {
    let mut slot = None;
    let y = ste_body(
        seq,
        p,
        p.pe.placement == PePlacement::PatchWise,
        Some(&mut slot),
    )?;
    Ok((y, slot.expect("attention was traced")))
}

pub(crate) fn ste_body<T: Element>(
    seq: &Tensor<T>,
    p: &STEParams<T>,
    add_pe: bool,
    trace: Option<&mut Option<AttentionTrace<T>>>,
) -> Result<Tensor<T>> {
    let mut x = seq.clone();
    if add_pe {
        if let Some(table) = p.pe.offsets()? {
            let l = seq.shape()[seq.rank().saturating_sub(2)];
            if table.shape() != [l, p.channels()] {
                return Err(Error::shape(
                    "positional encoding",
                    seq.shape(),
                    table.shape(),
                ));
            }
            x = x.add(&table)?;
        }
    }
    ffn(&mhsa_traced(&x, p, trace)?, p)
}

/// Tensor of normal draws.
fn gaussian<T: Element>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64, mean: f64) -> Tensor<T> {
    let dist = Normal::new(mean, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| T::of(dist.sample(rng))).collect(), shape)
        .expect("shape matches")
}

impl<T: Element> STEParams<T> {
    /// Standalone encoder with `1/√fan_in` Gaussian projections, small random
    /// biases and near-one norm gains, ReLU and no positional encoding.
    /// Meant for experiments on a single encoder away from a full network.
    pub fn seeded(
        channels: usize,
        width: usize,
        ffn_width: usize,
        heads: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let (c, d, f) = (channels, width, ffn_width);
        let proj = |r: &mut ChaCha8Rng, i: usize, o: usize| {
            gaussian(r, &[i, o], 1.0 / (i as f64).sqrt(), 0.0)
        };
        STEParams {
            wq: proj(r, c, d),
            wk: proj(r, c, d),
            wv: proj(r, c, d),
            bq: Some(gaussian(r, &[d], 0.1, 0.0)),
            bk: None,
            bv: Some(gaussian(r, &[d], 0.1, 0.0)),
            wo: proj(r, d, c),
            bo: Some(gaussian(r, &[c], 0.1, 0.0)),
            w1: proj(r, c, f),
            b1: Some(gaussian(r, &[f], 0.1, 0.0)),
            w2: proj(r, f, c),
            b2: Some(gaussian(r, &[c], 0.1, 0.0)),
            ln1: (gaussian(r, &[c], 0.1, 1.0), gaussian(r, &[c], 0.1, 0.0)),
            ln2: (gaussian(r, &[c], 0.1, 1.0), gaussian(r, &[c], 0.1, 0.0)),
            heads,
            activation: Activation::Relu,
            pe: PositionalEncoding::none(),
        }
    }

    pub fn with_pe(mut self, pe: PositionalEncoding<T>) -> Self {
        self.pe = pe;
        self
    }
}

impl<T: Element> PositionalEncoding<T> {
    /// Random table of `kind` covering `[rows, cols]` positions: one patch
    /// for patch-wise placement, the whole map for image-wise. Relative
    /// tables get one offset row per head of `width / heads` values.
    pub fn seeded(
        kind: PeKind,
        placement: PePlacement,
        [rows, cols]: [usize; 2],
        width: usize,
        heads: usize,
        std: f64,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = match kind {
            PeKind::None => PeTable::None,
            PeKind::Learnable1d => {
                PeTable::Flat(gaussian(&mut rng, &[rows * cols, width], std, 0.0))
            }
            PeKind::Learnable2d => PeTable::Factored {
                rows: gaussian(&mut rng, &[rows, width], std, 0.0),
                cols: gaussian(&mut rng, &[cols, width], std, 0.0),
            },
            PeKind::Relative => PeTable::Relative(gaussian(
                &mut rng,
                &[heads, 2 * rows * cols - 1, width / heads.max(1)],
                std,
                0.0,
            )),
        };
        PositionalEncoding { table, placement }
    }
}
