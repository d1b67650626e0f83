//! Parameter and multiply-accumulate accounting.
//!
//! One multiply-accumulate counts as one FLOP. Layer FLOPs cover convs, the
//! encoder's linear maps and the head. The attention products (query-key
//! logits, weighted values, relative offsets) are tallied separately: the
//! published GFLOP figures and the closed-form encoder cost both leave them
//! out, so golden comparisons use the layer count and reports show both.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{ConvLayer, Model, ModelConfig, SteLayer, Variant};
use crate::nn::window_out;
use crate::params::{Param, ParamId, ParamKind};
use crate::patching::{effective_patch, PeKind};
use crate::tensor::Element;

/// Which parameter classes to count. Weights are always counted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Include {
    pub biases: bool,
    pub norms: bool,
    pub pe: bool,
}

impl Include {
    pub const ALL: Include = Include {
        biases: true,
        norms: true,
        pe: true,
    };

    /// Weight matrices and positional tables only, as in the closed-form
    /// encoder count.
    pub const FORMULA: Include = Include {
        biases: false,
        norms: false,
        pe: true,
    };

    pub fn admits(self, kind: ParamKind) -> bool {
        match kind {
            ParamKind::Weight => true,
            ParamKind::Bias => self.biases,
            ParamKind::NormGain | ParamKind::NormBias => self.norms,
            ParamKind::Positional => self.pe,
        }
    }
}

/// `layers` excludes attention products; `attention` holds them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopCount {
    pub layers: u64,
    pub attention: u64,
}

impl FlopCount {
    pub fn total(self) -> u64 {
        self.layers + self.attention
    }
}

impl std::ops::AddAssign for FlopCount {
    fn add_assign(&mut self, o: FlopCount) {
        self.layers += o.layers;
        self.attention += o.attention;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Ste,
    Linear,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Ste => "ste",
            LayerKind::Linear => "linear",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostRow {
    pub name: String,
    pub kind: LayerKind,
    pub params: usize,
    pub flops: FlopCount,
    /// `[N, C, H, W]` or `[N, K]` leaving the layer.
    pub output_shape: Vec<usize>,
    pub stage: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    pub input_shape: [usize; 4],
    pub include: Include,
}

impl CostReport {
    pub fn total_params(&self) -> usize {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_flops(&self) -> FlopCount {
        let mut t = FlopCount::default();
        self.rows.iter().for_each(|r| t += r.flops);
        t
    }

    /// Spatial extent of the rows tagged with each stage, in order.
    pub fn stage_maps(&self) -> Vec<[usize; 2]> {
        let mut out = Vec::new();
        for s in 1..=4 {
            if let Some(r) = self
                .rows
                .iter()
                .find(|r| r.stage == Some(s) && r.kind == LayerKind::Ste)
            {
                out.push([r.output_shape[2], r.output_shape[3]]);
            }
        }
        out
    }

    /// Aligned plain-text table with a totals line.
    pub fn to_text(&self) -> String {
        let shape = |s: &[usize]| {
            s.iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x")
        };
        let width = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .max()
            .unwrap_or(5)
            .max(5);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:<6}  {:>12}  {:>15}  {:>15}  shape",
            "layer", "kind", "params", "flops", "attn_flops"
        );
        let mut stage = None;
        for r in &self.rows {
            if r.stage != stage {
                if let Some(s) = r.stage {
                    let _ = writeln!(out, "-- stage {s}");
                }
                stage = r.stage;
            }
            let _ = writeln!(
                out,
                "{:<width$}  {:<6}  {:>12}  {:>15}  {:>15}  {}",
                r.name,
                r.kind.as_str(),
                r.params,
                r.flops.layers,
                r.flops.attention,
                shape(&r.output_shape)
            );
        }
        let t = self.total_flops();
        let _ = writeln!(
            out,
            "{:<width$}  {:<6}  {:>12}  {:>15}  {:>15}",
            "total",
            "",
            self.total_params(),
            t.layers,
            t.attention
        );
        out
    }

    /// Tab-separated rows: `layer kind params flops attention_flops shape`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("layer\tkind\tparams\tflops\tattention_flops\tshape\n");
        for r in &self.rows {
            let shape = r
                .output_shape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x");
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.name,
                r.kind.as_str(),
                r.params,
                r.flops.layers,
                r.flops.attention,
                shape
            );
        }
        let t = self.total_flops();
        let _ = writeln!(
            out,
            "total\t\t{}\t{}\t{}\t",
            self.total_params(),
            t.layers,
            t.attention
        );
        out
    }
}

/// Published cost of a named variant: `(GFLOPs, millions of parameters)`.
pub fn golden(variant: Variant) -> Option<(f64, f64)> {
    match variant {
        Variant::Ti => Some((0.8, 5.8)),
        Variant::S => Some((1.5, 10.1)),
        Variant::M => Some((3.1, 19.2)),
        Variant::B => Some((6.4, 39.6)),
        Variant::Custom => None,
    }
}

/// Relative deviation `(measured - reference) / reference`.
pub fn deviation(measured: f64, reference: f64) -> f64 {
    (measured - reference) / reference
}

/// `2·D·D_ffn + 4·D² + P²·D`.
pub fn ste_param_formula(d: usize, d_ffn: usize, p: usize) -> u64 {
    let (d, f, p) = (d as u64, d_ffn as u64, p as u64);
    2 * d * f + 4 * d * d + p * p * d
}

/// `2·D·D_ffn·HW + 4·D²·HW + HW/P²` with integer division in the last term.
pub fn ste_flops_formula(d: usize, d_ffn: usize, p: usize, h: usize, w: usize) -> u64 {
    let (d, f, p, hw) = (d as u64, d_ffn as u64, p as u64, (h * w) as u64);
    2 * d * f * hw + 4 * d * d * hw + hw / (p * p)
}

fn admitted<T: Element>(m: &Model<T>, ids: &[ParamId], include: Include) -> usize {
    ids.iter()
        .map(|&id| m.store.param(id))
        .filter(|p: &&Param<T>| include.admits(p.kind))
        .map(|p| p.tensor.numel())
        .sum()
}

fn conv_ids(c: &ConvLayer) -> Vec<ParamId> {
    let mut ids = vec![c.weight];
    if let Some(n) = &c.norm {
        ids.extend([n.gain, n.bias]);
    }
    ids
}

/// Every parameter of one encoder.
pub fn ste_ids(s: &SteLayer) -> Vec<ParamId> {
    let mut ids = vec![
        s.wq, s.wk, s.wv, s.wo, s.w1, s.w2, s.ln1.0, s.ln1.1, s.ln2.0, s.ln2.1,
    ];
    ids.extend([s.bq, s.bv, s.bo, s.b1, s.b2].into_iter().flatten());
    match &s.pe {
        crate::model::PeParams::None => {}
        crate::model::PeParams::Flat(t) | crate::model::PeParams::Relative(t) => ids.push(*t),
        crate::model::PeParams::Factored { rows, cols } => ids.extend([*rows, *cols]),
    }
    ids
}

/// Parameters of one encoder under `include`.
pub fn ste_layer_params<T: Element>(m: &Model<T>, s: &SteLayer, include: Include) -> usize {
    admitted(m, &ste_ids(s), include)
}

fn conv_row<T: Element>(
    m: &Model<T>,
    c: &ConvLayer,
    input: [usize; 4],
    include: Include,
    stage: Option<usize>,
) -> Result<CostRow> {
    let w = m.store.get(c.weight).shape();
    let (c_out, c_in_g, k) = (w[0], w[1], w[2]);
    if input[1] != c_in_g * c.groups {
        return Err(Error::shape("conv accounting", &input, w));
    }
    let out_hw = |v: usize| {
        window_out(v, k, c.stride, c.padding).ok_or_else(|| {
            Error::invalid(
                "conv accounting",
                format!("{} does not fit a {k}x{k} window", c.name),
            )
        })
    };
    let (h, wd) = (out_hw(input[2])?, out_hw(input[3])?);
    let (_, macs) = conv_cost(c_in_g * c.groups, c_out, k, c.groups, [h, wd], input[0]);
    Ok(CostRow {
        name: c.name.clone(),
        kind: LayerKind::Conv,
        params: admitted(m, &conv_ids(c), include),
        flops: FlopCount {
            layers: macs,
            attention: 0,
        },
        output_shape: vec![input[0], c_out, h, wd],
        stage,
    })
}

fn ste_row<T: Element>(
    m: &Model<T>,
    s: &SteLayer,
    input: [usize; 4],
    include: Include,
    stage: usize,
) -> Result<CostRow> {
    let [n, c, h, w] = input;
    let p = effective_patch(s.patch, h, w);
    if h % p != 0 || w % p != 0 {
        return Err(Error::PatchDivisibility {
            stage: Some(stage),
            height: h,
            width: w,
            patch: s.patch,
        });
    }
    let d = m.store.get(s.wq).shape()[1];
    let f = m.store.get(s.w1).shape()[1];
    let tokens = (n * h * w) as u64;
    let (c, d, f, l) = (c as u64, d as u64, f as u64, (p * p) as u64);
    let linear = tokens * (3 * c * d + d * c + 2 * c * f);
    let mut attention = tokens * 2 * l * d;
    if matches!(s.pe, crate::model::PeParams::Relative(_)) {
        attention += tokens * (2 * l - 1) * d;
    }
    Ok(CostRow {
        name: s.name.clone(),
        kind: LayerKind::Ste,
        params: ste_layer_params(m, s, include),
        flops: FlopCount {
            layers: linear,
            attention,
        },
        output_shape: input.to_vec(),
        stage: Some(stage),
    })
}

/// Per-layer accounting for an `[N, 3, H, W]` input.
pub fn summarize<T: Element>(
    m: &Model<T>,
    input_shape: [usize; 4],
    include: Include,
) -> Result<CostReport> {
    if input_shape[1] != 3 || input_shape.contains(&0) {
        return Err(Error::invalid(
            "summarize",
            format!("expected [N, 3, H, W], got {input_shape:?}"),
        ));
    }
    let mut rows = Vec::new();
    let as4 = |s: &[usize]| [s[0], s[1], s[2], s[3]];
    let stem = conv_row(m, &m.stem, input_shape, include, None)?;
    let pooled = |v: usize| window_out(v, 3, 2, 1).unwrap_or(0);
    let mut x = [
        input_shape[0],
        stem.output_shape[1],
        pooled(stem.output_shape[2]),
        pooled(stem.output_shape[3]),
    ];
    if x[2] == 0 || x[3] == 0 {
        return Err(Error::invalid(
            "summarize",
            format!("input {input_shape:?} is too small"),
        ));
    }
    rows.push(stem);
    if let Some(p) = &m.stem_projection {
        let r = conv_row(m, p, x, include, None)?;
        x = as4(&r.output_shape);
        rows.push(r);
    }
    for (si, blocks) in m.stages.iter().enumerate() {
        let stage = si + 1;
        for b in blocks {
            rows.push(ste_row(m, &b.ste1, x, include, stage)?);
            rows.push(ste_row(m, &b.ste2, x, include, stage)?);
            let mut y = x;
            for c in b.conv.layers() {
                let r = conv_row(m, c, y, include, Some(stage))?;
                y = as4(&r.output_shape);
                rows.push(r);
            }
            if let Some(s) = &b.shortcut {
                let r = conv_row(m, s, x, include, Some(stage))?;
                if r.output_shape != y {
                    return Err(Error::shape("shortcut accounting", &r.output_shape, &y));
                }
                rows.push(r);
            }
            x = y;
        }
    }
    let classes = m.config.num_classes;
    rows.push(CostRow {
        name: "head".into(),
        kind: LayerKind::Linear,
        params: admitted(m, &[m.head_weight, m.head_bias], include),
        flops: FlopCount {
            layers: (x[0] * x[1] * classes) as u64,
            attention: 0,
        },
        output_shape: vec![x[0], classes],
        stage: None,
    });
    Ok(CostReport {
        rows,
        input_shape,
        include,
    })
}

pub fn count_params<T: Element>(m: &Model<T>, include: Include) -> usize {
    m.store.count(|p| include.admits(p.kind))
}

pub fn count_flops<T: Element>(m: &Model<T>, input_shape: [usize; 4]) -> Result<FlopCount> {
    Ok(summarize(m, input_shape, Include::ALL)?.total_flops())
}

/// Weight count and multiply-accumulates of a bias-free `k x k` conv with
/// `groups` groups producing `batch` maps of `out_hw`.
pub fn conv_cost(
    c_in: usize,
    c_out: usize,
    k: usize,
    groups: usize,
    out_hw: [usize; 2],
    batch: usize,
) -> (u64, u64) {
    let weights = (c_out * (c_in / groups) * k * k) as u64;
    (weights, weights * (batch * out_hw[0] * out_hw[1]) as u64)
}

/// Strict, 1-D-table version of a config, the setting in which measured
/// encoder parameters follow the closed form exactly.
pub fn formula_audit_config(base: &ModelConfig) -> ModelConfig {
    let mut c = base.clone();
    c.strict_formula = true;
    c.pe_kind = PeKind::Learnable1d;
    c
}

/// One encoder of a formula audit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuditRow {
    pub name: String,
    pub width: usize,
    pub ffn_width: usize,
    pub patch: usize,
    pub measured: u64,
    pub formula: u64,
}

/// Measured encoder parameters against [`ste_param_formula`] for every
/// encoder of `m`.
pub fn formula_audit<T: Element>(m: &Model<T>) -> Result<Vec<AuditRow>> {
    let sizes = m.config.stage_sizes()?;
    let mut rows = Vec::new();
    for (s, b) in m.blocks() {
        let spec = &m.config.stages[s];
        for ste in [&b.ste1, &b.ste2] {
            let p = effective_patch(ste.patch, sizes[s][0], sizes[s][1]);
            rows.push(AuditRow {
                name: ste.name.clone(),
                width: spec.width,
                ffn_width: spec.ffn_width,
                patch: p,
                measured: ste_layer_params(m, ste, Include::FORMULA) as u64,
                formula: ste_param_formula(spec.width, spec.ffn_width, p),
            });
        }
    }
    Ok(rows)
}
