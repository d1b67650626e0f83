//! ConTNet assembly: stem, four stages of ConT blocks and a linear head.
//!
//! A ConT block runs two patch-wise encoders and then a 3x3 conv, wrapped in a
//! residual: `y = shortcut(x) + conv(ste2(ste1(x)))`. The last block of stages
//! 1-3 downsamples with a stride-2 conv and a 1x1 stride-2 projection
//! shortcut. The last block of stage 4 uses a 1x1 conv that widens by
//! `final_expansion`, again with a projection shortcut.

mod config;

pub use config::{
    ablation_choices, make_ablation_config, AblationAxis, ConvGroups, ModelConfig, ModelOverrides,
    PatchArrangement, StageSpec, Variant,
};

use crate::error::{Error, Result};
use crate::nn::{
    batch_norm_raw, conv2d, global_avg_pool, linear, pool2d, Conv2dParams, NormMode, PoolKind,
    BN_EPS, BN_MOMENTUM,
};
use crate::params::{BufferId, Init, ParamGroup, ParamId, ParamKind, ParameterStore};
use crate::patching::{
    apply_ste_patchwise, effective_patch, PeKind, PePlacement, PeTable, PositionalEncoding,
};
use crate::tensor::{Element, Tensor};
use crate::transformer::{Activation, STEParams};

const STE_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct NormLayer {
    pub gain: ParamId,
    pub bias: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub name: String,
    pub weight: ParamId,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub norm: Option<NormLayer>,
}

/// The spatial conv of a block.
#[derive(Clone, Debug)]
pub enum BlockConv {
    Plain(ConvLayer),
    Separable {
        depthwise: ConvLayer,
        pointwise: ConvLayer,
    },
}

impl BlockConv {
    pub fn layers(&self) -> Vec<&ConvLayer> {
        match self {
            BlockConv::Plain(c) => vec![c],
            BlockConv::Separable {
                depthwise,
                pointwise,
            } => vec![depthwise, pointwise],
        }
    }
}

#[derive(Clone, Debug)]
pub enum PeParams {
    None,
    Flat(ParamId),
    Factored { rows: ParamId, cols: ParamId },
    Relative(ParamId),
}

#[derive(Clone, Debug)]
pub struct SteLayer {
    pub name: String,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub bq: Option<ParamId>,
    pub bv: Option<ParamId>,
    pub wo: ParamId,
    pub bo: Option<ParamId>,
    pub w1: ParamId,
    pub b1: Option<ParamId>,
    pub w2: ParamId,
    pub b2: Option<ParamId>,
    pub ln1: (ParamId, ParamId),
    pub ln2: (ParamId, ParamId),
    pub heads: usize,
    pub activation: Activation,
    pub pe: PeParams,
    pub placement: PePlacement,
    /// Requested patch size; clamped to the map at run time.
    pub patch: usize,
}

#[derive(Clone, Debug)]
pub struct ConTBlock {
    pub name: String,
    pub ste1: SteLayer,
    pub ste2: SteLayer,
    pub conv: BlockConv,
    /// `None` is the identity shortcut.
    pub shortcut: Option<ConvLayer>,
}

/// A built network: structure plus the parameter store it indexes into.
#[derive(Clone, Debug)]
pub struct Model<T: Element = f32> {
    pub config: ModelConfig,
    pub store: ParameterStore<T>,
    pub stem: ConvLayer,
    /// 1x1 conv bridging a stem narrower or wider than stage 1.
    pub stem_projection: Option<ConvLayer>,
    pub stages: Vec<Vec<ConTBlock>>,
    pub head_weight: ParamId,
    pub head_bias: ParamId,
}

/// Result of [`Model::forward`].
#[derive(Clone, Debug)]
pub struct ForwardOutput<T: Element> {
    pub logits: Tensor<T>,
    /// `[N, C, H, W]` entering each stage, then the final feature map.
    pub trace: Vec<(String, Vec<usize>)>,
    /// New running statistics from train-mode batch norm.
    pub norm_updates: Vec<(BufferId, Vec<T>)>,
}

struct Builder<'a, T: Element> {
    store: &'a mut ParameterStore<T>,
    cfg: &'a ModelConfig,
}

impl<T: Element> Builder<'_, T> {
    fn conv(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        groups: usize,
    ) -> ConvLayer {
        let weight = self.store.add(
            format!("{name}.weight"),
            ParamGroup::Conv,
            ParamKind::Weight,
            &[c_out, c_in / groups, k, k],
            Init::KaimingFanOut {
                fan_out: c_out * k * k,
            },
        );
        let norm = (!self.cfg.strict_formula).then(|| NormLayer {
            gain: self.store.add(
                format!("{name}.bn.gain"),
                ParamGroup::Conv,
                ParamKind::NormGain,
                &[c_out],
                Init::Ones,
            ),
            bias: self.store.add(
                format!("{name}.bn.bias"),
                ParamGroup::Conv,
                ParamKind::NormBias,
                &[c_out],
                Init::Zeros,
            ),
            running_mean: self.store.add_buffer(
                format!("{name}.bn.running_mean"),
                &[c_out],
                T::zero(),
            ),
            running_var: self.store.add_buffer(
                format!("{name}.bn.running_var"),
                &[c_out],
                T::one(),
            ),
        });
        ConvLayer {
            name: name.to_string(),
            weight,
            stride,
            padding: k / 2,
            groups,
            norm,
        }
    }

    fn block_conv(&mut self, name: &str, c_in: usize, c_out: usize, stride: usize) -> BlockConv {
        match self.cfg.conv_groups {
            ConvGroups::Groups(g) => BlockConv::Plain(self.conv(name, c_in, c_out, 3, stride, g)),
            ConvGroups::Depthwise => BlockConv::Separable {
                depthwise: self.conv(&format!("{name}.depthwise"), c_in, c_in, 3, stride, c_in),
                pointwise: self.conv(&format!("{name}.pointwise"), c_in, c_out, 1, 1, 1),
            },
        }
    }

    fn weight(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.store.add(
            name,
            ParamGroup::Ste,
            ParamKind::Weight,
            shape,
            Init::TruncNormal { std: STE_STD },
        )
    }

    fn bias(&mut self, name: String, n: usize) -> Option<ParamId> {
        (!self.cfg.strict_formula).then(|| {
            self.store
                .add(name, ParamGroup::Ste, ParamKind::Bias, &[n], Init::Zeros)
        })
    }

    fn norm(&mut self, name: &str, c: usize) -> (ParamId, ParamId) {
        (
            self.store.add(
                format!("{name}.gain"),
                ParamGroup::Ste,
                ParamKind::NormGain,
                &[c],
                Init::Ones,
            ),
            self.store.add(
                format!("{name}.bias"),
                ParamGroup::Ste,
                ParamKind::NormBias,
                &[c],
                Init::Zeros,
            ),
        )
    }

    fn ste(&mut self, name: &str, spec: &StageSpec, patch: usize, map: [usize; 2]) -> SteLayer {
        let (c, f, h) = (spec.width, spec.ffn_width, spec.heads);
        let p = effective_patch(patch, map[0], map[1]);
        let wq = self.weight(format!("{name}.q.weight"), &[c, c]);
        let bq = self.bias(format!("{name}.q.bias"), c);
        let wk = self.weight(format!("{name}.k.weight"), &[c, c]);
        let wv = self.weight(format!("{name}.v.weight"), &[c, c]);
        let bv = self.bias(format!("{name}.v.bias"), c);
        let wo = self.weight(format!("{name}.o.weight"), &[c, c]);
        let bo = self.bias(format!("{name}.o.bias"), c);
        let ln1 = self.norm(&format!("{name}.ln1"), c);
        let w1 = self.weight(format!("{name}.ffn1.weight"), &[c, f]);
        let b1 = self.bias(format!("{name}.ffn1.bias"), f);
        let w2 = self.weight(format!("{name}.ffn2.weight"), &[f, c]);
        let b2 = self.bias(format!("{name}.ffn2.bias"), c);
        let ln2 = self.norm(&format!("{name}.ln2"), c);
        let (rows, cols) = match self.cfg.pe_placement {
            PePlacement::PatchWise => (p, p),
            PePlacement::ImageWise => (map[0], map[1]),
        };
        let mut table = |suffix: &str, shape: &[usize]| {
            self.store.add(
                format!("{name}.pe.{suffix}"),
                ParamGroup::Ste,
                ParamKind::Positional,
                shape,
                Init::TruncNormal { std: STE_STD },
            )
        };
        let pe = match self.cfg.pe_kind {
            PeKind::None => PeParams::None,
            PeKind::Learnable1d => PeParams::Flat(table("table", &[rows * cols, c])),
            PeKind::Learnable2d => PeParams::Factored {
                rows: table("rows", &[rows, c]),
                cols: table("cols", &[cols, c]),
            },
            PeKind::Relative => PeParams::Relative(table("relative", &[h, 2 * p * p - 1, c / h])),
        };
        SteLayer {
            name: name.to_string(),
            wq,
            wk,
            wv,
            bq,
            bv,
            wo,
            bo,
            w1,
            b1,
            w2,
            b2,
            ln1,
            ln2,
            heads: h,
            activation: if self.cfg.strict_formula {
                Activation::Identity
            } else {
                Activation::Relu
            },
            pe,
            placement: self.cfg.pe_placement,
            patch,
        }
    }
}

/// Builds and initializes a network from a validated config.
pub fn build_network<T: Element>(cfg: &ModelConfig, seed: u64) -> Result<Model<T>> {
    cfg.validate()?;
    let mut store = ParameterStore::new(seed);
    let sizes = cfg.stage_sizes()?;
    let mut b = Builder {
        store: &mut store,
        cfg,
    };
    let stem = b.conv("stem", 3, cfg.stem_width, 7, 2, 1);
    let first = cfg.stages[0].width;
    let stem_projection = (cfg.stem_width != first)
        .then(|| b.conv("stem.projection", cfg.stem_width, first, 1, 1, 1));
    let mut stages = Vec::with_capacity(4);
    for (s, spec) in cfg.stages.iter().enumerate() {
        let mut blocks = Vec::with_capacity(spec.blocks);
        for (i, &[p1, p2]) in spec.patch_schedule.iter().enumerate() {
            let name = format!("stage{}.block{}", s + 1, i + 1);
            let last = i + 1 == spec.blocks;
            let ste1 = b.ste(&format!("{name}.ste1"), spec, p1, sizes[s]);
            let ste2 = b.ste(&format!("{name}.ste2"), spec, p2, sizes[s]);
            let c = spec.width;
            let (conv, shortcut) = match (last, cfg.stages.get(s + 1)) {
                (false, _) => (b.block_conv(&format!("{name}.conv"), c, c, 1), None),
                (true, Some(next)) => (
                    b.block_conv(&format!("{name}.conv"), c, next.width, 2),
                    Some(b.conv(&format!("{name}.shortcut"), c, next.width, 1, 2, 1)),
                ),
                (true, None) => {
                    let out = c * cfg.final_expansion;
                    let conv = BlockConv::Plain(b.conv(&format!("{name}.conv"), c, out, 1, 1, 1));
                    let shortcut =
                        (out != c).then(|| b.conv(&format!("{name}.shortcut"), c, out, 1, 1, 1));
                    (conv, shortcut)
                }
            };
            blocks.push(ConTBlock {
                name,
                ste1,
                ste2,
                conv,
                shortcut,
            });
        }
        stages.push(blocks);
    }
    let features = cfg.stages[3].width * cfg.final_expansion;
    let head_weight = store.add(
        "head.weight",
        ParamGroup::Conv,
        ParamKind::Weight,
        &[features, cfg.num_classes],
        Init::TruncNormal { std: STE_STD },
    );
    let head_bias = store.add(
        "head.bias",
        ParamGroup::Conv,
        ParamKind::Bias,
        &[cfg.num_classes],
        Init::Zeros,
    );
    Ok(Model {
        config: cfg.clone(),
        store,
        stem,
        stem_projection,
        stages,
        head_weight,
        head_bias,
    })
}

impl<T: Element> Model<T> {
    pub fn num_features(&self) -> usize {
        self.config.stages[3].width * self.config.final_expansion
    }

    /// Encoder weights bound to current parameter values.
    pub fn ste_params(&self, layer: &SteLayer) -> STEParams<T> {
        let get = |id: ParamId| self.store.get(id).clone();
        let opt = |id: Option<ParamId>| id.map(get);
        let table = match &layer.pe {
            PeParams::None => PeTable::None,
            PeParams::Flat(t) => PeTable::Flat(get(*t)),
            PeParams::Factored { rows, cols } => PeTable::Factored {
                rows: get(*rows),
                cols: get(*cols),
            },
            PeParams::Relative(t) => PeTable::Relative(get(*t)),
        };
        STEParams {
            wq: get(layer.wq),
            wk: get(layer.wk),
            wv: get(layer.wv),
            bq: opt(layer.bq),
            bk: None,
            bv: opt(layer.bv),
            wo: get(layer.wo),
            bo: opt(layer.bo),
            w1: get(layer.w1),
            b1: opt(layer.b1),
            w2: get(layer.w2),
            b2: opt(layer.b2),
            ln1: (get(layer.ln1.0), get(layer.ln1.1)),
            ln2: (get(layer.ln2.0), get(layer.ln2.1)),
            heads: layer.heads,
            activation: layer.activation,
            pe: PositionalEncoding {
                table,
                placement: layer.placement,
            },
        }
    }

    pub fn conv_params(&self, layer: &ConvLayer) -> Result<Conv2dParams<T>> {
        Conv2dParams::new(
            self.store.get(layer.weight).clone(),
            layer.stride,
            layer.padding,
            layer.groups,
        )
    }

    /// Conv then batch norm; activation is left to the caller.
    fn conv_norm(
        &self,
        x: &Tensor<T>,
        layer: &ConvLayer,
        mode: NormMode,
        updates: &mut Vec<(BufferId, Vec<T>)>,
    ) -> Result<Tensor<T>> {
        let y = conv2d(x, &self.conv_params(layer)?)?;
        let Some(n) = &layer.norm else {
            return Ok(y);
        };
        let (y, stats) = batch_norm_raw(
            &y,
            self.store.get(n.gain),
            self.store.get(n.bias),
            self.store.buffer(n.running_mean),
            self.store.buffer(n.running_var),
            BN_MOMENTUM,
            BN_EPS,
            mode,
        )?;
        if let Some(s) = stats {
            updates.push((n.running_mean, s.mean));
            updates.push((n.running_var, s.var));
        }
        Ok(y)
    }

    fn act(&self, x: Tensor<T>) -> Tensor<T> {
        if self.config.strict_formula {
            x
        } else {
            x.relu()
        }
    }

    pub fn block_forward(
        &self,
        x: &Tensor<T>,
        block: &ConTBlock,
        mode: NormMode,
        updates: &mut Vec<(BufferId, Vec<T>)>,
    ) -> Result<Tensor<T>> {
        let h = apply_ste_patchwise(x, &self.ste_params(&block.ste1), block.ste1.patch)?;
        let h = apply_ste_patchwise(&h, &self.ste_params(&block.ste2), block.ste2.patch)?;
        let h = match &block.conv {
            BlockConv::Plain(c) => self.conv_norm(&h, c, mode, updates)?,
            BlockConv::Separable {
                depthwise,
                pointwise,
            } => {
                let d = self.act(self.conv_norm(&h, depthwise, mode, updates)?);
                self.conv_norm(&d, pointwise, mode, updates)?
            }
        };
        let skip = match &block.shortcut {
            Some(s) => self.conv_norm(x, s, mode, updates)?,
            None => x.clone(),
        };
        Ok(self.act(h.add(&skip)?))
    }

    /// Logits for an `[N, 3, H, W]` batch.
    pub fn forward(&self, x: &Tensor<T>, mode: NormMode) -> Result<ForwardOutput<T>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::invalid(
                "network_forward",
                format!("expected [N, 3, H, W], got {s:?}"),
            ));
        }
        let mut updates = Vec::new();
        let mut trace = Vec::new();
        let mut h = self.act(self.conv_norm(x, &self.stem, mode, &mut updates)?);
        h = pool2d(&h, PoolKind::Max, 3, 2, 1)?;
        if let Some(p) = &self.stem_projection {
            h = self.act(self.conv_norm(&h, p, mode, &mut updates)?);
        }
        for (si, blocks) in self.stages.iter().enumerate() {
            trace.push((format!("stage{}", si + 1), h.shape().to_vec()));
            for block in blocks {
                h = self
                    .block_forward(&h, block, mode, &mut updates)
                    .map_err(|e| match e {
                        Error::PatchDivisibility {
                            stage: None,
                            height,
                            width,
                            patch,
                        } => Error::PatchDivisibility {
                            stage: Some(si + 1),
                            height,
                            width,
                            patch,
                        },
                        e => e,
                    })?;
            }
        }
        trace.push(("features".to_string(), h.shape().to_vec()));
        let pooled = global_avg_pool(&h)?;
        let logits = linear(
            &pooled,
            self.store.get(self.head_weight),
            Some(self.store.get(self.head_bias)),
        )?;
        Ok(ForwardOutput {
            logits,
            trace,
            norm_updates: updates,
        })
    }

    /// Writes running statistics collected by a train-mode forward.
    pub fn apply_norm_updates(&mut self, updates: Vec<(BufferId, Vec<T>)>) {
        for (id, data) in updates {
            self.store.set_buffer(id, data);
        }
    }

    /// Train-mode forward that also folds batch statistics into the running
    /// ones.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.forward(x, NormMode::Train)?;
        self.apply_norm_updates(out.norm_updates);
        Ok(out.logits)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(x, NormMode::Infer)?.logits)
    }

    pub fn blocks(&self) -> impl Iterator<Item = (usize, &ConTBlock)> {
        self.stages
            .iter()
            .enumerate()
            .flat_map(|(s, b)| b.iter().map(move |blk| (s, blk)))
    }

    /// Every conv layer in registration order.
    pub fn conv_layers(&self) -> Vec<&ConvLayer> {
        let mut out = vec![&self.stem];
        out.extend(self.stem_projection.as_ref());
        for (_, b) in self.blocks() {
            out.extend(b.conv.layers());
            out.extend(b.shortcut.as_ref());
        }
        out
    }

    /// Same weights at another precision.
    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            stem: self.stem.clone(),
            stem_projection: self.stem_projection.clone(),
            stages: self.stages.clone(),
            head_weight: self.head_weight,
            head_bias: self.head_bias,
        }
    }
}

/// Free-function form of [`Model::forward`] in inference mode.
pub fn network_forward<T: Element>(m: &Model<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    m.infer(x)
}

/// Stage-by-stage output shapes for an input of `h x w`, computed by running
/// a zero batch of one image.
pub fn shape_trace(cfg: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
    let m = build_network::<f32>(cfg, 0)?;
    let [h, w] = cfg.input_size;
    let out = crate::tensor::no_grad(|| m.forward(&Tensor::zeros(&[1, 3, h, w]), NormMode::Infer))?;
    let mut trace = out.trace;
    trace.push(("logits".into(), out.logits.shape().to_vec()));
    Ok(trace)
}
