use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::patching::{effective_patch, PeKind, PePlacement};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Ti,
    S,
    M,
    B,
    Custom,
}

impl Variant {
    pub const NAMED: [Variant; 4] = [Variant::Ti, Variant::S, Variant::M, Variant::B];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Ti => "ti",
            Variant::S => "s",
            Variant::M => "m",
            Variant::B => "b",
            Variant::Custom => "custom",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ti" => Ok(Variant::Ti),
            "s" => Ok(Variant::S),
            "m" => Ok(Variant::M),
            "b" => Ok(Variant::B),
            "custom" => Ok(Variant::Custom),
            _ => Err(Error::Config(format!(
                "unknown variant {s:?} (expected ti, s, m or b)"
            ))),
        }
    }
}

/// One stage: `blocks` ConT blocks of width `width`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub width: usize,
    pub ffn_width: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Requested patch sizes of the two encoders of each block.
    pub patch_schedule: Vec<[usize; 2]>,
}

impl StageSpec {
    pub fn new(width: usize, ffn_width: usize, heads: usize, blocks: usize) -> Self {
        StageSpec {
            width,
            ffn_width,
            heads,
            blocks,
            patch_schedule: vec![[7, 14]; blocks],
        }
    }
}

/// Grouping of the 3x3 convolutions inside ConT blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConvGroups {
    Groups(usize),
    /// Depthwise 3x3 followed by a pointwise 1x1.
    Depthwise,
}

impl fmt::Display for ConvGroups {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConvGroups::Groups(g) => write!(f, "{g}"),
            ConvGroups::Depthwise => f.write_str("depthwise"),
        }
    }
}

impl FromStr for ConvGroups {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "depthwise" || s == "dw" {
            return Ok(ConvGroups::Depthwise);
        }
        match s.parse::<usize>() {
            Ok(g) if g > 0 => Ok(ConvGroups::Groups(g)),
            _ => Err(Error::Config(format!(
                "invalid conv groups {s:?} (expected a positive integer or \"depthwise\")"
            ))),
        }
    }
}

/// Named patch-size arrangements over all blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PatchArrangement {
    /// `[7, 7]` everywhere.
    All7,
    /// `[14, 14]` everywhere.
    All14,
    /// `[7, 7]` and `[14, 14]` on alternating blocks of each stage.
    Alternating,
    /// `[7, 14]` in every block.
    Default,
}

impl PatchArrangement {
    pub const ALL: [PatchArrangement; 4] = [
        PatchArrangement::All7,
        PatchArrangement::All14,
        PatchArrangement::Alternating,
        PatchArrangement::Default,
    ];

    pub fn schedule(self, blocks: usize) -> Vec<[usize; 2]> {
        (0..blocks)
            .map(|b| match self {
                PatchArrangement::All7 => [7, 7],
                PatchArrangement::All14 => [14, 14],
                PatchArrangement::Alternating if b % 2 == 0 => [7, 7],
                PatchArrangement::Alternating => [14, 14],
                PatchArrangement::Default => [7, 14],
            })
            .collect()
    }
}

impl fmt::Display for PatchArrangement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PatchArrangement::All7 => "all-7",
            PatchArrangement::All14 => "all-14",
            PatchArrangement::Alternating => "alternating",
            PatchArrangement::Default => "default",
        })
    }
}

impl FromStr for PatchArrangement {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all-7" | "all7" => Ok(PatchArrangement::All7),
            "all-14" | "all14" => Ok(PatchArrangement::All14),
            "alternating" => Ok(PatchArrangement::Alternating),
            "default" | "7-14" => Ok(PatchArrangement::Default),
            _ => Err(Error::Config(format!(
                "unknown patch arrangement {s:?} (expected all-7, all-14, alternating or default)"
            ))),
        }
    }
}

/// Serializes through `Display` / `FromStr`.
mod as_str {
    use super::*;

    pub fn serialize<T: fmt::Display, S: Serializer>(
        v: &T,
        s: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(v)
    }

    pub fn deserialize<'de, T, D>(d: D) -> std::result::Result<T, D::Error>
    where
        T: FromStr<Err = Error>,
        D: Deserializer<'de>,
    {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Text(String),
        }
        let text = match Raw::deserialize(d)? {
            Raw::Int(i) => i.to_string(),
            Raw::Text(s) => s,
        };
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// Full description of a network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub stem_width: usize,
    pub num_classes: usize,
    /// `[H, W]` of the input images.
    pub input_size: [usize; 2],
    #[serde(with = "as_str")]
    pub pe_kind: PeKind,
    #[serde(with = "as_str")]
    pub pe_placement: PePlacement,
    #[serde(with = "as_str")]
    pub conv_groups: ConvGroups,
    /// No normalization or activation around convs, identity FFN activation
    /// and no encoder biases.
    pub strict_formula: bool,
    /// Width multiplier of the last 1x1 conv of the last stage.
    pub final_expansion: usize,
    pub stages: Vec<StageSpec>,
}

impl ModelConfig {
    /// The four named variants at 224x224 with 1000 classes.
    pub fn preset(variant: Variant) -> Result<Self> {
        let (widths, ffn, blocks, stem): ([usize; 4], [usize; 4], [usize; 4], usize) = match variant
        {
            Variant::Ti => ([48, 96, 192, 384], [192, 384, 768, 768], [1, 1, 1, 1], 48),
            Variant::S => (
                [64, 128, 256, 512],
                [256, 512, 1024, 1024],
                [1, 1, 1, 1],
                64,
            ),
            Variant::M => (
                [64, 128, 256, 512],
                [256, 512, 1024, 1024],
                [2, 2, 2, 2],
                64,
            ),
            Variant::B => (
                [64, 128, 256, 512],
                [256, 512, 1024, 1024],
                [3, 4, 6, 3],
                64,
            ),
            Variant::Custom => {
                return Err(Error::Config(
                    "custom models have no preset; give stages explicitly".into(),
                ))
            }
        };
        let heads = [1, 2, 4, 8];
        Ok(ModelConfig {
            variant,
            stem_width: stem,
            num_classes: 1000,
            input_size: [224, 224],
            pe_kind: PeKind::Learnable2d,
            pe_placement: PePlacement::PatchWise,
            conv_groups: ConvGroups::Groups(1),
            strict_formula: false,
            final_expansion: 2,
            stages: (0..4)
                .map(|s| StageSpec::new(widths[s], ffn[s], heads[s], blocks[s]))
                .collect(),
        })
    }

    /// Small network for desk-scale training and gradient checks: widths
    /// `[8, 16, 32, 64]`, one block per stage, 32x32 input.
    pub fn tiny(num_classes: usize) -> Self {
        let widths = [8, 16, 32, 64];
        let heads = [1, 2, 2, 4];
        ModelConfig {
            variant: Variant::Custom,
            stem_width: 8,
            num_classes,
            input_size: [32, 32],
            pe_kind: PeKind::Learnable2d,
            pe_placement: PePlacement::PatchWise,
            conv_groups: ConvGroups::Groups(1),
            strict_formula: false,
            final_expansion: 2,
            stages: (0..4)
                .map(|s| StageSpec {
                    width: widths[s],
                    ffn_width: 2 * widths[s],
                    heads: heads[s],
                    blocks: 1,
                    patch_schedule: vec![[2, 4]],
                })
                .collect(),
        }
    }

    /// Smallest useful network, for whole-model gradient checks: widths
    /// `[4, 8, 8, 16]`, one block per stage, 16x16 input.
    pub fn micro(num_classes: usize) -> Self {
        let widths = [4, 8, 8, 16];
        let heads = [1, 2, 2, 2];
        let mut c = Self::tiny(num_classes);
        c.stem_width = 4;
        c.input_size = [16, 16];
        for (s, st) in c.stages.iter_mut().enumerate() {
            st.width = widths[s];
            st.ffn_width = 2 * widths[s];
            st.heads = heads[s];
        }
        c
    }

    /// Map extent entering each stage.
    pub fn stage_sizes(&self) -> Result<[[usize; 2]; 4]> {
        let [h, w] = self.input_size;
        // 7x7 stride-2 stem conv then 3x3 stride-2 max pool, both padded
        let down = |v: usize| v.div_ceil(2);
        let (mut h, mut w) = (down(down(h)), down(down(w)));
        let mut out = [[0; 2]; 4];
        for (s, slot) in out.iter_mut().enumerate() {
            if h == 0 || w == 0 {
                return Err(Error::Config(format!(
                    "input {:?} vanishes before stage {}",
                    self.input_size,
                    s + 1
                )));
            }
            *slot = [h, w];
            if s < 3 {
                h = down(h);
                w = down(w);
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != 4 {
            return Err(Error::Config(format!(
                "expected 4 stages, got {}",
                self.stages.len()
            )));
        }
        if self.num_classes == 0 || self.stem_width == 0 || self.final_expansion == 0 {
            return Err(Error::Config(
                "num_classes, stem_width and final_expansion must be positive".into(),
            ));
        }
        if self.input_size.contains(&0) {
            return Err(Error::Config("input size must be positive".into()));
        }
        if self.pe_kind == PeKind::Relative && self.pe_placement == PePlacement::ImageWise {
            return Err(Error::Config(
                "relative encodings have no image-wise placement".into(),
            ));
        }
        let sizes = self.stage_sizes()?;
        for (s, st) in self.stages.iter().enumerate() {
            let n = s + 1;
            if st.blocks == 0 {
                return Err(Error::Config(format!("stage {n} has no blocks")));
            }
            if st.heads == 0 || st.width % st.heads != 0 {
                return Err(Error::Config(format!(
                    "stage {n}: width {} is not divisible by {} heads",
                    st.width, st.heads
                )));
            }
            if st.ffn_width == 0 {
                return Err(Error::Config(format!(
                    "stage {n}: ffn_width must be positive"
                )));
            }
            if st.patch_schedule.len() != st.blocks {
                return Err(Error::Config(format!(
                    "stage {n}: patch schedule has {} entries for {} blocks",
                    st.patch_schedule.len(),
                    st.blocks
                )));
            }
            let [h, w] = sizes[s];
            for &p in st.patch_schedule.iter().flatten() {
                let pe = effective_patch(p, h, w);
                if p == 0 || h % pe != 0 || w % pe != 0 {
                    return Err(Error::PatchDivisibility {
                        stage: Some(n),
                        height: h,
                        width: w,
                        patch: p,
                    });
                }
            }
            if let ConvGroups::Groups(g) = self.conv_groups {
                let next = self.stages.get(s + 1).map_or(st.width, |t| t.width);
                if g == 0 || st.width % g != 0 || !next.is_multiple_of(g) {
                    return Err(Error::Config(format!(
                        "stage {n}: {g} conv groups do not divide widths {} and {next}",
                        st.width
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Optional field overrides applied on top of a preset, as written in the
/// `[model]` table of a config file.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOverrides {
    pub variant: Option<Variant>,
    pub stem_width: Option<usize>,
    pub num_classes: Option<usize>,
    pub input_size: Option<[usize; 2]>,
    pub pe_kind: Option<String>,
    pub pe_placement: Option<String>,
    pub conv_groups: Option<toml::Value>,
    pub patch_arrangement: Option<String>,
    pub strict_formula: Option<bool>,
    pub final_expansion: Option<usize>,
    pub stages: Option<Vec<StageSpec>>,
}

impl ModelOverrides {
    /// Starts from the named preset (or [`ModelConfig::tiny`] for custom
    /// models) and applies every field that is present.
    pub fn resolve(self) -> Result<ModelConfig> {
        let variant = self.variant.unwrap_or(Variant::Custom);
        let mut cfg = match variant {
            Variant::Custom => {
                let mut c = ModelConfig::tiny(2);
                if self.stages.is_none() && self.stem_width.is_some() {
                    return Err(Error::Config(
                        "a custom stem width needs explicit stages".into(),
                    ));
                }
                c.variant = Variant::Custom;
                c
            }
            v => ModelConfig::preset(v)?,
        };
        if let Some(v) = self.stem_width {
            cfg.stem_width = v;
        }
        if let Some(v) = self.num_classes {
            cfg.num_classes = v;
        }
        if let Some(v) = self.input_size {
            cfg.input_size = v;
        }
        if let Some(v) = self.pe_kind {
            cfg.pe_kind = v.parse()?;
        }
        if let Some(v) = self.pe_placement {
            cfg.pe_placement = v.parse()?;
        }
        if let Some(v) = self.conv_groups {
            cfg.conv_groups = match v {
                toml::Value::Integer(i) if i > 0 => ConvGroups::Groups(i as usize),
                toml::Value::String(s) => s.parse()?,
                other => return Err(Error::Config(format!("invalid conv_groups {other}"))),
            };
        }
        if let Some(v) = self.strict_formula {
            cfg.strict_formula = v;
        }
        if let Some(v) = self.final_expansion {
            cfg.final_expansion = v;
        }
        if let Some(v) = self.stages {
            if variant != Variant::Custom {
                return Err(Error::Config(format!(
                    "variant {variant} fixes its stages; use variant = \"custom\""
                )));
            }
            cfg.stages = v;
        }
        if let Some(a) = self.patch_arrangement {
            let a: PatchArrangement = a.parse()?;
            for st in &mut cfg.stages {
                st.patch_schedule = a.schedule(st.blocks);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Ablation axes of the positional-encoding, patch-size and grouping studies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AblationAxis {
    Pe,
    PatchSize,
    Groups,
}

impl FromStr for AblationAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pe" => Ok(AblationAxis::Pe),
            "patch" | "patch_size" | "patch-size" => Ok(AblationAxis::PatchSize),
            "groups" => Ok(AblationAxis::Groups),
            _ => Err(Error::Config(format!(
                "unknown ablation axis {s:?} (expected pe, patch or groups)"
            ))),
        }
    }
}

/// Every choice of an axis, in table order.
pub fn ablation_choices(axis: AblationAxis) -> Vec<&'static str> {
    match axis {
        AblationAxis::Pe => vec!["none", "1d", "2d", "2d-image", "relative"],
        AblationAxis::PatchSize => vec!["all-7", "all-14", "alternating", "default"],
        AblationAxis::Groups => vec!["1", "4", "8", "16", "depthwise"],
    }
}

/// `base` with one ablation choice applied. PE choices are `none`, `1d`,
/// `2d`, `relative` and `2d-image` (or `kind@image`).
pub fn make_ablation_config(
    base: &ModelConfig,
    axis: AblationAxis,
    choice: &str,
) -> Result<ModelConfig> {
    let mut cfg = base.clone();
    match axis {
        AblationAxis::Pe => {
            let (kind, placement) = match choice.split_once(['@', '-']) {
                Some((k, "image")) => (k, PePlacement::ImageWise),
                Some((k, "patch")) => (k, PePlacement::PatchWise),
                Some(_) => return Err(Error::Config(format!("unknown PE choice {choice:?}"))),
                None => (choice, PePlacement::PatchWise),
            };
            cfg.pe_kind = kind.parse()?;
            cfg.pe_placement = placement;
        }
        AblationAxis::PatchSize => {
            let a: PatchArrangement = choice.parse()?;
            for st in &mut cfg.stages {
                st.patch_schedule = a.schedule(st.blocks);
            }
        }
        AblationAxis::Groups => cfg.conv_groups = choice.parse()?,
    }
    cfg.validate()?;
    Ok(cfg)
}
