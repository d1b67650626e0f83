use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelOverrides};
use crate::params::ParamGroup;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::AdamW => "adamw",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adamw" => Ok(OptimizerKind::AdamW),
            _ => Err(Error::Config(format!(
                "unknown optimizer {s:?} (expected sgd or adamw)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Cosine,
    Constant,
}

/// `0.5 · base · (1 + cos(π · step / total))`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * t).cos())
}

fn default_momentum() -> f64 {
    0.9
}

fn default_betas() -> [f64; 2] {
    [0.9, 0.999]
}

fn default_adam_eps() -> f64 {
    1e-8
}

/// Optimization recipe. `steps` wins over `epochs` when both are set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    /// Base rate for stem, convs, batch norm and head.
    pub lr_conv: f64,
    /// Base rate for encoder weights, layer norms and positional tables.
    pub lr_ste: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_betas")]
    pub betas: [f64; 2],
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    pub weight_decay: f64,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub epochs: Option<usize>,
    pub batch_size: usize,
    #[serde(default)]
    pub label_smooth_eps: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub schedule: Schedule,
}

impl TrainConfig {
    /// SGD with momentum 0.9, weight decay 5e-5, conv rate 0.2, encoder rate
    /// 0.005 and label smoothing 0.1, at desk-scale batch size and length.
    pub fn sgd() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Sgd,
            lr_conv: 0.2,
            lr_ste: 0.005,
            momentum: 0.9,
            betas: default_betas(),
            adam_eps: default_adam_eps(),
            weight_decay: 5e-5,
            steps: None,
            epochs: Some(10),
            batch_size: 32,
            label_smooth_eps: 0.1,
            seed: 0,
            schedule: Schedule::Cosine,
        }
    }

    /// AdamW at rate 5e-4 for both groups with weight decay 0.05.
    pub fn adamw() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::AdamW,
            lr_conv: 5e-4,
            lr_ste: 5e-4,
            weight_decay: 0.05,
            ..Self::sgd()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lr_conv", self.lr_conv), ("lr_ste", self.lr_ste)] {
            // zero is allowed and freezes the group
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.label_smooth_eps) {
            return Err(Error::Config(format!(
                "label_smooth_eps must be in [0, 1), got {}",
                self.label_smooth_eps
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) || self.adam_eps <= 0.0 {
            return Err(Error::Config(
                "betas must be in [0, 1) and adam_eps positive".into(),
            ));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        match (self.steps, self.epochs) {
            (None, None) => Err(Error::Config("set steps or epochs".into())),
            (Some(0), _) | (None, Some(0)) => {
                Err(Error::Config("training length must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    /// Total optimizer steps over a dataset of `count` samples.
    pub fn total_steps(&self, count: usize) -> usize {
        match (self.steps, self.epochs) {
            (Some(s), _) => s,
            (None, Some(e)) => e * count.div_ceil(self.batch_size),
            (None, None) => 0,
        }
    }

    pub fn base_lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Conv => self.lr_conv,
            ParamGroup::Ste => self.lr_ste,
        }
    }

    /// Scheduled rate of a group at `step` of `total`.
    pub fn lr_at(&self, group: ParamGroup, step: usize, total: usize) -> f64 {
        match self.schedule {
            Schedule::Cosine => cosine_lr(step, total, self.base_lr(group)),
            Schedule::Constant => self.base_lr(group),
        }
    }
}

/// `(conv, encoder)` base-rate pairs of the split learning-rate study.
pub const LR_PAIRS: [(f64, f64); 4] = [(0.2, 0.01), (0.2, 0.005), (0.1, 0.005), (0.1, 0.001)];

/// Parses a rate pair written `conv/encoder`, e.g. `0.2/0.005`.
pub fn parse_lr_pair(s: &str) -> Result<(f64, f64)> {
    let bad = || {
        Error::Config(format!(
            "learning-rate pair {s:?} should look like 0.2/0.005"
        ))
    };
    let (a, b) = s.split_once('/').ok_or_else(bad)?;
    let conv: f64 = a.trim().parse().map_err(|_| bad())?;
    let ste: f64 = b.trim().parse().map_err(|_| bad())?;
    if !(conv.is_finite() && ste.is_finite() && conv >= 0.0 && ste >= 0.0) {
        return Err(bad());
    }
    Ok((conv, ste))
}

impl TrainConfig {
    /// Copy with both base rates replaced.
    pub fn with_rates(&self, (lr_conv, lr_ste): (f64, f64)) -> Self {
        TrainConfig {
            lr_conv,
            lr_ste,
            ..self.clone()
        }
    }
}

/// A `[model]` table of overrides plus a `[train]` recipe.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelOverrides,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let run: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        run.train.validate()?;
        Ok(run)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let cfg = self.model.clone().resolve()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.2), 0.2);
        assert!(cosine_lr(100, 100, 0.2).abs() < 1e-15);
        assert!((cosine_lr(50, 100, 0.2) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn presets_validate() {
        TrainConfig::sgd().validate().unwrap();
        TrainConfig::adamw().validate().unwrap();
        let mut c = TrainConfig::sgd();
        c.label_smooth_eps = 1.0;
        assert!(c.validate().is_err());
        c = TrainConfig::sgd();
        c.lr_ste = -1.0;
        assert!(c.validate().is_err());
        c = TrainConfig::sgd();
        c.epochs = None;
        assert!(c.validate().is_err());
    }

    #[test]
    fn split_rates() {
        let c = TrainConfig::sgd();
        assert_eq!(c.lr_at(ParamGroup::Conv, 0, 10), 0.2);
        assert_eq!(c.lr_at(ParamGroup::Ste, 0, 10), 0.005);
        assert_eq!(c.lr_conv / c.lr_ste, 40.0);
    }

    #[test]
    fn run_config_from_toml() {
        let text = r#"
[model]
num_classes = 2
conv_groups = 4

[train]
optimizer = "adamw"
lr_conv = 0.001
lr_ste = 0.001
weight_decay = 0.05
steps = 20
batch_size = 8
"#;
        let run = RunConfig::from_toml(text).unwrap();
        assert_eq!(run.train.optimizer, OptimizerKind::AdamW);
        assert_eq!(run.train.total_steps(1000), 20);
        assert_eq!(run.model_config().unwrap().num_classes, 2);
        assert!(RunConfig::from_toml(&text.replace("batch_size", "batchsize")).is_err());
    }

    #[test]
    fn lr_pairs_parse() {
        assert_eq!(parse_lr_pair("0.2/0.005").unwrap(), (0.2, 0.005));
        assert_eq!(parse_lr_pair(" 0.1 / 0.001").unwrap(), (0.1, 0.001));
        for bad in ["0.2", "a/b", "0.2/-1", "/", "inf/0.1"] {
            assert!(parse_lr_pair(bad).is_err(), "{bad}");
        }
        for &(c, s) in &LR_PAIRS {
            let t = TrainConfig::sgd().with_rates((c, s));
            assert_eq!((t.lr_conv, t.lr_ste), (c, s));
            t.validate().unwrap();
        }
    }

    #[test]
    fn epochs_round_up() {
        let mut c = TrainConfig::sgd();
        c.epochs = Some(3);
        c.batch_size = 10;
        assert_eq!(c.total_steps(25), 9);
    }
}
