//! Flat `key=value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected. Serialization emits every key in sorted order, which is the
//! canonical form used inside checkpoints.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::masks::{MaskScheme, DEFAULT_NEG};

/// The pre-training mask selector: a fixed scheme or the Bi/S2S mixture.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchemeSelector {
    Fixed(MaskScheme),
    BiS2s,
}

impl SchemeSelector {
    pub fn name(&self) -> &'static str {
        match self {
            SchemeSelector::Fixed(s) => s.name(),
            SchemeSelector::BiS2s => "bi_s2s",
        }
    }

    /// Mask used for understanding tasks (classification, retrieval, VQA).
    pub fn understanding_mask(&self) -> MaskScheme {
        match self {
            SchemeSelector::Fixed(MaskScheme::NonCrossing) => MaskScheme::NonCrossing,
            _ => MaskScheme::Bi,
        }
    }
}

impl FromStr for SchemeSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "bi_s2s" {
            Ok(SchemeSelector::BiS2s)
        } else {
            s.parse::<MaskScheme>()
                .map(SchemeSelector::Fixed)
                .map_err(|_| {
                    Error::Config(format!(
                        "pretrain.scheme must be one of bi, s2s, bar, noncross, bi_s2s; got '{s}'"
                    ))
                })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VisualEncoderKind {
    /// Two strided convolution stages (stride 4, then stride 2).
    Conv,
    /// Non-overlapping 8x8 patches followed by an affine map.
    Patch,
}

impl FromStr for VisualEncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv" => Ok(VisualEncoderKind::Conv),
            "patch" => Ok(VisualEncoderKind::Patch),
            _ => Err(Error::Config(format!("vis.encoder must be conv or patch, got '{s}'"))),
        }
    }
}

impl fmt::Display for VisualEncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VisualEncoderKind::Conv => "conv",
            VisualEncoderKind::Patch => "patch",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("model.precision must be f32 or f64, got '{s}'"))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ff: usize,
    pub dropout: f64,
    pub neg: f64,
    pub pre_norm: bool,
    pub precision: Precision,
    pub image_size: usize,
    pub encoder: VisualEncoderKind,
    pub vis_channels: usize,
    /// Total visual encoder stride; the grid side is `image_size / vis_stride`.
    pub vis_stride: usize,
    pub max_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.hidden == 0 || self.ff == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "model.hidden {} not divisible by model.heads {}",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "model.dropout must lie in [0,1), got {}",
                self.dropout
            )));
        }
        if !(self.neg < 0.0 && self.neg.is_finite()) {
            return Err(Error::Config(format!(
                "model.neg must be finite and negative, got {}",
                self.neg
            )));
        }
        if self.vis_stride < 2 || self.vis_stride % 2 != 0 {
            return Err(Error::Config(format!(
                "vis.stride must be even and at least 2, got {}",
                self.vis_stride
            )));
        }
        if self.image_size == 0 || self.image_size % self.vis_stride != 0 {
            return Err(Error::Config(format!(
                "image.size must be a positive multiple of vis.stride {}, got {}",
                self.vis_stride, self.image_size
            )));
        }
        if self.vis_channels < 2 || self.max_len == 0 {
            return Err(Error::Config("vis.channels >= 2 and text.max_len >= 1 required".into()));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.vis_stride
    }

    pub fn grid_capacity(&self) -> usize {
        self.grid_side() * self.grid_side()
    }
}

/// Every documented run setting.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub sample_k: usize,
    pub vis_freeze: bool,
    pub scheme: SchemeSelector,
    pub s2s_prob: f64,
    pub mlm_rate: f64,
    pub mlm_mask_prob: f64,
    pub mlm_rand_prob: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Only the first `train_limit` training items are used; 0 uses all.
    pub train_limit: usize,
    pub head_only: bool,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                layers: 4,
                heads: 4,
                hidden: 64,
                ff: 256,
                dropout: 0.1,
                neg: DEFAULT_NEG,
                pre_norm: false,
                precision: Precision::F64,
                image_size: 32,
                encoder: VisualEncoderKind::Conv,
                vis_channels: 64,
                vis_stride: 8,
                max_len: 253,
            },
            sample_k: 11,
            vis_freeze: false,
            scheme: SchemeSelector::Fixed(MaskScheme::Bar),
            s2s_prob: 0.75,
            mlm_rate: 0.15,
            mlm_mask_prob: 0.8,
            mlm_rand_prob: 0.1,
            lr: 3e-4,
            weight_decay: 0.01,
            batch: 16,
            epochs: 3,
            train_limit: 0,
            head_only: false,
            seed: 0,
        }
    }
}

/// Documented keys and their meaning, in canonical order.
pub const KEYS: &[(&str, &str)] = &[
    ("finetune.head_only", "train only the task head during fine-tuning (default false)"),
    ("image.size", "square input image side in pixels, multiple of vis.stride (default 32)"),
    ("mlm.mask_prob", "share of selected tokens replaced by MASK (default 0.8)"),
    ("mlm.rand_prob", "share of selected tokens replaced by a random token (default 0.1)"),
    ("mlm.rate", "per-token selection rate for masked language modeling (default 0.15)"),
    ("model.dropout", "dropout on attention weights and feed-forward outputs (default 0.1)"),
    ("model.ff", "feed-forward inner width (default 256)"),
    ("model.heads", "attention heads (default 4)"),
    ("model.hidden", "hidden width d (default 64)"),
    ("model.layers", "encoder layers (default 4)"),
    ("model.neg", "additive constant for blocked attention (default -1e9)"),
    ("model.pre_norm", "normalize before each sub-block instead of after (default false)"),
    ("model.precision", "checkpoint payload width, f32 or f64 (default f64)"),
    ("optim.lr", "AdamW learning rate (default 3e-4)"),
    ("optim.weight_decay", "AdamW decoupled weight decay (default 0.01)"),
    ("pretrain.s2s_prob", "S2S probability for the bi_s2s schedule (default 0.75)"),
    ("pretrain.scheme", "bi, s2s, bar, noncross or bi_s2s (default bar)"),
    ("seed", "base seed for every random stream (default 0)"),
    ("text.max_len", "report tokens kept after truncation (default 253)"),
    ("train.batch", "studies per optimizer step (default 16)"),
    ("train.epochs", "passes over the training split (default 3)"),
    ("train.limit", "use only the first N training items, 0 for all (default 0)"),
    ("vis.channels", "visual feature width c (default 64)"),
    ("vis.encoder", "conv or patch (default conv)"),
    ("vis.freeze", "keep visual encoder weights fixed during fine-tuning (default false)"),
    ("vis.sample_k", "visual features sampled per image during pre-training (default 11)"),
    ("vis.stride", "total visual encoder stride, even (default 8)"),
];

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean '{value}' for {key}"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "finetune.head_only" => self.head_only = parse_bool(key, value)?,
            "image.size" => m.image_size = parse_num(key, value)?,
            "mlm.mask_prob" => self.mlm_mask_prob = parse_num(key, value)?,
            "mlm.rand_prob" => self.mlm_rand_prob = parse_num(key, value)?,
            "mlm.rate" => self.mlm_rate = parse_num(key, value)?,
            "model.dropout" => m.dropout = parse_num(key, value)?,
            "model.ff" => m.ff = parse_num(key, value)?,
            "model.heads" => m.heads = parse_num(key, value)?,
            "model.hidden" => m.hidden = parse_num(key, value)?,
            "model.layers" => m.layers = parse_num(key, value)?,
            "model.neg" => m.neg = parse_num(key, value)?,
            "model.pre_norm" => m.pre_norm = parse_bool(key, value)?,
            "model.precision" => m.precision = value.parse()?,
            "optim.lr" => self.lr = parse_num(key, value)?,
            "optim.weight_decay" => self.weight_decay = parse_num(key, value)?,
            "pretrain.s2s_prob" => self.s2s_prob = parse_num(key, value)?,
            "pretrain.scheme" => self.scheme = value.parse()?,
            "seed" => self.seed = parse_num(key, value)?,
            "text.max_len" => m.max_len = parse_num(key, value)?,
            "train.batch" => self.batch = parse_num(key, value)?,
            "train.epochs" => self.epochs = parse_num(key, value)?,
            "train.limit" => self.train_limit = parse_num(key, value)?,
            "vis.channels" => m.vis_channels = parse_num(key, value)?,
            "vis.encoder" => m.encoder = value.parse()?,
            "vis.freeze" => self.vis_freeze = parse_bool(key, value)?,
            "vis.sample_k" => self.sample_k = parse_num(key, value)?,
            "vis.stride" => m.vis_stride = parse_num(key, value)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        Some(match key {
            "finetune.head_only" => self.head_only.to_string(),
            "image.size" => m.image_size.to_string(),
            "mlm.mask_prob" => self.mlm_mask_prob.to_string(),
            "mlm.rand_prob" => self.mlm_rand_prob.to_string(),
            "mlm.rate" => self.mlm_rate.to_string(),
            "model.dropout" => m.dropout.to_string(),
            "model.ff" => m.ff.to_string(),
            "model.heads" => m.heads.to_string(),
            "model.hidden" => m.hidden.to_string(),
            "model.layers" => m.layers.to_string(),
            "model.neg" => m.neg.to_string(),
            "model.pre_norm" => m.pre_norm.to_string(),
            "model.precision" => m.precision.to_string(),
            "optim.lr" => self.lr.to_string(),
            "optim.weight_decay" => self.weight_decay.to_string(),
            "pretrain.s2s_prob" => self.s2s_prob.to_string(),
            "pretrain.scheme" => self.scheme.name().to_string(),
            "seed" => self.seed.to_string(),
            "text.max_len" => m.max_len.to_string(),
            "train.batch" => self.batch.to_string(),
            "train.epochs" => self.epochs.to_string(),
            "train.limit" => self.train_limit.to_string(),
            "vis.channels" => m.vis_channels.to_string(),
            "vis.encoder" => m.encoder.to_string(),
            "vis.freeze" => self.vis_freeze.to_string(),
            "vis.sample_k" => self.sample_k.to_string(),
            "vis.stride" => m.vis_stride.to_string(),
            _ => return None,
        })
    }

    /// Parses `key=value` lines on top of the defaults, then validates.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got '{line}'", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.mlm_rate > 0.0 && self.mlm_rate < 1.0) {
            return Err(Error::Config(format!("mlm.rate must lie in (0,1), got {}", self.mlm_rate)));
        }
        let keep = 1.0 - self.mlm_mask_prob - self.mlm_rand_prob;
        if self.mlm_mask_prob < 0.0 || self.mlm_rand_prob < 0.0 || keep < -1e-12 {
            return Err(Error::Config(
                "mlm.mask_prob and mlm.rand_prob must be non-negative and sum to at most 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.s2s_prob) {
            return Err(Error::Config("pretrain.s2s_prob must lie in [0,1]".into()));
        }
        if self.batch == 0 || self.epochs == 0 {
            return Err(Error::Config("train.batch and train.epochs must be positive".into()));
        }
        if self.sample_k == 0 {
            return Err(Error::Config("vis.sample_k must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("optim.lr and optim.weight_decay must be >= 0".into()));
        }
        Ok(())
    }

    /// Canonical text: every key, sorted, one `key=value` per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, _) in KEYS {
            out.push_str(key);
            out.push('=');
            out.push_str(&self.get(key).expect("documented key"));
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::parse("model.depth=3\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn scheme_names() {
        for name in ["bi", "s2s", "bar", "noncross", "bi_s2s"] {
            let cfg = RunConfig::parse(&format!("pretrain.scheme={name}")).unwrap();
            assert_eq!(cfg.scheme.name(), name);
        }
        assert!(RunConfig::parse("pretrain.scheme=causal").is_err());
    }

    #[test]
    fn large_scale_values_expressible() {
        let text = "model.layers=12\nmodel.heads=12\nmodel.hidden=768\nmodel.dropout=0.1\n\
                    image.size=512\nvis.sample_k=180\ntext.max_len=253\npretrain.s2s_prob=0.75\n\
                    mlm.rate=0.15\nmlm.mask_prob=0.8\nmlm.rand_prob=0.1\noptim.lr=1e-5\n\
                    train.batch=128\ntrain.epochs=50\nvis.channels=2048\nmodel.ff=3072\n\
                    vis.stride=32\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.model.grid_capacity(), 256);
        assert_eq!(cfg.lr, 1e-5);
        assert_eq!(cfg.batch, 128);
    }

    #[test]
    fn every_key_documented_and_gettable() {
        let cfg = RunConfig::default();
        for (k, doc) in KEYS {
            assert!(cfg.get(k).is_some(), "{k}");
            assert!(doc.contains("default"), "{k}");
        }
        let mut sorted: Vec<_> = KEYS.iter().map(|(k, _)| *k).collect();
        sorted.sort();
        assert_eq!(sorted, KEYS.iter().map(|(k, _)| *k).collect::<Vec<_>>());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::parse("model.hidden=30\nmodel.heads=4").is_err());
        assert!(RunConfig::parse("model.dropout=1.0").is_err());
        assert!(RunConfig::parse("mlm.mask_prob=0.95").is_err());
        assert!(RunConfig::parse("train.batch=0").is_err());
        assert!(RunConfig::parse("no equals sign").is_err());
    }

    proptest! {
        #[test]
        fn canonical_round_trip(
            layers in 1usize..6,
            heads in 1usize..4,
            per_head in 1usize..8,
            lr in 0.0f64..1.0,
            rate in 0.01f64..0.99,
            seed in any::<u64>(),
            scheme in prop::sample::select(vec!["bi", "s2s", "bar", "noncross", "bi_s2s"]),
        ) {
            let text = format!(
                "# comment\nmodel.layers={layers}\nmodel.heads={heads}\nmodel.hidden={}\n\
                 optim.lr={lr}\nmlm.rate={rate}\nseed={seed}\npretrain.scheme={scheme}\n",
                heads * per_head
            );
            let cfg = RunConfig::parse(&text).unwrap();
            let canon = cfg.to_text();
            let again = RunConfig::parse(&canon).unwrap();
            prop_assert_eq!(&again, &cfg);
            prop_assert_eq!(again.to_text(), canon);
        }
    }
}
