//! Model and training configuration plus the `key = value` config format.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use crate::autodiff::PairNorm;
use crate::error::{Error, Result};
use crate::regions::{enumerate_regions_capped, RegionSet};

/// Which of {regions, SE, attention} are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Ablation {
    /// Backbone, global average pool, classifier. No regions.
    Base,
    /// Regions with SE, features averaged instead of attended.
    SeNoAttention,
    /// Regions with attention, no SE blocks.
    AttentionNoSe,
    /// Attention, SE on the region streams only.
    RoiSe,
    /// Attention, SE on the whole-image stream only.
    ImageSe,
    /// Attention with SE on every stream.
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Base,
        Ablation::SeNoAttention,
        Ablation::AttentionNoSe,
        Ablation::RoiSe,
        Ablation::ImageSe,
        Ablation::Full,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Base => "base",
            Ablation::SeNoAttention => "-Attn+SE",
            Ablation::AttentionNoSe => "+Attn-SE",
            Ablation::RoiSe => "ROI-SE",
            Ablation::ImageSe => "I-SE",
            Ablation::Full => "full",
        }
    }

    pub fn uses_regions(self) -> bool {
        self != Ablation::Base
    }

    pub fn attention(self) -> bool {
        !matches!(self, Ablation::Base | Ablation::SeNoAttention)
    }

    pub fn se_on_regions(self) -> bool {
        matches!(self, Ablation::SeNoAttention | Ablation::RoiSe | Ablation::Full)
    }

    pub fn se_on_image(self) -> bool {
        matches!(self, Ablation::SeNoAttention | Ablation::ImageSe | Ablation::Full)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace(['−', '_'], "-");
        Ok(match norm.as_str() {
            "base" => Ablation::Base,
            "-attn+se" | "se-only" => Ablation::SeNoAttention,
            "+attn-se" | "attn-only" => Ablation::AttentionNoSe,
            "roi-se" => Ablation::RoiSe,
            "i-se" | "image-se" => Ablation::ImageSe,
            "full" => Ablation::Full,
            _ => return Err(Error::Config(format!("unknown ablation selector {s:?}"))),
        })
    }
}

/// How a pooled region map becomes its feature vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureMode {
    Gap,
    Flatten,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub cells_per_side: usize,
    pub max_cells_per_side: Option<usize>,
    pub pooled_size: usize,
    pub upsample_factor: usize,
    pub se_ratio: usize,
    pub se_skip: bool,
    pub share_se: bool,
    pub ablation: Ablation,
    pub attention_norm: PairNorm,
    pub feature_mode: FeatureMode,
    /// Pairwise scorer width; `None` means the feature width.
    pub hidden_dim: Option<usize>,
    pub num_classes: usize,
    pub backbone_widths: Vec<usize>,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            cells_per_side: 3,
            max_cells_per_side: None,
            pooled_size: 3,
            upsample_factor: 2,
            se_ratio: 16,
            se_skip: true,
            share_se: false,
            ablation: Ablation::Full,
            attention_norm: PairNorm::Global,
            feature_mode: FeatureMode::Gap,
            hidden_dim: None,
            num_classes: 5,
            backbone_widths: vec![16, 32, 32],
            image_size: 48,
            seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("cells_per_side", self.cells_per_side),
            ("pooled_size", self.pooled_size),
            ("upsample_factor", self.upsample_factor),
            ("se_ratio", self.se_ratio),
            ("image_size", self.image_size),
        ];
        for (name, v) in positive {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.max_cells_per_side == Some(0) {
            return Err(Error::Config("max_cells_per_side must be at least 1".into()));
        }
        if self.hidden_dim == Some(0) {
            return Err(Error::Config("hidden_dim must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.backbone_widths.is_empty() || self.backbone_widths.contains(&0) {
            return Err(Error::Config("backbone_widths must be a non-empty list of positive widths".into()));
        }
        let stride = self.backbone_stride();
        if self.image_size % stride != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by the backbone stride {stride}",
                self.image_size
            )));
        }
        if self.ablation.uses_regions() {
            let feat = self.feature_size() * self.upsample_factor;
            if feat < self.cells_per_side {
                return Err(Error::Config(format!(
                    "upsampled feature map {feat}x{feat} is smaller than the {0}x{0} grid",
                    self.cells_per_side
                )));
            }
            if self.region_set()?.len() + 1 < 2 {
                return Err(Error::Config("attention needs at least one region besides the whole image".into()));
            }
        }
        Ok(())
    }

    pub fn backbone_stride(&self) -> usize {
        1 << self.backbone_widths.len()
    }

    /// Spatial extent of the backbone output.
    pub fn feature_size(&self) -> usize {
        self.image_size / self.backbone_stride()
    }

    pub fn channels(&self) -> usize {
        *self.backbone_widths.last().expect("validated non-empty")
    }

    /// Width of each region feature vector.
    pub fn feature_dim(&self) -> usize {
        match (self.ablation.uses_regions(), self.feature_mode) {
            (true, FeatureMode::Flatten) => self.pooled_size * self.pooled_size * self.channels(),
            _ => self.channels(),
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden_dim.unwrap_or_else(|| self.feature_dim())
    }

    pub fn region_set(&self) -> Result<RegionSet> {
        enumerate_regions_capped(self.cells_per_side, self.max_cells_per_side)
    }
}

/// Optimization and data-pipeline settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub augment: bool,
    pub crop_margin: usize,
    pub rotation_deg: f64,
    pub zoom: f64,
    pub log_wall_time: bool,
    pub threads: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 20,
            batch_size: 16,
            augment: false,
            crop_margin: 0,
            rotation_deg: 15.0,
            zoom: 0.15,
            log_wall_time: false,
            threads: 1,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.zoom) || !(0.0..=180.0).contains(&self.rotation_deg) {
            return Err(Error::Config("zoom must be in [0, 1) and rotation_deg in [0, 180]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainSettings,
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {key} = {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("cannot parse {key} = {value:?} as a boolean"))),
    }
}

fn parse_optional(key: &str, value: &str) -> Result<Option<usize>> {
    match value.to_ascii_lowercase().as_str() {
        "none" | "unlimited" | "auto" => Ok(None),
        _ => parse_value(key, value).map(Some),
    }
}

fn pair_norm_name(n: PairNorm) -> &'static str {
    match n {
        PairNorm::Global => "global",
        PairNorm::GlobalWithDiagonal => "global_with_diagonal",
        PairNorm::PerRow => "per_row",
    }
}

impl RunConfig {
    /// Parses `key = value` lines; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "cells_per_side" => m.cells_per_side = parse_value(key, value)?,
            "max_cells_per_side" => m.max_cells_per_side = parse_optional(key, value)?,
            "pooled_size" => m.pooled_size = parse_value(key, value)?,
            "upsample_factor" => m.upsample_factor = parse_value(key, value)?,
            "se_ratio" => m.se_ratio = parse_value(key, value)?,
            "se_skip" => m.se_skip = parse_bool(key, value)?,
            "share_se" => m.share_se = parse_bool(key, value)?,
            "ablation" => m.ablation = value.parse()?,
            "attention_norm" => {
                m.attention_norm = match value {
                    "global" => PairNorm::Global,
                    "global_with_diagonal" => PairNorm::GlobalWithDiagonal,
                    "per_row" => PairNorm::PerRow,
                    _ => return Err(Error::Config(format!("unknown attention_norm {value:?}"))),
                }
            }
            "feature_mode" => {
                m.feature_mode = match value {
                    "gap" => FeatureMode::Gap,
                    "flatten" => FeatureMode::Flatten,
                    _ => return Err(Error::Config(format!("unknown feature_mode {value:?}"))),
                }
            }
            "hidden_dim" => m.hidden_dim = parse_optional(key, value)?,
            "num_classes" => m.num_classes = parse_value(key, value)?,
            "backbone_widths" => {
                m.backbone_widths = value
                    .split(',')
                    .map(|w| parse_value(key, w.trim()))
                    .collect::<Result<_>>()?
            }
            "image_size" => m.image_size = parse_value(key, value)?,
            "seed" => m.seed = parse_value(key, value)?,
            "learning_rate" => t.learning_rate = parse_value(key, value)?,
            "epochs" => t.epochs = parse_value(key, value)?,
            "batch_size" => t.batch_size = parse_value(key, value)?,
            "augment" => t.augment = parse_bool(key, value)?,
            "crop_margin" => t.crop_margin = parse_value(key, value)?,
            "rotation_deg" => t.rotation_deg = parse_value(key, value)?,
            "zoom" => t.zoom = parse_value(key, value)?,
            "log_wall_time" => t.log_wall_time = parse_bool(key, value)?,
            "threads" => t.threads = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Fully resolved config in the same `key = value` format, with the
    /// derived region count as a trailing comment.
    pub fn echo(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let opt = |v: Option<usize>| v.map_or("none".to_string(), |v| v.to_string());
        let widths: Vec<String> = m.backbone_widths.iter().map(usize::to_string).collect();
        let mut s = String::new();
        let _ = writeln!(s, "cells_per_side = {}", m.cells_per_side);
        let _ = writeln!(s, "max_cells_per_side = {}", opt(m.max_cells_per_side));
        let _ = writeln!(s, "pooled_size = {}", m.pooled_size);
        let _ = writeln!(s, "upsample_factor = {}", m.upsample_factor);
        let _ = writeln!(s, "se_ratio = {}", m.se_ratio);
        let _ = writeln!(s, "se_skip = {}", m.se_skip);
        let _ = writeln!(s, "share_se = {}", m.share_se);
        let _ = writeln!(s, "ablation = {}", m.ablation.label());
        let _ = writeln!(s, "attention_norm = {}", pair_norm_name(m.attention_norm));
        let _ = writeln!(
            s,
            "feature_mode = {}",
            if m.feature_mode == FeatureMode::Gap { "gap" } else { "flatten" }
        );
        let _ = writeln!(s, "hidden_dim = {}", opt(m.hidden_dim));
        let _ = writeln!(s, "num_classes = {}", m.num_classes);
        let _ = writeln!(s, "backbone_widths = {}", widths.join(","));
        let _ = writeln!(s, "image_size = {}", m.image_size);
        let _ = writeln!(s, "seed = {}", m.seed);
        let _ = writeln!(s, "learning_rate = {:e}", t.learning_rate);
        let _ = writeln!(s, "epochs = {}", t.epochs);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "augment = {}", t.augment);
        let _ = writeln!(s, "crop_margin = {}", t.crop_margin);
        let _ = writeln!(s, "rotation_deg = {}", t.rotation_deg);
        let _ = writeln!(s, "zoom = {}", t.zoom);
        let _ = writeln!(s, "log_wall_time = {}", t.log_wall_time);
        let _ = writeln!(s, "threads = {}", t.threads);
        if let Ok(set) = m.region_set() {
            let _ = writeln!(s, "# region_count = {}", set.len());
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.model.cells_per_side, 3);
        assert_eq!(cfg.model.pooled_size, 3);
        assert_eq!(cfg.model.se_ratio, 16);
        assert_eq!(cfg.train.learning_rate, 1e-3);
    }

    #[test]
    fn two_cells_echo_eight_regions() {
        let cfg = RunConfig::parse("cells_per_side = 2\n").unwrap();
        assert!(cfg.echo().contains("# region_count = 8"));
    }

    #[test]
    fn validation_errors() {
        assert!(matches!(RunConfig::parse("cells_per_side = 0"), Err(Error::Config(_))));
        assert!(RunConfig::parse("colour = blue").unwrap_err().to_string().contains("unknown key"));
        assert!(RunConfig::parse("epochs = many").is_err());
        assert!(RunConfig::parse("just words").is_err());
        assert!(RunConfig::parse("image_size = 50").is_err());
    }

    #[test]
    fn echo_round_trips() {
        let text = "ablation = +Attn-SE\nbackbone_widths = 8, 8\nimage_size = 24\nattention_norm = per_row\nmax_cells_per_side = 2\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(RunConfig::parse(&cfg.echo()).unwrap(), cfg);
    }

    #[test]
    fn ablation_selectors_parse() {
        for a in Ablation::ALL {
            assert_eq!(a.label().parse::<Ablation>().unwrap(), a);
        }
        assert_eq!("−Attn+SE".parse::<Ablation>().unwrap(), Ablation::SeNoAttention);
    }
}
