//! The run configuration file: a strict TOML document covering model, train,
//! scene, camera, and radio settings plus the run seed. Unknown keys are
//! rejected so a typo'd hyperparameter fails loudly instead of silently
//! using a default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::airsim::{CameraConfig, RadioConfig, SceneConfig};
use crate::beamnet::{ModelConfig, StructTokenMode};
use crate::harness::TrainConfig;
use crate::{Error, Result};

/// The `[model]` section: full-width architecture values plus a rational
/// `scale` (e.g. `"1/8"`) applied to every width. Defaults give the
/// desk-scale model: 64x64 input, eighth-width everywhere.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub image_size: usize,
    pub conv_channels: [usize; 4],
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_encoder_layers: usize,
    pub ffn_hidden: usize,
    pub fusion_hidden: usize,
    pub classifier_hidden: usize,
    pub num_beams: usize,
    pub dropout: f64,
    pub scale: String,
    pub struct_token_mode: StructTokenMode,
}

impl Default for ModelSection {
    fn default() -> Self {
        let r = ModelConfig::reference();
        Self {
            image_size: 64,
            conv_channels: r.conv_channels,
            embed_dim: r.embed_dim,
            num_heads: r.num_heads,
            num_encoder_layers: r.num_encoder_layers,
            ffn_hidden: r.ffn_hidden,
            fusion_hidden: r.fusion_hidden,
            classifier_hidden: r.classifier_hidden,
            num_beams: r.num_beams,
            dropout: r.dropout,
            scale: "1/8".to_string(),
            struct_token_mode: StructTokenMode::OneToken,
        }
    }
}

/// Parses `"n"` or `"n/d"` into a positive rational.
pub fn parse_scale(s: &str) -> Result<(u32, u32)> {
    let parse_part = |p: &str| -> Result<u32> {
        let v: u32 = p
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("model.scale: `{s}` is not a rational like \"1/8\"")))?;
        if v == 0 {
            return Err(Error::Config(format!("model.scale: `{s}` must be positive")));
        }
        Ok(v)
    };
    match s.split_once('/') {
        Some((n, d)) => Ok((parse_part(n)?, parse_part(d)?)),
        None => Ok((parse_part(s)?, 1)),
    }
}

impl ModelSection {
    /// Applies the scale and validates the resulting architecture.
    pub fn resolve(&self) -> Result<ModelConfig> {
        let (num, den) = parse_scale(&self.scale)?;
        let cfg = ModelConfig {
            image_size: self.image_size,
            conv_channels: self.conv_channels,
            embed_dim: self.embed_dim,
            num_heads: self.num_heads,
            num_encoder_layers: self.num_encoder_layers,
            ffn_hidden: self.ffn_hidden,
            fusion_hidden: self.fusion_hidden,
            classifier_hidden: self.classifier_hidden,
            num_beams: self.num_beams,
            dropout: self.dropout,
            struct_token_mode: self.struct_token_mode,
        }
        .scaled(num, den)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub scene: SceneConfig,
    pub camera: CameraConfig,
    pub radio: RadioConfig,
}

impl RunConfig {
    pub fn from_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))?;
        Self::from_str(&text)
    }

    /// Validates every section; the model section is resolved as part of
    /// validation.
    pub fn validate(&self) -> Result<()> {
        self.model.resolve()?;
        self.train.validate()?;
        self.scene.validate()?;
        self.camera.validate()?;
        self.radio.validate()?;
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        self.model.resolve()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_desk_scale() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let m = cfg.model_config().unwrap();
        assert_eq!(m.conv_channels, [8, 16, 32, 64]);
        assert_eq!(m.embed_dim, 64);
        assert_eq!(m.image_size, 64);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = "seed = 1\n[model]\nlearning_rte = 0.1\n";
        let err = RunConfig::from_str(text).unwrap_err();
        assert!(err.to_string().contains("learning_rte"), "{err}");
    }

    #[test]
    fn out_of_range_field_is_rejected() {
        let text = "[train]\nlr = -3.0\n";
        assert!(RunConfig::from_str(text).is_err());
    }

    #[test]
    fn scale_parsing() {
        assert_eq!(parse_scale("1").unwrap(), (1, 1));
        assert_eq!(parse_scale("1/8").unwrap(), (1, 8));
        assert_eq!(parse_scale(" 3 / 4 ").unwrap(), (3, 4));
        assert!(parse_scale("0/8").is_err());
        assert!(parse_scale("a/b").is_err());
    }

    #[test]
    fn paper_scale_resolves_to_reference() {
        let mut section = ModelSection::default();
        section.scale = "1".into();
        section.image_size = 224;
        let m = section.resolve().unwrap();
        assert_eq!(m, ModelConfig::reference());
    }

    #[test]
    fn roundtrip_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back = RunConfig::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }
}
