//! Model hyperparameters and the width-scaling rule for desk-scale runs.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// How the 8 structured features enter the Transformer branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum StructTokenMode {
    /// Project the whole 8-vector to a single `[1, d]` token (self-attention
    /// degenerates to a pass-through, weights identically 1).
    #[default]
    OneToken,
    /// Embed each feature as its own token, attend across the 8, mean-pool.
    PerFeature,
}

/// All architecture widths. Fields hold effective (already scaled) values;
/// [`ModelConfig::reference`] gives the full-width configuration and
/// [`ModelConfig::scaled`] divides every width by a rational factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub conv_channels: [usize; 4],
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_encoder_layers: usize,
    /// Hidden width of each encoder feed-forward block.
    pub ffn_hidden: usize,
    /// Hidden width of the post-concat fusion feed-forward block.
    pub fusion_hidden: usize,
    pub classifier_hidden: usize,
    pub num_beams: usize,
    pub dropout: f64,
    #[serde(default)]
    pub struct_token_mode: StructTokenMode,
}

impl ModelConfig {
    /// Full-width configuration: 224x224 input, channels [64,128,256,512],
    /// d=512, 8 heads, 2 encoder layers, 64 beams, dropout 0.5. Hidden widths
    /// follow the conventional ratios: encoder FFN 4d, fusion FFN 2d,
    /// classifier hidden d.
    pub fn reference() -> Self {
        Self {
            image_size: 224,
            conv_channels: [64, 128, 256, 512],
            embed_dim: 512,
            num_heads: 8,
            num_encoder_layers: 2,
            ffn_hidden: 2048,
            fusion_hidden: 1024,
            classifier_hidden: 512,
            num_beams: 64,
            dropout: 0.5,
            struct_token_mode: StructTokenMode::OneToken,
        }
    }

    /// Divides every width by `den/num` exactly; fails if any width would not
    /// divide. Head count, depth, beams, and image size are left alone.
    pub fn scaled(mut self, num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::Config(format!("scale factor must be positive, got {num}/{den}")));
        }
        let scale = |v: usize| -> Result<usize> {
            let prod = v * num as usize;
            if prod % den as usize != 0 || prod / den as usize == 0 {
                return Err(Error::Config(format!(
                    "width {v} does not scale exactly by {num}/{den}"
                )));
            }
            Ok(prod / den as usize)
        };
        for c in self.conv_channels.iter_mut() {
            *c = scale(*c)?;
        }
        self.embed_dim = scale(self.embed_dim)?;
        self.ffn_hidden = scale(self.ffn_hidden)?;
        self.fusion_hidden = scale(self.fusion_hidden)?;
        self.classifier_hidden = scale(self.classifier_hidden)?;
        Ok(self)
    }

    pub fn with_image_size(mut self, s: usize) -> Self {
        self.image_size = s;
        self
    }

    pub fn with_num_beams(mut self, q: usize) -> Self {
        self.num_beams = q;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 16 != 0 {
            return Err(Error::Config(format!(
                "model.image_size must be a positive multiple of 16 (four 2x2 pools), got {}",
                self.image_size
            )));
        }
        if self.conv_channels.windows(2).any(|w| w[0] >= w[1]) || self.conv_channels[0] == 0 {
            return Err(Error::Config(format!(
                "model.conv_channels must be strictly increasing and positive, got {:?}",
                self.conv_channels
            )));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model.embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.num_encoder_layers == 0
            || self.ffn_hidden == 0
            || self.fusion_hidden == 0
            || self.classifier_hidden == 0
            || self.num_beams == 0
        {
            return Err(Error::Config("model widths and depths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "model.dropout must be in [0,1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Spatial size of the final feature map (four halvings).
    pub fn conv_out_spatial(&self) -> usize {
        self.image_size / 16
    }

    /// Flattened width feeding the image FC bridge.
    pub fn flat_dim(&self) -> usize {
        self.conv_channels[3] * self.conv_out_spatial() * self.conv_out_spatial()
    }

    /// Closed-form trainable parameter count (batchnorm running statistics
    /// are buffers, not parameters).
    pub fn param_count(&self) -> usize {
        let d = self.embed_dim;
        let mut total = 0;
        let mut c_in = 3;
        for &c_out in &self.conv_channels {
            total += c_out * c_in * 9 + c_out; // kernel + bias
            total += 2 * c_out; // bn gamma/beta
            c_in = c_out;
        }
        total += self.flat_dim() * d + d; // image FC
        total += 8 * d + d; // struct projection
        if self.struct_token_mode == StructTokenMode::PerFeature {
            total += 8 * d; // positional embedding
        }
        let per_layer = 4 * d * d // QKV + output projections
            + 2 * d // ln1
            + d * self.ffn_hidden + self.ffn_hidden + self.ffn_hidden * d + d
            + 2 * d; // ln2
        total += self.num_encoder_layers * per_layer;
        total += 4 * d * d + 2 * d; // cross-attention + its layernorm
        total += 2 * d * self.fusion_hidden
            + self.fusion_hidden
            + self.fusion_hidden * 2 * d
            + 2 * d; // fusion FFN
        total += 2 * d * self.classifier_hidden + self.classifier_hidden; // classifier hidden
        total += self.classifier_hidden * self.num_beams + self.num_beams; // logits
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_config_is_valid_and_has_paper_widths() {
        let c = ModelConfig::reference();
        c.validate().unwrap();
        assert_eq!(c.conv_channels, [64, 128, 256, 512]);
        assert_eq!(c.embed_dim, 512);
        assert_eq!(c.num_heads, 8);
        assert_eq!(c.num_encoder_layers, 2);
        assert_eq!(c.num_beams, 64);
        assert_eq!(c.conv_out_spatial(), 14);
        assert_eq!(c.flat_dim(), 512 * 14 * 14);
    }

    #[test]
    fn eighth_scale_widths() {
        let c = ModelConfig::reference()
            .scaled(1, 8)
            .unwrap()
            .with_image_size(64);
        c.validate().unwrap();
        assert_eq!(c.conv_channels, [8, 16, 32, 64]);
        assert_eq!(c.embed_dim, 64);
        assert_eq!(c.ffn_hidden, 256);
        assert_eq!(c.fusion_hidden, 128);
        assert_eq!(c.classifier_hidden, 64);
        assert_eq!(c.conv_out_spatial(), 4);
    }

    #[test]
    fn inexact_scale_is_rejected() {
        assert!(ModelConfig::reference().scaled(1, 7).is_err());
        assert!(ModelConfig::reference().scaled(0, 1).is_err());
    }

    #[test]
    fn image_size_must_be_multiple_of_16() {
        let c = ModelConfig::reference().with_image_size(100);
        assert!(c.validate().is_err());
    }
}
