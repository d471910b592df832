//! All learnable weights of the network, in a fixed canonical order.
//!
//! The order of [`ModelParams::trainable`] defines the layout of optimizer
//! state, gradient accumulators, and checkpoint tensors, so it must stay in
//! sync with `TapeParams` leasing in `model.rs` — there is a unit test
//! pinning the two against each other.

use rand::Rng;

use super::config::{ModelConfig, StructTokenMode};
use crate::numcore::{he_uniform, xavier_uniform, Real, Tensor};

#[derive(Debug, Clone)]
pub struct ConvBlockParams<F: Real> {
    pub kernel: Tensor<F>,
    pub bias: Tensor<F>,
    pub bn_gamma: Tensor<F>,
    pub bn_beta: Tensor<F>,
    pub bn_running_mean: Tensor<F>,
    pub bn_running_var: Tensor<F>,
}

#[derive(Debug, Clone)]
pub struct AttentionParams<F: Real> {
    pub wq: Tensor<F>,
    pub wk: Tensor<F>,
    pub wv: Tensor<F>,
    pub wo: Tensor<F>,
}

#[derive(Debug, Clone)]
pub struct EncoderLayerParams<F: Real> {
    pub attn: AttentionParams<F>,
    pub ln1_gamma: Tensor<F>,
    pub ln1_beta: Tensor<F>,
    pub ffn_w1: Tensor<F>,
    pub ffn_b1: Tensor<F>,
    pub ffn_w2: Tensor<F>,
    pub ffn_b2: Tensor<F>,
    pub ln2_gamma: Tensor<F>,
    pub ln2_beta: Tensor<F>,
}

#[derive(Debug, Clone)]
pub struct ModelParams<F: Real> {
    pub conv: Vec<ConvBlockParams<F>>,
    pub img_fc_w: Tensor<F>,
    pub img_fc_b: Tensor<F>,
    pub struct_proj_w: Tensor<F>,
    pub struct_proj_b: Tensor<F>,
    /// Per-token positional embedding, present only in per-feature mode.
    pub struct_pos: Option<Tensor<F>>,
    pub encoders: Vec<EncoderLayerParams<F>>,
    pub cross: AttentionParams<F>,
    pub cross_ln_gamma: Tensor<F>,
    pub cross_ln_beta: Tensor<F>,
    pub fusion_w1: Tensor<F>,
    pub fusion_b1: Tensor<F>,
    pub fusion_w2: Tensor<F>,
    pub fusion_b2: Tensor<F>,
    pub cls_w1: Tensor<F>,
    pub cls_b1: Tensor<F>,
    pub cls_w2: Tensor<F>,
    pub cls_b2: Tensor<F>,
}

fn ones<F: Real>(n: usize) -> Tensor<F> {
    Tensor::full(vec![n], F::one())
}

impl<F: Real> ModelParams<F> {
    /// He-uniform for weights feeding a ReLU, Xavier-uniform for attention
    /// and plain projections; biases zero, norm scales one.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = crate::rng::stream(seed, &[crate::rng::salt::PARAM_INIT]);
        let d = cfg.embed_dim;

        let mut conv = Vec::with_capacity(4);
        let mut c_in = 3;
        for &c_out in &cfg.conv_channels {
            conv.push(ConvBlockParams {
                kernel: he_uniform(vec![c_out, c_in, 3, 3], c_in * 9, &mut rng),
                bias: Tensor::zeros(vec![c_out]),
                bn_gamma: ones(c_out),
                bn_beta: Tensor::zeros(vec![c_out]),
                bn_running_mean: Tensor::zeros(vec![c_out]),
                bn_running_var: ones(c_out),
            });
            c_in = c_out;
        }

        let flat = cfg.flat_dim();
        let img_fc_w = xavier_uniform(vec![flat, d], flat, d, &mut rng);
        let img_fc_b = Tensor::zeros(vec![d]);
        let struct_proj_w = xavier_uniform(vec![8, d], 8, d, &mut rng);
        let struct_proj_b = Tensor::zeros(vec![d]);
        let struct_pos = match cfg.struct_token_mode {
            StructTokenMode::OneToken => None,
            StructTokenMode::PerFeature => Some(xavier_uniform(vec![8, d], 8, d, &mut rng)),
        };

        let mut encoders = Vec::with_capacity(cfg.num_encoder_layers);
        for _ in 0..cfg.num_encoder_layers {
            encoders.push(EncoderLayerParams {
                attn: Self::init_attention(d, &mut rng),
                ln1_gamma: ones(d),
                ln1_beta: Tensor::zeros(vec![d]),
                ffn_w1: he_uniform(vec![d, cfg.ffn_hidden], d, &mut rng),
                ffn_b1: Tensor::zeros(vec![cfg.ffn_hidden]),
                ffn_w2: xavier_uniform(vec![cfg.ffn_hidden, d], cfg.ffn_hidden, d, &mut rng),
                ffn_b2: Tensor::zeros(vec![d]),
                ln2_gamma: ones(d),
                ln2_beta: Tensor::zeros(vec![d]),
            });
        }

        let cross = Self::init_attention(d, &mut rng);
        let two_d = 2 * d;
        Self {
            conv,
            img_fc_w,
            img_fc_b,
            struct_proj_w,
            struct_proj_b,
            struct_pos,
            encoders,
            cross,
            cross_ln_gamma: ones(d),
            cross_ln_beta: Tensor::zeros(vec![d]),
            fusion_w1: he_uniform(vec![two_d, cfg.fusion_hidden], two_d, &mut rng),
            fusion_b1: Tensor::zeros(vec![cfg.fusion_hidden]),
            fusion_w2: xavier_uniform(vec![cfg.fusion_hidden, two_d], cfg.fusion_hidden, two_d, &mut rng),
            fusion_b2: Tensor::zeros(vec![two_d]),
            cls_w1: he_uniform(vec![two_d, cfg.classifier_hidden], two_d, &mut rng),
            cls_b1: Tensor::zeros(vec![cfg.classifier_hidden]),
            cls_w2: xavier_uniform(
                vec![cfg.classifier_hidden, cfg.num_beams],
                cfg.classifier_hidden,
                cfg.num_beams,
                &mut rng,
            ),
            cls_b2: Tensor::zeros(vec![cfg.num_beams]),
        }
    }

    fn init_attention<R: Rng>(d: usize, rng: &mut R) -> AttentionParams<F> {
        AttentionParams {
            wq: xavier_uniform(vec![d, d], d, d, rng),
            wk: xavier_uniform(vec![d, d], d, d, rng),
            wv: xavier_uniform(vec![d, d], d, d, rng),
            wo: xavier_uniform(vec![d, d], d, d, rng),
        }
    }

    /// Trainable tensors in canonical order.
    pub fn trainable(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        for (i, block) in self.conv.iter().enumerate() {
            out.push((format!("conv{i}.kernel"), &block.kernel));
            out.push((format!("conv{i}.bias"), &block.bias));
            out.push((format!("conv{i}.bn_gamma"), &block.bn_gamma));
            out.push((format!("conv{i}.bn_beta"), &block.bn_beta));
        }
        out.push(("img_fc.w".into(), &self.img_fc_w));
        out.push(("img_fc.b".into(), &self.img_fc_b));
        out.push(("struct_proj.w".into(), &self.struct_proj_w));
        out.push(("struct_proj.b".into(), &self.struct_proj_b));
        if let Some(pos) = &self.struct_pos {
            out.push(("struct_pos".into(), pos));
        }
        for (l, enc) in self.encoders.iter().enumerate() {
            out.push((format!("enc{l}.wq"), &enc.attn.wq));
            out.push((format!("enc{l}.wk"), &enc.attn.wk));
            out.push((format!("enc{l}.wv"), &enc.attn.wv));
            out.push((format!("enc{l}.wo"), &enc.attn.wo));
            out.push((format!("enc{l}.ln1_gamma"), &enc.ln1_gamma));
            out.push((format!("enc{l}.ln1_beta"), &enc.ln1_beta));
            out.push((format!("enc{l}.ffn_w1"), &enc.ffn_w1));
            out.push((format!("enc{l}.ffn_b1"), &enc.ffn_b1));
            out.push((format!("enc{l}.ffn_w2"), &enc.ffn_w2));
            out.push((format!("enc{l}.ffn_b2"), &enc.ffn_b2));
            out.push((format!("enc{l}.ln2_gamma"), &enc.ln2_gamma));
            out.push((format!("enc{l}.ln2_beta"), &enc.ln2_beta));
        }
        out.push(("cross.wq".into(), &self.cross.wq));
        out.push(("cross.wk".into(), &self.cross.wk));
        out.push(("cross.wv".into(), &self.cross.wv));
        out.push(("cross.wo".into(), &self.cross.wo));
        out.push(("cross.ln_gamma".into(), &self.cross_ln_gamma));
        out.push(("cross.ln_beta".into(), &self.cross_ln_beta));
        out.push(("fusion.w1".into(), &self.fusion_w1));
        out.push(("fusion.b1".into(), &self.fusion_b1));
        out.push(("fusion.w2".into(), &self.fusion_w2));
        out.push(("fusion.b2".into(), &self.fusion_b2));
        out.push(("cls.w1".into(), &self.cls_w1));
        out.push(("cls.b1".into(), &self.cls_b1));
        out.push(("cls.w2".into(), &self.cls_w2));
        out.push(("cls.b2".into(), &self.cls_b2));
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out: Vec<(String, &mut Tensor<F>)> = Vec::new();
        for (i, block) in self.conv.iter_mut().enumerate() {
            out.push((format!("conv{i}.kernel"), &mut block.kernel));
            out.push((format!("conv{i}.bias"), &mut block.bias));
            out.push((format!("conv{i}.bn_gamma"), &mut block.bn_gamma));
            out.push((format!("conv{i}.bn_beta"), &mut block.bn_beta));
        }
        out.push(("img_fc.w".into(), &mut self.img_fc_w));
        out.push(("img_fc.b".into(), &mut self.img_fc_b));
        out.push(("struct_proj.w".into(), &mut self.struct_proj_w));
        out.push(("struct_proj.b".into(), &mut self.struct_proj_b));
        if let Some(pos) = self.struct_pos.as_mut() {
            out.push(("struct_pos".into(), pos));
        }
        for (l, enc) in self.encoders.iter_mut().enumerate() {
            out.push((format!("enc{l}.wq"), &mut enc.attn.wq));
            out.push((format!("enc{l}.wk"), &mut enc.attn.wk));
            out.push((format!("enc{l}.wv"), &mut enc.attn.wv));
            out.push((format!("enc{l}.wo"), &mut enc.attn.wo));
            out.push((format!("enc{l}.ln1_gamma"), &mut enc.ln1_gamma));
            out.push((format!("enc{l}.ln1_beta"), &mut enc.ln1_beta));
            out.push((format!("enc{l}.ffn_w1"), &mut enc.ffn_w1));
            out.push((format!("enc{l}.ffn_b1"), &mut enc.ffn_b1));
            out.push((format!("enc{l}.ffn_w2"), &mut enc.ffn_w2));
            out.push((format!("enc{l}.ffn_b2"), &mut enc.ffn_b2));
            out.push((format!("enc{l}.ln2_gamma"), &mut enc.ln2_gamma));
            out.push((format!("enc{l}.ln2_beta"), &mut enc.ln2_beta));
        }
        out.push(("cross.wq".into(), &mut self.cross.wq));
        out.push(("cross.wk".into(), &mut self.cross.wk));
        out.push(("cross.wv".into(), &mut self.cross.wv));
        out.push(("cross.wo".into(), &mut self.cross.wo));
        out.push(("cross.ln_gamma".into(), &mut self.cross_ln_gamma));
        out.push(("cross.ln_beta".into(), &mut self.cross_ln_beta));
        out.push(("fusion.w1".into(), &mut self.fusion_w1));
        out.push(("fusion.b1".into(), &mut self.fusion_b1));
        out.push(("fusion.w2".into(), &mut self.fusion_w2));
        out.push(("fusion.b2".into(), &mut self.fusion_b2));
        out.push(("cls.w1".into(), &mut self.cls_w1));
        out.push(("cls.b1".into(), &mut self.cls_b1));
        out.push(("cls.w2".into(), &mut self.cls_w2));
        out.push(("cls.b2".into(), &mut self.cls_b2));
        out
    }

    /// Non-trainable state carried with the model: batchnorm running stats.
    pub fn buffers(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        for (i, block) in self.conv.iter().enumerate() {
            out.push((format!("conv{i}.bn_running_mean"), &block.bn_running_mean));
            out.push((format!("conv{i}.bn_running_var"), &block.bn_running_var));
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out: Vec<(String, &mut Tensor<F>)> = Vec::new();
        for (i, block) in self.conv.iter_mut().enumerate() {
            out.push((format!("conv{i}.bn_running_mean"), &mut block.bn_running_mean));
            out.push((format!("conv{i}.bn_running_var"), &mut block.bn_running_var));
        }
        out
    }

    /// Trainable + buffers: everything a checkpoint stores.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = self.trainable();
        out.extend(self.buffers());
        out
    }

    pub fn trainable_param_count(&self) -> usize {
        self.trainable().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        ModelParams {
            conv: self
                .conv
                .iter()
                .map(|b| ConvBlockParams {
                    kernel: b.kernel.cast(),
                    bias: b.bias.cast(),
                    bn_gamma: b.bn_gamma.cast(),
                    bn_beta: b.bn_beta.cast(),
                    bn_running_mean: b.bn_running_mean.cast(),
                    bn_running_var: b.bn_running_var.cast(),
                })
                .collect(),
            img_fc_w: self.img_fc_w.cast(),
            img_fc_b: self.img_fc_b.cast(),
            struct_proj_w: self.struct_proj_w.cast(),
            struct_proj_b: self.struct_proj_b.cast(),
            struct_pos: self.struct_pos.as_ref().map(|t| t.cast()),
            encoders: self
                .encoders
                .iter()
                .map(|e| EncoderLayerParams {
                    attn: AttentionParams {
                        wq: e.attn.wq.cast(),
                        wk: e.attn.wk.cast(),
                        wv: e.attn.wv.cast(),
                        wo: e.attn.wo.cast(),
                    },
                    ln1_gamma: e.ln1_gamma.cast(),
                    ln1_beta: e.ln1_beta.cast(),
                    ffn_w1: e.ffn_w1.cast(),
                    ffn_b1: e.ffn_b1.cast(),
                    ffn_w2: e.ffn_w2.cast(),
                    ffn_b2: e.ffn_b2.cast(),
                    ln2_gamma: e.ln2_gamma.cast(),
                    ln2_beta: e.ln2_beta.cast(),
                })
                .collect(),
            cross: AttentionParams {
                wq: self.cross.wq.cast(),
                wk: self.cross.wk.cast(),
                wv: self.cross.wv.cast(),
                wo: self.cross.wo.cast(),
            },
            cross_ln_gamma: self.cross_ln_gamma.cast(),
            cross_ln_beta: self.cross_ln_beta.cast(),
            fusion_w1: self.fusion_w1.cast(),
            fusion_b1: self.fusion_b1.cast(),
            fusion_w2: self.fusion_w2.cast(),
            fusion_b2: self.fusion_b2.cast(),
            cls_w1: self.cls_w1.cast(),
            cls_b1: self.cls_b1.cast(),
            cls_w2: self.cls_w2.cast(),
            cls_b2: self.cls_b2.cast(),
        }
    }
}
