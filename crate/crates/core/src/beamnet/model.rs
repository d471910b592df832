//! Forward graph of the network: CNN visual branch, Transformer structured
//! branch, cross-attention fusion, classifier.

use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, StructTokenMode};
use super::params::ModelParams;
use crate::numcore::{BnMode, Real, Tape, Tensor, ValueId};
use crate::{Error, Result};

/// Momentum for folding batch statistics into batchnorm running stats.
pub const BN_MOMENTUM: f64 = 0.1;
/// Epsilon for every batchnorm/layernorm in the model.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Values recorded during a forward pass for tests and diagnostics: named
/// intermediate shapes, every attention probability tensor, and the fusion
/// stages.
#[derive(Debug, Default)]
pub struct Trace {
    pub shapes: Vec<(String, Vec<usize>)>,
    /// One entry per (layer, head) in encounter order; cross-attention heads
    /// come last.
    pub attn_probs: Vec<ValueId>,
    /// Cross-attention output O before the residual.
    pub cross_attn_out: Option<ValueId>,
    /// LayerNorm(F_img + O).
    pub img_refined: Option<ValueId>,
    /// Concat(F'_img, F_struct) before the fusion FFN.
    pub fused_pre_ffn: Option<ValueId>,
}

/// One forward pass worth of state: the tape, the mode, the dropout stream,
/// batchnorm statistics observed along the way, and the trace.
pub struct Forward<F: Real> {
    pub tape: Tape<F>,
    pub mode: Mode,
    dropout_rng: ChaCha8Rng,
    /// `(conv block, batch mean, batch var)` collected in train mode; the
    /// caller decides whether to fold them into the running statistics.
    pub bn_batch_stats: Vec<(usize, Vec<F>, Vec<F>)>,
    pub trace: Trace,
}

impl<F: Real> Forward<F> {
    pub fn train(dropout_rng: ChaCha8Rng) -> Self {
        Self {
            tape: Tape::new(),
            mode: Mode::Train,
            dropout_rng,
            bn_batch_stats: Vec::new(),
            trace: Trace::default(),
        }
    }

    pub fn eval() -> Self {
        use rand_chacha::rand_core::SeedableRng;
        Self {
            tape: Tape::new(),
            mode: Mode::Eval,
            dropout_rng: ChaCha8Rng::seed_from_u64(0),
            bn_batch_stats: Vec::new(),
            trace: Trace::default(),
        }
    }

    /// Wraps an existing tape — used when an external driver (the gradient
    /// checker) owns leaf creation.
    pub fn from_parts(tape: Tape<F>, mode: Mode, dropout_rng: ChaCha8Rng) -> Self {
        Self {
            tape,
            mode,
            dropout_rng,
            bn_batch_stats: Vec::new(),
            trace: Trace::default(),
        }
    }

    pub fn into_tape(self) -> Tape<F> {
        self.tape
    }

    fn record_shape(&mut self, name: &str, id: ValueId) {
        let shape = self.tape.shape(id).to_vec();
        self.trace.shapes.push((name.to_string(), shape));
    }
}

/// Tape handles for every parameter, mirroring [`ModelParams`].
pub struct TapeParams {
    pub conv: Vec<ConvBlockIds>,
    pub img_fc_w: ValueId,
    pub img_fc_b: ValueId,
    pub struct_proj_w: ValueId,
    pub struct_proj_b: ValueId,
    pub struct_pos: Option<ValueId>,
    pub encoders: Vec<EncoderLayerIds>,
    pub cross: AttentionIds,
    pub cross_ln_gamma: ValueId,
    pub cross_ln_beta: ValueId,
    pub fusion_w1: ValueId,
    pub fusion_b1: ValueId,
    pub fusion_w2: ValueId,
    pub fusion_b2: ValueId,
    pub cls_w1: ValueId,
    pub cls_b1: ValueId,
    pub cls_w2: ValueId,
    pub cls_b2: ValueId,
}

pub struct ConvBlockIds {
    pub kernel: ValueId,
    pub bias: ValueId,
    pub bn_gamma: ValueId,
    pub bn_beta: ValueId,
}

pub struct AttentionIds {
    pub wq: ValueId,
    pub wk: ValueId,
    pub wv: ValueId,
    pub wo: ValueId,
}

pub struct EncoderLayerIds {
    pub attn: AttentionIds,
    pub ln1_gamma: ValueId,
    pub ln1_beta: ValueId,
    pub ffn_w1: ValueId,
    pub ffn_b1: ValueId,
    pub ffn_w2: ValueId,
    pub ffn_b2: ValueId,
    pub ln2_gamma: ValueId,
    pub ln2_beta: ValueId,
}

impl TapeParams {
    /// Copies every parameter onto the tape as a tracked leaf.
    pub fn lease<F: Real>(tape: &mut Tape<F>, params: &ModelParams<F>) -> Self {
        let mut leaf = |t: &Tensor<F>| {
            let mut tracked = t.clone();
            tracked.requires_grad = true;
            tape.leaf(&tracked)
        };
        let conv = params
            .conv
            .iter()
            .map(|b| ConvBlockIds {
                kernel: leaf(&b.kernel),
                bias: leaf(&b.bias),
                bn_gamma: leaf(&b.bn_gamma),
                bn_beta: leaf(&b.bn_beta),
            })
            .collect();
        let img_fc_w = leaf(&params.img_fc_w);
        let img_fc_b = leaf(&params.img_fc_b);
        let struct_proj_w = leaf(&params.struct_proj_w);
        let struct_proj_b = leaf(&params.struct_proj_b);
        let struct_pos = params.struct_pos.as_ref().map(&mut leaf);
        let encoders = params
            .encoders
            .iter()
            .map(|e| EncoderLayerIds {
                attn: AttentionIds {
                    wq: leaf(&e.attn.wq),
                    wk: leaf(&e.attn.wk),
                    wv: leaf(&e.attn.wv),
                    wo: leaf(&e.attn.wo),
                },
                ln1_gamma: leaf(&e.ln1_gamma),
                ln1_beta: leaf(&e.ln1_beta),
                ffn_w1: leaf(&e.ffn_w1),
                ffn_b1: leaf(&e.ffn_b1),
                ffn_w2: leaf(&e.ffn_w2),
                ffn_b2: leaf(&e.ffn_b2),
                ln2_gamma: leaf(&e.ln2_gamma),
                ln2_beta: leaf(&e.ln2_beta),
            })
            .collect();
        let cross = AttentionIds {
            wq: leaf(&params.cross.wq),
            wk: leaf(&params.cross.wk),
            wv: leaf(&params.cross.wv),
            wo: leaf(&params.cross.wo),
        };
        Self {
            conv,
            img_fc_w,
            img_fc_b,
            struct_proj_w,
            struct_proj_b,
            struct_pos,
            encoders,
            cross,
            cross_ln_gamma: leaf(&params.cross_ln_gamma),
            cross_ln_beta: leaf(&params.cross_ln_beta),
            fusion_w1: leaf(&params.fusion_w1),
            fusion_b1: leaf(&params.fusion_b1),
            fusion_w2: leaf(&params.fusion_w2),
            fusion_b2: leaf(&params.fusion_b2),
            cls_w1: leaf(&params.cls_w1),
            cls_b1: leaf(&params.cls_b1),
            cls_w2: leaf(&params.cls_w2),
            cls_b2: leaf(&params.cls_b2),
        }
    }

    /// Inverse of [`TapeParams::trainable_ids`]: rebuilds the typed mirror
    /// from leaf ids listed in canonical trainable order. Errors if the list
    /// length disagrees with the architecture.
    pub fn from_trainable_ids(cfg: &ModelConfig, ids: &[ValueId]) -> Result<Self> {
        let mut it = ids.iter().copied();
        let mut next = || {
            it.next()
                .ok_or_else(|| Error::Config("trainable id list too short for architecture".into()))
        };
        let mut conv = Vec::with_capacity(4);
        for _ in 0..4 {
            conv.push(ConvBlockIds {
                kernel: next()?,
                bias: next()?,
                bn_gamma: next()?,
                bn_beta: next()?,
            });
        }
        let img_fc_w = next()?;
        let img_fc_b = next()?;
        let struct_proj_w = next()?;
        let struct_proj_b = next()?;
        let struct_pos = match cfg.struct_token_mode {
            StructTokenMode::OneToken => None,
            StructTokenMode::PerFeature => Some(next()?),
        };
        let mut encoders = Vec::with_capacity(cfg.num_encoder_layers);
        for _ in 0..cfg.num_encoder_layers {
            encoders.push(EncoderLayerIds {
                attn: AttentionIds { wq: next()?, wk: next()?, wv: next()?, wo: next()? },
                ln1_gamma: next()?,
                ln1_beta: next()?,
                ffn_w1: next()?,
                ffn_b1: next()?,
                ffn_w2: next()?,
                ffn_b2: next()?,
                ln2_gamma: next()?,
                ln2_beta: next()?,
            });
        }
        let cross = AttentionIds { wq: next()?, wk: next()?, wv: next()?, wo: next()? };
        let out = Self {
            conv,
            img_fc_w,
            img_fc_b,
            struct_proj_w,
            struct_proj_b,
            struct_pos,
            encoders,
            cross,
            cross_ln_gamma: next()?,
            cross_ln_beta: next()?,
            fusion_w1: next()?,
            fusion_b1: next()?,
            fusion_w2: next()?,
            fusion_b2: next()?,
            cls_w1: next()?,
            cls_b1: next()?,
            cls_w2: next()?,
            cls_b2: next()?,
        };
        if it.next().is_some() {
            return Err(Error::Config("trainable id list too long for architecture".into()));
        }
        Ok(out)
    }

    /// Leaf ids in the canonical trainable order of [`ModelParams::trainable`].
    pub fn trainable_ids(&self) -> Vec<ValueId> {
        let mut out = Vec::new();
        for b in &self.conv {
            out.extend([b.kernel, b.bias, b.bn_gamma, b.bn_beta]);
        }
        out.extend([self.img_fc_w, self.img_fc_b, self.struct_proj_w, self.struct_proj_b]);
        if let Some(pos) = self.struct_pos {
            out.push(pos);
        }
        for e in &self.encoders {
            out.extend([
                e.attn.wq, e.attn.wk, e.attn.wv, e.attn.wo,
                e.ln1_gamma, e.ln1_beta,
                e.ffn_w1, e.ffn_b1, e.ffn_w2, e.ffn_b2,
                e.ln2_gamma, e.ln2_beta,
            ]);
        }
        out.extend([self.cross.wq, self.cross.wk, self.cross.wv, self.cross.wo]);
        out.extend([self.cross_ln_gamma, self.cross_ln_beta]);
        out.extend([self.fusion_w1, self.fusion_b1, self.fusion_w2, self.fusion_b2]);
        out.extend([self.cls_w1, self.cls_b1, self.cls_w2, self.cls_b2]);
        out
    }
}

/// Multi-head scaled dot-product attention. Queries come from `q_in`,
/// keys/values from `kv_in`; per-head probabilities are pushed to the trace.
fn multi_head_attention<F: Real>(
    fwd: &mut Forward<F>,
    attn: &AttentionIds,
    q_in: ValueId,
    kv_in: ValueId,
    num_heads: usize,
) -> Result<ValueId> {
    let d = fwd.tape.shape(q_in)[1];
    debug_assert_eq!(d % num_heads, 0);
    let head_dim = d / num_heads;
    let q = fwd.tape.matmul(q_in, attn.wq)?;
    let k = fwd.tape.matmul(kv_in, attn.wk)?;
    let v = fwd.tape.matmul(kv_in, attn.wv)?;
    let scale = F::from_f64(1.0 / (head_dim as f64).sqrt());
    let mut heads = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let qh = fwd.tape.slice_cols(q, h * head_dim, head_dim)?;
        let kh = fwd.tape.slice_cols(k, h * head_dim, head_dim)?;
        let vh = fwd.tape.slice_cols(v, h * head_dim, head_dim)?;
        let scores = fwd.tape.matmul_nt(qh, kh)?;
        let scaled = fwd.tape.scale(scores, scale);
        let probs = fwd.tape.softmax(scaled)?;
        fwd.trace.attn_probs.push(probs);
        heads.push(fwd.tape.matmul(probs, vh)?);
    }
    let concat = fwd.tape.concat_cols(&heads)?;
    fwd.tape.matmul(concat, attn.wo)
}

/// CNN visual branch: four (conv3x3 -> batchnorm -> relu -> maxpool2x2)
/// blocks, flatten, and a fully connected bridge to the embedding width.
pub fn cnn_forward<F: Real>(
    fwd: &mut Forward<F>,
    cfg: &ModelConfig,
    params: &ModelParams<F>,
    ids: &TapeParams,
    img: ValueId,
) -> Result<ValueId> {
    let shape = fwd.tape.shape(img).to_vec();
    if shape != [3, cfg.image_size, cfg.image_size] {
        return Err(Error::Shape {
            op: "cnn_forward",
            lhs: shape,
            rhs: vec![3, cfg.image_size, cfg.image_size],
        });
    }
    if cfg.image_size % 16 != 0 {
        return Err(Error::Config(format!(
            "image size {} is not divisible by 16",
            cfg.image_size
        )));
    }
    let mut x = img;
    for (i, block) in ids.conv.iter().enumerate() {
        x = fwd.tape.conv2d(x, block.kernel, block.bias)?;
        fwd.record_shape(&format!("conv{}", i + 1), x);
        let bn_mode = match fwd.mode {
            Mode::Train => BnMode::Train,
            Mode::Eval => BnMode::Eval,
        };
        let (y, stats) = fwd.tape.batchnorm2d(
            x,
            block.bn_gamma,
            block.bn_beta,
            params.conv[i].bn_running_mean.data(),
            params.conv[i].bn_running_var.data(),
            F::from_f64(NORM_EPS),
            bn_mode,
        )?;
        if let Some((mean, var)) = stats {
            fwd.bn_batch_stats.push((i, mean, var));
        }
        x = fwd.tape.relu(y);
        x = fwd.tape.maxpool2d(x)?;
        fwd.record_shape(&format!("pool{}", i + 1), x);
    }
    let flat = fwd.tape.reshape(x, vec![1, cfg.flat_dim()])?;
    let emb = fwd.tape.linear(flat, ids.img_fc_w, ids.img_fc_b)?;
    fwd.record_shape("f_img", emb);
    Ok(emb)
}

/// Transformer structured branch: project the 8-vector into the latent
/// space (one token, or one token per feature), run the encoder stack, and
/// pool to `[1, d]`.
pub fn transformer_forward<F: Real>(
    fwd: &mut Forward<F>,
    cfg: &ModelConfig,
    ids: &TapeParams,
    struct_vec: ValueId,
) -> Result<ValueId> {
    let shape = fwd.tape.shape(struct_vec).to_vec();
    if shape != [1, 8] {
        return Err(Error::Shape {
            op: "transformer_forward",
            lhs: shape,
            rhs: vec![1, 8],
        });
    }
    let mut h = match cfg.struct_token_mode {
        StructTokenMode::OneToken => fwd.tape.linear(struct_vec, ids.struct_proj_w, ids.struct_proj_b)?,
        StructTokenMode::PerFeature => {
            let col = fwd.tape.reshape(struct_vec, vec![8, 1])?;
            let tokens = fwd.tape.scale_rows(ids.struct_proj_w, col)?;
            let tokens = fwd.tape.add_bias_row(tokens, ids.struct_proj_b)?;
            let pos = ids.struct_pos.ok_or_else(|| {
                Error::Config("per-feature token mode requires a positional embedding".into())
            })?;
            fwd.tape.add(tokens, pos)?
        }
    };
    fwd.record_shape("h_struct_0", h);
    let eps = F::from_f64(NORM_EPS);
    for layer in &ids.encoders {
        let attn_out = multi_head_attention(fwd, &layer.attn, h, h, cfg.num_heads)?;
        let res1 = fwd.tape.add(h, attn_out)?;
        let norm1 = fwd.tape.layernorm(res1, layer.ln1_gamma, layer.ln1_beta, eps)?;
        let ff1 = fwd.tape.linear(norm1, layer.ffn_w1, layer.ffn_b1)?;
        let ff1 = fwd.tape.relu(ff1);
        let ff2 = fwd.tape.linear(ff1, layer.ffn_w2, layer.ffn_b2)?;
        let res2 = fwd.tape.add(norm1, ff2)?;
        h = fwd.tape.layernorm(res2, layer.ln2_gamma, layer.ln2_beta, eps)?;
    }
    let pooled = if fwd.tape.shape(h)[0] > 1 {
        fwd.tape.mean_rows(h)?
    } else {
        h
    };
    fwd.record_shape("f_struct", pooled);
    Ok(pooled)
}

/// Cross-attention fusion: image embedding queries the structured embedding,
/// residual + layernorm refines the image side, the two are concatenated to
/// width 2d, and a residual feed-forward block integrates them.
pub fn cross_attention_fuse<F: Real>(
    fwd: &mut Forward<F>,
    cfg: &ModelConfig,
    ids: &TapeParams,
    f_img: ValueId,
    f_struct: ValueId,
) -> Result<ValueId> {
    let d = cfg.embed_dim;
    for (name, v) in [("f_img", f_img), ("f_struct", f_struct)] {
        let shape = fwd.tape.shape(v).to_vec();
        if shape != [1, d] {
            return Err(Error::Shape {
                op: "cross_attention_fuse",
                lhs: shape,
                rhs: vec![1, d],
            });
        }
        let _ = name;
    }
    let o = multi_head_attention(fwd, &ids.cross, f_img, f_struct, cfg.num_heads)?;
    fwd.trace.cross_attn_out = Some(o);
    let res = fwd.tape.add(f_img, o)?;
    let eps = F::from_f64(NORM_EPS);
    let refined = fwd.tape.layernorm(res, ids.cross_ln_gamma, ids.cross_ln_beta, eps)?;
    fwd.trace.img_refined = Some(refined);
    let fused = fwd.tape.concat_cols(&[refined, f_struct])?;
    fwd.trace.fused_pre_ffn = Some(fused);
    let ff1 = fwd.tape.linear(fused, ids.fusion_w1, ids.fusion_b1)?;
    let ff1 = fwd.tape.relu(ff1);
    let ff2 = fwd.tape.linear(ff1, ids.fusion_w2, ids.fusion_b2)?;
    let out = fwd.tape.add(fused, ff2)?;
    fwd.record_shape("f_fused", out);
    Ok(out)
}

/// Two-layer classifier over the fused representation: hidden layer with
/// ReLU and dropout, then Q logits.
pub fn classify<F: Real>(
    fwd: &mut Forward<F>,
    cfg: &ModelConfig,
    ids: &TapeParams,
    fused: ValueId,
) -> Result<ValueId> {
    let h = fwd.tape.linear(fused, ids.cls_w1, ids.cls_b1)?;
    let h = fwd.tape.relu(h);
    let h = fwd
        .tape
        .dropout(h, cfg.dropout, fwd.mode == Mode::Train, &mut fwd.dropout_rng)?;
    let logits = fwd.tape.linear(h, ids.cls_w2, ids.cls_b2)?;
    fwd.record_shape("logits", logits);
    Ok(logits)
}

/// Full composition on a preprocessed sample: normalized image `[3,S,S]` and
/// scaled structured vector `[1,8]` to `[1,Q]` logits.
pub fn forward<F: Real>(
    fwd: &mut Forward<F>,
    cfg: &ModelConfig,
    params: &ModelParams<F>,
    ids: &TapeParams,
    img: ValueId,
    struct_vec: ValueId,
) -> Result<ValueId> {
    let f_img = cnn_forward(fwd, cfg, params, ids, img)?;
    let f_struct = transformer_forward(fwd, cfg, ids, struct_vec)?;
    let fused = cross_attention_fuse(fwd, cfg, ids, f_img, f_struct)?;
    classify(fwd, cfg, ids, fused)
}

/// The `k` highest-logit indices, descending, ties broken by lower index.
pub fn predict_topk<F: Real>(logits: &[F], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k.min(logits.len()));
    order
}

/// Gradients of every trainable parameter after `backward`, in canonical
/// order; parameters off the backward path yield zeros.
pub fn collect_param_grads<F: Real>(tape: &Tape<F>, ids: &TapeParams) -> Vec<Vec<F>> {
    ids.trainable_ids()
        .iter()
        .map(|&id| {
            tape.grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![F::zero(); tape.value(id).len()])
        })
        .collect()
}

/// Folds collected batch statistics into the running estimates.
pub fn apply_bn_updates<F: Real>(params: &mut ModelParams<F>, stats: &[(usize, Vec<F>, Vec<F>)]) {
    let momentum = F::from_f64(BN_MOMENTUM);
    let keep = F::one() - momentum;
    for (block, mean, var) in stats {
        let rm = params.conv[*block].bn_running_mean.data_mut();
        for (r, &m) in rm.iter_mut().zip(mean) {
            *r = keep * *r + momentum * m;
        }
        let rv = params.conv[*block].bn_running_var.data_mut();
        for (r, &v) in rv.iter_mut().zip(var) {
            *r = keep * *r + momentum * v;
        }
    }
}
