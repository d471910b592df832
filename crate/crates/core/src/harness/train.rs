//! The training loop: per-sample forward/backward, batch-averaged gradients,
//! Adam with step decay, periodic evaluation.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::eval::{evaluate, EvalReport};
use crate::airsim::Dataset;
use crate::beamnet::{
    apply_bn_updates, collect_param_grads, forward, Forward, ModelConfig, ModelParams,
    TapeParams,
};
use crate::numcore::{adam_step, AdamParams, AdamState, LrSchedule, Real, Tensor};
use crate::pipeline::{
    apply_scaler, augment_image, fit_scaler, normalize_image, split_dataset, ImageNormConstants,
    SplitSpec, StructScaler,
};
use crate::rng::{salt, stream};
use crate::{Error, Result};

/// Training protocol parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub milestones: Vec<usize>,
    pub decay_factor: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub train_fraction: f64,
    /// Optional global L2 gradient clip; off by default.
    pub grad_clip: Option<f64>,
    /// Train-time image augmentation (flip + padded random crop). The crop
    /// padding is fixed at 16 px, sized for full-resolution input; desk-scale
    /// runs on small images may want this off.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            lr: 1e-4,
            milestones: vec![30, 60, 90],
            decay_factor: 0.1,
            seed: 0,
            eval_every: 5,
            train_fraction: 0.8,
            grad_clip: None,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("train.epochs, batch_size, eval_every must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be finite and non-negative, got {}", self.lr)));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "train.milestones must be strictly ascending, got {:?}",
                self.milestones
            )));
        }
        if self.milestones.iter().any(|&m| m >= self.epochs) {
            return Err(Error::Config(format!(
                "train.milestones {:?} must all be below epochs {}",
                self.milestones, self.epochs
            )));
        }
        if !(0.0 < self.decay_factor && self.decay_factor < 1.0) {
            return Err(Error::Config(format!(
                "train.decay_factor must be in (0,1), got {}",
                self.decay_factor
            )));
        }
        if !(0.0 < self.train_fraction && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train.train_fraction must be in (0,1), got {}",
                self.train_fraction
            )));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("train.grad_clip must be positive, got {c}")));
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<LrSchedule> {
        LrSchedule::new(self.lr, self.milestones.clone(), self.decay_factor)
    }
}

/// One epoch of metrics. `eval` is present on evaluation epochs only.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub lr: f64,
    pub eval: Option<EvalReport>,
    pub wall_secs: f64,
}

/// Full training history plus the final held-out evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub epochs: Vec<EpochRecord>,
    pub final_eval: EvalReport,
}

impl MetricsReport {
    /// Plot-ready CSV: `epoch,loss,top1,top3,top5`, with accuracy columns
    /// empty on epochs without an evaluation. Wall-clock is deliberately
    /// excluded so identical runs serialize byte-identically.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,top1,top3,top5\n");
        for r in &self.epochs {
            let (t1, t3, t5) = match &r.eval {
                Some(e) => (
                    format!("{:.6}", e.topk_accuracy(1)),
                    format!("{:.6}", e.topk_accuracy(3).min(1.0)),
                    format!("{:.6}", e.topk_accuracy(5).min(1.0)),
                ),
                None => (String::new(), String::new(), String::new()),
            };
            out.push_str(&format!("{},{:.6},{},{},{}\n", r.epoch, r.train_loss, t1, t3, t5));
        }
        out
    }

    /// Final summary in TOML form.
    pub fn summary_toml(&self) -> String {
        let e = &self.final_eval;
        let mut out = String::from("[summary]\n");
        out.push_str(&format!("epochs = {}\n", self.epochs.len()));
        if let Some(last) = self.epochs.last() {
            out.push_str(&format!("final_epoch = {}\n", last.epoch));
            out.push_str(&format!("final_loss = {:.6}\n", last.train_loss));
            out.push_str(&format!("final_lr = {:e}\n", last.lr));
        }
        for (slot, &k) in e.k_list.iter().enumerate() {
            out.push_str(&format!(
                "top{} = {:.6}\n",
                k,
                e.topk_correct[slot] as f64 / e.total as f64
            ));
        }
        out.push_str(&format!("eval_samples = {}\n", e.total));
        out
    }

    /// Confusion matrix as a bare CSV count grid.
    pub fn confusion_csv(&self) -> String {
        let mut out = String::new();
        for row in &self.final_eval.confusion {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug)]
pub struct TrainOutput {
    pub params: ModelParams<f32>,
    pub scaler: StructScaler,
    pub metrics: MetricsReport,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// Passed to the per-epoch callback so the caller can persist checkpoints.
pub struct EpochSnapshot<'a> {
    pub epoch: usize,
    pub params: &'a ModelParams<f32>,
    pub scaler: &'a StructScaler,
    pub record: &'a EpochRecord,
    pub is_final: bool,
}

/// Augment (train mode) + normalize + cast into a `[3,H,W]` tensor. Eval-mode
/// callers pass `aug_rng = None`.
pub fn prepare_image<F: Real>(
    image: &[f32],
    h: usize,
    w: usize,
    aug_rng: Option<&mut rand_chacha::ChaCha8Rng>,
) -> Tensor<F> {
    let consts = ImageNormConstants::imagenet();
    let augmented = match aug_rng {
        Some(rng) => augment_image(image, h, w, true, rng),
        None => image.to_vec(),
    };
    let normalized = normalize_image(&augmented, &consts);
    Tensor::from_vec(
        vec![3, h, w],
        normalized.iter().map(|&v| F::from_f64(v as f64)).collect(),
    )
    .expect("image shape")
}

/// Min–max scale + cast into a `[1,8]` tensor.
pub fn prepare_struct<F: Real>(struct_vec: &[f32; 8], scaler: &StructScaler) -> Tensor<F> {
    let scaled = apply_scaler(struct_vec, scaler);
    Tensor::from_vec(
        vec![1, 8],
        scaled.iter().map(|&v| F::from_f64(v as f64)).collect(),
    )
    .expect("struct shape")
}

struct SampleResult {
    loss: f64,
    grads: Vec<Vec<f32>>,
    bn_stats: Vec<(usize, Vec<f32>, Vec<f32>)>,
}

#[allow(clippy::too_many_arguments)]
fn train_one_sample(
    cfg: &ModelConfig,
    params: &ModelParams<f32>,
    scaler: &StructScaler,
    dataset: &Dataset,
    idx: usize,
    epoch: usize,
    seed: u64,
    augment: bool,
) -> Result<SampleResult> {
    let sample = &dataset.samples[idx];
    let mut aug_rng = stream(seed, &[salt::AUGMENT, epoch as u64, idx as u64]);
    let img = prepare_image::<f32>(
        &sample.image,
        dataset.manifest.h_img,
        dataset.manifest.w_img,
        if augment { Some(&mut aug_rng) } else { None },
    );
    let sv = prepare_struct::<f32>(&sample.struct_vec, scaler);
    let drop_rng = stream(seed, &[salt::DROPOUT, epoch as u64, idx as u64]);
    let mut fwd = Forward::train(drop_rng);
    let ids = TapeParams::lease(&mut fwd.tape, params);
    let img_id = fwd.tape.leaf(&img);
    let sv_id = fwd.tape.leaf(&sv);
    let logits = forward(&mut fwd, cfg, params, &ids, img_id, sv_id)?;
    let loss = fwd.tape.cross_entropy(logits, &[sample.label as usize])?;
    let loss_value = fwd.tape.value(loss)[0] as f64;
    fwd.tape.backward(loss)?;
    let grads = collect_param_grads(&fwd.tape, &ids);
    Ok(SampleResult {
        loss: loss_value,
        grads,
        bn_stats: fwd.bn_batch_stats,
    })
}

/// Runs the full protocol: split, scaler fit on the training split only,
/// `epochs x batches` of forward/backward/Adam with the step-decay schedule,
/// evaluation on the held-out split every `eval_every` epochs and at the end.
///
/// `resume` continues a previous run: epoch numbering starts after
/// `resume.1` and the optimizer state starts fresh (checkpoints do not carry
/// Adam moments). The callback fires once per evaluation epoch.
pub fn train(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    dataset: &Dataset,
    resume: Option<(ModelParams<f32>, usize)>,
    mut on_snapshot: impl FnMut(&EpochSnapshot) -> Result<()>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    tc.validate()?;
    if dataset.manifest.q != cfg.num_beams {
        return Err(Error::Config(format!(
            "num_beams: dataset has Q={}, model expects {}",
            dataset.manifest.q, cfg.num_beams
        )));
    }
    if dataset.manifest.h_img != cfg.image_size || dataset.manifest.w_img != cfg.image_size {
        return Err(Error::Config(format!(
            "image_size: dataset is {}x{}, model expects {}",
            dataset.manifest.h_img, dataset.manifest.w_img, cfg.image_size
        )));
    }

    let split = SplitSpec {
        train_fraction: tc.train_fraction,
        seed: tc.seed,
    };
    let (train_idx, test_idx) = split_dataset(dataset.samples.len(), &split)?;
    let scaler = fit_scaler(train_idx.iter().map(|&i| &dataset.samples[i].struct_vec))?;

    let (mut params, start_epoch) = match resume {
        Some((p, e)) => (p, e + 1),
        None => (ModelParams::init(cfg, tc.seed), 0),
    };
    let schedule = tc.schedule()?;
    let param_lens: Vec<usize> = params.trainable().iter().map(|(_, t)| t.numel()).collect();
    let mut adam = AdamState::<f32>::new(&param_lens);

    let mut records: Vec<EpochRecord> = Vec::new();
    let mut last_eval: Option<EvalReport> = None;
    let end_epoch = start_epoch + tc.epochs;

    for epoch in start_epoch..end_epoch {
        let t0 = Instant::now();
        let lr = schedule.lr_at(epoch);
        let hp = AdamParams::new(lr);
        let mut shuffle_rng = stream(tc.seed, &[salt::SHUFFLE, 1, epoch as u64]);
        let batches = crate::pipeline::make_batches(&train_idx, tc.batch_size, true, &mut shuffle_rng);

        let mut epoch_loss = 0.0;
        for (batch_no, batch) in batches.iter().enumerate() {
            let results: Vec<SampleResult> = if crate::parallel_enabled() {
                batch
                    .par_iter()
                    .map(|&idx| {
                        train_one_sample(cfg, &params, &scaler, dataset, idx, epoch, tc.seed, tc.augment)
                    })
                    .collect::<Result<_>>()?
            } else {
                batch
                    .iter()
                    .map(|&idx| {
                        train_one_sample(cfg, &params, &scaler, dataset, idx, epoch, tc.seed, tc.augment)
                    })
                    .collect::<Result<_>>()?
            };

            // Ordered reduction keeps parallel mode byte-identical.
            let inv = 1.0f32 / batch.len() as f32;
            let mut grads: Vec<Vec<f32>> = param_lens.iter().map(|&n| vec![0.0; n]).collect();
            let mut batch_loss = 0.0;
            for r in &results {
                batch_loss += r.loss;
                for (acc, g) in grads.iter_mut().zip(&r.grads) {
                    for (a, &v) in acc.iter_mut().zip(g) {
                        *a += v * inv;
                    }
                }
            }
            batch_loss /= batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {epoch}, batch {batch_no}"
                )));
            }
            epoch_loss += batch_loss;

            if let Some(max_norm) = tc.grad_clip {
                clip_global_norm(&mut grads, max_norm as f32);
            }

            {
                let mut trainable = params.trainable_mut();
                let mut views: Vec<(&str, &mut [f32])> = trainable
                    .iter_mut()
                    .map(|(name, t)| (name.as_str(), t.data_mut()))
                    .collect();
                adam_step(&mut views, &grads, &mut adam, &hp)?;
            }
            for r in &results {
                apply_bn_updates(&mut params, &r.bn_stats);
            }
        }
        let train_loss = epoch_loss / batches.len() as f64;

        let is_final = epoch + 1 == end_epoch;
        let eval = if (epoch + 1 - start_epoch) % tc.eval_every == 0 || is_final {
            let report = evaluate(cfg, &params, dataset, &test_idx, &scaler, &[1, 3, 5])?;
            last_eval = Some(report.clone());
            Some(report)
        } else {
            None
        };

        let record = EpochRecord {
            epoch,
            train_loss,
            lr,
            eval,
            wall_secs: t0.elapsed().as_secs_f64(),
        };
        if record.eval.is_some() || is_final {
            on_snapshot(&EpochSnapshot {
                epoch,
                params: &params,
                scaler: &scaler,
                record: &record,
                is_final,
            })?;
        }
        records.push(record);
    }

    let final_eval = last_eval.expect("final epoch always evaluates");
    Ok(TrainOutput {
        params,
        scaler,
        metrics: MetricsReport {
            epochs: records,
            final_eval,
        },
        train_indices: train_idx,
        test_indices: test_idx,
    })
}

fn clip_global_norm(grads: &mut [Vec<f32>], max_norm: f32) {
    let norm_sq: f32 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&v| v * v)
        .sum();
    let norm = norm_sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
}

/// One sweep arm: the learning rate and its outcome. A diverged arm carries
/// the error instead of aborting the sweep.
#[derive(Debug)]
pub struct SweepArm {
    pub lr: f64,
    pub outcome: Result<TrainOutput>,
}

/// Trains one arm per learning rate with everything else held fixed —
/// identical seed, identical dataset, identical split.
pub fn lr_sweep(
    cfg: &ModelConfig,
    base: &TrainConfig,
    lrs: &[f64],
    dataset: &Dataset,
) -> Vec<SweepArm> {
    lrs.iter()
        .map(|&lr| {
            let tc = TrainConfig { lr, ..base.clone() };
            SweepArm {
                lr,
                outcome: train(cfg, &tc, dataset, None, |_| Ok(())),
            }
        })
        .collect()
}
