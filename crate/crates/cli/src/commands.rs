//! Command implementations.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use beamcast::airsim::{generate_dataset, load_dataset, save_dataset, Dataset};
use beamcast::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use beamcast::harness::{self, EpochSnapshot, MetricsReport, TrainConfig};
use beamcast::pipeline::{split_dataset, SplitSpec};
use beamcast::runconfig::RunConfig;
use beamcast::{Error, Result};

use crate::{EvalArgs, GenDataArgs, SweepArgs, TrainArgs};

fn load_run_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// Temp-file + rename so interrupted runs never leave partial outputs.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn gen_data(args: GenDataArgs) -> Result<()> {
    if args.samples == 0 {
        return Err(Error::Config("--samples must be at least 1".into()));
    }
    let mut cfg = load_run_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(s) = args.image_size {
        cfg.scene.image_size = s;
    }
    if let Some(q) = args.num_beams {
        cfg.radio.num_beams = q;
    }
    if let Some(m) = args.num_antennas {
        cfg.radio.num_antennas = m;
    }
    cfg.scene.validate()?;
    cfg.radio.validate()?;

    if args.out.exists() {
        let non_empty = fs::read_dir(&args.out)?.next().is_some();
        if non_empty && !args.force {
            return Err(Error::Config(format!(
                "{} exists and is not empty; pass --force to overwrite",
                args.out.display()
            )));
        }
    }

    let dataset = generate_dataset(args.samples, &cfg.scene, &cfg.camera, &cfg.radio, cfg.seed)?;
    save_dataset(&args.out, &dataset)?;

    let hist = dataset.label_histogram();
    let distinct = hist.iter().filter(|&&c| c > 0).count();
    let mut ranked: Vec<(usize, usize)> = hist.iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    println!(
        "wrote {} samples to {} (Q={}, M={}, K={}, image={}x{}, seed={})",
        dataset.samples.len(),
        args.out.display(),
        dataset.manifest.q,
        dataset.manifest.m,
        dataset.manifest.k,
        dataset.manifest.h_img,
        dataset.manifest.w_img,
        dataset.manifest.seed,
    );
    println!("labels: {distinct}/{} beams hit", dataset.manifest.q);
    let top: Vec<String> = ranked
        .iter()
        .take(5)
        .filter(|(_, c)| *c > 0)
        .map(|(q, c)| format!("beam {q}: {c}"))
        .collect();
    println!("most common: {}", top.join(", "));
    Ok(())
}

fn write_metrics(out_dir: &Path, metrics: &MetricsReport) -> Result<()> {
    write_atomic(&out_dir.join("metrics.csv"), metrics.to_csv().as_bytes())?;
    write_atomic(&out_dir.join("summary.toml"), metrics.summary_toml().as_bytes())?;
    write_atomic(&out_dir.join("confusion.csv"), metrics.confusion_csv().as_bytes())?;
    Ok(())
}

fn print_epoch(snapshot: &EpochSnapshot) {
    let r = snapshot.record;
    let eval_part = match &r.eval {
        Some(e) => format!(
            " [top1 {:.4} top3 {:.4} top5 {:.4}]",
            e.topk_accuracy(1),
            e.topk_accuracy(3),
            e.topk_accuracy(5)
        ),
        None => String::new(),
    };
    println!(
        "epoch {:>3}: loss {:.4}, lr {:.1e}{eval_part} ({:.1}s)",
        r.epoch, r.train_loss, r.lr, r.wall_secs
    );
}

pub fn train(args: TrainArgs) -> Result<()> {
    let run_cfg = load_run_config(&args.config)?;
    let dataset = load_dataset(&args.data)?;

    let (model_cfg, resume_state, mut train_cfg) = match &args.resume {
        Some(ckpt_path) => {
            let ckpt = load_checkpoint(ckpt_path)?;
            let mut tc = run_cfg.train.clone();
            tc.seed = ckpt.train.seed; // streams must continue the same run
            (ckpt.model.clone(), Some((ckpt.params, ckpt.epoch as usize)), tc)
        }
        None => (run_cfg.model_config()?, None, run_cfg.train.clone()),
    };
    if let Some(seed) = args.seed {
        if resume_state.is_some() {
            return Err(Error::Config("--seed cannot be combined with --resume".into()));
        }
        train_cfg.seed = seed;
    }

    fs::create_dir_all(&args.out)?;
    let out_dir = args.out.clone();
    let tc_for_ckpt = train_cfg.clone();
    let model_for_ckpt = model_cfg.clone();
    let output = harness::train(
        &model_cfg,
        &train_cfg,
        &dataset,
        resume_state,
        |snapshot| {
            print_epoch(snapshot);
            let ckpt = Checkpoint {
                model: model_for_ckpt.clone(),
                train: tc_for_ckpt.clone(),
                scaler: snapshot.scaler.clone(),
                epoch: snapshot.epoch as u32,
                params: snapshot.params.clone(),
            };
            let name = if snapshot.is_final {
                "checkpoint.ckpt".to_string()
            } else {
                format!("checkpoint_epoch_{:04}.ckpt", snapshot.epoch)
            };
            save_checkpoint(&out_dir.join(name), &ckpt)
        },
    )?;

    write_metrics(&args.out, &output.metrics)?;
    let e = &output.metrics.final_eval;
    println!(
        "done: top1 {:.4}, top3 {:.4}, top5 {:.4} on {} held-out samples",
        e.topk_accuracy(1),
        e.topk_accuracy(3),
        e.topk_accuracy(5),
        e.total
    );
    println!("checkpoint: {}", args.out.join("checkpoint.ckpt").display());
    Ok(())
}

fn parse_topk(s: &str, q: usize) -> Result<Vec<usize>> {
    let mut ks = Vec::new();
    for part in s.split(',') {
        let k: usize = part
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("--topk: `{part}` is not an integer")))?;
        if k == 0 || k > q {
            return Err(Error::Config(format!("--topk: k={k} out of range for Q={q}")));
        }
        if !ks.contains(&k) {
            ks.push(k);
        }
    }
    if ks.is_empty() {
        return Err(Error::Config("--topk: need at least one K".into()));
    }
    Ok(ks)
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let dataset = load_dataset(&args.data)?;
    let k_list = parse_topk(&args.topk, ckpt.model.num_beams)?;

    let indices: Vec<usize> = match args.split.as_str() {
        "all" => (0..dataset.samples.len()).collect(),
        which => {
            let spec = SplitSpec {
                train_fraction: ckpt.train.train_fraction,
                seed: ckpt.train.seed,
            };
            let (train_idx, test_idx) = split_dataset(dataset.samples.len(), &spec)?;
            if which == "train" {
                train_idx
            } else {
                test_idx
            }
        }
    };

    let report = harness::evaluate(&ckpt.model, &ckpt.params, &dataset, &indices, &ckpt.scaler, &k_list)?;
    println!("samples: {} ({})", report.total, args.split);
    println!("{:>4}  {}", "k", "accuracy");
    for (slot, &k) in report.k_list.iter().enumerate() {
        println!(
            "{k:>4}  {:.6}",
            report.topk_correct[slot] as f64 / report.total as f64
        );
    }
    if let Some(path) = &args.confusion_out {
        let mut csv = String::new();
        for row in &report.confusion {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            csv.push_str(&cells.join(","));
            csv.push('\n');
        }
        write_atomic(path, csv.as_bytes())?;
        println!("confusion matrix: {}", path.display());
    }
    Ok(())
}

fn parse_lrs(s: &str) -> Result<Vec<f64>> {
    let mut lrs: Vec<f64> = Vec::new();
    for part in s.split(',') {
        let lr: f64 = part
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("--lrs: `{part}` is not a number")))?;
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("--lrs: {lr} must be finite and non-negative")));
        }
        if lrs.contains(&lr) {
            eprintln!("warning: duplicate lr {lr} ignored");
        } else {
            lrs.push(lr);
        }
    }
    if lrs.is_empty() {
        return Err(Error::Config("--lrs: need at least one learning rate".into()));
    }
    Ok(lrs)
}

/// Directory-safe arm name: `1e-4` -> `lr_1e-4`.
fn arm_dir(lr: f64) -> String {
    format!("lr_{lr:e}").replace(['+'], "")
}

pub fn sweep(args: SweepArgs) -> Result<()> {
    let run_cfg = load_run_config(&args.config)?;
    let dataset: Dataset = load_dataset(&args.data)?;
    let model_cfg = run_cfg.model_config()?;
    let mut base_tc: TrainConfig = run_cfg.train.clone();
    if let Some(seed) = args.seed {
        base_tc.seed = seed;
    }
    let lrs = parse_lrs(&args.lrs)?;
    fs::create_dir_all(&args.out)?;

    let mut rows = vec!["lr,status,final_top1,final_top3".to_string()];
    for &lr in &lrs {
        println!("— sweep arm lr={lr:e}");
        let tc = TrainConfig { lr, ..base_tc.clone() };
        let arm_out = args.out.join(arm_dir(lr));
        fs::create_dir_all(&arm_out)?;
        let model_for_ckpt = model_cfg.clone();
        let tc_for_ckpt = tc.clone();
        let arm_dir_clone = arm_out.clone();
        let outcome = harness::train(&model_cfg, &tc, &dataset, None, |snapshot| {
            print_epoch(snapshot);
            if snapshot.is_final {
                let ckpt = Checkpoint {
                    model: model_for_ckpt.clone(),
                    train: tc_for_ckpt.clone(),
                    scaler: snapshot.scaler.clone(),
                    epoch: snapshot.epoch as u32,
                    params: snapshot.params.clone(),
                };
                save_checkpoint(&arm_dir_clone.join("checkpoint.ckpt"), &ckpt)?;
            }
            Ok(())
        });
        match outcome {
            Ok(output) => {
                write_metrics(&arm_out, &output.metrics)?;
                let e = &output.metrics.final_eval;
                rows.push(format!(
                    "{lr:e},ok,{:.6},{:.6}",
                    e.topk_accuracy(1),
                    e.topk_accuracy(3)
                ));
            }
            Err(err) => {
                eprintln!("arm lr={lr:e} failed: {err}");
                rows.push(format!("{lr:e},failed,,"));
            }
        }
    }
    let csv = rows.join("\n") + "\n";
    write_atomic(&args.out.join("sweep.csv"), csv.as_bytes())?;
    println!("{csv}");
    Ok(())
}
