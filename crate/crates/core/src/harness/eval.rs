//! Top-K accuracy and confusion-matrix evaluation.

use rayon::prelude::*;

use crate::airsim::Dataset;
use crate::beamnet::{forward, predict_topk, Forward, ModelConfig, ModelParams, TapeParams};
use crate::pipeline::StructScaler;
use crate::{Error, Result};

/// Evaluation result over one split: correct counts per requested K and the
/// (true, predicted-top-1) count matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub total: usize,
    pub k_list: Vec<usize>,
    pub topk_correct: Vec<usize>,
    pub confusion: Vec<Vec<u32>>,
}

impl EvalReport {
    pub fn topk_accuracy(&self, k: usize) -> f64 {
        let i = self
            .k_list
            .iter()
            .position(|&kk| kk == k)
            .unwrap_or_else(|| panic!("k={k} was not evaluated"));
        self.topk_correct[i] as f64 / self.total as f64
    }

    pub fn top1(&self) -> f64 {
        self.topk_accuracy(1)
    }

    /// Sum of the confusion diagonal — equals the top-1 correct count by
    /// construction.
    pub fn trace(&self) -> u64 {
        self.confusion.iter().enumerate().map(|(i, row)| row[i] as u64).sum()
    }

    pub fn confusion_total(&self) -> u64 {
        self.confusion.iter().flatten().map(|&c| c as u64).sum()
    }
}

/// Scores an arbitrary `(logits, true label)` stream. This is the metric
/// core shared by model evaluation and the synthetic predictors used in
/// tests (oracle logits, uniform-random logits).
pub fn evaluate_scores<F, I>(scored: I, num_classes: usize, k_list: &[usize]) -> Result<EvalReport>
where
    F: crate::numcore::Real,
    I: IntoIterator<Item = (Vec<F>, usize)>,
{
    if k_list.is_empty() || k_list.iter().any(|&k| k == 0 || k > num_classes) {
        return Err(Error::Eval(format!(
            "k list {k_list:?} invalid for {num_classes} classes"
        )));
    }
    let max_k = *k_list.iter().max().unwrap();
    let mut total = 0usize;
    let mut topk_correct = vec![0usize; k_list.len()];
    let mut confusion = vec![vec![0u32; num_classes]; num_classes];
    for (logits, label) in scored {
        if logits.len() != num_classes || label >= num_classes {
            return Err(Error::Eval(format!(
                "scored sample has {} logits / label {label}, expected {num_classes} classes",
                logits.len()
            )));
        }
        let ranked = predict_topk(&logits, max_k);
        for (slot, &k) in k_list.iter().enumerate() {
            if ranked[..k].contains(&label) {
                topk_correct[slot] += 1;
            }
        }
        confusion[label][ranked[0]] += 1;
        total += 1;
    }
    if total == 0 {
        return Err(Error::Eval("cannot evaluate an empty split".into()));
    }
    Ok(EvalReport {
        total,
        k_list: k_list.to_vec(),
        topk_correct,
        confusion,
    })
}

/// Runs the model in eval mode over the given sample indices.
pub fn evaluate(
    cfg: &ModelConfig,
    params: &ModelParams<f32>,
    dataset: &Dataset,
    indices: &[usize],
    scaler: &StructScaler,
    k_list: &[usize],
) -> Result<EvalReport> {
    if indices.is_empty() {
        return Err(Error::Eval("cannot evaluate an empty split".into()));
    }
    let score_one = |&idx: &usize| -> Result<(Vec<f32>, usize)> {
        let sample = &dataset.samples[idx];
        let img = super::train::prepare_image::<f32>(
            &sample.image,
            dataset.manifest.h_img,
            dataset.manifest.w_img,
            None,
        );
        let sv = super::train::prepare_struct::<f32>(&sample.struct_vec, scaler);
        let mut fwd = Forward::eval();
        let ids = TapeParams::lease(&mut fwd.tape, params);
        let img_id = fwd.tape.leaf(&img);
        let sv_id = fwd.tape.leaf(&sv);
        let logits = forward(&mut fwd, cfg, params, &ids, img_id, sv_id)?;
        Ok((fwd.tape.value(logits).to_vec(), sample.label as usize))
    };
    let scored: Vec<(Vec<f32>, usize)> = if crate::parallel_enabled() {
        indices.par_iter().map(score_one).collect::<Result<_>>()?
    } else {
        indices.iter().map(score_one).collect::<Result<_>>()?
    };
    evaluate_scores(scored, cfg.num_beams, k_list)
}

/// Row-normalized sub-matrix over the `n` most populous true classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionTopN {
    /// Class indices ordered by descending true-class count (ties: lower
    /// class index first).
    pub classes: Vec<usize>,
    /// Percentages of each row's full count, restricted to `classes`.
    pub rows_percent: Vec<Vec<f64>>,
    /// Percentage mass of each row falling outside the sub-matrix.
    pub residual_percent: Vec<f64>,
}

pub fn confusion_topn(matrix: &[Vec<u32>], n: usize) -> Result<ConfusionTopN> {
    let row_counts: Vec<u64> = matrix.iter().map(|r| r.iter().map(|&c| c as u64).sum()).collect();
    let nonempty = row_counts.iter().filter(|&&c| c > 0).count();
    if n == 0 || n > nonempty {
        return Err(Error::Eval(format!(
            "confusion_topn: n={n} but only {nonempty} classes have samples"
        )));
    }
    let mut order: Vec<usize> = (0..matrix.len()).collect();
    order.sort_by(|&a, &b| row_counts[b].cmp(&row_counts[a]).then(a.cmp(&b)));
    let classes: Vec<usize> = order.into_iter().take(n).collect();
    let mut rows_percent = Vec::with_capacity(n);
    let mut residual_percent = Vec::with_capacity(n);
    for &t in &classes {
        let denom = row_counts[t] as f64;
        let row: Vec<f64> = classes
            .iter()
            .map(|&p| 100.0 * matrix[t][p] as f64 / denom)
            .collect();
        let inside: f64 = row.iter().sum();
        rows_percent.push(row);
        residual_percent.push(100.0 - inside);
    }
    Ok(ConfusionTopN {
        classes,
        rows_percent,
        residual_percent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn oracle_logits_are_perfect() {
        let q = 8;
        let scored = (0..50).map(|i| {
            let label = i % q;
            let mut logits = vec![0f32; q];
            logits[label] = 10.0;
            (logits, label)
        });
        let r = evaluate_scores(scored, q, &[1, 3, 5]).unwrap();
        assert_eq!(r.topk_correct, vec![50, 50, 50]);
        assert_eq!(r.trace(), 50);
        for (i, row) in r.confusion.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                assert_eq!(c > 0, i == j && c > 0);
                if i != j {
                    assert_eq!(c, 0);
                }
            }
        }
    }

    #[test]
    fn random_logits_match_chance_level() {
        let q = 64;
        let n = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let scored: Vec<(Vec<f32>, usize)> = (0..n)
            .map(|_| {
                let logits: Vec<f32> = (0..q).map(|_| rng.gen_range(-1.0..1.0)).collect();
                (logits, rng.gen_range(0..q))
            })
            .collect();
        let r = evaluate_scores(scored, q, &[1, 3]).unwrap();
        // Binomial: p = k/q, 3 sigma around the mean.
        for (slot, k) in [1usize, 3].iter().enumerate() {
            let p = *k as f64 / q as f64;
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            let observed = r.topk_correct[slot] as f64;
            let expected = n as f64 * p;
            assert!(
                (observed - expected).abs() < 3.0 * sigma,
                "k={k}: observed {observed}, expected {expected} +- {sigma}"
            );
        }
    }

    #[test]
    fn topk_is_monotone_in_k() {
        let q = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let scored: Vec<(Vec<f32>, usize)> = (0..500)
            .map(|_| {
                let logits: Vec<f32> = (0..q).map(|_| rng.gen_range(-1.0..1.0)).collect();
                (logits, rng.gen_range(0..q))
            })
            .collect();
        let r = evaluate_scores(scored, q, &[1, 3, 5, 16]).unwrap();
        assert!(r.topk_correct.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(r.topk_correct[3], 500); // k = Q is exhaustive
        assert_eq!(r.trace() as usize, r.topk_correct[0]);
        assert_eq!(r.confusion_total() as usize, r.total);
    }

    #[test]
    fn empty_split_is_an_error() {
        let scored: Vec<(Vec<f32>, usize)> = vec![];
        assert!(matches!(
            evaluate_scores(scored, 4, &[1]),
            Err(Error::Eval(_))
        ));
    }

    #[test]
    fn confusion_topn_diagonal() {
        let m = vec![vec![5u32, 0], vec![0, 3]];
        let t = confusion_topn(&m, 2).unwrap();
        assert_eq!(t.classes, vec![0, 1]);
        assert_eq!(t.rows_percent[0], vec![100.0, 0.0]);
        assert_eq!(t.rows_percent[1], vec![0.0, 100.0]);
        assert!(t.residual_percent.iter().all(|&r| r.abs() < 1e-9));
    }

    #[test]
    fn confusion_topn_two_class_percentages() {
        let m = vec![vec![8u32, 2], vec![1, 9]];
        let t = confusion_topn(&m, 2).unwrap();
        assert_eq!(t.classes, vec![0, 1]); // both rows have 10; tie -> lower index
        assert_eq!(t.rows_percent[0], vec![80.0, 20.0]);
        assert_eq!(t.rows_percent[1], vec![10.0, 90.0]);
    }

    #[test]
    fn confusion_topn_full_matrix_rows_sum_to_100() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let q = 6;
        let mut m = vec![vec![0u32; q]; q];
        for row in m.iter_mut() {
            for c in row.iter_mut() {
                *c = rng.gen_range(1..20);
            }
        }
        let t = confusion_topn(&m, q).unwrap();
        for (row, resid) in t.rows_percent.iter().zip(&t.residual_percent) {
            let s: f64 = row.iter().sum();
            assert!((s - 100.0).abs() < 1e-9);
            assert!(resid.abs() < 1e-9);
        }
    }

    #[test]
    fn confusion_topn_orders_by_population() {
        let m = vec![vec![1u32, 0, 0], vec![0, 7, 0], vec![0, 0, 3]];
        let t = confusion_topn(&m, 2).unwrap();
        assert_eq!(t.classes, vec![1, 2]);
    }
}
