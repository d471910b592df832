//! Preprocessing: image augmentation and normalization, min–max scaling of
//! the structured vector, train/test splitting, and batching.
//!
//! Everything here is a pure function of its inputs plus an explicit RNG
//! stream, so per-sample work can be scheduled in parallel without changing
//! results.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Per-channel normalization constants. [`ImageNormConstants::imagenet`] is
/// the standard mean/std pair used for RGB inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageNormConstants {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl ImageNormConstants {
    pub fn imagenet() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

/// Per-channel `(x - mean) / std` over a `[3, H, W]` image.
pub fn normalize_image(img: &[f32], c: &ImageNormConstants) -> Vec<f32> {
    let plane = img.len() / 3;
    let mut out = Vec::with_capacity(img.len());
    for ch in 0..3 {
        let (m, s) = (c.mean[ch], c.std[ch]);
        out.extend(img[ch * plane..(ch + 1) * plane].iter().map(|&v| (v - m) / s));
    }
    out
}

/// Inverse of [`normalize_image`].
pub fn denormalize_image(img: &[f32], c: &ImageNormConstants) -> Vec<f32> {
    let plane = img.len() / 3;
    let mut out = Vec::with_capacity(img.len());
    for ch in 0..3 {
        let (m, s) = (c.mean[ch], c.std[ch]);
        out.extend(img[ch * plane..(ch + 1) * plane].iter().map(|&v| v * s + m));
    }
    out
}

/// Padding used by the random crop, in pixels per side.
pub const CROP_PAD: usize = 16;

/// Train-time augmentation: horizontal flip with probability 0.5, then a
/// random crop out of a 16-pixel zero padding. Eval mode is the identity.
pub fn augment_image<R: Rng>(img: &[f32], h: usize, w: usize, train: bool, rng: &mut R) -> Vec<f32> {
    if !train {
        return img.to_vec();
    }
    let flip = rng.gen_bool(0.5);
    let off_y = rng.gen_range(0..=2 * CROP_PAD);
    let off_x = rng.gen_range(0..=2 * CROP_PAD);
    apply_flip_crop(img, h, w, flip, off_y, off_x)
}

/// Deterministic core of [`augment_image`]: optional horizontal flip, then a
/// crop of the `CROP_PAD`-padded image at offset `(off_y, off_x)`. Offset
/// `(CROP_PAD, CROP_PAD)` recovers the unpadded image.
pub fn apply_flip_crop(
    img: &[f32],
    h: usize,
    w: usize,
    flip: bool,
    off_y: usize,
    off_x: usize,
) -> Vec<f32> {
    debug_assert!(off_y <= 2 * CROP_PAD && off_x <= 2 * CROP_PAD);
    let mut out = vec![0f32; img.len()];
    for ch in 0..3 {
        let plane = &img[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            // Source row in the virtual padded image.
            let py = y + off_y;
            if py < CROP_PAD || py >= CROP_PAD + h {
                continue; // zero padding
            }
            let sy = py - CROP_PAD;
            for x in 0..w {
                let px = x + off_x;
                if px < CROP_PAD || px >= CROP_PAD + w {
                    continue;
                }
                let sx = px - CROP_PAD;
                let src_x = if flip { w - 1 - sx } else { sx };
                dst[y * w + x] = plane[sy * w + src_x];
            }
        }
    }
    out
}

/// Bilinear resize of a `[3, H, W]` image to `[3, out_h, out_w]`. The
/// simulator renders natively at the target size; this exists for ingesting
/// external images.
pub fn resize_bilinear(img: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    let mut out = vec![0f32; 3 * out_h * out_w];
    let sy = if out_h > 1 { (h - 1) as f32 / (out_h - 1) as f32 } else { 0.0 };
    let sx = if out_w > 1 { (w - 1) as f32 / (out_w - 1) as f32 } else { 0.0 };
    for ch in 0..3 {
        let plane = &img[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        for oy in 0..out_h {
            let fy = oy as f32 * sy;
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let ty = fy - y0 as f32;
            for ox in 0..out_w {
                let fx = ox as f32 * sx;
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let tx = fx - x0 as f32;
                let top = plane[y0 * w + x0] * (1.0 - tx) + plane[y0 * w + x1] * tx;
                let bot = plane[y1 * w + x0] * (1.0 - tx) + plane[y1 * w + x1] * tx;
                dst[oy * out_w + ox] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    out
}

/// Min–max scaler over the 8 structured features, fit on the training split
/// only.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StructScaler {
    pub min: [f32; 8],
    pub max: [f32; 8],
}

/// Fits per-feature minima/maxima. The caller is responsible for passing
/// training-split samples only; feeding test data here leaks its range into
/// the stored scaler.
pub fn fit_scaler<'a, I>(train_samples: I) -> Result<StructScaler>
where
    I: IntoIterator<Item = &'a [f32; 8]>,
{
    let mut min = [f32::INFINITY; 8];
    let mut max = [f32::NEG_INFINITY; 8];
    let mut seen = false;
    for s in train_samples {
        seen = true;
        for i in 0..8 {
            min[i] = min[i].min(s[i]);
            max[i] = max[i].max(s[i]);
        }
    }
    if !seen {
        return Err(Error::Config("cannot fit a scaler on an empty split".into()));
    }
    Ok(StructScaler { min, max })
}

/// `(s - min) / (max - min)` per feature. A degenerate feature (max == min)
/// maps to 0; out-of-range test values pass through unclipped.
pub fn apply_scaler(s: &[f32; 8], scaler: &StructScaler) -> [f32; 8] {
    let mut out = [0f32; 8];
    for i in 0..8 {
        let range = scaler.max[i] - scaler.min[i];
        out[i] = if range > 0.0 { (s[i] - scaler.min[i]) / range } else { 0.0 };
    }
    out
}

/// Train/test split parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

/// Uniform random permutation of `0..n` under the seed; the first
/// `floor(train_fraction * n)` indices train, the rest test.
pub fn split_dataset(n: usize, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::Config(format!("cannot split {n} samples")));
    }
    if !(0.0 < spec.train_fraction && spec.train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must be in (0,1), got {}",
            spec.train_fraction
        )));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = crate::rng::stream(spec.seed, &[crate::rng::salt::SHUFFLE, 0]);
    indices.shuffle(&mut rng);
    let n_train = ((spec.train_fraction * n as f64).floor() as usize).clamp(1, n - 1);
    let test = indices.split_off(n_train);
    Ok((indices, test))
}

/// Splits `indices` into batches of `batch_size`, shuffling first when
/// requested; the final partial batch is retained.
pub fn make_batches<R: Rng>(
    indices: &[usize],
    batch_size: usize,
    shuffle: bool,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1);
    let mut order = indices.to_vec();
    if shuffle {
        order.shuffle(rng);
    }
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalize_hits_paper_constants() {
        let c = ImageNormConstants::imagenet();
        // One pixel per channel.
        let img = [0.485f32, 0.5, 0.406];
        let out = normalize_image(&img, &c);
        assert_eq!(out[0], 0.0); // channel 0 mean maps to 0
        assert_eq!(out[2], 0.0); // channel 2 mean maps to 0
        let one = normalize_image(&[1.0, 0.0, 0.0], &c);
        assert!((one[0] - 2.2489083).abs() < 1e-4, "{}", one[0]);
    }

    #[test]
    fn normalize_roundtrips() {
        let c = ImageNormConstants::imagenet();
        let img: Vec<f32> = (0..3 * 4 * 4).map(|i| (i % 17) as f32 / 16.0).collect();
        let back = denormalize_image(&normalize_image(&img, &c), &c);
        for (a, b) in img.iter().zip(&back) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn eval_mode_augment_is_identity() {
        let img: Vec<f32> = (0..3 * 8 * 8).map(|i| i as f32).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(augment_image(&img, 8, 8, false, &mut rng), img);
    }

    #[test]
    fn forced_double_flip_restores_image() {
        let img: Vec<f32> = (0..3 * 6 * 6).map(|i| i as f32 * 0.1).collect();
        let once = apply_flip_crop(&img, 6, 6, true, CROP_PAD, CROP_PAD);
        let twice = apply_flip_crop(&once, 6, 6, true, CROP_PAD, CROP_PAD);
        assert_eq!(twice, img);
    }

    #[test]
    fn centered_crop_cancels_padding() {
        let img: Vec<f32> = (0..3 * 5 * 5).map(|i| i as f32).collect();
        assert_eq!(apply_flip_crop(&img, 5, 5, false, CROP_PAD, CROP_PAD), img);
    }

    #[test]
    fn augmentation_preserves_shape_and_range() {
        let img: Vec<f32> = (0..3 * 10 * 10).map(|i| (i % 11) as f32 / 10.0).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let out = augment_image(&img, 10, 10, true, &mut rng);
            assert_eq!(out.len(), img.len());
            assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn scaler_midpoint_and_endpoints() {
        let a = [2.0f32; 8];
        let b = [4.0f32; 8];
        let scaler = fit_scaler([&a, &b]).unwrap();
        let mid = apply_scaler(&[3.0; 8], &scaler);
        assert!(mid.iter().all(|&v| v == 0.5));
        assert!(apply_scaler(&a, &scaler).iter().all(|&v| v == 0.0));
        assert!(apply_scaler(&b, &scaler).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn degenerate_feature_maps_to_zero() {
        let a = [1.0f32; 8];
        let scaler = fit_scaler([&a, &a]).unwrap();
        let out = apply_scaler(&[123.0; 8], &scaler);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_range_values_are_not_clipped() {
        let a = [0.0f32; 8];
        let b = [1.0f32; 8];
        let scaler = fit_scaler([&a, &b]).unwrap();
        let out = apply_scaler(&[2.0; 8], &scaler);
        assert!(out.iter().all(|&v| v == 2.0));
    }

    #[test]
    fn scaler_ignores_data_it_never_saw() {
        // Fitting on train-only must give a different scaler than fitting on
        // train + test when test widens the range, and refitting on the same
        // train split reproduces it exactly.
        let train = [[0.0f32; 8], [1.0; 8]];
        let test = [[5.0f32; 8]];
        let s_train = fit_scaler(train.iter()).unwrap();
        let s_union = fit_scaler(train.iter().chain(test.iter())).unwrap();
        assert_ne!(s_train, s_union);
        let again = fit_scaler(train.iter()).unwrap();
        assert_eq!(s_train, again);
    }

    #[test]
    fn split_counts_and_partition() {
        let spec = SplitSpec { train_fraction: 0.8, seed: 4 };
        let (train, test) = split_dataset(10, &spec).unwrap();
        assert_eq!(train.len(), 8);
        assert_eq!(test.len(), 2);
        let mut all: Vec<usize> = train.iter().chain(test.iter()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let (train2, test2) = split_dataset(10, &spec).unwrap();
        assert_eq!(train, train2);
        assert_eq!(test, test2);
    }

    #[test]
    fn batch_sizes_and_order() {
        let indices: Vec<usize> = (0..100).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let batches = make_batches(&indices, 32, false, &mut rng);
        let sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![32, 32, 32, 4]);
        // Shuffle off preserves order.
        let flat: Vec<usize> = batches.into_iter().flatten().collect();
        assert_eq!(flat, indices);
    }

    #[test]
    fn resize_identity_and_constant() {
        let img: Vec<f32> = (0..3 * 4 * 4).map(|i| i as f32 / 48.0).collect();
        assert_eq!(resize_bilinear(&img, 4, 4, 4, 4), img);
        let flat = vec![0.6f32; 3 * 3 * 3];
        let up = resize_bilinear(&flat, 3, 3, 7, 7);
        assert!(up.iter().all(|&v| (v - 0.6).abs() < 1e-6));
    }

    proptest! {
        #[test]
        fn batches_partition_indices(n in 1usize..200, bs in 1usize..40, shuffle in proptest::bool::ANY) {
            let indices: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
            let batches = make_batches(&indices, bs, shuffle, &mut rng);
            let mut flat: Vec<usize> = batches.into_iter().flatten().collect();
            flat.sort_unstable();
            prop_assert_eq!(flat, indices);
        }

        #[test]
        fn split_is_disjoint_and_exhaustive(n in 2usize..300, seed in 0u64..50) {
            let spec = SplitSpec { train_fraction: 0.8, seed };
            let (train, test) = split_dataset(n, &spec).unwrap();
            let mut all: Vec<usize> = train.iter().chain(test.iter()).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}
