//! Dataset generation and the on-disk format.
//!
//! A dataset directory holds `manifest` (TOML: n, image dims, Q, M, K, seed,
//! format version) and `samples.bin` — per sample, little-endian: the image
//! as 3 row-major f32 planes, 8 f32 structured values, one u16 label. The
//! layout is defined byte-exactly so datasets are portable.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::camera::{render_image, CameraConfig};
use super::channel::{make_channel, optimal_beam, RadioConfig};
use super::codebook::dft_codebook;
use super::scene::{noisy_struct_vec, sample_uav_state, SceneConfig};
use crate::rng::{salt, stream};
use crate::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// One labeled time instant.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[3, H, W]` row-major planes, values in `[0, 1]`.
    pub image: Vec<f32>,
    /// Position (3), velocity (3), pitch, yaw — sensor-noisy.
    pub struct_vec: [f32; 8],
    /// Ground-truth optimal beam index, `< Q`.
    pub label: u16,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub n: usize,
    pub h_img: usize,
    pub w_img: usize,
    pub q: usize,
    pub m: usize,
    pub k: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn image_len(&self) -> usize {
        3 * self.manifest.h_img * self.manifest.w_img
    }

    /// Count of samples per label.
    pub fn label_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0usize; self.manifest.q];
        for s in &self.samples {
            hist[s.label as usize] += 1;
        }
        hist
    }
}

/// Generates `n` labeled samples. Each sample derives its own RNG stream from
/// `(seed, sample_index)`, so any parallel schedule produces byte-identical
/// output; the UAV state is rejection-sampled into the camera frustum.
pub fn generate_dataset(
    n: usize,
    scene: &SceneConfig,
    camera: &CameraConfig,
    radio: &RadioConfig,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    scene.validate()?;
    camera.validate()?;
    radio.validate()?;
    if radio.num_beams > u16::MAX as usize {
        return Err(Error::Config(format!(
            "num_beams {} exceeds the u16 label range",
            radio.num_beams
        )));
    }
    let codebook = dft_codebook(radio.num_antennas, radio.num_beams)?;
    let (h, w) = (scene.image_size, scene.image_size);

    let gen_one = |i: usize| -> Result<Sample> {
        let mut rng = stream(seed, &[salt::DATASET_SAMPLE, i as u64]);
        let mut state = None;
        for _ in 0..64 {
            let candidate = sample_uav_state(scene, i as u64, &mut rng);
            if let Ok((u, v, _)) = camera.project(candidate.position, w, h) {
                if u >= 0.0 && u <= (w - 1) as f64 && v >= 0.0 && v <= (h - 1) as f64 {
                    state = Some(candidate);
                    break;
                }
            }
        }
        let state = state.ok_or_else(|| {
            Error::Geometry(format!(
                "could not place sample {i} inside the camera frustum; widen the FOV or narrow the flight volume"
            ))
        })?;
        let channel = make_channel(&state, scene.bs_position, radio, &mut rng)?;
        let label = optimal_beam(&channel, &codebook, radio) as u16;
        let image_f64 = render_image(&state, camera, scene, h, w, &mut rng)?;
        let image = image_f64.iter().map(|&v| v as f32).collect();
        let sv = noisy_struct_vec(&state, scene, &mut rng);
        let mut struct_vec = [0f32; 8];
        for (dst, src) in struct_vec.iter_mut().zip(sv) {
            *dst = src as f32;
        }
        Ok(Sample {
            image,
            struct_vec,
            label,
        })
    };

    let samples: Vec<Sample> = if crate::parallel_enabled() {
        (0..n).into_par_iter().map(gen_one).collect::<Result<_>>()?
    } else {
        (0..n).map(gen_one).collect::<Result<_>>()?
    };

    Ok(Dataset {
        manifest: Manifest {
            format_version: DATASET_FORMAT_VERSION,
            n,
            h_img: h,
            w_img: w,
            q: radio.num_beams,
            m: radio.num_antennas,
            k: radio.num_subcarriers,
            seed,
        },
        samples,
    })
}

/// Writes `manifest` + `samples.bin` into `dir` (created if missing), each
/// via a temp file + rename so interrupted runs never leave partial files.
pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest_text = toml::to_string_pretty(&ds.manifest)
        .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
    write_atomic(&dir.join("manifest"), manifest_text.as_bytes())?;

    let image_len = ds.image_len();
    let mut buf = Vec::with_capacity(ds.samples.len() * (4 * (image_len + 8) + 2));
    for s in &ds.samples {
        if s.image.len() != image_len {
            return Err(Error::Format("sample image length disagrees with manifest".into()));
        }
        for &v in &s.image {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for &v in &s.struct_vec {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&s.label.to_le_bytes());
    }
    write_atomic(&dir.join("samples.bin"), &buf)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_text = fs::read_to_string(dir.join("manifest"))
        .map_err(|e| Error::Format(format!("reading {}/manifest: {e}", dir.display())))?;
    let manifest: Manifest = toml::from_str(&manifest_text)
        .map_err(|e| Error::Format(format!("parsing manifest: {e}")))?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset format version {} (expected {DATASET_FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let image_len = 3 * manifest.h_img * manifest.w_img;
    let record = 4 * (image_len + 8) + 2;
    let mut bytes = Vec::new();
    fs::File::open(dir.join("samples.bin"))?.read_to_end(&mut bytes)?;
    if bytes.len() != manifest.n * record {
        return Err(Error::Format(format!(
            "samples.bin is {} bytes, expected {} for n={}",
            bytes.len(),
            manifest.n * record,
            manifest.n
        )));
    }
    let mut samples = Vec::with_capacity(manifest.n);
    for chunk in bytes.chunks_exact(record) {
        let mut off = 0;
        let read_f32 = |off: &mut usize| {
            let v = f32::from_le_bytes(chunk[*off..*off + 4].try_into().unwrap());
            *off += 4;
            v
        };
        let image: Vec<f32> = (0..image_len).map(|_| read_f32(&mut off)).collect();
        let mut struct_vec = [0f32; 8];
        for v in struct_vec.iter_mut() {
            *v = read_f32(&mut off);
        }
        let label = u16::from_le_bytes(chunk[off..off + 2].try_into().unwrap());
        if (label as usize) >= manifest.q {
            return Err(Error::Format(format!(
                "label {label} out of range for q={}",
                manifest.q
            )));
        }
        samples.push(Sample {
            image,
            struct_vec,
            label,
        });
    }
    Ok(Dataset { manifest, samples })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
