//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  b"BEAMCAST"
//! version  u32      currently 1
//! epoch    u32      last completed epoch
//! model    u32 len + TOML bytes (ModelConfig)
//! train    u32 len + TOML bytes (TrainConfig)
//! scaler   16 x f32 (min[8], max[8])
//! count    u32      number of named tensors
//! tensor   u32 name len + UTF-8 name, u32 ndim, u32 dims..., f32 payload
//! ```
//!
//! Tensors cover every trainable parameter plus the batchnorm running
//! statistics, in the canonical order of `ModelParams::named_tensors`, so
//! save -> load -> save is byte-identical. Loading rejects bad magic, unknown
//! versions, wrong shapes, missing/unknown tensor names, and trailing bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::beamnet::{ModelConfig, ModelParams};
use crate::harness::TrainConfig;
use crate::pipeline::StructScaler;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BEAMCAST";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub scaler: StructScaler,
    pub epoch: u32,
    pub params: ModelParams<f32>,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&ckpt.epoch.to_le_bytes());

    let model_toml = toml::to_string(&ckpt.model)
        .map_err(|e| Error::Format(format!("model config serialization: {e}")))?;
    let train_toml = toml::to_string(&ckpt.train)
        .map_err(|e| Error::Format(format!("train config serialization: {e}")))?;
    for text in [&model_toml, &train_toml] {
        buf.extend_from_slice(&(text.len() as u32).to_le_bytes());
        buf.extend_from_slice(text.as_bytes());
    }
    for v in ckpt.scaler.min.iter().chain(ckpt.scaler.max.iter()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }

    let tensors = ckpt.params.named_tensors();
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Format(format!("reading {}: {e}", path.display())))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };

    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let epoch = r.u32()?;

    let model_len = r.u32()? as usize;
    let model_text = std::str::from_utf8(r.take(model_len)?)
        .map_err(|_| Error::Format("model config is not UTF-8".into()))?;
    let model: ModelConfig = toml::from_str(model_text)
        .map_err(|e| Error::Format(format!("model config parse: {e}")))?;
    model.validate()?;

    let train_len = r.u32()? as usize;
    let train_text = std::str::from_utf8(r.take(train_len)?)
        .map_err(|_| Error::Format("train config is not UTF-8".into()))?;
    let train: TrainConfig = toml::from_str(train_text)
        .map_err(|e| Error::Format(format!("train config parse: {e}")))?;
    train.validate()?;

    let mut scaler = StructScaler { min: [0.0; 8], max: [0.0; 8] };
    for v in scaler.min.iter_mut() {
        *v = r.f32()?;
    }
    for v in scaler.max.iter_mut() {
        *v = r.f32()?;
    }

    let count = r.u32()? as usize;
    let mut loaded: BTreeMap<String, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f32()?);
        }
        if loaded.insert(name.clone(), (shape, data)).is_some() {
            return Err(Error::Format(format!("duplicate tensor `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint payload",
            bytes.len() - r.pos
        )));
    }

    // Materialize params from the config, then fill every slot by name.
    fn fill(
        slots: Vec<(String, &mut crate::numcore::Tensor<f32>)>,
        loaded: &mut BTreeMap<String, (Vec<usize>, Vec<f32>)>,
    ) -> Result<()> {
        for (name, tensor) in slots {
            let (shape, data) = loaded
                .remove(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor `{name}`")))?;
            if shape != tensor.shape() {
                return Err(Error::Format(format!(
                    "tensor `{name}`: stored shape {shape:?} != expected {:?}",
                    tensor.shape()
                )));
            }
            tensor.data_mut().copy_from_slice(&data);
        }
        Ok(())
    }

    let mut params = ModelParams::<f32>::init(&model, 0);
    fill(params.trainable_mut(), &mut loaded)?;
    fill(params.buffers_mut(), &mut loaded)?;
    if let Some(name) = loaded.keys().next() {
        return Err(Error::Format(format!("checkpoint has unknown tensor `{name}`")));
    }

    Ok(Checkpoint {
        model,
        train,
        scaler,
        epoch,
        params,
    })
}
