//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "CXRSSLX\0"
//! version    u32
//! stage      u8       0 external_backbone, 1 ssl_pretrained, 2 finetuned
//! epoch      u32      completed epochs of the stage
//! config     u32 length + UTF-8 TOML
//! metadata   u32 length + UTF-8 JSON
//! count      u32
//! directory  count x (u32 name length, name, u32 rank, rank x u64 dims)
//! data       f32 values of every blob in directory order
//! crc32      u32 over everything above
//! ```
//!
//! Blob names group components by prefix: `backbone.*` and `head.*` for the
//! classifier, `projector.*`, `predictor.*` and `target.*` for self-supervised
//! state that fine-tuning discards, and `optim.*` for momentum buffers.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::train::EpochLog;
use crate::error::{Error, Result};
use crate::nn::ParameterSet;
use crate::ssl::LossValue;

pub const MAGIC: &[u8; 8] = b"CXRSSLX\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    ExternalBackbone,
    SslPretrained,
    Finetuned,
}

impl Stage {
    fn tag(self) -> u8 {
        match self {
            Stage::ExternalBackbone => 0,
            Stage::SslPretrained => 1,
            Stage::Finetuned => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Stage> {
        match tag {
            0 => Ok(Stage::ExternalBackbone),
            1 => Ok(Stage::SslPretrained),
            2 => Ok(Stage::Finetuned),
            t => Err(Error::Checkpoint(format!("unknown stage tag {t}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::ExternalBackbone => "external_backbone",
            Stage::SslPretrained => "ssl_pretrained",
            Stage::Finetuned => "finetuned",
        }
    }
}

/// Training history carried along for resumption and reporting.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ssl_losses: Vec<LossValue>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub epoch_logs: Vec<EpochLog>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_images: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEnvelope {
    pub format_version: u32,
    pub stage: Stage,
    pub epoch: usize,
    pub config: TrainConfig,
    pub meta: CheckpointMeta,
    pub blobs: ParameterSet<f32>,
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{what} {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_text(out: &mut Vec<u8>, text: &str, what: &str) -> Result<()> {
    put_u32(out, text.len(), what)?;
    out.extend_from_slice(text.as_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("{what} {v} too large")))
    }

    fn text(&mut self, what: &str) -> Result<&'a str> {
        let n = self.u32(what)?;
        std::str::from_utf8(self.take(n, what)?).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

impl CheckpointEnvelope {
    pub fn new(stage: Stage, epoch: usize, config: TrainConfig, blobs: ParameterSet<f32>) -> Self {
        CheckpointEnvelope { format_version: FORMAT_VERSION, stage, epoch, config, meta: CheckpointMeta::default(), blobs }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if let Some(name) = self.blobs.first_non_finite() {
            return Err(Error::NonFinite(format!("blob `{name}` holds a non-finite value")));
        }
        let mut out = Vec::with_capacity(64 + 4 * self.blobs.num_elements());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        out.push(self.stage.tag());
        put_u32(&mut out, self.epoch, "epoch")?;
        put_text(&mut out, &self.config.to_toml(), "config")?;
        let meta = serde_json::to_string(&self.meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        put_text(&mut out, &meta, "metadata")?;
        put_u32(&mut out, self.blobs.len(), "blob count")?;
        for (name, arr) in self.blobs.iter() {
            put_text(&mut out, name, "blob name")?;
            put_u32(&mut out, arr.ndim(), "rank")?;
            for &d in arr.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for (_, arr) in self.blobs.iter() {
            for v in arr.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<CheckpointEnvelope> {
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let mut r = Reader { bytes: body, pos: MAGIC.len() };
        let format_version = r.u32("version")? as u32;
        if format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {format_version}")));
        }
        let stage = Stage::from_tag(r.u8("stage")?)?;
        let epoch = r.u32("epoch")?;
        let config = TrainConfig::from_toml(r.text("config")?)?;
        let meta: CheckpointMeta =
            serde_json::from_str(r.text("metadata")?).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let count = r.u32("blob count")?;
        let mut directory = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.text("blob name")?.to_string();
            let rank = r.u32("rank")?;
            let dims = (0..rank).map(|_| r.u64("dimension")).collect::<Result<Vec<_>>>()?;
            directory.push((name, dims));
        }
        let mut blobs = ParameterSet::new();
        for (name, dims) in directory {
            let n: usize = dims.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("blob too large".into()))?, &name)?;
            let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            if blobs.get(&name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate blob `{name}`")));
            }
            blobs.insert(name, ArrayD::from_shape_vec(IxDyn(&dims), data).expect("length matches shape"));
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(CheckpointEnvelope { format_version, stage, epoch, config, meta, blobs })
    }

    /// Writes to a sibling temporary file, syncs it, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let file_name = path.file_name().ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
        let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| {
            let _ = fs::remove_file(&tmp);
            Error::io(path, e)
        })
    }

    pub fn load(path: &Path) -> Result<CheckpointEnvelope> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        CheckpointEnvelope::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Blobs under `prefix.`, with the prefix removed.
    pub fn component(&self, prefix: &str) -> ParameterSet<f32> {
        self.blobs.with_prefix(prefix)
    }

    /// A backbone-only envelope, e.g. for handing weights to another run.
    pub fn export_backbone(&self) -> Result<CheckpointEnvelope> {
        let backbone = self.component("backbone");
        if backbone.is_empty() {
            return Err(Error::MissingBlob("backbone.*".into()));
        }
        let mut blobs = ParameterSet::new();
        blobs.extend_prefixed("backbone", &backbone);
        Ok(CheckpointEnvelope::new(Stage::ExternalBackbone, 0, self.config.clone(), blobs))
    }
}
