//! Checkpoint container.
//!
//! Layout: magic "SFCK", version u32 LE, entry count u32 LE, then per
//! entry { name length u16 LE, UTF-8 name, rank u8, one u32 LE per
//! dimension, raw little-endian f32 data }.
//!
//! The model configuration rides along as a synthetic "meta.config"
//! entry (small integers stored as f32, exact), so a checkpoint alone is
//! enough to rebuild the network. Loading parses and validates the whole
//! file against the configuration before touching any state.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fusion::DiffMode;
use crate::model::{AttnKind, ChangeNet, FusionKind, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SFCK";
pub const VERSION: u32 = 1;
const META_CONFIG: &str = "meta.config";

fn config_to_values(cfg: &ModelConfig) -> Vec<f32> {
    let mut v = Vec::with_capacity(19);
    v.extend(cfg.stage_depths.iter().map(|&d| d as f32));
    v.extend(cfg.stage_channels.iter().map(|&d| d as f32));
    v.extend(cfg.stage_heads.iter().map(|&d| d as f32));
    v.push(cfg.gamma as f32);
    v.push(cfg.input_size as f32);
    v.push(cfg.num_classes as f32);
    v.push(cfg.decoder_dim as f32);
    v.push(match cfg.attention {
        AttnKind::Sparse => 0.0,
        AttnKind::Dense => 1.0,
    });
    v.push(match cfg.fusion {
        FusionKind::Ceff => 0.0,
        FusionKind::Diff(DiffMode::Subtract) => 1.0,
        FusionKind::Diff(DiffMode::Add) => 2.0,
        FusionKind::Diff(DiffMode::Concat) => 3.0,
    });
    v.push(if cfg.hard_clip { 1.0 } else { 0.0 });
    v
}

fn config_from_values(v: &[f32]) -> Result<ModelConfig> {
    if v.len() != 19 {
        return Err(Error::Checkpoint(format!(
            "meta.config holds {} values, expected 19",
            v.len()
        )));
    }
    let at = |i: usize| v[i] as usize;
    let arr4 = |o: usize| [at(o), at(o + 1), at(o + 2), at(o + 3)];
    Ok(ModelConfig {
        stage_depths: arr4(0),
        stage_channels: arr4(4),
        stage_heads: arr4(8),
        gamma: at(12),
        input_size: at(13),
        num_classes: at(14),
        decoder_dim: at(15),
        attention: match v[16] as u32 {
            0 => AttnKind::Sparse,
            1 => AttnKind::Dense,
            k => return Err(Error::Checkpoint(format!("unknown attention code {}", k))),
        },
        fusion: match v[17] as u32 {
            0 => FusionKind::Ceff,
            1 => FusionKind::Diff(DiffMode::Subtract),
            2 => FusionKind::Diff(DiffMode::Add),
            3 => FusionKind::Diff(DiffMode::Concat),
            k => return Err(Error::Checkpoint(format!("unknown fusion code {}", k))),
        },
        hard_clip: v[18] != 0.0,
    })
}

fn write_entry(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) -> Result<()> {
    if name.len() > u16::MAX as usize {
        return Err(Error::Checkpoint(format!("name too long: {}", name)));
    }
    if shape.len() > u8::MAX as usize {
        return Err(Error::Checkpoint(format!(
            "rank too large: {}",
            shape.len()
        )));
    }
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(())
}

/// Serialize a model (config + every parameter, sorted by name).
pub fn encode(model: &ChangeNet) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = 1 + model.store.len();
    out.extend_from_slice(&(count as u32).to_le_bytes());
    let meta = config_to_values(&model.cfg);
    write_entry(&mut out, META_CONFIG, &[meta.len()], &meta)?;
    for (name, entry) in model.store.iter() {
        write_entry(&mut out, name, entry.tensor.shape(), entry.tensor.data())?;
    }
    Ok(out)
}

pub fn save(model: &ChangeNet, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let bytes = encode(model)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Parse and validate a checkpoint, returning a ready model. Any
/// malformed byte, missing or extra parameter, or shape disagreement
/// with the embedded configuration fails before any state is built up.
pub fn load(path: &Path) -> Result<ChangeNet> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        buf: &bytes,
        pos: 0,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {} (expected {})",
            version, VERSION
        )));
    }
    let count = r.u32()? as usize;
    let mut entries: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("non-UTF8 name".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, shape, data));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }

    let meta = entries
        .iter()
        .find(|(n, _, _)| n == META_CONFIG)
        .ok_or_else(|| Error::Checkpoint("missing meta.config entry".into()))?;
    let cfg = config_from_values(&meta.2)?;
    cfg.validate()?;

    // Materialize the expected parameter set for this config, then
    // overwrite every tensor from the file, shape-checked.
    let mut model = ChangeNet::new(cfg, 0)?;
    let mut seen = 0usize;
    for (name, shape, data) in &entries {
        if name == META_CONFIG {
            continue;
        }
        let entry = model.store.get_mut(name).ok_or_else(|| {
            Error::Checkpoint(format!("unexpected parameter '{}' for this config", name))
        })?;
        if entry.tensor.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter '{}' has shape {:?}, config expects {:?}",
                name,
                shape,
                entry.tensor.shape()
            )));
        }
        entry.tensor = Tensor::new(shape, data.clone())?;
        seen += 1;
    }
    if seen != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} parameters, config expects {}",
            seen,
            model.store.len()
        )));
    }
    Ok(model)
}
