//! `BPMDL1` model container.
//!
//! ```text
//! bytes 0..6  magic "BPMDL1"
//! byte  6     version = 1
//! config      8 u32 LE (channels, seq_len, patch_len, embed_dim,
//!             block_pairs, heads, mlp_ratio, head_outputs) + size_tag u8
//! norm        4 f32 LE (sbp_mean, sbp_sd, dbp_mean, dbp_sd)
//! meta        provenance u8, frozen u8, epochs u32
//! tensors     canonical order, each as u64 LE element count + f32 LE data
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::tensor::Tensor;

use super::{
    count_params, init_xavier, EncoderModel, ModelConfig, ModelError, ModelMeta, Provenance,
    Result, SizeTag, TargetNorm,
};

pub(crate) const MAGIC: &[u8; 6] = b"BPMDL1";
const VERSION: u8 = 1;

fn config_bytes(cfg: &ModelConfig) -> Vec<u8> {
    let mut out = Vec::with_capacity(33);
    for v in [
        cfg.num_channels,
        cfg.seq_len,
        cfg.patch_len,
        cfg.embed_dim,
        cfg.num_block_pairs,
        cfg.num_heads,
        cfg.mlp_ratio,
        cfg.head_outputs,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.push(cfg.size_tag.as_u8());
    out
}

fn meta_bytes(meta: &ModelMeta) -> Vec<u8> {
    let mut out = Vec::with_capacity(22);
    for v in [
        meta.norm.sbp_mean,
        meta.norm.sbp_sd,
        meta.norm.dbp_mean,
        meta.norm.dbp_sd,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(meta.provenance.as_u8());
    out.push(meta.frozen_backbone as u8);
    out.extend_from_slice(&meta.epochs.to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    off: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.off + n > self.bytes.len() {
            return Err(ModelError::Corrupt(format!(
                "truncated at byte {} (wanted {n} more)",
                self.off
            )));
        }
        let s = &self.bytes[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub(crate) fn read_config(c: &mut Cursor) -> Result<ModelConfig> {
    let cfg = ModelConfig {
        num_channels: c.u32()? as usize,
        seq_len: c.u32()? as usize,
        patch_len: c.u32()? as usize,
        embed_dim: c.u32()? as usize,
        num_block_pairs: c.u32()? as usize,
        num_heads: c.u32()? as usize,
        mlp_ratio: c.u32()? as usize,
        head_outputs: c.u32()? as usize,
        size_tag: SizeTag::from_u8(c.u8()?)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub(crate) fn read_meta(c: &mut Cursor) -> Result<ModelMeta> {
    let norm = TargetNorm {
        sbp_mean: c.f32()?,
        sbp_sd: c.f32()?,
        dbp_mean: c.f32()?,
        dbp_sd: c.f32()?,
    };
    let provenance = Provenance::from_u8(c.u8()?)?;
    let frozen_backbone = c.u8()? != 0;
    let epochs = c.u32()?;
    Ok(ModelMeta {
        norm,
        provenance,
        frozen_backbone,
        epochs,
    })
}

/// Serialize to an in-memory buffer; [`save_model`] writes this to disk and
/// [`serialized_size`] measures it.
pub fn model_bytes(model: &EncoderModel<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&config_bytes(&model.cfg));
    out.extend_from_slice(&meta_bytes(&model.meta));
    for (_, t) in model.named_tensors() {
        out.extend_from_slice(&(t.numel() as u64).to_le_bytes());
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Exact byte count of the serialized model.
pub fn serialized_size(model: &EncoderModel<f32>) -> u64 {
    let tensors = model.named_tensors().len() as u64;
    let header = 6 + 1 + 33 + 22;
    header + tensors * 8 + count_params(&model.cfg) * 4
}

pub fn save_model(model: &EncoderModel<f32>, path: &Path) -> Result<u64> {
    let bytes = model_bytes(model);
    debug_assert_eq!(bytes.len() as u64, serialized_size(model));
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(bytes.len() as u64)
}

pub fn load_model(path: &Path) -> Result<EncoderModel<f32>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() < 7 {
        return Err(ModelError::Corrupt("file shorter than header".into()));
    }
    if &bytes[0..6] != MAGIC {
        let mut found = [0u8; 6];
        found.copy_from_slice(&bytes[0..6]);
        return Err(ModelError::BadMagic { found });
    }
    if bytes[6] != VERSION {
        return Err(ModelError::UnsupportedVersion(bytes[6]));
    }
    let mut c = Cursor {
        bytes: &bytes,
        off: 7,
    };
    let cfg = read_config(&mut c)?;
    let meta = read_meta(&mut c)?;

    // read into a correctly-shaped skeleton
    let mut model: EncoderModel<f32> = init_xavier(&cfg, 0)?;
    model.meta = meta;
    for (name, t) in model.tensors_mut() {
        let declared = c.u64()? as usize;
        if declared != t.numel() {
            return Err(ModelError::Corrupt(format!(
                "tensor {name}: declared {declared} elements, expected {}",
                t.numel()
            )));
        }
        let raw = c.take(declared * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4")))
            .collect();
        if !data.iter().all(|v| v.is_finite()) {
            return Err(ModelError::Corrupt(format!("tensor {name}: non-finite value")));
        }
        *t = Tensor::from_vec(t.shape().to_vec(), data)?;
    }
    if c.off != bytes.len() {
        return Err(ModelError::Corrupt(format!(
            "{} trailing bytes",
            bytes.len() - c.off
        )));
    }
    Ok(model)
}
