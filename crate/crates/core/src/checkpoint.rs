//! Versioned binary checkpoints: little-endian header, named f64 tensor
//! table (parameters plus optimizer moments), CRC-64 trailer.
//!
//! Reloading a checkpoint and continuing training reproduces the
//! uninterrupted run bit for bit: parameters, Adam moments, and the step
//! counters all round-trip exactly, and every random draw is keyed by
//! `(seed, step)` rather than by in-memory generator state.

use crate::crc64::crc64;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use ndarray::{ArrayD, IxDyn};
use std::collections::HashMap;
use std::path::Path;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"XALNCKP1";

#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState {
    Sgd,
    /// First/second moments in canonical parameter order, plus the shared
    /// step counter.
    Adam { t: u64, m: Vec<ArrayD<f64>>, v: Vec<ArrayD<f64>> },
}

/// Everything needed to continue or evaluate a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub stage: u8,
    pub global_step: u64,
    pub stage_step: u64,
    pub config_hash: u64,
    pub params: ModelParams,
    pub optimizer: OptimizerState,
}

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}
fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}
fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, arr: &ArrayD<f64>) {
    put_u16(out, name.len() as u16);
    out.extend_from_slice(name.as_bytes());
    out.push(arr.ndim() as u8);
    for &d in arr.shape() {
        put_u32(out, d as u32);
    }
    for &x in arr.iter() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checksum("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn tensor(&mut self) -> Result<(String, ArrayD<f64>)> {
        let name_len = self.u16()? as usize;
        let name = String::from_utf8(self.take(name_len)?.to_vec())
            .map_err(|_| Error::Checksum("checkpoint tensor name".into()))?;
        let ndim = self.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(self.u32()? as usize);
        }
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(self.take(8)?.try_into().unwrap()));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
            .map_err(|_| Error::Checksum("checkpoint tensor shape".into()))?;
        Ok((name, arr))
    }
}

pub fn to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, CHECKPOINT_FORMAT_VERSION);
    put_u64(&mut out, ckpt.config_hash);
    put_u64(&mut out, ckpt.seed);
    out.push(ckpt.stage);
    put_u64(&mut out, ckpt.global_step);
    put_u64(&mut out, ckpt.stage_step);

    let named = ckpt.params.named();
    let mut tensors: Vec<(String, &ArrayD<f64>)> =
        named.iter().map(|(n, a)| (n.clone(), *a)).collect();
    match &ckpt.optimizer {
        OptimizerState::Sgd => {
            out.push(0u8);
            put_u64(&mut out, 0);
        }
        OptimizerState::Adam { t, m, v } => {
            out.push(1u8);
            put_u64(&mut out, *t);
            for ((name, _), arr) in named.iter().zip(m.iter()) {
                tensors.push((format!("adam.m.{name}"), arr));
            }
            for ((name, _), arr) in named.iter().zip(v.iter()) {
                tensors.push((format!("adam.v.{name}"), arr));
            }
        }
    }
    put_u32(&mut out, tensors.len() as u32);
    for (name, arr) in tensors {
        put_tensor(&mut out, &name, arr);
    }
    let crc = crc64(&out);
    put_u64(&mut out, crc);
    out
}

/// Parse checkpoint bytes. `template` supplies the expected tensor names and
/// shapes (build it from the run configuration); `expected_config_hash`
/// guards against evaluating under the wrong configuration.
pub fn from_bytes(
    bytes: &[u8],
    template: &ModelParams,
    expected_config_hash: u64,
) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 12 {
        return Err(Error::Checksum("checkpoint too short".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 8);
    let stored_crc = u64::from_le_bytes(trailer.try_into().unwrap());
    if crc64(body) != stored_crc {
        return Err(Error::Checksum("checkpoint trailer".into()));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checksum("checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: CHECKPOINT_FORMAT_VERSION });
    }
    let config_hash = r.u64()?;
    if config_hash != expected_config_hash {
        return Err(Error::Config(format!(
            "checkpoint config hash {config_hash:#018x} does not match current configuration {expected_config_hash:#018x}"
        )));
    }
    let seed = r.u64()?;
    let stage = r.u8()?;
    let global_step = r.u64()?;
    let stage_step = r.u64()?;
    let opt_kind = r.u8()?;
    let adam_t = r.u64()?;
    let count = r.u32()? as usize;
    let mut table: HashMap<String, ArrayD<f64>> = HashMap::with_capacity(count);
    for _ in 0..count {
        let (name, arr) = r.tensor()?;
        table.insert(name, arr);
    }
    if r.pos != body.len() {
        return Err(Error::Checksum("checkpoint trailing bytes".into()));
    }

    let mut params = template.clone();
    for (name, slot) in params.named_mut() {
        let arr = table
            .get(&name)
            .ok_or_else(|| Error::Config(format!("checkpoint missing tensor {name}")))?;
        if arr.shape() != slot.shape() {
            return Err(Error::Shape(format!(
                "checkpoint tensor {name}: {:?} vs expected {:?}",
                arr.shape(),
                slot.shape()
            )));
        }
        *slot = arr.clone();
    }
    let optimizer = match opt_kind {
        0 => OptimizerState::Sgd,
        1 => {
            let mut m = Vec::new();
            let mut v = Vec::new();
            for (name, slot) in params.named() {
                let mk = format!("adam.m.{name}");
                let vk = format!("adam.v.{name}");
                let ma = table
                    .get(&mk)
                    .ok_or_else(|| Error::Config(format!("checkpoint missing tensor {mk}")))?;
                let va = table
                    .get(&vk)
                    .ok_or_else(|| Error::Config(format!("checkpoint missing tensor {vk}")))?;
                if ma.shape() != slot.shape() || va.shape() != slot.shape() {
                    return Err(Error::Shape(format!("optimizer moment shape for {name}")));
                }
                m.push(ma.clone());
                v.push(va.clone());
            }
            OptimizerState::Adam { t: adam_t, m, v }
        }
        k => return Err(Error::Checksum(format!("unknown optimizer kind {k}"))),
    };

    Ok(Checkpoint { seed, stage, global_step, stage_step, config_hash, params, optimizer })
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, to_bytes(ckpt))?;
    Ok(())
}

pub fn load(path: &Path, template: &ModelParams, expected_config_hash: u64) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes, template, expected_config_hash)
}
