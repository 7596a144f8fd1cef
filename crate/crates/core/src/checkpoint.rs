//! Checkpoint serialization.
//!
//! Layout: magic `SDBN0001`, version u32, architecture descriptor,
//! stochastic config and ablation flag, named parameter tensors
//! (name length, name bytes, shape, little-endian f64 payload), and a
//! trailing CRC32 over everything before it. All integers little-endian.

use std::fs;
use std::path::Path;
use thiserror::Error;

use crate::bayes::{RewardRamp, StochasticConfig};
use crate::refiner::{ArchDescriptor, RefinerParams};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SDBN0001";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Crc { stored: u32, computed: u32 },
    #[error("truncated checkpoint at byte {0}")]
    Truncated(usize),
    #[error("descriptor mismatch: {0}")]
    Descriptor(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        let s = t.shape();
        self.u32(s.channels as u32);
        self.u32(s.height as u32);
        self.u32(s.width as u32);
        for &v in t.data() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Truncated(self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| CheckpointError::Truncated(self.pos))
    }
    fn tensor(&mut self) -> Result<Tensor, CheckpointError> {
        let c = self.u32()? as usize;
        let h = self.u32()? as usize;
        let w = self.u32()? as usize;
        let mut data = Vec::with_capacity(c * h * w);
        for _ in 0..c * h * w {
            data.push(self.f64()?);
        }
        Ok(Tensor::from_vec(c, h, w, data))
    }
}

fn write_descriptor(w: &mut Writer, d: &ArchDescriptor) {
    w.u32(d.k as u32);
    w.u32(d.context_levels.len() as u32);
    for &(f, c) in &d.context_levels {
        w.u32(f as u32);
        w.u32(c as u32);
    }
    w.u32(d.context_fullres_channels as u32);
    w.u32(d.context_kernel as u32);
    w.u32(d.reg_trunk.len() as u32);
    for &c in &d.reg_trunk {
        w.u32(c as u32);
    }
    w.u32(d.reg_head.len() as u32);
    for &c in &d.reg_head {
        w.u32(c as u32);
    }
    w.u32(d.outlier_hidden as u32);
    w.f64(d.dropout_p);
    w.f64(d.lambda_act);
    w.f64(d.d_norm);
}

fn read_descriptor(r: &mut Reader<'_>) -> Result<ArchDescriptor, CheckpointError> {
    let k = r.u32()? as usize;
    let n_levels = r.u32()? as usize;
    let mut context_levels = Vec::with_capacity(n_levels);
    for _ in 0..n_levels {
        let f = r.u32()? as usize;
        let c = r.u32()? as usize;
        context_levels.push((f, c));
    }
    let context_fullres_channels = r.u32()? as usize;
    let context_kernel = r.u32()? as usize;
    let n_trunk = r.u32()? as usize;
    let mut reg_trunk = Vec::with_capacity(n_trunk);
    for _ in 0..n_trunk {
        reg_trunk.push(r.u32()? as usize);
    }
    let n_head = r.u32()? as usize;
    let mut reg_head = Vec::with_capacity(n_head);
    for _ in 0..n_head {
        reg_head.push(r.u32()? as usize);
    }
    let outlier_hidden = r.u32()? as usize;
    let dropout_p = r.f64()?;
    let lambda_act = r.f64()?;
    let d_norm = r.f64()?;
    Ok(ArchDescriptor {
        k,
        context_levels,
        context_fullres_channels,
        context_kernel,
        reg_trunk,
        reg_head,
        outlier_hidden,
        dropout_p,
        lambda_act,
        d_norm,
    })
}

/// Everything a checkpoint carries.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: RefinerParams,
    pub stochastic: StochasticConfig,
    /// True when the outlier branch was detached during training.
    pub ablation: bool,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    write_descriptor(&mut w, &ckpt.params.desc);

    let s = &ckpt.stochastic;
    w.f64(s.sigma_in);
    w.f64(s.sigma_out);
    w.f64(s.sigma_prior);
    w.f64(s.sigma0);
    w.f64(s.reward_weight);
    w.f64(s.kl_scale);
    w.u32(s.e_t);
    w.u32(s.e_f);
    w.u32(match s.reward_ramp {
        RewardRamp::Up => 0,
        RewardRamp::Down => 1,
    });
    w.u32(ckpt.ablation as u32);

    let tensors = ckpt.params.tensors();
    w.u32(tensors.len() as u32);
    for (name, t) in tensors {
        w.str(&name);
        w.tensor(t);
    }

    let crc = crc32fast::hash(&w.buf);
    w.u32(crc);
    fs::write(path, w.buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 {
        return Err(CheckpointError::Truncated(bytes.len()));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::Crc { stored, computed });
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let desc = read_descriptor(&mut r)?;

    let stochastic = StochasticConfig {
        sigma_in: r.f64()?,
        sigma_out: r.f64()?,
        sigma_prior: r.f64()?,
        sigma0: r.f64()?,
        reward_weight: r.f64()?,
        kl_scale: r.f64()?,
        e_t: r.u32()?,
        e_f: r.u32()?,
        reward_ramp: if r.u32()? == 0 { RewardRamp::Up } else { RewardRamp::Down },
    };
    let ablation = r.u32()? != 0;

    // rebuild a skeleton from the descriptor, then fill tensors by name
    let mut params = RefinerParams::init(&desc, 0)
        .map_err(|e| CheckpointError::Descriptor(e.to_string()))?;
    let n = r.u32()? as usize;
    let expected = params.tensors().len();
    if n != expected {
        return Err(CheckpointError::Descriptor(format!(
            "checkpoint has {n} tensors, descriptor implies {expected}"
        )));
    }
    for _ in 0..n {
        let name = r.str()?;
        let t = r.tensor()?;
        let mut slots = params.tensors_mut();
        let slot = slots
            .iter_mut()
            .find(|(sn, _)| *sn == name)
            .ok_or_else(|| CheckpointError::Descriptor(format!("unknown tensor '{name}'")))?;
        if slot.1.shape() != t.shape() {
            return Err(CheckpointError::Descriptor(format!(
                "tensor '{name}' has shape {} but descriptor implies {}",
                t.shape(),
                slot.1.shape()
            )));
        }
        *slot.1 = t;
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Descriptor(format!(
            "{} trailing bytes after parameters",
            body.len() - r.pos
        )));
    }
    Ok(Checkpoint { params, stochastic, ablation })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refiner::ArchDescriptor;

    fn small_ckpt() -> Checkpoint {
        let desc = ArchDescriptor {
            context_levels: vec![(2, 4), (4, 4)],
            context_fullres_channels: 4,
            reg_trunk: vec![8, 8],
            reg_head: vec![6, 4],
            outlier_hidden: 5,
            ..Default::default()
        };
        Checkpoint {
            params: RefinerParams::init(&desc, 7).unwrap(),
            stochastic: StochasticConfig::default(),
            ablation: false,
        }
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ckpt = small_ckpt();
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.params.desc, ckpt.params.desc);
        assert!(!back.ablation);
        for ((n1, t1), (n2, t2)) in ckpt.params.tensors().iter().zip(back.params.tensors()) {
            assert_eq!(*n1, n2);
            for (a, b) in t1.data().iter().zip(t2.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "tensor {n1} differs");
            }
        }
        // save-load-save produces identical bytes
        let path2 = dir.path().join("m2.ckpt");
        save_checkpoint(&back, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupted_byte_fails_crc() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        save_checkpoint(&small_ckpt(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Crc { .. })));
    }

    #[test]
    fn wrong_magic_fails() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        save_checkpoint(&small_ckpt(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0..8].copy_from_slice(b"WHATEVER");
        // refresh the crc so the magic check is what trips
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn wrong_version_fails() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.ckpt");
        save_checkpoint(&small_ckpt(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Version(99))));
    }
}
