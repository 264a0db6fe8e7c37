//! Versioned binary checkpoint container: a header binding the file to a
//! model-config digest, then named f32 blobs (parameters, optimizer moments,
//! normalization state). Round-trips are bit-exact.

use crate::error::{Error, Result};
use crate::models::{ModelConfig, Net};
use crate::tensor::Tensor;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"VQSRCKP\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// SHA-256 of the architecture config's canonical TOML form. Two checkpoints
/// interoperate only when their digests match.
pub fn config_digest(cfg: &ModelConfig) -> Result<[u8; 32]> {
    let text = toml::to_string(cfg).map_err(|e| Error::Config(format!("config digest: {e}")))?;
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    Ok(h.finalize().into())
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub version: u32,
    pub config_digest: [u8; 32],
    pub step: u64,
    pub seed: u64,
    /// (name, shape, values), in insertion order.
    pub blobs: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn new(config_digest: [u8; 32], step: u64, seed: u64) -> Self {
        Checkpoint { version: CHECKPOINT_VERSION, config_digest, step, seed, blobs: Vec::new() }
    }

    pub fn push_raw(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.blobs.push((name.to_string(), shape, data));
    }

    pub fn push_tensor(&mut self, name: &str, t: &Tensor<f32>) {
        self.push_raw(name, t.shape().to_vec(), t.data().to_vec());
    }

    /// Every parameter of a network, using its stable names.
    pub fn push_net(&mut self, net: &Net) {
        for (name, t) in net.named_tensors() {
            self.push_tensor(&name, t);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.blobs.iter().map(|(n, _, _)| n.as_str())
    }

    fn find(&self, name: &str) -> Result<&(String, Vec<usize>, Vec<f32>)> {
        self.blobs.iter().find(|(n, _, _)| n == name).ok_or_else(|| {
            Error::Checkpoint(format!("missing blob {name}; file holds: {:?}", self.names().collect::<Vec<_>>()))
        })
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor<f32>> {
        let (_, shape, data) = self.find(name)?;
        Tensor::new(shape.clone(), data.clone())
    }

    pub fn raw(&self, name: &str) -> Result<(&[usize], &[f32])> {
        let (_, shape, data) = self.find(name)?;
        Ok((shape, data))
    }

    /// Copies blobs back into a network's parameters, matched by name.
    /// Missing names and shape mismatches are collected into one schema-diff
    /// error so the caller sees the full gap at once.
    pub fn load_net(&self, net: &mut Net) -> Result<()> {
        let mut problems = Vec::new();
        for (name, t) in net.named_tensors_mut() {
            match self.blobs.iter().find(|(n, _, _)| *n == name) {
                None => problems.push(format!("missing {name}")),
                Some((_, shape, data)) => {
                    if shape != t.shape() {
                        problems.push(format!("{name}: file {shape:?} vs model {:?}", t.shape()));
                    } else {
                        t.data_mut().copy_from_slice(data);
                    }
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!("schema mismatch: {}", problems.join("; "))))
        }
    }

    /// Rejects a checkpoint built for a different architecture.
    pub fn check_digest(&self, cfg: &ModelConfig) -> Result<()> {
        if self.config_digest != config_digest(cfg)? {
            return Err(Error::Checkpoint(
                "model config digest mismatch: checkpoint was built for a different architecture"
                    .into(),
            ));
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let io = |e: std::io::Error| Error::io(path, e);
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.write_u32::<LittleEndian>(self.version).map_err(io)?;
        buf.extend_from_slice(&self.config_digest);
        buf.write_u64::<LittleEndian>(self.step).map_err(io)?;
        buf.write_u64::<LittleEndian>(self.seed).map_err(io)?;
        buf.write_u32::<LittleEndian>(self.blobs.len() as u32).map_err(io)?;
        for (name, shape, data) in &self.blobs {
            buf.write_u16::<LittleEndian>(name.len() as u16).map_err(io)?;
            buf.extend_from_slice(name.as_bytes());
            buf.write_u8(shape.len() as u8).map_err(io)?;
            for &d in shape {
                buf.write_u32::<LittleEndian>(d as u32).map_err(io)?;
            }
            for &v in data {
                buf.write_f32::<LittleEndian>(v).map_err(io)?;
            }
        }
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(&buf).map_err(io)
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = bytes.as_slice();
        let trunc = |_: std::io::Error| {
            Error::Checkpoint(format!("{}: truncated or not a checkpoint", path.display()))
        };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(trunc)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "{}: bad magic, not a checkpoint file",
                path.display()
            )));
        }
        let version = r.read_u32::<LittleEndian>().map_err(trunc)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let mut config_digest = [0u8; 32];
        r.read_exact(&mut config_digest).map_err(trunc)?;
        let step = r.read_u64::<LittleEndian>().map_err(trunc)?;
        let seed = r.read_u64::<LittleEndian>().map_err(trunc)?;
        let count = r.read_u32::<LittleEndian>().map_err(trunc)?;
        let mut blobs = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = r.read_u16::<LittleEndian>().map_err(trunc)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(trunc)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Checkpoint("blob name is not utf-8".into()))?;
            let rank = r.read_u8().map_err(trunc)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.read_u32::<LittleEndian>().map_err(trunc)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(r.read_f32::<LittleEndian>().map_err(trunc)?);
            }
            blobs.push((name, shape, data));
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!(
                "{}: {} trailing bytes after the last blob",
                path.display(),
                r.len()
            )));
        }
        Ok(Checkpoint { version, config_digest, step, seed, blobs })
    }
}

/// SHA-256 over a tensor's little-endian bytes; used for frozen-parameter
/// assertions.
pub fn tensor_hash(t: &Tensor<f32>) -> [u8; 32] {
    let mut h = Sha256::new();
    for v in t.iter() {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}
