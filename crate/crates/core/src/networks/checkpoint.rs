//! Versioned binary checkpoint.
//!
//! All integers are little-endian.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "DTACKPT\0"
//! 8       4     format version (u32, currently 1)
//! 12      1     scalar width in bytes (4 = f32, 8 = f64)
//! 13      4     architecture JSON length n (u32)
//! 17      n     architecture JSON (ArchitectureId)
//! ..      8     root seed (u64)
//! ..      8     completed epochs (u64)
//! ..      8     parameter count P (u64)
//! ..      P·w   parameters
//! ..      1     optimizer kind (0 none, 1 adam, 2 sgd-momentum)
//! ..      8     optimizer step counter (u64)
//! ..      4     optimizer slot count S (u32)
//! ..      S·P·w optimizer slots (adam: first then second moment; sgd: velocity)
//! ```
//!
//! Every random draw of a run is derived from `(root seed, epoch, step)`, so
//! the seed and epoch counter are the complete generator state.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{DtaError, Result};
use crate::networks::{ArchitectureId, Network};
use crate::scalar::{Scalar, ScalarKind};

pub const MAGIC: &[u8; 8] = b"DTACKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSnapshot<T> {
    pub kind: u8,
    pub step: u64,
    pub slots: Vec<Vec<T>>,
}

impl<T> OptimizerSnapshot<T> {
    pub fn none() -> Self {
        OptimizerSnapshot {
            kind: 0,
            step: 0,
            slots: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub arch: ArchitectureId,
    pub root_seed: u64,
    pub epoch: u64,
    pub params: Vec<T>,
    pub optimizer: OptimizerSnapshot<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn of_network(net: &Network<T>, root_seed: u64, epoch: u64, optimizer: OptimizerSnapshot<T>) -> Self {
        Checkpoint {
            arch: net.arch().clone(),
            root_seed,
            epoch,
            params: net.params().to_vec(),
            optimizer,
        }
    }

    pub fn network(&self) -> Result<Network<T>> {
        Network::from_params(&self.arch, self.params.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let arch = serde_json::to_vec(&self.arch).expect("architecture serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(T::KIND.tag());
        out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
        out.extend_from_slice(&arch);
        out.extend_from_slice(&self.root_seed.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        out.extend(T::to_le_bytes_vec(&self.params));
        out.push(self.optimizer.kind);
        out.extend_from_slice(&self.optimizer.step.to_le_bytes());
        out.extend_from_slice(&(self.optimizer.slots.len() as u32).to_le_bytes());
        for slot in &self.optimizer.slots {
            out.extend(T::to_le_bytes_vec(slot));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            origin,
        };
        if r.take(8)? != MAGIC {
            return Err(DtaError::format(origin, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(DtaError::format(origin, format!("unsupported checkpoint version {version}")));
        }
        let width = r.take(1)?[0];
        if width != T::KIND.tag() {
            return Err(DtaError::format(
                origin,
                format!("checkpoint stores {width}-byte scalars, expected {}", T::KIND.tag()),
            ));
        }
        let arch_len = r.u32()? as usize;
        let arch: ArchitectureId = serde_json::from_slice(r.take(arch_len)?)
            .map_err(|e| DtaError::format(origin, format!("architecture record: {e}")))?;
        let root_seed = r.u64()?;
        let epoch = r.u64()?;
        let n = r.u64()? as usize;
        let params = r.scalars::<T>(n)?;
        let kind = r.take(1)?[0];
        let step = r.u64()?;
        let slot_count = r.u32()? as usize;
        let slots = (0..slot_count)
            .map(|_| r.scalars::<T>(n))
            .collect::<Result<Vec<_>>>()?;
        if r.pos != bytes.len() {
            return Err(DtaError::format(origin, "trailing bytes after checkpoint"));
        }
        Ok(Checkpoint {
            arch,
            root_seed,
            epoch,
            params,
            optimizer: OptimizerSnapshot { kind, step, slots },
        })
    }

    /// Writes atomically (temp file then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| DtaError::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| DtaError::io(&tmp, e))?;
        f.sync_all().map_err(|e| DtaError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| DtaError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| DtaError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Scalar type a checkpoint file was written with, read from its header.
pub fn stored_scalar_kind(path: &Path) -> Result<ScalarKind> {
    let mut bytes = [0u8; 13];
    fs::File::open(path)
        .and_then(|mut f| f.read_exact(&mut bytes))
        .map_err(|e| DtaError::io(path, e))?;
    if &bytes[..8] != MAGIC {
        return Err(DtaError::format(path, "not a checkpoint (bad magic)"));
    }
    ScalarKind::from_tag(bytes[12]).ok_or_else(|| DtaError::format(path, format!("unknown scalar width {}", bytes[12])))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| DtaError::format(self.origin, "truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn scalars<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let w = T::KIND.tag() as usize;
        let raw = self.take(n.checked_mul(w).ok_or_else(|| DtaError::format(self.origin, "size overflow"))?)?;
        Ok(raw.chunks_exact(w).map(T::from_le_chunk).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::build_network;

    #[test]
    fn round_trip_and_rejections() {
        let net: Network<f32> = build_network(&ArchitectureId::tiny(), 3).unwrap();
        let n = net.num_params();
        let ckpt = Checkpoint::of_network(
            &net,
            77,
            4,
            OptimizerSnapshot {
                kind: 1,
                step: 12,
                slots: vec![vec![0.5; n], vec![0.25; n]],
            },
        );
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::<f32>::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.network().unwrap().params(), net.params());

        assert!(Checkpoint::<f64>::from_bytes(&bytes, Path::new("mem")).is_err());
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1], Path::new("mem")).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::<f32>::from_bytes(&bad, Path::new("mem")).is_err());
    }
}
