//! Single-file archive of named numeric arrays plus a text metadata block.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "SBCP" | u32 format_version
//! u64 metadata_len | metadata (UTF-8 JSON)
//! u32 entry_count
//! per entry: u32 name_len | name | u8 dtype | u8 ndim | ndim x u64 dims
//!            | u64 payload_len | payload (little-endian scalars)
//! ```
//!
//! Entries are sorted by name, so `save(load(bytes)) == bytes`.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"SBCP";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub step: u64,
    pub optimizer_steps: u64,
    /// Flat-text config echo of the run that produced this checkpoint.
    pub config_echo: String,
}

/// Everything needed to resume or evaluate a run: student and teacher
/// parameters, optimizer moments, centers, and the schedule position.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub meta: CheckpointMeta,
    /// Flat arrays with group prefixes (`student/`, `teacher/`, `optim/m/`,
    /// `optim/v/`, `state/`).
    pub arrays: ParamSet<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.meta.format_version.to_le_bytes());
        let meta = serde_json::to_string(&self.meta).expect("serializable metadata");
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, arr) in self.arrays.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(T::DTYPE_TAG);
            out.push(arr.ndim() as u8);
            for d in arr.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            out.extend_from_slice(&((arr.len() * T::byte_width()) as u64).to_le_bytes());
            for v in arr.iter() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Checkpoint("truncated archive".into()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let meta_len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().expect("8 bytes")) as usize;
        let meta: CheckpointMeta = serde_json::from_slice(take(&mut pos, meta_len)?)
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes")) as usize;
        let mut arrays = ParamSet::new();
        for _ in 0..count {
            let name_len =
                u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes")) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|e| Error::Checkpoint(format!("entry name: {e}")))?;
            let dtype = take(&mut pos, 1)?[0];
            if dtype != T::DTYPE_TAG {
                return Err(Error::Checkpoint(format!(
                    "entry {name} has dtype tag {dtype}, expected {}",
                    T::DTYPE_TAG
                )));
            }
            let ndim = take(&mut pos, 1)?[0] as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(
                    u64::from_le_bytes(take(&mut pos, 8)?.try_into().expect("8 bytes")) as usize,
                );
            }
            let payload_len =
                u64::from_le_bytes(take(&mut pos, 8)?.try_into().expect("8 bytes")) as usize;
            let n: usize = dims.iter().product();
            if payload_len != n * T::byte_width() {
                return Err(Error::Checkpoint(format!("entry {name} payload size")));
            }
            let payload = take(&mut pos, payload_len)?;
            let data: Vec<T> = payload
                .chunks_exact(T::byte_width())
                .map(T::read_le)
                .collect();
            arrays.insert(
                name,
                ArrayD::from_shape_vec(IxDyn(&dims), data)
                    .map_err(|e| Error::Checkpoint(format!("entry shape: {e}")))?,
            );
        }
        if pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint { meta, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
