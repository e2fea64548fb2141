//! Binary checkpoint format.
//!
//! Little-endian layout:
//!
//! ```text
//! magic "MSSPNET1" (8 bytes) | u32 version = 1 | u32 tensor count
//! per tensor: u16 name length | UTF-8 name | u8 rank | rank x u32 dims
//!             | raw f32 data, row-major (n, h, w, c)
//! ```
//!
//! Loading validates magic, version and the full parameter roster: a file
//! with missing, extra, duplicate or wrongly-shaped tensors is rejected with
//! a distinct error naming the offender.

use crate::error::{CheckpointError, Result};
use crate::model::{roster, ModelParams};
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 8] = b"MSSPNET1";
const VERSION: u32 = 1;

pub fn to_bytes(params: &ModelParams<f32>) -> Vec<u8> {
    let entries: Vec<(String, &Tensor<f32>)> = params.iter_roster().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Truncated(what.to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> std::result::Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams<f32>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(8, "magic")?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version).into());
    }
    let count = r.u32("tensor count")? as usize;

    let expected: BTreeMap<String, Vec<usize>> = roster().into_iter().collect();
    let mut map: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16("tensor name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
            .map_err(|_| CheckpointError::Truncated("tensor name (invalid utf-8)".into()))?;
        let rank = r.take(1, "tensor rank")?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32(&format!("dims of '{name}'"))? as usize);
        }
        let expected_dims = expected
            .get(&name)
            .ok_or_else(|| CheckpointError::UnknownTensor(name.clone()))?;
        if &dims != expected_dims {
            return Err(CheckpointError::DimsMismatch {
                name,
                got: dims,
                expected: expected_dims.clone(),
            }
            .into());
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n * 4, &format!("data of '{name}'"))?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if map
            .insert(name.clone(), Tensor::from_vec(&dims, data)?)
            .is_some()
        {
            return Err(CheckpointError::DuplicateTensor(name).into());
        }
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes.into());
    }
    for name in expected.keys() {
        if !map.contains_key(name) {
            return Err(CheckpointError::MissingTensor(name.clone()).into());
        }
    }
    Ok(ModelParams::from_map(map))
}

pub fn save_checkpoint(params: &ModelParams<f32>, path: &Path) -> Result<()> {
    let bytes = to_bytes(params);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams<f32>> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::model::init_params;

    #[test]
    fn round_trip_is_bit_exact() {
        let params: ModelParams<f32> = init_params(99);
        let bytes = to_bytes(&params);
        let loaded = from_bytes(&bytes).unwrap();
        assert_eq!(params, loaded);
    }

    #[test]
    fn bad_magic_is_distinct() {
        let params: ModelParams<f32> = init_params(1);
        let mut bytes = to_bytes(&params);
        bytes[0] = b'X';
        assert!(matches!(
            from_bytes(&bytes),
            Err(Error::Checkpoint(CheckpointError::BadMagic))
        ));
    }

    #[test]
    fn bad_version_is_distinct() {
        let params: ModelParams<f32> = init_params(1);
        let mut bytes = to_bytes(&params);
        bytes[8] = 9;
        assert!(matches!(
            from_bytes(&bytes),
            Err(Error::Checkpoint(CheckpointError::UnsupportedVersion(9)))
        ));
    }

    #[test]
    fn truncation_mid_tensor_is_distinct() {
        let params: ModelParams<f32> = init_params(1);
        let bytes = to_bytes(&params);
        let cut = &bytes[..bytes.len() / 2];
        assert!(matches!(
            from_bytes(cut),
            Err(Error::Checkpoint(CheckpointError::Truncated(_)))
        ));
    }

    #[test]
    fn extra_tensor_names_the_offender() {
        let params: ModelParams<f32> = init_params(1);
        let mut bytes = to_bytes(&params);
        // bump the count and append one more tensor
        let count = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
        bytes[12..16].copy_from_slice(&(count + 1).to_le_bytes());
        let name = b"rogue.weight";
        bytes.extend_from_slice(&(name.len() as u16).to_le_bytes());
        bytes.extend_from_slice(name);
        bytes.push(1);
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&2.0f32.to_le_bytes());
        match from_bytes(&bytes) {
            Err(Error::Checkpoint(CheckpointError::UnknownTensor(n))) => {
                assert_eq!(n, "rogue.weight")
            }
            other => panic!("expected UnknownTensor, got {other:?}"),
        }
    }

    #[test]
    fn missing_tensor_is_distinct() {
        let params: ModelParams<f32> = init_params(1);
        let bytes = to_bytes(&params);
        // drop the last tensor by truncating at its header and fixing the count
        // simpler: rebuild with count-1 by re-serializing all but one entry
        let mut out = Vec::new();
        out.extend_from_slice(&bytes[..12]);
        let count = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
        out.extend_from_slice(&(count - 1).to_le_bytes());
        // walk entries, copy all but the last
        let mut pos = 16;
        let mut starts = Vec::new();
        for _ in 0..count {
            starts.push(pos);
            let name_len = u16::from_le_bytes(bytes[pos..pos + 2].try_into().unwrap()) as usize;
            pos += 2 + name_len;
            let rank = bytes[pos] as usize;
            pos += 1;
            let mut n = 1usize;
            for _ in 0..rank {
                n *= u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
                pos += 4;
            }
            pos += n * 4;
        }
        out.extend_from_slice(&bytes[16..*starts.last().unwrap()]);
        assert!(matches!(
            from_bytes(&out),
            Err(Error::Checkpoint(CheckpointError::MissingTensor(_)))
        ));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let params: ModelParams<f32> = init_params(1);
        let mut bytes = to_bytes(&params);
        bytes.push(0);
        assert!(matches!(
            from_bytes(&bytes),
            Err(Error::Checkpoint(CheckpointError::TrailingBytes))
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let params: ModelParams<f32> = init_params(5);
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(params, loaded);
    }
}
