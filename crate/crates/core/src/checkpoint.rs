//! Single-file model archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"SSIUCKPT" | u32 version | u64 len | config TOML (len bytes)
//! u64 tensor count
//! per tensor: u32 name len | name | u32 ndim | u64 dims[ndim] | f64 data
//! 32-byte SHA-256 of everything above
//! ```
//!
//! Encoding is a pure function of the config and the ordered tensors, so
//! save → load → save reproduces the file byte for byte.

use std::fs;
use std::path::Path;

use ndarray::IxDyn;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{SsiuConfig, SsiuModel};
use crate::nn::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"SSIUCKPT";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Canonical text form of a model configuration.
pub fn config_text(cfg: &SsiuConfig) -> String {
    toml::to_string(cfg).expect("model config serializes to TOML")
}

pub fn encode(model: &SsiuModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 8 * model.params.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = config_text(&model.config);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    for (name, t) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated archive".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<SsiuModel> {
    if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("not an SSIU checkpoint (bad magic)".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch: file is corrupted".into()));
    }
    let mut r = Reader {
        buf: body,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n = r.len()?;
    let text = std::str::from_utf8(r.take(n)?)
        .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
    let config: SsiuConfig =
        toml::from_str(text).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let count = r.len()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let dims = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint("tensor size overflow".into()))?;
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor size overflow".into()))?)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::from_shape_vec(IxDyn(&dims), data).expect("consistent shape");
        if store.id(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
        store.add(name, t);
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }
    SsiuModel::from_params(&config, store)
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
pub fn save(model: &SsiuModel, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(model)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<SsiuModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SsiuModel {
        let mut cfg = SsiuConfig::with_scale(2);
        cfg.channels = 8;
        cfg.num_stages = 3;
        cfg.moe_taps = vec![1, 2, 3];
        SsiuModel::build(&cfg, 5).unwrap()
    }

    #[test]
    fn round_trip_is_byte_stable() {
        let m = tiny();
        let a = encode(&m);
        let back = decode(&a).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.params, m.params);
        assert_eq!(encode(&back), a);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/model.ckpt");
        let m = tiny();
        save(&m, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.params, m.params);
        assert!(!path.with_extension("tmp").exists());
    }

    #[test]
    fn any_flipped_byte_is_detected() {
        let bytes = encode(&tiny());
        for pos in [0, 9, 20, bytes.len() / 2, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x40;
            assert!(matches!(decode(&bad), Err(Error::Checkpoint(_))), "byte {pos}");
        }
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = encode(&tiny());
        assert!(decode(&bytes[..bytes.len() - 5]).is_err());
        assert!(decode(&bytes[..10]).is_err());
        assert!(decode(&[]).is_err());
    }

    #[test]
    fn config_text_is_canonical_toml() {
        let cfg = SsiuConfig::default();
        let text = config_text(&cfg);
        assert_eq!(toml::from_str::<SsiuConfig>(&text).unwrap(), cfg);
        assert_eq!(config_text(&toml::from_str(&text).unwrap()), text);
    }
}
