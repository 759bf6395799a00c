//! Binary checkpoint format.
//!
//! ```text
//! "SCNW"                      magic
//! u32                         format version
//! u32 + bytes                 model configuration (JSON, UTF-8)
//! u32                         tensor count
//! per tensor, names ascending:
//!   u32 + bytes               name (UTF-8)
//!   u32                       rank
//!   u32 * rank                dims
//!   f32 * prod(dims)          values
//! ```
//!
//! Every integer and float is little-endian.

use std::path::Path;

use crate::error::{Result, ScnError};
use crate::model::{ModelConfig, WeightStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SCNW";
pub const FORMAT_VERSION: u32 = 1;

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| ScnError::Format(format!("{what} {v} does not fit in 32 bits")))
}

pub fn encode_checkpoint(weights: &WeightStore, cfg: &ModelConfig) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(cfg).map_err(|e| ScnError::Format(format!("cannot encode config: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(config.len(), "config length")?.to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&to_u32(weights.len(), "tensor count")?.to_le_bytes());
    for (name, t) in weights.iter() {
        out.extend_from_slice(&to_u32(name.len(), "name length")?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let dims = t.dims();
        out.extend_from_slice(&to_u32(dims.len(), "rank")?.to_le_bytes());
        for d in dims {
            out.extend_from_slice(&to_u32(d, "dimension")?.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            ScnError::Format(format!("truncated checkpoint: {what} needs {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, what: &str) -> Result<&'a str> {
        let len = self.u32(what)? as usize;
        std::str::from_utf8(self.take(len, what)?).map_err(|_| ScnError::Format(format!("{what} is not UTF-8")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(WeightStore, ModelConfig)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(ScnError::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(ScnError::Format(format!(
            "checkpoint version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let config = r.string("config")?;
    let cfg: ModelConfig =
        serde_json::from_str(config).map_err(|e| ScnError::Format(format!("bad checkpoint config: {e}")))?;
    let count = r.u32("tensor count")?;
    let mut store = WeightStore::new();
    let mut previous: Option<&str> = None;
    for _ in 0..count {
        let name = r.string("tensor name")?;
        if previous.is_some_and(|p| p >= name) {
            return Err(ScnError::Format(format!("tensor '{name}' is out of order")));
        }
        previous = Some(name);
        let rank = r.u32("rank")? as usize;
        if !(1..=4).contains(&rank) {
            return Err(ScnError::Format(format!("tensor '{name}' has rank {rank}")));
        }
        let mut dims = [1usize; 4];
        for d in &mut dims[4 - rank..] {
            *d = r.u32("dims")? as usize;
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4).map(|_| n))
            .ok_or_else(|| ScnError::Format(format!("tensor '{name}' is too large")))?;
        let payload = r.take(n * 4, "tensor values")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        store.insert(name, Tensor::from_vec(dims, data)?);
    }
    if r.pos != bytes.len() {
        return Err(ScnError::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }
    Ok((store, cfg))
}

pub fn save_checkpoint(weights: &WeightStore, cfg: &ModelConfig, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(weights, cfg)?;
    std::fs::write(path, bytes).map_err(|e| ScnError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(WeightStore, ModelConfig)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| ScnError::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, Task};

    fn sample() -> (WeightStore, ModelConfig) {
        let mut cfg = ModelConfig::standard(Task::SuperResolution { factor: 3 });
        cfg.n_blocks = 2;
        cfg.width = 4;
        let mut w = init_model(&cfg, 5).unwrap();
        // values that a lossy encoding would disturb
        w.insert("zz.special", Tensor::from_vec([1, 1, 1, 4], vec![-0.0, f32::MIN_POSITIVE / 2.0, 1e-38, f32::MAX]).unwrap());
        (w, cfg)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (w, cfg) = sample();
        let bytes = encode_checkpoint(&w, &cfg).unwrap();
        let (back, back_cfg) = decode_checkpoint(&bytes).unwrap();
        assert!(back.bit_eq(&w));
        assert_eq!(back_cfg, cfg);
        assert_eq!(encode_checkpoint(&back, &back_cfg).unwrap(), bytes);
    }

    #[test]
    fn header_layout() {
        let (w, cfg) = sample();
        let bytes = encode_checkpoint(&w, &cfg).unwrap();
        assert_eq!(&bytes[..4], b"SCNW");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let clen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let json: serde_json::Value = serde_json::from_slice(&bytes[12..12 + clen]).unwrap();
        assert_eq!(json["width"], 4);
        let count = u32::from_le_bytes(bytes[12 + clen..16 + clen].try_into().unwrap());
        assert_eq!(count as usize, w.len());
    }

    #[test]
    fn empty_store_is_valid() {
        let (_, cfg) = sample();
        let bytes = encode_checkpoint(&WeightStore::new(), &cfg).unwrap();
        let (back, _) = decode_checkpoint(&bytes).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn corruption_is_rejected() {
        let (w, cfg) = sample();
        let bytes = encode_checkpoint(&w, &cfg).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(ScnError::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_checkpoint(&bad), Err(ScnError::Format(_))));
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(ScnError::Format(_))), "cut {cut}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_checkpoint(&long), Err(ScnError::Format(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let (w, cfg) = sample();
        save_checkpoint(&w, &cfg, &p).unwrap();
        let (back, back_cfg) = load_checkpoint(&p).unwrap();
        assert!(back.bit_eq(&w));
        assert_eq!(back_cfg, cfg);
        assert!(matches!(load_checkpoint(dir.path().join("missing")), Err(ScnError::Io { .. })));
    }
}
