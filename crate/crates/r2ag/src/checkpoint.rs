//! Single-file checkpoint container.
//!
//! All integers are little-endian.
//!
//! ```text
//! offset   size   field
//! 0        8      magic "R2AGCKPT"
//! 8        4      format version (u32) = 1
//! 12       4      header length H (u32)
//! 16       H      header: UTF-8 `key = value` lines, the full training
//!                 config (version, h1, layers, heads, k_max, h2, ...) plus
//!                 `vocab_size`
//! 16+H     4      tensor count T (u32)
//! then T records, in parameter creation order:
//!          4      name length L (u32)
//!          L      name (UTF-8), e.g. `bridge.layers.0.attn.query.weight`
//!          4      rank R (u32)
//!          8*R    dimensions (u64 each)
//!          8*N    values (f64, row-major), N = product of dimensions
//! ```
//!
//! Writing the same model twice yields identical bytes.

use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};

use r2ag_core::tensor::Tensor;
use r2ag_core::trainer::{Model, TrainConfig};

pub const MAGIC: &[u8; 8] = b"R2AGCKPT";
pub const VERSION: u32 = 1;

pub fn encode(cfg: &TrainConfig, model: &Model) -> Vec<u8> {
    let vocab_size = model.lm.config.vocab_size;
    let header = format!("{}vocab_size = {vocab_size}\n", cfg.to_text());
    let mut out = Vec::with_capacity(64 + model.params.num_values() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (_, p) in model.params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.tensor.shape().len() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        ensure!(self.at + n <= self.buf.len(), "checkpoint truncated at byte {}", self.at);
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Rebuilds the config and model stored in `bytes`.
pub fn decode(bytes: &[u8]) -> Result<(TrainConfig, Model)> {
    let mut c = Cursor { buf: bytes, at: 0 };
    ensure!(c.take(8)? == MAGIC, "not a checkpoint file (bad magic)");
    let version = c.u32()?;
    ensure!(version == VERSION, "unsupported checkpoint version {version}");
    let hlen = c.u32()? as usize;
    let header = std::str::from_utf8(c.take(hlen)?).context("header is not UTF-8")?;
    let mut vocab_size = None;
    let mut cfg_text = String::new();
    for line in header.lines() {
        match line.split_once('=') {
            Some((k, v)) if k.trim() == "vocab_size" => vocab_size = Some(v.trim().parse::<usize>()?),
            _ => {
                cfg_text.push_str(line);
                cfg_text.push('\n');
            }
        }
    }
    let Some(vocab_size) = vocab_size else {
        bail!("checkpoint header lacks vocab_size");
    };
    let cfg = TrainConfig::parse(&cfg_text)?;
    let mut model = Model::new(&cfg, vocab_size)?;
    let count = c.u32()? as usize;
    ensure!(
        count == model.params.len(),
        "checkpoint has {count} tensors, model expects {}",
        model.params.len()
    );
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(nlen)?)?.to_string();
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| Ok(c.u64()? as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = c
            .take(n * 8)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    ensure!(c.at == bytes.len(), "trailing bytes after the last tensor");
    model.params.load(entries)?;
    Ok((cfg, model))
}

pub fn save(path: &Path, cfg: &TrainConfig, model: &Model) -> Result<()> {
    fs::write(path, encode(cfg, model)).with_context(|| format!("writing {}", path.display()))
}

pub fn load(path: &Path) -> Result<(TrainConfig, Model)> {
    let bytes = fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    decode(&bytes).with_context(|| format!("decoding {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        TrainConfig {
            h1: 8,
            heads: 2,
            layers: 1,
            h2: 8,
            lm_layers: 1,
            k_max: 4,
            max_len: 16,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn round_trip_is_exact_and_stable() {
        let cfg = tiny();
        let model = Model::new(&cfg, 20).unwrap();
        let bytes = encode(&cfg, &model);
        assert_eq!(bytes, encode(&cfg, &model));
        let (cfg2, model2) = decode(&bytes).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(encode(&cfg2, &model2), bytes);
        let header_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[16..16 + header_len]).unwrap();
        for key in ["version = 1", "h1 = 8", "layers = 1", "heads = 2", "k_max = 4", "vocab_size = 20"] {
            assert!(header.lines().any(|l| l == key), "missing {key}");
        }
    }

    #[test]
    fn rejects_corrupt_files() {
        let cfg = tiny();
        let bytes = encode(&cfg, &Model::new(&cfg, 20).unwrap());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut longer = bytes;
        longer.push(0);
        assert!(decode(&longer).is_err());
    }
}
