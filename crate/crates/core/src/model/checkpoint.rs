//! Binary checkpoint format.
//!
//! ```text
//! magic    8 bytes  "LXSCKPT\0"
//! version  u32      1
//! config   u32 × 6  d_model n_layers n_heads d_ff vocab_size max_seq
//!          f64      rope_base
//!          u64      seed
//! expansion block
//!          u32      base_vocab (rows present before expansion)
//!          u32      added rows (vocab_size − base_vocab)
//! tensors  f32 LE, row-major, in `ModelWeights::tensors` order
//! ```
//!
//! All integers are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Model, ModelConfig, ModelWeights};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"LXSCKPT\0";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(model: &Model, mut out: W) -> std::io::Result<()> {
    let c = &model.config;
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    for v in [c.d_model, c.n_layers, c.n_heads, c.d_ff, c.vocab_size, c.max_seq] {
        out.write_all(&(v as u32).to_le_bytes())?;
    }
    out.write_all(&c.rope_base.to_le_bytes())?;
    out.write_all(&c.seed.to_le_bytes())?;
    out.write_all(&(model.base_vocab as u32).to_le_bytes())?;
    out.write_all(&((c.vocab_size - model.base_vocab) as u32).to_le_bytes())?;
    for t in model.weights.tensors() {
        let mut buf = Vec::with_capacity(t.len() * 4);
        for &v in t {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::format("checkpoint", "truncated file"));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

fn u32_at(buf: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(buf, 4)?.try_into().expect("4 bytes")))
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Model> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::format("checkpoint", e.to_string()))?;
    let mut buf = bytes.as_slice();
    if take(&mut buf, 8)? != MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = u32_at(&mut buf)?;
    if version != VERSION {
        return Err(Error::format(
            "checkpoint",
            format!("unsupported version {version}"),
        ));
    }
    let mut dims = [0usize; 6];
    for d in dims.iter_mut() {
        *d = u32_at(&mut buf)? as usize;
    }
    let rope_base = f64::from_le_bytes(take(&mut buf, 8)?.try_into().expect("8 bytes"));
    let seed = u64::from_le_bytes(take(&mut buf, 8)?.try_into().expect("8 bytes"));
    let config = ModelConfig {
        d_model: dims[0],
        n_layers: dims[1],
        n_heads: dims[2],
        d_ff: dims[3],
        vocab_size: dims[4],
        max_seq: dims[5],
        rope_base,
        seed,
    };
    config
        .validate()
        .map_err(|e| Error::format("checkpoint", e.to_string()))?;
    let base_vocab = u32_at(&mut buf)? as usize;
    let added = u32_at(&mut buf)? as usize;
    if base_vocab + added != config.vocab_size {
        return Err(Error::format(
            "checkpoint",
            "expansion block disagrees with vocab_size",
        ));
    }
    let mut weights = ModelWeights::zeros(&config);
    let expected: usize = weights.n_params() * 4;
    if buf.len() != expected {
        return Err(Error::format(
            "checkpoint",
            format!("expected {expected} tensor bytes, found {}", buf.len()),
        ));
    }
    for t in weights.tensors_mut() {
        let raw = take(&mut buf, t.len() * 4)?;
        for (v, chunk) in t.iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
        }
    }
    if !weights.is_finite() {
        return Err(Error::format("checkpoint", "non-finite weights"));
    }
    Model::from_parts(config, weights, base_vocab)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(model, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model {
        Model::new(ModelConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 12,
            vocab_size: 20,
            max_seq: 16,
            rope_base: 500.0,
            seed: 4,
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let mut m = model();
        m.push_token(&[0.5; 8], &[-0.25; 8]).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.base_vocab, 20);
        assert_eq!(back.config.vocab_size, 21);
    }

    #[test]
    fn rejects_corruption() {
        let mut buf = Vec::new();
        write_checkpoint(&model(), &mut buf).unwrap();
        assert!(read_checkpoint(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(bad.as_slice()).is_err());
        let mut extra = buf;
        extra.push(0);
        assert!(read_checkpoint(extra.as_slice()).is_err());
    }
}
