//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "KWSEMBED"
//! version    u32
//! config     u64 length + UTF-8 JSON of EmbedderConfig
//! blocks     u32 count, then per block: u64 length + f64 values
//! ```
//!
//! Blocks follow declaration order: for each layer, weights (row-major,
//! `fan_out x fan_in`) then bias.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::Matrix;
use crate::scalar::Scalar;

use super::{Dense, Embedder, EmbedderConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"KWSEMBED";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<T: Scalar>(embedder: &Embedder<T>) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(embedder.config())?;
    let blocks = embedder.blocks();
    let mut out = Vec::with_capacity(32 + config.len() + 8 * embedder.parameter_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for block in blocks {
        out.extend_from_slice(&(block.len() as u64).to_le_bytes());
        for v in block {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Embedder<T>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not an embedder checkpoint (bad magic)".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let config_len = cur.u64()? as usize;
    let config: EmbedderConfig = serde_json::from_slice(cur.take(config_len)?)?;
    config.validate()?;

    let shapes = config.layer_shapes();
    let count = cur.u32()? as usize;
    if count != 2 * shapes.len() {
        return Err(Error::IncompatibleCheckpoint(format!(
            "{count} parameter blocks for a {}-layer config",
            shapes.len()
        )));
    }
    let mut read_block = |expected: usize| -> Result<Vec<T>> {
        let len = cur.u64()? as usize;
        if len != expected {
            return Err(Error::IncompatibleCheckpoint(format!(
                "block of {len} values where the config needs {expected}"
            )));
        }
        (0..len).map(|_| cur.f64().map(T::of)).collect()
    };
    let mut layers = Vec::with_capacity(shapes.len());
    for (o, i) in shapes {
        let weights = Matrix::new(o, i, read_block(o * i)?)?;
        let bias = read_block(o)?;
        layers.push(Dense { weights, bias });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Embedder::from_layers(config, layers)
}

pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, embedder: &Embedder<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_checkpoint(embedder)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Embedder<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::Activation;

    fn config() -> EmbedderConfig {
        EmbedderConfig {
            frames: 2,
            coeffs: 3,
            mean_pool: false,
            hidden_sizes: vec![4],
            embedding_dim: 2,
            activation: Activation::Relu,
            seed: 8,
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let e: Embedder<f64> = Embedder::new(config()).unwrap();
        let back: Embedder<f64> = read_checkpoint(&write_checkpoint(&e).unwrap()).unwrap();
        assert_eq!(back.blocks(), e.blocks());
        let x = Matrix::new(2, 3, vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6]).unwrap();
        let a = e.embed(&x).unwrap();
        let b = back.embed(&x).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn header_layout() {
        let e: Embedder<f64> = Embedder::new(config()).unwrap();
        let bytes = write_checkpoint(&e).unwrap();
        assert_eq!(&bytes[..8], b"KWSEMBED");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        let n = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let cfg: EmbedderConfig = serde_json::from_slice(&bytes[20..20 + n]).unwrap();
        assert_eq!(cfg, config());
        // first block: 4x6 weights
        let count = u32::from_le_bytes(bytes[20 + n..24 + n].try_into().unwrap());
        assert_eq!(count, 4);
        let first = u64::from_le_bytes(bytes[24 + n..32 + n].try_into().unwrap());
        assert_eq!(first, 24);
        let w0 = f64::from_le_bytes(bytes[32 + n..40 + n].try_into().unwrap());
        assert_eq!(w0, e.layers()[0].weights[(0, 0)]);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let e: Embedder<f64> = Embedder::new(config()).unwrap();
        let bytes = write_checkpoint(&e).unwrap();
        assert!(read_checkpoint::<f64>(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint::<f64>(&bad), Err(Error::Format(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(read_checkpoint::<f64>(&extra).is_err());
    }

    #[test]
    fn single_precision_round_trip() {
        let e: Embedder<f32> = Embedder::new(config()).unwrap();
        let back: Embedder<f32> = read_checkpoint(&write_checkpoint(&e).unwrap()).unwrap();
        assert_eq!(back, e);
    }
}
