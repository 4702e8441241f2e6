//! Binary checkpoints: a magic tag, format version, the model config as JSON
//! and every named tensor in little-endian order.

use std::io::{Read, Write};
use std::path::Path;

use super::graph::ParamSet;
use super::tensor::{Mat, Real};
use super::{Model, ModelConfig, ModelError};

const MAGIC: &[u8; 8] = b"IASRCKPT";
const VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

fn write_u32(w: &mut impl Write, v: usize) -> Result<(), ModelError> {
    let v = u32::try_from(v).map_err(|_| bad("value does not fit in u32"))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<usize, ModelError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn read_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>, ModelError> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(bad("truncated checkpoint"));
    }
    Ok(buf)
}

impl<T: Real> Model<T> {
    /// Serialises the model. Values are written at their native precision.
    pub fn write_checkpoint(&self, w: &mut impl Write) -> Result<(), ModelError> {
        w.write_all(MAGIC)?;
        write_u32(w, VERSION as usize)?;
        let width = std::mem::size_of::<T>();
        write_u32(w, width)?;
        let config = serde_json::to_vec(&self.config).map_err(|e| bad(e.to_string()))?;
        write_u32(w, config.len())?;
        w.write_all(&config)?;
        write_u32(w, self.params.len())?;
        for (name, t) in self.params.names.iter().zip(&self.params.tensors) {
            write_u32(w, name.len())?;
            w.write_all(name.as_bytes())?;
            write_u32(w, t.rows)?;
            write_u32(w, t.cols)?;
            for v in &t.data {
                match width {
                    4 => w.write_all(&(v.as_f64() as f32).to_le_bytes())?,
                    _ => w.write_all(&v.as_f64().to_le_bytes())?,
                }
            }
        }
        Ok(())
    }

    pub fn read_checkpoint(r: &mut impl Read) -> Result<Self, ModelError> {
        if read_bytes(r, MAGIC.len())? != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = read_u32(r)?;
        if version != VERSION as usize {
            return Err(bad(format!("unsupported version {version}")));
        }
        let width = read_u32(r)?;
        if width != 4 && width != 8 {
            return Err(bad(format!("unsupported value width {width}")));
        }
        let len = read_u32(r)?;
        let config: ModelConfig = serde_json::from_slice(&read_bytes(r, len)?).map_err(|e| bad(e.to_string()))?;
        let count = read_u32(r)?;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let len = read_u32(r)?;
            let name = String::from_utf8(read_bytes(r, len)?).map_err(|_| bad("tensor name is not UTF-8"))?;
            let (rows, cols) = (read_u32(r)?, read_u32(r)?);
            let n = rows.checked_mul(cols).ok_or_else(|| bad("tensor too large"))?;
            let raw = read_bytes(r, n.checked_mul(width).ok_or_else(|| bad("tensor too large"))?)?;
            let data = raw
                .chunks_exact(width)
                .map(|c| match width {
                    4 => T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64),
                    _ => T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))),
                })
                .collect();
            params.push(name, Mat::from_vec(rows, cols, data));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(bad("trailing bytes after checkpoint"));
        }
        Model::from_params(config, params)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::read_checkpoint(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// SHA-256 of the serialised checkpoint.
    pub fn checkpoint_hash(&self) -> String {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf).expect("writing to memory");
        crate::sha256_hex(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny_config;
    use super::*;

    #[test]
    fn round_trip_preserves_every_value() {
        let model = Model::<f32>::init(tiny_config(), 8).unwrap();
        let mut buf = Vec::new();
        model.write_checkpoint(&mut buf).unwrap();
        let back = Model::<f32>::read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back.config, model.config);
        assert_eq!(back.params.tensors, model.params.tensors);
        assert_eq!(back.checkpoint_hash(), model.checkpoint_hash());
    }

    #[test]
    fn rejects_corruption() {
        let model = Model::<f32>::init(tiny_config(), 8).unwrap();
        let mut buf = Vec::new();
        model.write_checkpoint(&mut buf).unwrap();
        let mut wrong_magic = buf.clone();
        wrong_magic[0] = b'X';
        assert!(Model::<f32>::read_checkpoint(&mut wrong_magic.as_slice()).is_err());
        assert!(Model::<f32>::read_checkpoint(&mut &buf[..buf.len() - 3]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(Model::<f32>::read_checkpoint(&mut extra.as_slice()).is_err());
    }
}
