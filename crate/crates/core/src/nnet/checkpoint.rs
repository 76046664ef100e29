//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RAGACKPT" | version u32
//! vocab u32 | embed u32 | hidden u32 | dense1 u32 | outputs u32 | dropout f64 | head u8 | k u32 | subseq_len u32
//! n_tensors u32 | per tensor: name_len u8, name, ndim u8, dims u32 × ndim
//! tensor data as f32, in table order
//! crc32 of everything above, u32
//! ```

use std::path::Path;

use super::params::ModelParams;
use super::tensor::Real;
use super::{Head, ModelConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"RAGACKPT";
const VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint<T: Real>(cfg: &ModelConfig, params: &ModelParams<T>) -> Result<Vec<u8>> {
    params.check_shapes(cfg)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        cfg.vocab_size,
        cfg.embed_dim,
        cfg.lstm_hidden,
        cfg.dense1_units,
        cfg.n_classes,
    ] {
        put_u32(&mut buf, v)?;
    }
    buf.extend_from_slice(&cfg.dropout_rate.to_le_bytes());
    buf.push(match cfg.head {
        Head::Classifier => 0,
        Head::Embedding => 1,
    });
    put_u32(&mut buf, cfg.k_levels as usize)?;
    put_u32(&mut buf, cfg.subseq_len)?;

    let tensors = params.all();
    put_u32(&mut buf, tensors.len())?;
    for (name, t) in &tensors {
        buf.push(name.len() as u8);
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.shape.len() as u8);
        for &d in &t.shape {
            put_u32(&mut buf, d)?;
        }
    }
    for (_, t) in &tensors {
        for v in &t.data {
            let f = v.to_f32().expect("finite real converts to f32");
            buf.extend_from_slice(&f.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Decodes a checkpoint; when `expected` is given, the stored configuration
/// must match it exactly.
pub fn decode_checkpoint<T: Real>(
    bytes: &[u8],
    expected: Option<&ModelConfig>,
) -> Result<(ModelConfig, ModelParams<T>)> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut cur = Cursor {
        buf: body,
        pos: MAGIC.len(),
    };
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = cur.u32()? as usize;
    }
    let dropout_rate = cur.f64()?;
    let head = match cur.u8()? {
        0 => Head::Classifier,
        1 => Head::Embedding,
        other => return Err(Error::Checkpoint(format!("unknown head tag {other}"))),
    };
    let cfg = ModelConfig {
        vocab_size: dims[0],
        embed_dim: dims[1],
        lstm_hidden: dims[2],
        dense1_units: dims[3],
        n_classes: dims[4],
        dropout_rate,
        head,
        k_levels: cur.u32()?,
        subseq_len: cur.u32()? as usize,
    };
    cfg.validate()?;
    if let Some(exp) = expected {
        if *exp != cfg {
            return Err(Error::Checkpoint(format!(
                "configuration mismatch: file has {cfg:?}, expected {exp:?}"
            )));
        }
    }

    let mut params = ModelParams::<T>::zeros(&cfg);
    let n = cur.u32()? as usize;
    if n != params.all().len() {
        return Err(Error::Checkpoint(format!("expected 13 tensors, found {n}")));
    }
    let mut table = Vec::with_capacity(n);
    for _ in 0..n {
        let len = cur.u8()? as usize;
        let name = String::from_utf8(cur.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let ndim = cur.u8()? as usize;
        let shape = (0..ndim)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        table.push((name, shape));
    }
    for ((name, shape), (want_name, t)) in table.iter().zip(params.all_mut()) {
        if name != want_name || *shape != t.shape {
            return Err(Error::Checkpoint(format!(
                "tensor table entry `{name}` {shape:?} does not match `{want_name}` {:?}",
                t.shape
            )));
        }
        for v in &mut t.data {
            *v = T::of(f64::from(cur.f32()?));
        }
    }
    if cur.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
    }
    Ok((cfg, params))
}

pub fn save_checkpoint<T: Real>(path: &Path, cfg: &ModelConfig, params: &ModelParams<T>) -> Result<()> {
    let bytes = encode_checkpoint(cfg, params)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(
    path: &Path,
    expected: Option<&ModelConfig>,
) -> Result<(ModelConfig, ModelParams<T>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 9,
            embed_dim: 3,
            lstm_hidden: 4,
            dense1_units: 5,
            n_classes: 3,
            dropout_rate: 0.3,
            head: Head::Classifier,
            k_levels: 5,
            subseq_len: 40,
        }
    }

    #[test]
    fn f32_params_survive_exactly() {
        let cfg = cfg();
        let p = ModelParams::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let bytes = encode_checkpoint(&cfg, &p).unwrap();
        let (c2, p2) = decode_checkpoint::<f32>(&bytes, Some(&cfg)).unwrap();
        assert_eq!(p, p2);
        assert_eq!(c2.n_classes, 3);
    }

    #[test]
    fn mismatch_and_corruption_are_rejected() {
        let cfg = cfg();
        let p = ModelParams::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let mut bytes = encode_checkpoint(&cfg, &p).unwrap();
        let other = ModelConfig {
            n_classes: 4,
            ..cfg.clone()
        };
        assert!(decode_checkpoint::<f32>(&bytes, Some(&other)).is_err());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(
            decode_checkpoint::<f32>(&bytes, None),
            Err(Error::Checkpoint(m)) if m.contains("checksum")
        ));
        assert!(decode_checkpoint::<f32>(b"nonsense", None).is_err());
    }
}
