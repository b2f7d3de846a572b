//! Binary model checkpoint.
//!
//! Layout, all integers and floats little-endian:
//! magic `DCGCKPT\0`, u32 version, u32 hash length + config hash bytes,
//! u32 dim, u32 field count, u64 vocab size per field, u8 similarity
//! (0 inner product, 1 cosine), f64 temperature, f64 decay, f64 init scale,
//! then every embedding table as f64 values: item tower fields first,
//! then user tower fields.

use std::path::Path;

use dcg_core::encoder::{EncoderConfig, Parameters, SimilarityMode};

const MAGIC: &[u8; 8] = b"DCGCKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("{0} trailing bytes after checkpoint")]
    Trailing(usize),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub params: Parameters,
}

pub fn encode(checkpoint: &Checkpoint) -> Vec<u8> {
    let p = &checkpoint.params;
    let cfg = p.config();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(checkpoint.config_hash.len() as u32).to_le_bytes());
    out.extend_from_slice(checkpoint.config_hash.as_bytes());
    out.extend_from_slice(&(cfg.dim as u32).to_le_bytes());
    out.extend_from_slice(&(p.vocab_sizes().len() as u32).to_le_bytes());
    for &v in p.vocab_sizes() {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    out.push(match cfg.similarity {
        SimilarityMode::InnerProduct => 0,
        SimilarityMode::Cosine => 1,
    });
    for x in [cfg.temperature, cfg.decay, cfg.init_scale] {
        out.extend_from_slice(&x.to_le_bytes());
    }
    for table in p.tables() {
        for x in table {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() < n {
            return Err(CheckpointError::Truncated);
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.array()?))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { bytes };
    if r.take(MAGIC.len()).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let n = r.u32()? as usize;
    let config_hash = String::from_utf8(r.take(n)?.to_vec())
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let dim = r.u32()? as usize;
    let fields = r.u32()? as usize;
    let vocab = (0..fields)
        .map(|_| r.u64().map(|v| v as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let similarity = match r.take(1)?[0] {
        0 => SimilarityMode::InnerProduct,
        1 => SimilarityMode::Cosine,
        b => return Err(CheckpointError::Corrupt(format!("similarity tag {b}"))),
    };
    let config = EncoderConfig {
        dim,
        similarity,
        temperature: r.f64()?,
        decay: r.f64()?,
        init_scale: r.f64()?,
    };
    let mut tables = Vec::with_capacity(2 * fields);
    for _ in 0..2 {
        for &v in &vocab {
            let len = v.checked_mul(dim).ok_or(CheckpointError::Truncated)?;
            tables.push((0..len).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?);
        }
    }
    if !r.bytes.is_empty() {
        return Err(CheckpointError::Trailing(r.bytes.len()));
    }
    let params = Parameters::from_tables(config, vocab, tables)
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    Ok(Checkpoint {
        config_hash,
        params,
    })
}

pub fn save(path: &Path, checkpoint: &Checkpoint) -> Result<(), CheckpointError> {
    std::fs::write(path, encode(checkpoint)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let cfg = EncoderConfig {
            dim: 3,
            ..EncoderConfig::default()
        };
        let params = Parameters::init(cfg, &[4, 2], &mut dcg_core::seeded_rng(1)).unwrap();
        Checkpoint {
            config_hash: "abc123".into(),
            params,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        assert_eq!(decode(&encode(&c)).unwrap(), c);
    }

    #[test]
    fn damaged_input_is_rejected() {
        let bytes = encode(&sample());
        assert!(matches!(
            decode(&bytes[..bytes.len() - 1]),
            Err(CheckpointError::Truncated)
        ));
        assert!(matches!(
            decode(b"nonsense"),
            Err(CheckpointError::BadMagic)
        ));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(decode(&longer), Err(CheckpointError::Trailing(1))));
        let mut v2 = bytes;
        v2[8] = 2;
        assert!(matches!(decode(&v2), Err(CheckpointError::Version(2))));
    }
}
