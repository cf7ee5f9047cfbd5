//! Self-describing parameter container.
//!
//! Layout, all integers little-endian:
//! `b"ECHOIRCK"`, version `u32`, parameter count `u32`, then per parameter:
//! name length `u32`, UTF-8 name, rank `u32`, `rank` extents as `u64`,
//! `numel` values as `f64`.

use std::path::Path;

use echoir_core::layers::Parameterized;

pub const MAGIC: &[u8; 8] = b"ECHOIRCK";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("parameter name at byte {0} is not UTF-8")]
    Name(usize),
    #[error("checkpoint does not match the network: {0}")]
    Mismatch(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn encode(module: &dyn Parameterized) -> Vec<u8> {
    let params = module.named_params();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in &params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data().iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated(self.bytes.len()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).map_err(|_| CheckpointError::Magic)? != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = r.u32()?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Name(at))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| r.u64().map(f64::from_bits))
            .collect::<Result<Vec<_>, _>>()?;
        entries.push(Entry { name, shape, values });
    }
    Ok(entries)
}

pub fn save(path: &Path, module: &dyn Parameterized) -> Result<(), CheckpointError> {
    std::fs::write(path, encode(module)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: &Path) -> Result<Vec<Entry>, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}

/// Copies values into `module`, which must have exactly the same names
/// and shapes in the same order.
pub fn restore(module: &dyn Parameterized, entries: &[Entry]) -> Result<(), CheckpointError> {
    let params = module.named_params();
    if params.len() != entries.len() {
        return Err(CheckpointError::Mismatch(format!(
            "{} parameters in checkpoint, {} in network",
            entries.len(),
            params.len()
        )));
    }
    for ((name, t), e) in params.iter().zip(entries) {
        if *name != e.name || t.shape() != e.shape.as_slice() {
            return Err(CheckpointError::Mismatch(format!(
                "{} {:?} vs network {} {:?}",
                e.name,
                e.shape,
                name,
                t.shape()
            )));
        }
        t.set_data(&e.values).map_err(|err| CheckpointError::Mismatch(err.to_string()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use echoir_core::net::{EchoIrNet, NetworkConfig};
    use echoir_core::Precision;

    #[test]
    fn round_trip_is_bit_exact() {
        let a = EchoIrNet::new(NetworkConfig::toy(), 1, Precision::Wide).unwrap();
        let b = EchoIrNet::new(NetworkConfig::toy(), 2, Precision::Wide).unwrap();
        let bytes = encode(&a);
        restore(&b, &decode(&bytes).unwrap()).unwrap();
        assert_eq!(encode(&b), bytes);
    }

    #[test]
    fn layout_header() {
        let a = EchoIrNet::new(NetworkConfig::toy(), 1, Precision::Wide).unwrap();
        let bytes = encode(&a);
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), VERSION);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize, a.named_params().len());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let a = EchoIrNet::new(NetworkConfig::toy(), 1, Precision::Wide).unwrap();
        let bytes = encode(&a);
        assert!(matches!(decode(b"NOTACKPT"), Err(CheckpointError::Magic)));
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(CheckpointError::Truncated(_))));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(decode(&v2), Err(CheckpointError::Version(2))));
        let mut cfg = NetworkConfig::toy();
        cfg.encoder_lengths = [2, 1, 1];
        let other = EchoIrNet::new(cfg, 1, Precision::Wide).unwrap();
        assert!(matches!(restore(&other, &decode(&bytes).unwrap()), Err(CheckpointError::Mismatch(_))));
    }
}
