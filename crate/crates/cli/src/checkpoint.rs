//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "EGIF" | u32 version | u32 header length | JSON header
//! u32 tensor count | per tensor: u32 name length, name, u32 rank, u64 extents.., u64 payload offset
//! payload: f64 values of every tensor, in directory order
//! ```
//!
//! Offsets are in bytes from the start of the payload.

use std::path::Path;

use egif::diffcore::Tensor;
use egif::eqlayers::ParamMap;
use egif::implicitnet::{EquivarianceMode, Model, ModelConfig};
use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 4] = b"EGIF";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not an EGIF checkpoint")]
    Magic,
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("truncated checkpoint")]
    Truncated,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] egif::implicitnet::ModelError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    mode: EquivarianceMode,
    k: usize,
    levels: usize,
    fractions: Vec<f64>,
    scalar_channels: usize,
    vector_channels: usize,
    decoder_width: usize,
    decoder_blocks: usize,
    scalar_bias: bool,
    seed: u64,
    iterations: usize,
}

/// A model with the seed and iteration count that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub seed: u64,
    pub iterations: usize,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.model.config;
        let header = Header {
            mode: c.mode,
            k: c.k,
            levels: c.levels(),
            fractions: c.fractions.clone(),
            scalar_channels: c.scalar_channels,
            vector_channels: c.vector_channels,
            decoder_width: c.decoder_width,
            decoder_blocks: c.decoder_blocks,
            scalar_bias: c.scalar_bias,
            seed: self.seed,
            iterations: self.iterations,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.model.params.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.model.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 8 * t.numel() as u64;
        }
        for t in self.model.params.values() {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(len)?)?;
        if header.levels != header.fractions.len() + 1 {
            return Err(CheckpointError::Malformed(format!(
                "{} levels do not match {} fractions",
                header.levels,
                header.fractions.len()
            )));
        }
        let count = r.u32()? as usize;
        let mut directory = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>, _>>()?;
            let offset = r.u64()?;
            directory.push((name, shape, offset));
        }
        let payload = &bytes[r.pos..];
        let mut params = ParamMap::new();
        let mut expected = 0u64;
        for (name, shape, offset) in directory {
            if offset != expected {
                return Err(CheckpointError::Malformed(format!(
                    "tensor {name} has offset {offset}, expected {expected}"
                )));
            }
            let numel = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
            let numel = numel.ok_or_else(|| CheckpointError::Malformed(format!("tensor {name} is too large")))?;
            let start = offset as usize;
            let end = numel.checked_mul(8).and_then(|b| b.checked_add(start)).ok_or(CheckpointError::Truncated)?;
            let raw = payload.get(start..end).ok_or(CheckpointError::Truncated)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            if params.insert(name.clone(), t).is_some() {
                return Err(CheckpointError::Malformed(format!("duplicate tensor {name}")));
            }
            expected = end as u64;
        }
        if expected as usize != payload.len() {
            return Err(CheckpointError::Malformed("trailing bytes after the payload".into()));
        }
        let config = ModelConfig {
            mode: header.mode,
            k: header.k,
            fractions: header.fractions,
            scalar_channels: header.scalar_channels,
            vector_channels: header.vector_channels,
            decoder_width: header.decoder_width,
            decoder_blocks: header.decoder_blocks,
            scalar_bias: header.scalar_bias,
        };
        Ok(Self { model: Model::from_parts(config, params)?, seed: header.seed, iterations: header.iterations })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| io_error(path, source))
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| io_error(path, source))?;
        Self::from_bytes(&bytes)
    }
}

fn io_error(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io { path: path.display().to_string(), source }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small(mode: EquivarianceMode) -> ModelConfig {
        let mut c = ModelConfig::new(mode);
        c.k = 4;
        c.scalar_channels = 4;
        c.vector_channels = if mode.is_equivariant() { 2 } else { 0 };
        c.decoder_width = 8;
        c.decoder_blocks = 1;
        c
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for i in 0..20u64 {
            let mode = EquivarianceMode::ALL[i as usize % 4];
            let mut model = Model::init(small(mode), i).unwrap();
            for t in model.params.values_mut() {
                for x in t.data_mut() {
                    // Full-range bit patterns, including subnormals and signed zero.
                    *x = match rng.gen_range(0..4) {
                        0 => f64::from_bits(rng.gen::<u64>() & !(0x7ffu64 << 52)),
                        1 => -0.0,
                        2 => rng.gen_range(-1e300..1e300),
                        _ => rng.gen_range(-1.0..1.0),
                    };
                }
            }
            let ck = Checkpoint { model, seed: i, iterations: 7 * i as usize };
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            assert_eq!(back.seed, ck.seed);
            assert_eq!(back.iterations, ck.iterations);
            assert_eq!(back.model.config, ck.model.config);
            for (name, t) in &ck.model.params {
                let u = &back.model.params[name];
                assert_eq!(u.shape(), t.shape());
                let a: Vec<u64> = t.data().iter().map(|x| x.to_bits()).collect();
                let b: Vec<u64> = u.data().iter().map(|x| x.to_bits()).collect();
                assert_eq!(a, b, "{name}");
            }
            assert_eq!(back.to_bytes(), ck.to_bytes());
        }
    }

    #[test]
    fn layout_starts_with_magic_and_version() {
        let ck = Checkpoint { model: Model::init(small(EquivarianceMode::Sim), 1).unwrap(), seed: 1, iterations: 0 };
        let b = ck.to_bytes();
        assert_eq!(&b[..4], b"EGIF");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        let len = u32::from_le_bytes(b[8..12].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&b[12..12 + len]).unwrap();
        assert_eq!(header["mode"], "sim");
        assert_eq!(header["levels"], 3);
        assert_eq!(header["seed"], 1);
    }

    #[test]
    fn rejects_bad_input() {
        let ck = Checkpoint { model: Model::init(small(EquivarianceMode::So3), 2).unwrap(), seed: 2, iterations: 3 };
        let good = ck.to_bytes();
        let mut v2 = good.clone();
        v2[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(CheckpointError::Version { found: 2 })));
        let mut magic = good.clone();
        magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&magic), Err(CheckpointError::Magic)));
        assert!(matches!(Checkpoint::from_bytes(&good[..good.len() - 3]), Err(CheckpointError::Truncated)));
        let mut extra = good.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(CheckpointError::Malformed(_))));
        assert!(Checkpoint::from_bytes(&[]).is_err());
    }

    #[test]
    fn rejects_tensors_that_do_not_fit_the_config() {
        let mut ck =
            Checkpoint { model: Model::init(small(EquivarianceMode::Se3), 3).unwrap(), seed: 3, iterations: 0 };
        ck.model.params.remove("dec.out.w");
        assert!(matches!(Checkpoint::from_bytes(&ck.to_bytes()), Err(CheckpointError::Model(_))));
    }
}
