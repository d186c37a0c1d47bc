//! Binary model checkpoints.
//!
//! Layout (all integers little-endian): 8-byte magic `LOGITCKP`, u32 format
//! version, u64 architecture fingerprint, u64 optimizer step counter, u32
//! tensor count, then per tensor a u32 name length, UTF-8 name bytes, u32
//! rank, u64 per dimension, and the f64 payload in row-major order. Loading
//! verifies the magic, version, and fingerprint before any tensor data is
//! trusted.

use crate::config::ConfigError;
use logitreg_core::models::{ModelConfig, ModelParams};
use logitreg_core::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"LOGITCKP";
const VERSION: u32 = 1;

type Result<T> = std::result::Result<T, ConfigError>;

fn fail<T>(msg: impl Into<String>) -> Result<T> {
    Err(ConfigError(msg.into()))
}

/// Write `params` plus the optimizer step counter to `path`.
pub fn save_checkpoint(path: &Path, params: &ModelParams, step: u64) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&params.config().fingerprint().to_le_bytes());
    buf.extend_from_slice(&step.to_le_bytes());
    let tensors = params.tensors();
    buf.extend_from_slice(&u32::try_from(tensors.len()).unwrap().to_le_bytes());
    for (name, tensor) in tensors {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&u32::try_from(name_bytes.len()).unwrap().to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.extend_from_slice(&u32::try_from(tensor.shape().len()).unwrap().to_le_bytes());
        for &dim in tensor.shape() {
            buf.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)
        .map_err(|e| ConfigError(format!("cannot create {}: {e}", path.display())))?;
    file.write_all(&buf)
        .map_err(|e| ConfigError(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return fail(format!("{}: truncated checkpoint", self.path));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Read a checkpoint and bind it to `config`, verifying the fingerprint.
pub fn load_checkpoint(path: &Path, config: &ModelConfig) -> Result<(ModelParams, u64)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| ConfigError(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut bytes)
        .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path: path.display().to_string(),
    };

    if r.take(8)? != MAGIC {
        return fail(format!("{}: not a checkpoint (bad magic)", r.path));
    }
    let version = r.u32()?;
    if version != VERSION {
        return fail(format!(
            "{}: unsupported checkpoint version {version} (expected {VERSION})",
            r.path
        ));
    }
    let fingerprint = r.u64()?;
    let expected = config.fingerprint();
    if fingerprint != expected {
        return fail(format!(
            "{}: architecture fingerprint {fingerprint:#018x} does not match configured model {expected:#018x}",
            r.path
        ));
    }
    let step = r.u64()?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| ConfigError(format!("{}: tensor name is not UTF-8", r.path)))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| ConfigError(format!("{}: bad tensor '{name}': {e}", r.path)))?;
        tensors.push((name, tensor));
    }
    if r.pos != r.bytes.len() {
        return fail(format!("{}: trailing bytes after tensor data", r.path));
    }
    let params = ModelParams::from_tensors(config.clone(), tensors)
        .map_err(|e| ConfigError(format!("{}: {e}", r.path)))?;
    Ok((params, step))
}

#[cfg(test)]
mod tests {
    use super::*;
    use logitreg_core::models::ModelConfig;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("logitreg-ckpt-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let config = ModelConfig::mlp(vec![4], vec![5], 3);
        let params = ModelParams::init(config.clone(), 7).unwrap();
        let path = tmp("round-trip.bin");
        save_checkpoint(&path, &params, 42).unwrap();
        let (loaded, step) = load_checkpoint(&path, &config).unwrap();
        assert_eq!(step, 42);
        for ((an, at), (bn, bt)) in params.tensors().iter().zip(loaded.tensors()) {
            assert_eq!(an, bn);
            assert_eq!(at.data(), bt.data());
            assert_eq!(at.shape(), bt.shape());
        }
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let config = ModelConfig::mlp(vec![4], vec![5], 3);
        let params = ModelParams::init(config.clone(), 7).unwrap();
        let path = tmp("bad-magic.bin");
        save_checkpoint(&path, &params, 0).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        let e = load_checkpoint(&path, &config).unwrap_err();
        assert!(e.0.contains("magic"), "{}", e.0);
    }

    #[test]
    fn fingerprint_mismatch_is_rejected() {
        let config = ModelConfig::mlp(vec![4], vec![5], 3);
        let params = ModelParams::init(config.clone(), 7).unwrap();
        let path = tmp("mismatch.bin");
        save_checkpoint(&path, &params, 0).unwrap();
        let other = ModelConfig::mlp(vec![4], vec![6], 3);
        let e = load_checkpoint(&path, &other).unwrap_err();
        assert!(e.0.contains("fingerprint"), "{}", e.0);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let config = ModelConfig::mlp(vec![4], vec![5], 3);
        let params = ModelParams::init(config.clone(), 7).unwrap();
        let path = tmp("truncated.bin");
        save_checkpoint(&path, &params, 0).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        let e = load_checkpoint(&path, &config).unwrap_err();
        assert!(e.0.contains("truncated"), "{}", e.0);
    }
}
