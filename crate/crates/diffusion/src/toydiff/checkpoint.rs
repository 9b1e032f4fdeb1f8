//! Binary model checkpoints.
//!
//! Layout, little-endian: magic `TDCK`, u16 version, u32 length + model
//! config JSON, u32 tensor count, then per tensor: u16 name length, name
//! bytes, u8 rank, rank × u32 dims, f64 values.

use std::io::{Read, Write};

use thiserror::Error;

use super::model::{ModelConfig, ModelError, ToyDenoiser};

pub const MAGIC: &[u8; 4] = b"TDCK";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u16),
    #[error("checkpoint config: {0}")]
    Config(#[from] serde_json::Error),
    #[error("checkpoint does not match its config: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn len_u16(n: usize, what: &str) -> Result<u16, CheckpointError> {
    u16::try_from(n).map_err(|_| CheckpointError::Mismatch(format!("{what} too long")))
}

fn len_u32(n: usize, what: &str) -> Result<u32, CheckpointError> {
    u32::try_from(n).map_err(|_| CheckpointError::Mismatch(format!("{what} too long")))
}

pub fn write_checkpoint(model: &ToyDenoiser, out: &mut impl Write) -> Result<(), CheckpointError> {
    let json = serde_json::to_vec(model.config())?;
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&len_u32(json.len(), "config")?.to_le_bytes())?;
    out.write_all(&json)?;
    let params = model.params().params();
    out.write_all(&len_u32(params.len(), "tensor table")?.to_le_bytes())?;
    for p in params {
        out.write_all(&len_u16(p.name.len(), "tensor name")?.to_le_bytes())?;
        out.write_all(p.name.as_bytes())?;
        let rank = u8::try_from(p.shape.len()).map_err(|_| CheckpointError::Mismatch(format!("rank of {}", p.name)))?;
        out.write_all(&[rank])?;
        for &d in &p.shape {
            out.write_all(&len_u32(d, "dimension")?.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(8 * p.value.len());
        for v in &p.value {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn to_bytes(model: &ToyDenoiser) -> Result<Vec<u8>, CheckpointError> {
    let mut out = Vec::new();
    write_checkpoint(model, &mut out)?;
    Ok(out)
}

fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N], CheckpointError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

/// Rebuilds the model from its config and overwrites every tensor. The
/// table must name exactly the model's tensors, in order, with equal shapes.
pub fn read_checkpoint(r: &mut impl Read) -> Result<ToyDenoiser, CheckpointError> {
    if &take::<4>(r)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u16::from_le_bytes(take(r)?);
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let mut json = vec![0u8; u32::from_le_bytes(take(r)?) as usize];
    r.read_exact(&mut json)?;
    let config: ModelConfig = serde_json::from_slice(&json)?;
    let mut model = ToyDenoiser::new(config)?;
    let count = u32::from_le_bytes(take(r)?) as usize;
    let expected = model.params().len();
    if count != expected {
        return Err(CheckpointError::Mismatch(format!("{count} tensors, model has {expected}")));
    }
    for p in model.params_mut().params_mut() {
        let mut name = vec![0u8; u16::from_le_bytes(take(r)?) as usize];
        r.read_exact(&mut name)?;
        if name != p.name.as_bytes() {
            return Err(CheckpointError::Mismatch(format!(
                "tensor {:?} where {:?} was expected",
                String::from_utf8_lossy(&name),
                p.name
            )));
        }
        let rank = take::<1>(r)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(r)?) as usize);
        }
        if shape != p.shape {
            return Err(CheckpointError::Mismatch(format!("{} has shape {shape:?}, expected {:?}", p.name, p.shape)));
        }
        let mut buf = vec![0u8; 8 * p.value.len()];
        r.read_exact(&mut buf)?;
        for (v, b) in p.value.iter_mut().zip(buf.chunks_exact(8)) {
            *v = f64::from_le_bytes(b.try_into().expect("8-byte chunk"));
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(CheckpointError::Mismatch("trailing bytes".into()));
    }
    Ok(model)
}

pub fn from_bytes(mut bytes: &[u8]) -> Result<ToyDenoiser, CheckpointError> {
    read_checkpoint(&mut bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToyDenoiser {
        ToyDenoiser::new(ModelConfig {
            height: 4,
            width: 6,
            frames_per_view: 2,
            seed: 9,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let mut m = small();
        // non-trivial values everywhere, including the zero-initialized tensors
        for (i, p) in m.params_mut().params_mut().iter_mut().enumerate() {
            for (j, v) in p.value.iter_mut().enumerate() {
                *v += (i as f64 + 1.0) * 1e-3 * (j as f64).sin();
            }
        }
        let bytes = to_bytes(&m).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.config(), m.config());
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = to_bytes(&small()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(CheckpointError::BadMagic)));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(from_bytes(&bad), Err(CheckpointError::Version(9))));
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(from_bytes(&long), Err(CheckpointError::Mismatch(_))));
    }
}
