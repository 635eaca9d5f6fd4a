//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! "DDNT" | u32 version | u32 len, config text | u32 count
//! count x ( u16 len, name | u8 rank | rank x u64 dim | f32 values )
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::config::{ConfigError, ModelConfig};
use super::net::{build_model, Model};
use crate::autodiff::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DDNT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("parameter `{name}` has shape {found:?} in the file, config expects {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint holds unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("checkpoint lacks parameter `{0}`")]
    MissingParameter(String),
    #[error("checkpoint config: {0}")]
    Config(#[from] ConfigError),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for CheckpointError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            CheckpointError::Truncated
        } else {
            CheckpointError::Io(e)
        }
    }
}

type Result<T> = std::result::Result<T, CheckpointError>;

fn too_long(what: &str) -> CheckpointError {
    CheckpointError::Malformed(format!("{what} does not fit its length field"))
}

pub fn write_checkpoint<T: Scalar, W: Write>(model: &Model<T>, mut w: W) -> Result<()> {
    let config = model.config.to_text();
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let len = u32::try_from(config.len()).map_err(|_| too_long("config"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(config.as_bytes())?;
    let count = u32::try_from(model.params.len()).map_err(|_| too_long("tensor count"))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, p) in model.params.iter() {
        let len = u16::try_from(name.len()).map_err(|_| too_long("parameter name"))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let shape = p.value.shape();
        let rank = u8::try_from(shape.len()).map_err(|_| too_long("rank"))?;
        w.write_all(&[rank])?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in p.value.data() {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_string(r: &mut impl Read, len: usize, what: &str) -> Result<String> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| CheckpointError::Malformed(format!("{what} is not UTF-8")))
}

/// Reads a checkpoint, validating each tensor header against the
/// embedded configuration before its values are read.
pub fn read_checkpoint<T: Scalar, R: Read>(mut r: R) -> Result<Model<T>> {
    let magic = read_array::<4>(&mut r)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let len = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let config: ModelConfig = read_string(&mut r, len, "config")?.parse()?;
    let template =
        build_model::<T>(&config, 0).map_err(|e| CheckpointError::Malformed(e.to_string()))?;

    let count = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(read_array(&mut r)?) as usize;
        let name = read_string(&mut r, len, "parameter name")?;
        let rank = read_array::<1>(&mut r)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = u64::from_le_bytes(read_array(&mut r)?);
            shape.push(
                usize::try_from(d)
                    .map_err(|_| CheckpointError::Malformed(format!("dimension {d} too large")))?,
            );
        }
        let expected = template
            .params
            .get(&name)
            .map_err(|_| CheckpointError::UnknownParameter(name.clone()))?
            .shape();
        if shape != expected {
            return Err(CheckpointError::ShapeMismatch {
                name,
                found: shape,
                expected: expected.to_vec(),
            });
        }
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 4];
        r.read_exact(&mut bytes)?;
        let values = bytes
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        let tensor =
            Tensor::new(shape, values).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        params
            .insert(name.clone(), tensor)
            .map_err(|_| CheckpointError::Malformed(format!("parameter `{name}` appears twice")))?;
    }
    if let Some(missing) = template.params.names().find(|n| !params.contains(n)) {
        return Err(CheckpointError::MissingParameter(missing.to_string()));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(CheckpointError::Malformed(
            "trailing bytes after last tensor".into(),
        ));
    }
    Ok(Model { config, params })
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(
        model,
        BufWriter::new(File::create(path).map_err(CheckpointError::Io)?),
    )
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Model<T>> {
    read_checkpoint(BufReader::new(
        File::open(path).map_err(CheckpointError::Io)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_bytes() -> (Model<f32>, Vec<u8>) {
        let model = build_model::<f32>(&ModelConfig::tiny(), 5).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&model, &mut bytes).unwrap();
        (model, bytes)
    }

    #[test]
    fn round_trip_is_exact() {
        let (model, bytes) = tiny_bytes();
        let back: Model<f32> = read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn error_categories() {
        let (_, bytes) = tiny_bytes();
        let cut = &bytes[..bytes.len() - 1];
        assert!(matches!(
            read_checkpoint::<f32, _>(cut),
            Err(CheckpointError::Truncated)
        ));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_checkpoint::<f32, _>(bad.as_slice()),
            Err(CheckpointError::BadMagic(_))
        ));

        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(
            read_checkpoint::<f32, _>(bad.as_slice()),
            Err(CheckpointError::UnsupportedVersion(2))
        ));

        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(
            read_checkpoint::<f32, _>(extra.as_slice()),
            Err(CheckpointError::Malformed(_))
        ));
    }
}
