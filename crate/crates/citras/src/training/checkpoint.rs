//! Binary checkpoints: magic header, format version, JSON config block,
//! then one record per parameter (name, shape, little-endian f32 data).
//!
//! Parameters live on the f32 grid in memory, so the 32-bit on-disk format
//! reproduces every tensor bit-exactly on load.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{CitrasError, Result};
use crate::model::{init_params, CitrasConfig, CitrasModel};
use crate::numerics::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"CITRASCP";
const VERSION: u32 = 1;

pub fn save_checkpoint(model: &CitrasModel, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut out = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        let config_json = serde_json::to_vec(&model.config)?;
        out.write_all(&(config_json.len() as u64).to_le_bytes())?;
        out.write_all(&config_json)?;
        out.write_all(&(model.params.len() as u64).to_le_bytes())?;
        for (_, name, tensor) in model.params.iter() {
            let name_bytes = name.as_bytes();
            out.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
            out.write_all(name_bytes)?;
            out.write_all(&(tensor.shape().len() as u8).to_le_bytes())?;
            for &dim in tensor.shape() {
                out.write_all(&(dim as u32).to_le_bytes())?;
            }
            for &value in tensor.data() {
                out.write_all(&(value as f32).to_le_bytes())?;
            }
        }
        out.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_exact(reader: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    reader
        .read_exact(buf)
        .map_err(|e| CitrasError::Checkpoint(format!("truncated checkpoint: {e}")))
}

fn read_u64(reader: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    read_exact(reader, &mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Loads a checkpoint and rebuilds the model around it. Every parameter in
/// the file must match the shape the stored config implies.
pub fn load_checkpoint(path: &Path) -> Result<CitrasModel> {
    let mut reader = std::io::BufReader::new(std::fs::File::open(path)?);

    let mut magic = [0u8; 8];
    read_exact(&mut reader, &mut magic)?;
    if &magic != MAGIC {
        return Err(CitrasError::Checkpoint(format!(
            "bad magic bytes {magic:?}, not a checkpoint file"
        )));
    }
    let mut version = [0u8; 4];
    read_exact(&mut reader, &mut version)?;
    let version = u32::from_le_bytes(version);
    if version != VERSION {
        return Err(CitrasError::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let config_len = read_u64(&mut reader)? as usize;
    let mut config_json = vec![0u8; config_len];
    read_exact(&mut reader, &mut config_json)?;
    let config: CitrasConfig = serde_json::from_slice(&config_json)
        .map_err(|e| CitrasError::Checkpoint(format!("invalid config block: {e}")))?;
    config.validate()?;

    let count = read_u64(&mut reader)? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let mut len = [0u8; 2];
        read_exact(&mut reader, &mut len)?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        read_exact(&mut reader, &mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| CitrasError::Checkpoint("parameter name is not UTF-8".into()))?;
        let mut ndim = [0u8; 1];
        read_exact(&mut reader, &mut ndim)?;
        let mut shape = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            let mut dim = [0u8; 4];
            read_exact(&mut reader, &mut dim)?;
            shape.push(u32::from_le_bytes(dim) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let mut value = [0u8; 4];
            read_exact(&mut reader, &mut value)?;
            data.push(f32::from_le_bytes(value) as f64);
        }
        store.register(&name, Tensor::new(shape, data)?)?;
    }

    // Rebuild handles from the config and swap in the loaded values.
    let (reference, handles) = init_params(&config, 0)?;
    if reference.len() != store.len() {
        return Err(CitrasError::Checkpoint(format!(
            "checkpoint holds {} parameters, config implies {}",
            store.len(),
            reference.len()
        )));
    }
    for (id, name, value) in reference.iter() {
        let loaded_id = store.id(name).ok_or_else(|| {
            CitrasError::Checkpoint(format!("checkpoint is missing parameter {name}"))
        })?;
        let loaded = store.value(loaded_id);
        if loaded.shape() != value.shape() {
            return Err(CitrasError::Checkpoint(format!(
                "parameter {name} has shape {:?} but the config implies {:?}",
                loaded.shape(),
                value.shape()
            )));
        }
        debug_assert_eq!(id, loaded_id, "registration order is canonical");
    }

    Ok(CitrasModel {
        config,
        params: store,
        handles,
    })
}

/// Loads a checkpoint and verifies it matches an expected configuration.
pub fn load_checkpoint_with_config(path: &Path, expected: &CitrasConfig) -> Result<CitrasModel> {
    let model = load_checkpoint(path)?;
    if &model.config != expected {
        return Err(CitrasError::Checkpoint(format!(
            "checkpoint config {:?} disagrees with the requested config {:?}",
            model.config, expected
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model(seed: u64) -> CitrasModel {
        let config = CitrasConfig {
            layers: 1,
            d_model: 8,
            heads: 2,
            d_ff: 16,
            patch_len: 4,
            ..CitrasConfig::default()
        };
        CitrasModel::new(config, seed).unwrap()
    }

    #[test]
    fn round_trip_reproduces_every_tensor_bit_exactly() {
        let model = tiny_model(21);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded.params.len(), model.params.len());
        for (id, name, tensor) in model.params.iter() {
            let other = loaded.params.value(id);
            assert_eq!(loaded.params.name(id), name);
            assert_eq!(other.shape(), tensor.shape());
            for (a, b) in tensor.data().iter().zip(other.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{name} differs");
            }
        }
    }

    #[test]
    fn save_is_idempotent_byte_for_byte() {
        let model = tiny_model(22);
        let dir = tempfile::tempdir().unwrap();
        let first = dir.path().join("a.ckpt");
        save_checkpoint(&model, &first).unwrap();
        let loaded = load_checkpoint(&first).unwrap();
        let second = dir.path().join("b.ckpt");
        save_checkpoint(&loaded, &second).unwrap();
        assert_eq!(
            std::fs::read(&first).unwrap(),
            std::fs::read(&second).unwrap()
        );
    }

    #[test]
    fn corrupted_magic_is_a_format_error() {
        let model = tiny_model(23);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        let err = match load_checkpoint(&path) {
            Err(e) => e,
            Ok(_) => panic!("corrupted checkpoint loaded"),
        };
        assert!(matches!(err, CitrasError::Checkpoint(_)));
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn truncated_file_is_a_checkpoint_error() {
        let model = tiny_model(24);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_checkpoint(&path).map(|_| ()),
            Err(CitrasError::Checkpoint(_))
        ));
    }

    #[test]
    fn config_mismatch_is_a_shape_error() {
        let model = tiny_model(25);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let mut wanted = model.config.clone();
        wanted.d_model = 16;
        let err = match load_checkpoint_with_config(&path, &wanted) {
            Err(e) => e,
            Ok(_) => panic!("mismatched checkpoint loaded"),
        };
        assert!(matches!(err, CitrasError::Checkpoint(_)));
    }
}
