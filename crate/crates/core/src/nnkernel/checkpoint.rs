//! Binary checkpoint format.
//!
//! Layout: 8-byte magic, `u32` format version, `u32` header length, a JSON
//! header, `u64` parameter count, then the parameters as little-endian `f32`
//! in [`ParamLayout`](super::ParamLayout) order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::Model;
use super::ModelConfig;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"LCOTCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub step: u64,
    /// Parameter names in storage order, used to detect layout drift.
    pub entries: Vec<String>,
}

pub fn save(path: &Path, model: &Model<f32>, step: u64) -> Result<()> {
    let header = CheckpointHeader {
        config: model.config.clone(),
        step,
        entries: model.layout.entries.iter().map(|e| e.name.clone()).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    write(MAGIC)?;
    write(&VERSION.to_le_bytes())?;
    write(&(json.len() as u32).to_le_bytes())?;
    write(&json)?;
    write(&(model.params.len() as u64).to_le_bytes())?;
    for &p in &model.params {
        write(&p.to_le_bytes())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Model<f32>, CheckpointHeader)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut read = |n: usize| -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        r.read_exact(&mut buf)
            .map_err(|_| Error::Checkpoint(format!("{} is truncated", path.display())))?;
        Ok(buf)
    };
    if read(8)? != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(read(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u32::from_le_bytes(read(4)?.try_into().unwrap()) as usize;
    let header: CheckpointHeader = serde_json::from_slice(&read(hlen)?)?;
    let count = u64::from_le_bytes(read(8)?.try_into().unwrap()) as usize;
    let expected = super::ParamLayout::new(&header.config);
    let names: Vec<_> = expected.entries.iter().map(|e| e.name.clone()).collect();
    if count != expected.total || names != header.entries {
        return Err(Error::Checkpoint(format!(
            "parameter layout mismatch: file has {count} values, config implies {}",
            expected.total
        )));
    }
    let raw = read(count * 4)?;
    let params = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let model = Model::from_params(&header.config, params)?;
    Ok((model, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig::tiny();
        let model = Model::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save(&path, &model, 17).unwrap();
        let (back, header) = load(&path).unwrap();
        assert_eq!(header.step, 17);
        assert_eq!(back.config, cfg);
        assert!(back.params.iter().zip(&model.params).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));

        let model = Model::<f32>::init(&ModelConfig::tiny(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        save(&path, &model, 0).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }
}
