//! Checkpoints: flat little-endian f64 blob plus a JSON manifest describing
//! every parameter (name, shape, scalar offset) and an arbitrary config echo.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub params: Vec<ManifestEntry>,
    pub total_scalars: usize,
    /// Resolved configuration of the run that produced the checkpoint.
    pub config: Value,
}

/// Write `<dir>/params.bin` and `<dir>/manifest.json`.
pub fn save(dir: &Path, store: &ParamStore, config: Value) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut params = Vec::with_capacity(store.len());
    let mut offset = 0;
    let mut blob = BufWriter::new(File::create(dir.join("params.bin"))?);
    for (_, entry) in store.iter() {
        params.push(ManifestEntry {
            name: entry.name.clone(),
            shape: entry.value.shape().to_vec(),
            offset,
        });
        for v in entry.value.data() {
            blob.write_all(&v.to_le_bytes())?;
        }
        offset += entry.value.numel();
    }
    blob.flush()?;
    let manifest = Manifest { params, total_scalars: offset, config };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Load a checkpoint into a fresh store. Parameter order follows the
/// manifest, so ids match a model constructed the same way.
pub fn load(dir: &Path) -> Result<(ParamStore, Manifest)> {
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut blob = BufReader::new(File::open(dir.join("params.bin"))?);
    let mut bytes = Vec::new();
    blob.read_to_end(&mut bytes)?;
    if bytes.len() != manifest.total_scalars * 8 {
        return Err(Error::Format(format!(
            "checkpoint: blob has {} bytes, manifest expects {}",
            bytes.len(),
            manifest.total_scalars * 8
        )));
    }
    let mut store = ParamStore::new();
    for p in &manifest.params {
        let numel: usize = p.shape.iter().product();
        if p.offset + numel > manifest.total_scalars {
            return Err(Error::Format(format!("checkpoint: entry {} overruns blob", p.name)));
        }
        let data: Vec<f64> = (0..numel)
            .map(|i| {
                let at = (p.offset + i) * 8;
                f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap())
            })
            .collect();
        store.register(p.name.clone(), Tensor::new(p.shape.clone(), data)?);
    }
    Ok((store, manifest))
}

/// Copy loaded values into an existing store by matching names.
pub fn restore_into(store: &mut ParamStore, loaded: &ParamStore) -> Result<()> {
    if store.len() != loaded.len() {
        return Err(Error::Format(format!(
            "checkpoint: {} parameters in store, {} in checkpoint",
            store.len(),
            loaded.len()
        )));
    }
    let ids: Vec<_> = store.iter().map(|(id, e)| (id, e.name.clone())).collect();
    for ((id, name), (_, src)) in ids.into_iter().zip(loaded.iter()) {
        if name != src.name {
            return Err(Error::Format(format!(
                "checkpoint: parameter order mismatch ({} vs {})",
                name, src.name
            )));
        }
        if store.value(id).shape() != src.value.shape() {
            return Err(Error::Format(format!("checkpoint: shape mismatch for {name}")));
        }
        *store.value_mut(id) = src.value.clone();
    }
    Ok(())
}
