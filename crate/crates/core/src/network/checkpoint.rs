use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Precision, Scalar, Tensor};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the binary file.
    pub offset: usize,
}

/// Describes the little-endian tensor blob written next to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub precision: Precision,
    pub tensors: Vec<ManifestEntry>,
}

/// Writes `params.bin` and `manifest.json` into `dir`.
pub fn save_checkpoint<T: Scalar>(dir: &Path, ps: &ParamStore<T>) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::with_capacity(ps.count() * T::PRECISION.bytes());
    let mut tensors = Vec::with_capacity(ps.len());
    for (_, name, t) in ps.iter() {
        tensors.push(ManifestEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
        });
        for v in t.data() {
            v.write_le(&mut blob);
        }
    }
    let manifest = Manifest {
        precision: T::PRECISION,
        tensors,
    };
    fs::write(dir.join("params.bin"), blob)?;
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

fn read_values<S: Scalar, T: Scalar>(blob: &[u8], offset: usize, count: usize) -> Result<Vec<T>> {
    let w = S::PRECISION.bytes();
    let end = offset + count * w;
    let bytes = blob
        .get(offset..end)
        .ok_or_else(|| Error::Contract(format!("checkpoint truncated at byte {end}")))?;
    Ok(bytes
        .chunks_exact(w)
        .map(|c| T::of(S::read_le(c).to_f64_lossy()))
        .collect())
}

/// Loads every tensor listed in `dir/manifest.json` into the same-named
/// parameter of `ps`, converting precision if needed.
pub fn load_checkpoint<T: Scalar>(dir: &Path, ps: &mut ParamStore<T>) -> Result<()> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let blob = fs::read(dir.join("params.bin"))?;
    if manifest.tensors.len() != ps.len() {
        return Err(Error::Contract(format!(
            "checkpoint has {} tensors, model has {}",
            manifest.tensors.len(),
            ps.len()
        )));
    }
    for e in &manifest.tensors {
        let id = ps
            .id(&e.name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{}`", e.name)))?;
        let count = e.shape.iter().product();
        let data = match manifest.precision {
            Precision::F32 => read_values::<f32, T>(&blob, e.offset, count)?,
            Precision::F64 => read_values::<f64, T>(&blob, e.offset, count)?,
        };
        ps.set(id, Tensor::new(e.shape.clone(), data)?)?;
    }
    Ok(())
}
