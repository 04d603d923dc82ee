//! Checkpoint persistence: a JSON manifest describing named tensor groups
//! plus a single little-endian f64 blob.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Serialize, Deserialize)]
struct GroupEntry {
    shape: Vec<usize>,
    /// Element offset into the weights blob.
    offset: usize,
    count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    // BTreeMap keeps the manifest byte-stable across runs
    groups: BTreeMap<String, GroupEntry>,
    /// Blob order of the groups.
    order: Vec<String>,
}

/// Writes named tensors under `dir` as manifest.json plus weights.bin.
pub fn save_tensors(dir: &Path, tensors: &IndexMap<String, Tensor>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut groups = BTreeMap::new();
    let mut order = Vec::with_capacity(tensors.len());
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for (name, t) in tensors {
        groups.insert(
            name.clone(),
            GroupEntry {
                shape: t.shape().to_vec(),
                offset,
                count: t.len(),
            },
        );
        order.push(name.clone());
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += t.len();
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        groups,
        order,
    };
    let mut mf = std::fs::File::create(dir.join(MANIFEST_FILE))?;
    serde_json::to_writer_pretty(&mut mf, &manifest)?;
    mf.write_all(b"\n")?;
    std::fs::File::create(dir.join(WEIGHTS_FILE))?.write_all(&blob)?;
    Ok(())
}

/// Loads a checkpoint directory, validating version, sizes, and shapes.
pub fn load_tensors(dir: &Path) -> Result<IndexMap<String, Tensor>> {
    let manifest_text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest = serde_json::from_str(&manifest_text)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            manifest.version
        )));
    }
    let mut blob = Vec::new();
    std::fs::File::open(dir.join(WEIGHTS_FILE))?.read_to_end(&mut blob)?;
    let total: usize = manifest.groups.values().map(|g| g.count).sum();
    if blob.len() != total * 8 {
        return Err(Error::format(format!(
            "weights blob truncated or padded: {} bytes, manifest expects {}",
            blob.len(),
            total * 8
        )));
    }
    let mut out = IndexMap::new();
    for name in &manifest.order {
        let entry = manifest.groups.get(name).ok_or_else(|| {
            Error::structure(format!("manifest order names unknown group {name}"))
        })?;
        let expected: usize = entry.shape.iter().product();
        if expected != entry.count {
            return Err(Error::structure(format!(
                "group {name}: shape {:?} disagrees with count {}",
                entry.shape, entry.count
            )));
        }
        let start = entry.offset * 8;
        let end = start + entry.count * 8;
        if end > blob.len() {
            return Err(Error::format(format!(
                "group {name} extends past the weights blob"
            )));
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        out.insert(name.clone(), Tensor::new(entry.shape.clone(), data)?);
    }
    Ok(out)
}
