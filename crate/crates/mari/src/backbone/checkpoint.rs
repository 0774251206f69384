use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MariError, Result};
use crate::numerics::Tensor;

const FORMAT: &str = "mari-checkpoint-v1";

/// Named tensors plus free-form metadata, stored as a JSON manifest next to a
/// flat little-endian `f64` payload.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in values.
    pub offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    kind: String,
    creator: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
    payload_values: usize,
    checksum: String,
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `<stem>.json` and `<stem>.bin` under `dir`; returns the payload checksum.
pub fn save_checkpoint(ck: &Checkpoint, dir: &Path, stem: &str) -> Result<String> {
    fs::create_dir_all(dir)?;
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(ck.tensors.len());
    let mut offset = 0;
    for (name, t) in &ck.tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        offset += t.len();
    }
    let checksum = digest(&payload);
    let manifest = Manifest {
        format: FORMAT.into(),
        kind: ck.kind.clone(),
        creator: format!("mari {}", env!("CARGO_PKG_VERSION")),
        meta: ck.meta.clone(),
        tensors: entries,
        payload_values: offset,
        checksum: checksum.clone(),
    };
    fs::write(dir.join(format!("{stem}.bin")), &payload)?;
    fs::write(
        dir.join(format!("{stem}.json")),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(checksum)
}

pub fn load_checkpoint(dir: &Path, stem: &str) -> Result<Checkpoint> {
    let mpath = dir.join(format!("{stem}.json"));
    if !mpath.exists() {
        return Err(MariError::MissingArtifact(mpath.display().to_string()));
    }
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&mpath)?)?;
    if manifest.format != FORMAT {
        return Err(MariError::Invalid(format!(
            "unknown checkpoint format {}",
            manifest.format
        )));
    }
    let payload = fs::read(dir.join(format!("{stem}.bin")))?;
    let found = digest(&payload);
    if found != manifest.checksum || payload.len() != manifest.payload_values * 8 {
        return Err(MariError::Checksum {
            expected: manifest.checksum,
            found,
        });
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        let n: usize = e.shape.iter().product();
        let end = e.offset + n;
        if end > values.len() {
            return Err(MariError::Invalid(format!(
                "tensor {} overruns the payload",
                e.name
            )));
        }
        tensors.push((
            e.name,
            Tensor::new(e.shape, values[e.offset..end].to_vec())?,
        ));
    }
    Ok(Checkpoint {
        kind: manifest.kind,
        meta: manifest.meta,
        tensors,
    })
}
