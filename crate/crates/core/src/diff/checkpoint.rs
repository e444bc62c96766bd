//! JSON snapshot of a [`ParamStore`]'s values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::graph::ParamStore;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format_version: u32,
    params: Vec<Entry>,
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let ck = Checkpoint {
        format_version: CHECKPOINT_VERSION,
        params: store
            .iter()
            .map(|(_, t)| Entry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                values: t.values.clone(),
            })
            .collect(),
    };
    let text = serde_json::to_string(&ck).map_err(|e| Error::corrupt(path, e))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Overwrites every parameter of `store` from the file. Names and shapes must
/// match exactly.
pub fn load_into(store: &mut ParamStore, path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Error::CheckpointMissing(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::corrupt(path, e))?;
    if ck.format_version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            expected: CHECKPOINT_VERSION,
            found: ck.format_version,
        });
    }
    if ck.params.len() != store.len() {
        return Err(Error::corrupt(
            path,
            format!("{} tensors, model has {}", ck.params.len(), store.len()),
        ));
    }
    for e in ck.params {
        let id = store
            .find(&e.name)
            .ok_or_else(|| Error::corrupt(path, format!("unknown tensor {}", e.name)))?;
        let t = store.get_mut(id);
        if t.shape != e.shape || e.values.len() != t.values.len() {
            return Err(Error::corrupt(path, format!("shape mismatch for {}", e.name)));
        }
        t.values = e.values;
    }
    Ok(())
}
