//! Checkpoints: a JSON manifest plus one tensor dump per parameter group.

use super::config::ToyModelConfig;
use super::forward::ToyModel;
use crate::error::{Error, Result};
use crate::numerics::{read_tensor, write_tensor, Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupEntry {
    pub name: String,
    pub file: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ToyModelConfig,
    pub seed: u64,
    pub step: usize,
    pub dtype: String,
    pub groups: Vec<GroupEntry>,
}

pub fn save_checkpoint<T: Scalar>(dir: impl AsRef<Path>, model: &ToyModel<T>, seed: u64, step: usize) -> Result<Manifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut groups = Vec::new();
    for (name, data) in model.params.groups() {
        let file = format!("{name}.bin");
        write_tensor(dir.join(&file), &Tensor::new(vec![data.len()], data.to_vec())?)?;
        groups.push(GroupEntry {
            name,
            file,
            len: data.len(),
        });
    }
    let manifest = Manifest {
        config: model.config.clone(),
        seed,
        step,
        dtype: T::DTYPE.to_string(),
        groups,
    };
    std::fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_checkpoint<T: Scalar>(dir: impl AsRef<Path>) -> Result<(ToyModel<T>, Manifest)> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST))?)?;
    if manifest.dtype != T::DTYPE {
        return Err(Error::Format(format!("checkpoint holds {} but {} was requested", manifest.dtype, T::DTYPE)));
    }
    let mut model = ToyModel::<T>::new(manifest.config.clone(), manifest.seed)?;
    let mut groups = model.params.groups_mut();
    if groups.len() != manifest.groups.len() {
        return Err(Error::Format(format!(
            "manifest lists {} groups, model has {}",
            manifest.groups.len(),
            groups.len()
        )));
    }
    for ((name, dst), entry) in groups.iter_mut().zip(&manifest.groups) {
        if *name != entry.name {
            return Err(Error::Format(format!("expected group {name}, manifest has {}", entry.name)));
        }
        let t: Tensor<T> = read_tensor(dir.join(&entry.file))?;
        if t.len() != dst.len() {
            return Err(Error::ShapeMismatch {
                lhs: t.shape().to_vec(),
                rhs: vec![dst.len()],
                context: "checkpoint group",
            });
        }
        dst.copy_from_slice(t.data());
    }
    drop(groups);
    Ok((model, manifest))
}
