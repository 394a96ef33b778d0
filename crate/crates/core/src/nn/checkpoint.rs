//! Model checkpoints in DST1: one entry per parameter and running statistic
//! under its hierarchical name, plus the run configuration as `meta.config`.

use std::path::Path;

use super::{DenseSiamModel, ModelConfig};
use crate::dst1::{Container, Entry};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const META_CONFIG: &str = "meta.config";

/// A decoded checkpoint: the model, its embedded config text and every
/// entry that is neither a parameter nor a buffer (optimizer and run state).
pub struct CheckpointParts<T: Scalar> {
    pub model: DenseSiamModel<T>,
    pub meta: String,
    pub extra: Container,
}

impl<T: Scalar> DenseSiamModel<T> {
    pub fn to_container(&self, meta: &str) -> Container {
        let mut c = Container::new();
        c.push(Entry::text(META_CONFIG, meta));
        for (name, t) in self.params().iter().chain(self.buffers()) {
            c.push(Entry::from_tensor(name.clone(), t));
        }
        c
    }

    /// Rebuilds a model of `config` and fills every tensor from `c`.
    pub fn from_container(c: &Container, config: ModelConfig) -> Result<Self> {
        let mut m = DenseSiamModel::new(config, 0)?;
        for (name, slot) in m.params.iter_mut().chain(m.buffers.iter_mut()) {
            let t = c.tensor::<T>(name)?;
            if t.shape() != slot.shape() {
                return Err(Error::parse(name.clone(), format!("shape {:?}, model expects {:?}", t.shape(), slot.shape())));
            }
            *slot = t;
        }
        Ok(m)
    }
}

pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, model: &DenseSiamModel<T>, meta: &str, extra: Vec<Entry>) -> Result<()> {
    let mut c = model.to_container(meta);
    for e in extra {
        c.push(e);
    }
    c.save(path)
}

/// `config_of` turns the embedded config text into the model config.
pub fn load_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
    config_of: impl FnOnce(&str) -> Result<ModelConfig>,
) -> Result<CheckpointParts<T>> {
    let c = Container::load(path)?;
    let meta = c.text(META_CONFIG)?;
    let model = DenseSiamModel::from_container(&c, config_of(&meta)?)?;
    let known = |n: &str| n == META_CONFIG || model.params().contains_key(n) || model.buffers().contains_key(n);
    let extra = Container { entries: c.entries.iter().filter(|e| !known(&e.name)).cloned().collect() };
    Ok(CheckpointParts { model, meta, extra })
}
