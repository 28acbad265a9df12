use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Model, ModelConfig, ModelError, Result};
use crate::tensor::{read_container, write_container, ContainerEntry, Tensor};

/// Name of the text entry that holds the model config as TOML.
pub const CONFIG_ENTRY: &str = "__config__";

fn running(name: &str, which: &str) -> String {
    format!("{name}.running_{which}")
}

/// Writes config, parameters and batch-norm buffers, all as `f64`.
pub fn save_checkpoint(model: &Model, w: impl Write) -> Result<()> {
    let mut entries = vec![ContainerEntry::text(CONFIG_ENTRY, &model.config.to_toml())];
    entries.extend(model.params.iter().map(|(n, t)| ContainerEntry::f64(n, t.clone())));
    for b in &model.bn {
        let len = b.mean.len();
        entries.push(ContainerEntry::f64(running(&b.name, "mean"), Tensor::new([len], b.mean.clone())?));
        entries.push(ContainerEntry::f64(running(&b.name, "var"), Tensor::new([len], b.var.clone())?));
    }
    write_container(w, &entries)?;
    Ok(())
}

/// Rebuilds a model from a checkpoint. Every expected entry must be present
/// with its expected shape; extra entries are rejected.
pub fn load_checkpoint(r: impl Read) -> Result<Model> {
    let mut entries: HashMap<String, ContainerEntry> = read_container(r)?.into_iter().map(|e| (e.name.clone(), e)).collect();
    let cfg_text =
        entries.remove(CONFIG_ENTRY).ok_or_else(|| ModelError::Checkpoint(format!("missing {CONFIG_ENTRY}")))?.as_text()?;
    let config = ModelConfig::from_toml(&cfg_text)?;
    let mut model = Model::new(config, 0)?;
    let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
        let e = entries.remove(name).ok_or_else(|| ModelError::Checkpoint(format!("missing {name}")))?;
        if e.tensor.shape() != shape {
            return Err(ModelError::Checkpoint(format!("{name}: shape {:?}, expected {shape:?}", e.tensor.shape())));
        }
        Ok(e.tensor)
    };
    let names = model.params.names().to_vec();
    for (name, slot) in names.iter().zip(model.params.values_mut()) {
        *slot = take(name, slot.shape())?;
    }
    for b in &mut model.bn {
        let len = [b.mean.len()];
        b.mean = take(&running(&b.name, "mean"), &len)?.into_data();
        b.var = take(&running(&b.name, "var"), &len)?.into_data();
    }
    if let Some(extra) = entries.keys().next() {
        return Err(ModelError::Checkpoint(format!("unexpected entry {extra}")));
    }
    Ok(model)
}

impl Model {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        save_checkpoint(self, &mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        load_checkpoint(BufReader::new(File::open(path)?))
    }
}
