//! Versioned JSON container of named arrays plus the model configuration.
//!
//! Floats are written in shortest round-trip form and parsed exactly, so a
//! save/load cycle is bit-exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::DArray;

use super::{ModelConfig, ModelParams, Tree};

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT: &str = "cmae-checkpoint";

#[derive(Serialize, Deserialize)]
struct Container {
    format: String,
    version: u32,
    config: ModelConfig,
    arrays: BTreeMap<String, DArray>,
}

pub fn write_checkpoint<W: Write>(params: &ModelParams, writer: W) -> Result<()> {
    let c = Container {
        format: FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: params.config.clone(),
        arrays: params
            .named_arrays()
            .into_iter()
            .map(|(n, a)| (n, DArray::new(a.shape().to_vec(), a.data().to_vec()).expect("valid")))
            .collect(),
    };
    let mut w = BufWriter::new(writer);
    serde_json::to_writer(&mut w, &c).map_err(|e| Error::Checkpoint(e.to_string()))?;
    w.flush().map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn read_checkpoint<R: Read>(reader: R) -> Result<ModelParams> {
    let c: Container = serde_json::from_reader(BufReader::new(reader))
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    if c.format != FORMAT {
        return Err(Error::Checkpoint(format!("not a checkpoint: format {:?}", c.format)));
    }
    if c.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
            c.version
        )));
    }
    let mut params = ModelParams::init(&c.config, 0)?;
    let mut arrays = c.arrays;
    let mut failure = None;
    params.net.visit_mut("", &mut |name, slot| {
        if failure.is_some() {
            return;
        }
        match arrays.remove(name) {
            Some(a) if a.shape() == slot.shape() && a.len() == slot.len() => *slot = a,
            Some(a) => {
                failure = Some(format!(
                    "array {name} has shape {:?}, config implies {:?}",
                    a.shape(),
                    slot.shape()
                ))
            }
            None => failure = Some(format!("array {name} is missing")),
        }
    });
    if let Some(f) = failure {
        return Err(Error::Checkpoint(f));
    }
    if let Some(extra) = arrays.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected array {extra}")));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(params, f)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(f)
}
