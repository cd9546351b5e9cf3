//! Model checkpoints in the shared container format.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::Array2;
use serde_json::json;

use super::{MlpArch, MlpScoreNet};
use crate::container::{f64s_to_le, le_to_f64s, read_container, write_container};
use crate::error::{Error, Result};
use crate::sde::SdeSpec;

pub use crate::container::VERSION as CHECKPOINT_VERSION;

pub fn save_checkpoint(path: impl AsRef<Path>, net: &MlpScoreNet) -> Result<()> {
    let arch = net.arch();
    let meta = json!({
        "container": "model",
        "architecture": arch,
        "sde": net.sde_spec(),
        "num_classes": arch.num_classes,
        "param_shapes": arch.param_shapes(),
    });
    let payload = f64s_to_le(net.params().iter().flat_map(|p| p.iter().copied()));
    write_container(BufWriter::new(File::create(path)?), &meta, &payload)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<MlpScoreNet> {
    let (meta, payload) = read_container(BufReader::new(File::open(path)?), "model")?;
    let arch: MlpArch = serde_json::from_value(meta["architecture"].clone())?;
    let sde: SdeSpec = serde_json::from_value(meta["sde"].clone())?;
    let values = le_to_f64s(&payload)?;
    let shapes = arch.param_shapes();
    let expected: usize = shapes.iter().map(|(r, c)| r * c).sum();
    if values.len() != expected {
        return Err(Error::Format(format!(
            "checkpoint holds {} parameters, architecture needs {expected}",
            values.len()
        )));
    }
    let mut offset = 0;
    let params = shapes
        .iter()
        .map(|&(r, c)| {
            let a = Array2::from_shape_vec((r, c), values[offset..offset + r * c].to_vec())
                .expect("sizes checked");
            offset += r * c;
            a
        })
        .collect();
    MlpScoreNet::from_params(arch, sde, params)
}
