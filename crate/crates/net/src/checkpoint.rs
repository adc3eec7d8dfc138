//! Parameter archives: every named tensor (including batch-norm buffers)
//! serialized as CBOR.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{NetError, Result};
use crate::optim::AdamState;
use crate::param::Module;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub type StateDict = BTreeMap<String, TensorRecord>;

pub fn state_dict<M: Module + ?Sized>(model: &mut M) -> StateDict {
    let mut out = BTreeMap::new();
    model.visit("", &mut |name, p| {
        out.insert(
            name.to_owned(),
            TensorRecord {
                shape: p.value.shape().to_vec(),
                data: p.value.iter().copied().collect(),
            },
        );
    });
    out
}

/// Loads every parameter of `model` from `state`. Missing names, extra
/// names and shape mismatches are errors.
pub fn load_state_dict<M: Module + ?Sized>(model: &mut M, state: &StateDict) -> Result<()> {
    let mut error = None;
    let mut seen = 0;
    model.visit("", &mut |name, p| {
        if error.is_some() {
            return;
        }
        match state.get(name) {
            None => {
                error = Some(NetError::Parameter {
                    name: name.to_owned(),
                    message: "missing from archive".into(),
                })
            }
            Some(rec) if rec.shape != p.value.shape() || rec.data.len() != p.value.len() => {
                error = Some(NetError::Parameter {
                    name: name.to_owned(),
                    message: format!("archive shape {:?}, model shape {:?}", rec.shape, p.value.shape()),
                })
            }
            Some(rec) => {
                p.value = ArrayD::from_shape_vec(IxDyn(&rec.shape), rec.data.clone()).expect("checked shape");
                seen += 1;
            }
        }
    });
    if let Some(e) = error {
        return Err(e);
    }
    if seen != state.len() {
        return Err(NetError::Parameter {
            name: "<archive>".into(),
            message: format!("{} unexpected entries", state.len() - seen),
        });
    }
    Ok(())
}

fn write_archive<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|source| NetError::Io {
        path: path.to_owned(),
        source,
    })?;
    ciborium::into_writer(value, BufWriter::new(file)).map_err(|e| NetError::Archive {
        path: path.to_owned(),
        message: e.to_string(),
    })
}

fn read_archive<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|source| NetError::Io {
        path: path.to_owned(),
        source,
    })?;
    ciborium::from_reader(BufReader::new(file)).map_err(|e| NetError::Archive {
        path: path.to_owned(),
        message: e.to_string(),
    })
}

pub fn save_params<M: Module + ?Sized>(model: &mut M, path: &Path) -> Result<()> {
    write_archive(&state_dict(model), path)
}

pub fn read_params(path: &Path) -> Result<StateDict> {
    read_archive(path)
}

pub fn load_params<M: Module + ?Sized>(model: &mut M, path: &Path) -> Result<()> {
    load_state_dict(model, &read_params(path)?)
}

pub fn save_optimizer(state: &AdamState, path: &Path) -> Result<()> {
    write_archive(state, path)
}

pub fn read_optimizer(path: &Path) -> Result<AdamState> {
    read_archive(path)
}
