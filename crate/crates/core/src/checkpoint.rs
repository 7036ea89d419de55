//! On-disk model checkpoints: a JSON manifest plus one little-endian
//! `f32` file per parameter group.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::params::{ModelDims, ModelParams, GROUPS};
use crate::training::{AblationVariant, Hyperparams, Model, OptimizerState};

const MANIFEST: &str = "manifest.json";
const FORMAT: u32 = 1;

/// A model, the epoch it reached and optionally the optimiser moments
/// needed to continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// Epochs completed.
    pub epoch: usize,
    pub optimizer: Option<OptimizerState<f32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: String,
    file: String,
    /// Offset into `file`, in elements.
    offset: usize,
    shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimizerEntry {
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    decay_biases: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: u32,
    dims: ModelDims,
    hyperparams: Hyperparams,
    variant: AblationVariant,
    epoch: usize,
    tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    optimizer: Option<OptimizerEntry>,
}

/// File stem of a parameter group; distinct even on case-insensitive
/// file systems.
fn group_stem(group: &str) -> &'static str {
    match group {
        "W" => "proj",
        "experts" => "experts",
        "h_v" => "head_v",
        "h_s" => "head_s",
        "W1" => "rel_w1",
        "W2" => "rel_w2",
        "b1" => "rel_b1",
        "w" => "rel_out_w",
        "b" => "rel_out_b",
        other => unreachable!("unknown parameter group {other}"),
    }
}

fn payload_files(prefix: &str, entries: &[TensorEntry], tensors: &[&Array2<f32>]) -> Vec<(String, Vec<u8>)> {
    GROUPS
        .iter()
        .map(|g| {
            let bytes = entries
                .iter()
                .zip(tensors)
                .filter(|(e, _)| e.group == *g)
                .flat_map(|(_, t)| t.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>())
                .collect();
            (format!("{prefix}{}.f32", group_stem(g)), bytes)
        })
        .collect()
}

pub fn save_checkpoint(ck: &Checkpoint, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let params = &ck.model.params;
    let mut offsets = std::collections::HashMap::new();
    let entries: Vec<TensorEntry> = params
        .tensor_info()
        .into_iter()
        .zip(params.tensors())
        .map(|(info, p)| {
            let off = offsets.entry(info.group).or_insert(0usize);
            let e = TensorEntry {
                name: info.name,
                group: info.group.to_string(),
                file: format!("{}.f32", group_stem(info.group)),
                offset: *off,
                shape: [p.shape().0, p.shape().1],
            };
            *off += p.value.len();
            e
        })
        .collect();
    let values: Vec<&Array2<f32>> = params.tensors().iter().map(|p| &p.value).collect();
    let mut files = payload_files("", &entries, &values);
    if let Some(opt) = &ck.optimizer {
        files.extend(payload_files("adam_m.", &entries, &opt.m.iter().collect::<Vec<_>>()));
        files.extend(payload_files("adam_v.", &entries, &opt.v.iter().collect::<Vec<_>>()));
    }
    for (name, bytes) in files {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(path, e))?;
    }
    let manifest = Manifest {
        format: FORMAT,
        dims: params.dims(),
        hyperparams: ck.model.hp.clone(),
        variant: ck.model.variant,
        epoch: ck.epoch,
        tensors: entries,
        optimizer: ck.optimizer.as_ref().map(|o| OptimizerEntry {
            step: o.step,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            decay_biases: o.decay_biases,
        }),
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

fn read_tensors(dir: &Path, prefix: &str, entries: &[TensorEntry]) -> Result<Vec<Array2<f32>>> {
    let mut cache: std::collections::HashMap<String, Vec<f32>> = Default::default();
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let file = format!("{prefix}{}", e.file);
        if !cache.contains_key(&file) {
            let path = dir.join(&file);
            let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
            if bytes.len() % 4 != 0 {
                return Err(Error::Manifest(format!("{file}: length {} is not a multiple of 4", bytes.len())));
            }
            let vals = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            cache.insert(file.clone(), vals);
        }
        let data = &cache[&file];
        let n = e.shape[0] * e.shape[1];
        let slice = data.get(e.offset..e.offset + n).ok_or_else(|| {
            Error::Manifest(format!(
                "{file} holds {} values, tensor {} needs {}..{}",
                data.len(),
                e.name,
                e.offset,
                e.offset + n
            ))
        })?;
        out.push(Array2::from_shape_vec((e.shape[0], e.shape[1]), slice.to_vec()).expect("sized"));
    }
    Ok(out)
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_slice(&text)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    if m.format != FORMAT {
        return Err(Error::Manifest(format!("unsupported checkpoint format {}", m.format)));
    }
    let params = ModelParams::from_tensors(&m.dims, read_tensors(dir, "", &m.tensors)?)?;
    let model = Model {
        params,
        hp: m.hyperparams,
        variant: m.variant,
    };
    let width = model.wiring().proto_width(model.hp.d);
    if m.dims.d != model.hp.d || m.dims.proto_width != width || m.dims.experts != model.hp.experts {
        return Err(Error::Manifest(format!(
            "tensor shapes {:?} disagree with the stored settings (d={}, experts={}, variant {})",
            m.dims, model.hp.d, model.hp.experts, model.variant
        )));
    }
    let optimizer = match m.optimizer {
        None => None,
        Some(o) => Some(OptimizerState {
            m: read_tensors(dir, "adam_m.", &m.tensors)?,
            v: read_tensors(dir, "adam_v.", &m.tensors)?,
            step: o.step,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            decay_biases: o.decay_biases,
        }),
    };
    Ok(Checkpoint {
        model,
        epoch: m.epoch,
        optimizer,
    })
}

/// Checks that a model's input widths fit a dataset.
pub fn check_compatible(model: &Model, ds: &Dataset) -> Result<()> {
    let dims = model.params.dims();
    if dims.d_v != ds.d_feat() || dims.d_a != ds.d_attr() {
        return Err(Error::Manifest(format!(
            "model expects feature width {} and attribute width {}, dataset has {} and {}",
            dims.d_v,
            dims.d_a,
            ds.d_feat(),
            ds.d_attr()
        )));
    }
    Ok(())
}
