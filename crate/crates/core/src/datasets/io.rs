use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{ClassId, Dataset, SplitSpec, SyntheticSpec};
use crate::error::{Error, LoadError, Result};

const META: &str = "meta.json";
const FEATURES: &str = "features.f32";
const LABELS: &str = "labels.u32";
const ATTRIBUTES: &str = "attributes.f32";
const SPLIT: &str = "split.json";
const EDGES: &str = "edges.csv";

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    n_samples: usize,
    n_classes: usize,
    d_feat: usize,
    d_attr: usize,
    class_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    synthetic: Option<SyntheticSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    superclusters: Option<Vec<usize>>,
}

fn read(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let path = dir.join(name);
    match fs::read(&path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(LoadError::MissingFile(path).into())
        }
        Err(e) => Err(Error::io(path, e)),
    }
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn f32_payload(
    bytes: &[u8],
    file: &'static str,
    rows: usize,
    cols: usize,
) -> Result<Array2<f32>> {
    let expected = rows * cols * 4;
    if bytes.len() != expected {
        return Err(LoadError::PayloadSize {
            file,
            expected,
            found: bytes.len(),
        }
        .into());
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), values).expect("size checked"))
}

pub(crate) fn f32_bytes<'a>(values: impl IntoIterator<Item = &'a f32>) -> Vec<u8> {
    values.into_iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Reads and validates a dataset directory.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let meta: Meta = serde_json::from_slice(&read(dir, META)?)
        .map_err(|e| LoadError::Invalid(format!("{META}: {e}")))?;
    if meta.class_names.len() != meta.n_classes {
        return Err(LoadError::Invalid(format!(
            "{META}: {} class names for n_classes={}",
            meta.class_names.len(),
            meta.n_classes
        ))
        .into());
    }
    let features = f32_payload(&read(dir, FEATURES)?, FEATURES, meta.n_samples, meta.d_feat)?;
    let attributes = f32_payload(
        &read(dir, ATTRIBUTES)?,
        ATTRIBUTES,
        meta.n_classes,
        meta.d_attr,
    )?;
    let label_bytes = read(dir, LABELS)?;
    if label_bytes.len() != meta.n_samples * 4 {
        return Err(LoadError::PayloadSize {
            file: LABELS,
            expected: meta.n_samples * 4,
            found: label_bytes.len(),
        }
        .into());
    }
    let labels = label_bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let split: SplitSpec = serde_json::from_slice(&read(dir, SPLIT)?)
        .map_err(|e| LoadError::Invalid(format!("{SPLIT}: {e}")))?;

    let mut ds = Dataset::new(features, labels, attributes, meta.class_names, split)?
        .with_provenance(meta.synthetic, meta.superclusters);
    let edge_path = dir.join(EDGES);
    if edge_path.exists() {
        ds = ds.with_edges(read_edges(&edge_path)?)?;
    }
    Ok(ds)
}

fn read_edges(path: &Path) -> Result<Vec<(ClassId, ClassId)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| LoadError::Invalid(format!("{EDGES}: {e}")))?;
    let mut edges = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| LoadError::Invalid(format!("{EDGES}: {e}")))?;
        if rec.len() != 2 {
            return Err(LoadError::Invalid(format!(
                "{EDGES} line {}: expected 2 fields, got {}",
                line + 1,
                rec.len()
            ))
            .into());
        }
        let parse = |s: &str| {
            s.parse::<ClassId>().map_err(|e| {
                LoadError::Invalid(format!("{EDGES} line {}: {s:?}: {e}", line + 1))
            })
        };
        edges.push((parse(&rec[0])?, parse(&rec[1])?));
    }
    Ok(edges)
}

/// Writes `ds` in the directory layout read by [`load_dataset`].
pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = Meta {
        n_samples: ds.n_samples(),
        n_classes: ds.n_classes(),
        d_feat: ds.d_feat(),
        d_attr: ds.d_attr(),
        class_names: ds.class_names().to_vec(),
        synthetic: ds.synthetic_spec().cloned(),
        superclusters: ds.superclusters().map(<[usize]>::to_vec),
    };
    write(dir, META, &serde_json::to_vec_pretty(&meta)?)?;
    write(dir, FEATURES, &f32_bytes(ds.features().iter()))?;
    let labels: Vec<u8> = ds.labels().iter().flat_map(|l| l.to_le_bytes()).collect();
    write(dir, LABELS, &labels)?;
    write(dir, ATTRIBUTES, &f32_bytes(ds.attributes().iter()))?;
    write(dir, SPLIT, &serde_json::to_vec_pretty(ds.split())?)?;
    if let Some(edges) = ds.edges() {
        let body: String = edges.iter().map(|(a, b)| format!("{a},{b}\n")).collect();
        write(dir, EDGES, body.as_bytes())?;
    }
    Ok(())
}
