//! Feature/attribute datasets, seen/unseen splits and episode sampling.

mod episode;
mod io;
mod synthetic;

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{LoadError, Result};

pub use episode::{episodes_per_epoch, sample_episode, Episode};
pub use io::{load_dataset, save_dataset};
pub use synthetic::{generate_synthetic, SyntheticSpec, Topology};

pub type ClassId = usize;

/// Seen/unseen class partition and the sample index sets of each split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seen: Vec<ClassId>,
    pub unseen: Vec<ClassId>,
    pub train: Vec<usize>,
    pub test_seen: Vec<usize>,
    pub test_unseen: Vec<usize>,
}

/// Immutable, validated dataset of precomputed features.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Array2<f32>,
    labels: Vec<u32>,
    attributes: Array2<f32>,
    class_names: Vec<String>,
    split: SplitSpec,
    edges: Option<Vec<(ClassId, ClassId)>>,
    synthetic: Option<SyntheticSpec>,
    superclusters: Option<Vec<usize>>,
    train_by_class: Vec<Vec<usize>>,
}

impl Dataset {
    /// Validates every invariant and builds the per-class training pools.
    pub fn new(
        features: Array2<f32>,
        labels: Vec<u32>,
        attributes: Array2<f32>,
        class_names: Vec<String>,
        split: SplitSpec,
    ) -> Result<Self> {
        let n = features.nrows();
        let c = attributes.nrows();
        if labels.len() != n {
            return Err(LoadError::Invalid(format!(
                "{} labels for {n} feature rows",
                labels.len()
            ))
            .into());
        }
        if class_names.len() != c {
            return Err(LoadError::Invalid(format!(
                "{} class names for {c} attribute rows",
                class_names.len()
            ))
            .into());
        }
        if n == 0 || c == 0 || features.ncols() == 0 || attributes.ncols() == 0 {
            return Err(LoadError::Invalid("empty dimension".into()).into());
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= c) {
            return Err(LoadError::LabelOutOfRange {
                index,
                label,
                n_classes: c,
            }
            .into());
        }
        for (i, row) in attributes.axis_iter(Axis(0)).enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(LoadError::Invalid(format!("attribute row {i} is not finite")).into());
            }
            if row.iter().all(|&v| v == 0.0) {
                return Err(LoadError::Invalid(format!("attribute row {i} is all zero")).into());
            }
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(LoadError::Invalid("non-finite feature value".into()).into());
        }

        let seen: BTreeSet<ClassId> = split.seen.iter().copied().collect();
        let unseen: BTreeSet<ClassId> = split.unseen.iter().copied().collect();
        if seen.len() != split.seen.len() || unseen.len() != split.unseen.len() {
            return Err(LoadError::Invalid("duplicate class in split".into()).into());
        }
        if let Some(&cls) = seen.intersection(&unseen).next() {
            return Err(LoadError::OverlappingClasses(cls).into());
        }
        if let Some(&cls) = seen.iter().chain(&unseen).find(|&&cls| cls >= c) {
            return Err(LoadError::Invalid(format!("split names class {cls} >= {c}")).into());
        }

        let mut owner = vec![0u8; n];
        let sets: [(&[usize], &BTreeSet<ClassId>, &str); 3] = [
            (&split.train, &seen, "train"),
            (&split.test_seen, &seen, "test_seen"),
            (&split.test_unseen, &unseen, "test_unseen"),
        ];
        for (k, (idx, allowed, name)) in sets.iter().enumerate() {
            for &i in *idx {
                if i >= n {
                    return Err(
                        LoadError::Invalid(format!("{name} index {i} >= {n} samples")).into(),
                    );
                }
                if owner[i] != 0 {
                    return Err(LoadError::OverlappingSamples(i).into());
                }
                owner[i] = k as u8 + 1;
                let label = labels[i] as usize;
                if !allowed.contains(&label) {
                    return Err(LoadError::Invalid(format!(
                        "{name} sample {i} has label {label} outside its class set"
                    ))
                    .into());
                }
            }
        }

        let mut train_by_class = vec![Vec::new(); c];
        for &i in &split.train {
            train_by_class[labels[i] as usize].push(i);
        }
        if let Some(&cls) = split.seen.iter().find(|&&cls| train_by_class[cls].is_empty()) {
            return Err(
                LoadError::Invalid(format!("seen class {cls} has no training sample")).into(),
            );
        }

        Ok(Dataset {
            features,
            labels,
            attributes,
            class_names,
            split,
            edges: None,
            synthetic: None,
            superclusters: None,
            train_by_class,
        })
    }

    /// Attaches an external category graph. Edges are validated against the
    /// class count.
    pub fn with_edges(mut self, edges: Vec<(ClassId, ClassId)>) -> Result<Self> {
        let c = self.n_classes();
        if let Some(&(a, b)) = edges.iter().find(|(a, b)| *a >= c || *b >= c) {
            return Err(LoadError::Invalid(format!("edge ({a},{b}) names a class >= {c}")).into());
        }
        self.edges = Some(edges);
        Ok(self)
    }

    pub(crate) fn with_provenance(
        mut self,
        spec: Option<SyntheticSpec>,
        superclusters: Option<Vec<usize>>,
    ) -> Self {
        self.synthetic = spec;
        self.superclusters = superclusters;
        self
    }

    pub fn n_samples(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.attributes.nrows()
    }

    pub fn d_feat(&self) -> usize {
        self.features.ncols()
    }

    pub fn d_attr(&self) -> usize {
        self.attributes.ncols()
    }

    pub fn features(&self) -> &Array2<f32> {
        &self.features
    }

    pub fn feature(&self, i: usize) -> ndarray::ArrayView1<'_, f32> {
        self.features.row(i)
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> ClassId {
        self.labels[i] as ClassId
    }

    pub fn attributes(&self) -> &Array2<f32> {
        &self.attributes
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn split(&self) -> &SplitSpec {
        &self.split
    }

    pub fn edges(&self) -> Option<&[(ClassId, ClassId)]> {
        self.edges.as_deref()
    }

    pub fn synthetic_spec(&self) -> Option<&SyntheticSpec> {
        self.synthetic.as_ref()
    }

    /// Supercluster of each class, for generated datasets.
    pub fn superclusters(&self) -> Option<&[usize]> {
        self.superclusters.as_deref()
    }

    /// Training sample indices of `class`, in split order.
    pub fn train_pool(&self, class: ClassId) -> &[usize] {
        &self.train_by_class[class]
    }

    /// Mean feature vector of the given samples, accumulated in `f64`.
    pub fn mean_feature(&self, samples: &[usize]) -> Array1<f64> {
        let mut acc = Array1::<f64>::zeros(self.d_feat());
        for &i in samples {
            acc.zip_mut_with(&self.features.row(i), |a, &x| *a += x as f64);
        }
        acc / samples.len().max(1) as f64
    }

    /// Attribute rows of `classes`, in order.
    pub fn attribute_rows(&self, classes: &[ClassId]) -> Array2<f32> {
        self.attributes.select(Axis(0), classes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use ndarray::array;

    fn tiny_split() -> SplitSpec {
        SplitSpec {
            seen: vec![0, 1],
            unseen: vec![2],
            train: vec![0, 1],
            test_seen: vec![2],
            test_unseen: vec![3],
        }
    }

    fn tiny(split: SplitSpec, labels: Vec<u32>) -> Result<Dataset> {
        Dataset::new(
            Array2::from_elem((4, 3), 0.5),
            labels,
            array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]],
            vec!["a".into(), "b".into(), "c".into()],
            split,
        )
    }

    #[test]
    fn valid_dataset_builds_pools() {
        let d = tiny(tiny_split(), vec![0, 1, 1, 2]).unwrap();
        assert_eq!(d.train_pool(0), &[0]);
        assert_eq!(d.train_pool(1), &[1]);
        assert!(d.train_pool(2).is_empty());
    }

    #[test]
    fn overlapping_classes_rejected() {
        let mut s = tiny_split();
        s.unseen = vec![1, 2];
        let e = tiny(s, vec![0, 1, 1, 2]).unwrap_err();
        assert!(matches!(e, Error::Load(LoadError::OverlappingClasses(1))));
    }

    #[test]
    fn label_out_of_range_rejected() {
        let e = tiny(tiny_split(), vec![0, 1, 1, 7]).unwrap_err();
        assert!(matches!(e, Error::Load(LoadError::LabelOutOfRange { label: 7, .. })));
    }

    #[test]
    fn unseen_training_sample_rejected() {
        let mut s = tiny_split();
        s.train = vec![0, 1, 3];
        s.test_unseen = vec![];
        assert!(tiny(s, vec![0, 1, 1, 2]).is_err());
    }

    #[test]
    fn overlapping_samples_rejected() {
        let mut s = tiny_split();
        s.test_seen = vec![1];
        let e = tiny(s, vec![0, 1, 1, 2]).unwrap_err();
        assert!(matches!(e, Error::Load(LoadError::OverlappingSamples(1))));
    }

    #[test]
    fn all_zero_attribute_rejected() {
        let e = Dataset::new(
            Array2::from_elem((4, 3), 0.5),
            vec![0, 1, 1, 2],
            array![[1.0, 0.0], [0.0, 0.0], [1.0, 1.0]],
            vec!["a".into(), "b".into(), "c".into()],
            tiny_split(),
        );
        assert!(e.is_err());
    }

    #[test]
    fn seen_class_without_training_sample_rejected() {
        let mut s = tiny_split();
        s.train = vec![0];
        s.test_seen = vec![1, 2];
        assert!(tiny(s, vec![0, 1, 1, 2]).is_err());
    }
}
