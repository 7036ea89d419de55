use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, SplitSpec};
use crate::error::{Error, Result};

/// Whether unseen classes may share a supercluster with seen classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    Mixed,
    Segregated,
}

impl std::str::FromStr for Topology {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixed" => Ok(Topology::Mixed),
            "segregated" => Ok(Topology::Segregated),
            _ => Err(Error::Config(format!(
                "unknown topology {s:?} (expected mixed|segregated)"
            ))),
        }
    }
}

/// Parameters of a generated zero-shot benchmark.
///
/// Class attributes are a supercluster centre plus a spherical perturbation
/// of radius `class_spread`, normalized to unit length. Class visual means
/// are `A·s_y` for a fixed Gaussian map `A`; samples add `N(0, σ²I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_seen: usize,
    pub n_unseen: usize,
    pub d_a: usize,
    pub d_v: usize,
    pub samples_per_class: usize,
    pub noise_sigma: f64,
    pub n_superclusters: usize,
    pub topology: Topology,
    pub seed: u64,
    pub class_spread: f64,
    /// Fraction of each seen class's samples assigned to `train`.
    pub train_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_seen: 20,
            n_unseen: 5,
            d_a: 16,
            d_v: 64,
            samples_per_class: 30,
            noise_sigma: 0.1,
            n_superclusters: 5,
            topology: Topology::Mixed,
            seed: 0,
            class_spread: 0.5,
            train_fraction: 0.8,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_seen < 2 {
            return bad(format!("n_seen must be >= 2, got {}", self.n_seen));
        }
        if self.n_unseen < 1 {
            return bad("n_unseen must be >= 1".into());
        }
        if self.n_superclusters < 2 {
            return bad(format!(
                "{:?} topology needs n_superclusters >= 2, got {}",
                self.topology, self.n_superclusters
            ));
        }
        if self.d_a == 0 || self.d_v == 0 {
            return bad("d_a and d_v must be positive".into());
        }
        if self.samples_per_class < 2 {
            return bad("samples_per_class must be >= 2".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if !(self.class_spread >= 0.0 && self.class_spread.is_finite()) {
            return bad(format!("class_spread must be >= 0, got {}", self.class_spread));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!(
                "train_fraction must be in (0, 1), got {}",
                self.train_fraction
            ));
        }
        Ok(())
    }

    /// Training samples per seen class; at least one sample is held out.
    pub fn train_per_class(&self) -> usize {
        let n = (self.samples_per_class as f64 * self.train_fraction).round() as usize;
        n.clamp(1, self.samples_per_class - 1)
    }

    /// Supercluster of every class; seen classes are ids `0..n_seen`.
    fn assign_superclusters(&self) -> Vec<usize> {
        let k = self.n_superclusters;
        match self.topology {
            Topology::Mixed => (0..self.n_seen)
                .map(|i| i % k)
                .chain((0..self.n_unseen).map(|j| j % k))
                .collect(),
            Topology::Segregated => {
                let total = (self.n_seen + self.n_unseen) as f64;
                let unseen_clusters = ((k as f64 * self.n_unseen as f64 / total).round() as usize)
                    .clamp(1, k - 1);
                let seen_clusters = k - unseen_clusters;
                (0..self.n_seen)
                    .map(|i| i % seen_clusters)
                    .chain((0..self.n_unseen).map(|j| seen_clusters + j % unseen_clusters))
                    .collect()
            }
        }
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalize(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    if n > 0.0 {
        v / n
    } else {
        v
    }
}

/// Generates a benchmark; a pure function of `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_classes = spec.n_seen + spec.n_unseen;

    let centres: Vec<Array1<f64>> = (0..spec.n_superclusters)
        .map(|_| normalize(gaussian_vec(&mut rng, spec.d_a)))
        .collect();
    let scale = 1.0 / (spec.d_a as f64).sqrt();
    let map: Array2<f64> =
        Array2::from_shape_simple_fn((spec.d_v, spec.d_a), || {
            StandardNormal.sample(&mut rng)
        }) * scale;

    let clusters = spec.assign_superclusters();
    let perturb = spec.class_spread / (spec.d_a as f64).sqrt();
    let mut attributes = Array2::<f32>::zeros((n_classes, spec.d_a));
    let mut means = Vec::with_capacity(n_classes);
    for (c, &k) in clusters.iter().enumerate() {
        let s = normalize(&centres[k] + &(gaussian_vec(&mut rng, spec.d_a) * perturb));
        let s32 = s.mapv(|v| v as f32);
        attributes.row_mut(c).assign(&s32);
        // visual means are computed from the stored attribute values
        means.push(map.dot(&s32.mapv(f64::from)));
    }

    let n = n_classes * spec.samples_per_class;
    let mut features = Array2::<f32>::zeros((n, spec.d_v));
    let mut labels = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for s in 0..spec.samples_per_class {
            let row = c * spec.samples_per_class + s;
            let noise = if spec.noise_sigma > 0.0 {
                gaussian_vec(&mut rng, spec.d_v) * spec.noise_sigma
            } else {
                Array1::zeros(spec.d_v)
            };
            features
                .row_mut(row)
                .assign(&(mean + &noise).mapv(|v| v as f32));
            labels.push(c as u32);
        }
    }

    let n_train = spec.train_per_class();
    let mut train = Vec::new();
    let mut test_seen = Vec::new();
    let mut test_unseen = Vec::new();
    for c in 0..n_classes {
        let mut idx: Vec<usize> =
            (c * spec.samples_per_class..(c + 1) * spec.samples_per_class).collect();
        if c < spec.n_seen {
            idx.shuffle(&mut rng);
            let (tr, te) = idx.split_at(n_train);
            let (mut tr, mut te) = (tr.to_vec(), te.to_vec());
            tr.sort_unstable();
            te.sort_unstable();
            train.extend(tr);
            test_seen.extend(te);
        } else {
            test_unseen.extend(idx);
        }
    }

    let split = SplitSpec {
        seen: (0..spec.n_seen).collect(),
        unseen: (spec.n_seen..n_classes).collect(),
        train,
        test_seen,
        test_unseen,
    };
    let names = (0..n_classes).map(|c| format!("class_{c:03}")).collect();
    Ok(Dataset::new(features, labels, attributes, names, split)?
        .with_provenance(Some(spec.clone()), Some(clusters)))
}
