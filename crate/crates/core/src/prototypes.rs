//! Step-0 prototypes: semantic from attributes, visual from class-mean
//! features (seen classes) or from semantic neighbours (unseen classes).

use ndarray::Array2;

use crate::datasets::{ClassId, Dataset};
use crate::diffcore::{Real, Tape, Var};
use crate::error::{Error, Result};

/// One `relu(weight·s + bias)` branch of the attribute encoder.
#[derive(Clone, Copy, Debug)]
pub struct Expert {
    pub weight: Var,
    pub bias: Var,
}

/// Tape view of the prototype initialisers: the feature projection `W`
/// (`d × d_v`) and the expert branches (`d × d_a` each).
#[derive(Clone, Debug)]
pub struct PrototypeNet {
    pub proj: Var,
    pub experts: Vec<Expert>,
}

/// Step-0 visual prototypes of unseen classes and how they were formed.
#[derive(Clone, Debug)]
pub struct UnseenInit {
    pub prototypes: Var,
    /// Selected seen-class rows for each unseen class, best first.
    pub neighbors: Vec<Vec<usize>>,
    /// `|unseen| × |seen|` mixing weights, zero outside `neighbors`.
    pub weights: Var,
}

impl PrototypeNet {
    /// Mean over experts of `relu(attrs·weightᵀ + bias)`; one row per class.
    pub fn init_semantic<T: Real>(&self, tape: &mut Tape<T>, attrs: Var) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for e in &self.experts {
            let pre = tape.linear(attrs, e.weight, Some(e.bias))?;
            let act = tape.relu(pre);
            acc = Some(match acc {
                None => act,
                Some(a) => tape.add(a, act)?,
            });
        }
        let acc = acc.ok_or_else(|| Error::Config("prototype net has no experts".into()))?;
        if self.experts.len() == 1 {
            Ok(acc)
        } else {
            Ok(tape.scale(acc, T::of(1.0 / self.experts.len() as f64)))
        }
    }

    /// `W · mean(features)` for each row of `class_means`.
    pub fn init_visual_seen<T: Real>(&self, tape: &mut Tape<T>, class_means: Var) -> Result<Var> {
        tape.linear(class_means, self.proj, None)
    }

    /// Unseen visual prototypes as `W · Σ a^s(y,z)·m_z` over the `k`
    /// semantically nearest seen classes `z`, where `m_z` is the raw class
    /// mean feature and `a^s` is the tempered softmax over the selected set.
    #[allow(clippy::too_many_arguments)]
    pub fn init_visual_unseen<T: Real>(
        &self,
        tape: &mut Tape<T>,
        unseen_semantic: Var,
        seen_semantic: Var,
        seen_means: Var,
        semantic_head: Var,
        gamma: T,
        k: usize,
    ) -> Result<UnseenInit> {
        let n_seen = tape.shape(seen_semantic).0;
        if k == 0 || k > n_seen {
            return Err(Error::Config(format!(
                "init_neighbors={k} but {n_seen} seen classes are available"
            )));
        }
        let hu = tape.linear(unseen_semantic, semantic_head, None)?;
        let hs = tape.linear(seen_semantic, semantic_head, None)?;
        let sims = tape.cosine_rows(hu, hs)?;
        let n_unseen = tape.shape(unseen_semantic).0;
        let mut mask = Array2::from_elem((n_unseen, n_seen), false);
        let mut neighbors = Vec::with_capacity(n_unseen);
        for (i, row) in tape.value(sims).rows().into_iter().enumerate() {
            let picked = top_k(row.as_slice().expect("contiguous"), k);
            for &j in &picked {
                mask[[i, j]] = true;
            }
            neighbors.push(picked);
        }
        let weights = tape.softmax_rows(sims, gamma, Some(mask))?;
        let mixed = tape.matmul(weights, seen_means)?;
        let prototypes = tape.linear(mixed, self.proj, None)?;
        Ok(UnseenInit {
            prototypes,
            neighbors,
            weights,
        })
    }
}

/// Indices of the `k` largest scores, best first; ties go to the lower index.
pub fn top_k<T: Real>(scores: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Class-mean features, one row per group of sample indices.
pub fn class_means<T: Real>(ds: &Dataset, groups: &[&[usize]]) -> Result<Array2<T>> {
    let mut out = Array2::zeros((groups.len(), ds.d_feat()));
    for (i, g) in groups.iter().enumerate() {
        if g.is_empty() {
            return Err(Error::Contract(format!(
                "class group {i} has no samples to average"
            )));
        }
        let mean = ds.mean_feature(g);
        out.row_mut(i).assign(&mean.mapv(T::of));
    }
    Ok(out)
}

/// Means over the full training pool of each class.
pub fn training_means<T: Real>(ds: &Dataset, classes: &[ClassId]) -> Result<Array2<T>> {
    let groups: Vec<&[usize]> = classes.iter().map(|&c| ds.train_pool(c)).collect();
    class_means(ds, &groups)
}
