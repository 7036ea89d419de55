use rand::seq::index;
use rand::Rng;

use super::{ClassId, Dataset};
use crate::error::{Error, Result};

/// One N-way K-shot task drawn from the seen classes.
///
/// `support` and `query` are grouped by class in the order of `classes`:
/// class `i` owns `support[i*k..(i+1)*k]` and `query[i*q..(i+1)*q]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub classes: Vec<ClassId>,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
    pub shots: usize,
    pub queries_per_class: usize,
}

impl Episode {
    pub fn support_of(&self, i: usize) -> &[usize] {
        &self.support[i * self.shots..(i + 1) * self.shots]
    }

    /// Position in `classes` of each query sample's class.
    pub fn query_targets(&self) -> Vec<usize> {
        (0..self.classes.len())
            .flat_map(|i| std::iter::repeat(i).take(self.queries_per_class))
            .collect()
    }
}

/// Draws `ways` distinct seen classes uniformly, then `shots` support and
/// `queries` query samples per class without replacement. Classes are
/// returned in ascending id order.
pub fn sample_episode<R: Rng + ?Sized>(
    ds: &Dataset,
    ways: usize,
    shots: usize,
    queries: usize,
    rng: &mut R,
) -> Result<Episode> {
    let seen = &ds.split().seen;
    if ways == 0 || shots == 0 {
        return Err(Error::Config("ways and shots must be positive".into()));
    }
    if ways > seen.len() {
        return Err(Error::Config(format!(
            "{ways}-way episodes need at least {ways} seen classes, dataset has {}",
            seen.len()
        )));
    }
    let mut classes: Vec<ClassId> = index::sample(rng, seen.len(), ways)
        .into_iter()
        .map(|i| seen[i])
        .collect();
    classes.sort_unstable();

    let per_class = shots + queries;
    let mut support = Vec::with_capacity(ways * shots);
    let mut query = Vec::with_capacity(ways * queries);
    for &c in &classes {
        let pool = ds.train_pool(c);
        if pool.len() < per_class {
            return Err(Error::Sampling(format!(
                "class {c} ({}) has {} training samples, episode needs {per_class}",
                ds.class_names()[c],
                pool.len()
            )));
        }
        let picked = index::sample(rng, pool.len(), per_class).into_vec();
        support.extend(picked[..shots].iter().map(|&i| pool[i]));
        query.extend(picked[shots..].iter().map(|&i| pool[i]));
    }
    Ok(Episode {
        classes,
        support,
        query,
        shots,
        queries_per_class: queries,
    })
}

/// `max(1, ⌊n_train / (ways·shots)⌋)`.
pub fn episodes_per_epoch(n_train: usize, ways: usize, shots: usize) -> usize {
    (n_train / (ways * shots).max(1)).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_synthetic, SyntheticSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    #[test]
    fn epoch_lengths() {
        assert_eq!(episodes_per_epoch(23_527, 30, 1), 784);
        assert_eq!(episodes_per_epoch(30, 30, 1), 1);
        assert_eq!(episodes_per_epoch(29, 30, 1), 1);
    }

    #[test]
    fn all_seen_classes_when_ways_is_full() {
        let ds = generate_synthetic(&SyntheticSpec::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ep = sample_episode(&ds, 20, 1, 5, &mut rng).unwrap();
        assert_eq!(ep.classes, ds.split().seen);
    }

    #[test]
    fn episode_structure() {
        let ds = generate_synthetic(&SyntheticSpec::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let ep = sample_episode(&ds, 5, 2, 3, &mut rng).unwrap();
            assert_eq!(ep.classes.len(), 5);
            assert_eq!(ep.support.len(), 10);
            assert_eq!(ep.query.len(), 15);
            let s: BTreeSet<_> = ep.support.iter().collect();
            let q: BTreeSet<_> = ep.query.iter().collect();
            assert!(s.is_disjoint(&q));
            for (i, &c) in ep.classes.iter().enumerate() {
                assert!(ep.support_of(i).iter().all(|&j| ds.label(j) == c));
                assert!(ep.query[i * 3..(i + 1) * 3].iter().all(|&j| ds.label(j) == c));
            }
        }
    }

    #[test]
    fn insufficient_samples_names_class() {
        let ds = generate_synthetic(&SyntheticSpec::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let err = sample_episode(&ds, 3, 20, 10, &mut rng).unwrap_err();
        match err {
            Error::Sampling(msg) => assert!(msg.contains("class")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn too_many_ways_is_config_error() {
        let ds = generate_synthetic(&SyntheticSpec::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(matches!(sample_episode(&ds, 21, 1, 1, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn class_frequencies_are_uniform() {
        let ds = generate_synthetic(&SyntheticSpec::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let draws = 10_000;
        let mut counts = [0usize; 20];
        for _ in 0..draws {
            for c in sample_episode(&ds, 5, 1, 1, &mut rng).unwrap().classes {
                counts[c] += 1;
            }
        }
        // each class is included with probability 5/20
        let p = 0.25;
        let mean = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for &c in &counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn exact_pool_is_used_disjointly() {
        use crate::datasets::{Dataset, SplitSpec};
        use ndarray::{array, Array2};
        let ds = Dataset::new(
            Array2::from_elem((4, 2), 1.0),
            vec![0, 0, 1, 1],
            array![[1.0, 0.0], [0.0, 1.0]],
            vec!["a".into(), "b".into()],
            SplitSpec {
                seen: vec![0, 1],
                unseen: vec![],
                train: vec![0, 1, 2, 3],
                test_seen: vec![],
                test_unseen: vec![],
            },
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ep = sample_episode(&ds, 1, 1, 1, &mut rng).unwrap();
        let mut used = ep.support.clone();
        used.extend(&ep.query);
        used.sort_unstable();
        assert_eq!(used, ds.train_pool(ep.classes[0]).to_vec());
    }
}
