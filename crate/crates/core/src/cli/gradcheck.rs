//! Finite-difference check of the full episode objective on a fixed
//! 64-bit micro-episode.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datasets::{generate_synthetic, sample_episode, Dataset, Episode, SyntheticSpec};
use crate::diffcore::gradcheck::{grad_check, GradCheckReport};
use crate::diffcore::{DoubleDouble, Tape};
use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::training::{apply_variant, episode_forward, model_dims, AblationVariant, EpisodeInputs, Hyperparams};

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Largest accepted relative error per group.
pub const TOLERANCE: f64 = 1e-4;

/// Dataset, settings and episode of the micro check: 5 ways, 1 shot,
/// 2 queries per class, prototype width 8, two propagation steps.
pub fn micro_episode(seed: u64) -> Result<(Dataset, Hyperparams, Episode)> {
    let spec = SyntheticSpec {
        n_seen: 5,
        n_unseen: 1,
        d_a: 6,
        d_v: 10,
        samples_per_class: 4,
        n_superclusters: 2,
        seed,
        ..SyntheticSpec::default()
    };
    let ds = generate_synthetic(&spec)?;
    let hp = Hyperparams {
        ways: 5,
        shots: 1,
        query_per_class: 2,
        d: 8,
        steps: 2,
        consistency_weight: 1.0,
        // a mid threshold so the graphs keep some edges and drop others
        edge_threshold: 0.0,
        seed,
        ..Hyperparams::default()
    };
    let ep = sample_episode(&ds, hp.ways, hp.shots, hp.query_per_class, &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok((ds, hp, ep))
}

/// Compares tape gradients of the episode objective with central
/// differences. Graphs are held at the values of the unperturbed pass.
/// The perturbed losses are evaluated in double-double precision; the
/// gradients under test are the 64-bit ones.
/// `corrupt` scales the analytic gradient of one group, for testing the
/// check itself.
pub fn check_episode(
    ds: &Dataset,
    hp: &Hyperparams,
    variant: AblationVariant,
    episode: &Episode,
    h: f64,
    corrupt: Option<&str>,
) -> Result<GradCheckReport> {
    let wiring = apply_variant(variant, hp);
    let dims = model_dims(ds, hp, &wiring);
    let params = ModelParams::<f64>::init(&dims, hp.seed)?;
    let inputs = EpisodeInputs::<f64>::gather(ds, episode)?;

    let mut tape = Tape::new();
    let fwd = episode_forward(&mut tape, &params, hp, &wiring, &inputs, ds.edges(), None)?;
    if !tape.scalar(fwd.objective).is_finite() {
        return Err(Error::Numeric("micro-episode loss is not finite".into()));
    }
    let graphs = fwd.propagated.graphs.clone();
    let grads = tape.backward(fwd.objective)?;
    let info = params.tensor_info();
    let mut analytic: Vec<Array2<f64>> = fwd
        .bound
        .vars()
        .into_iter()
        .zip(params.tensors())
        .map(|(v, p)| grads.get_or_zeros(v, p.shape()))
        .collect();
    if let Some(group) = corrupt {
        for (g, i) in analytic.iter_mut().zip(&info) {
            if i.group == group {
                g.mapv_inplace(|x| 1.5 * x + 1e-3);
            }
        }
    }
    let groups: Vec<String> = info.iter().map(|i| i.group.to_string()).collect();
    let mut values: Vec<Array2<f64>> = params.tensors().iter().map(|p| p.value.clone()).collect();
    let wide_inputs = EpisodeInputs::<DoubleDouble>::gather(ds, episode)?;
    grad_check(&mut values, &groups, &analytic, h, |v| {
        let wide: Vec<Array2<DoubleDouble>> = v.iter().map(|a| a.mapv(DoubleDouble::new)).collect();
        let p = ModelParams::from_tensors(&dims, wide)?;
        let mut t = Tape::new();
        let f = episode_forward(&mut t, &p, hp, &wiring, &wide_inputs, None, Some(&graphs))?;
        Ok(t.scalar(f.objective))
    })
}
