use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ipn_core::datasets::{generate_synthetic, sample_episode, Episode, SyntheticSpec};
use ipn_core::diffcore::Tape;
use ipn_core::training::{
    adam_step, apply_variant, episode_forward, episode_loss, model_dims, EpisodeInputs, OptimizerState, Trainer,
};
use ipn_core::{
    evaluate, fit, load_checkpoint, save_checkpoint, AblationVariant, Checkpoint, Dataset, Error, Hyperparams,
    ModelParams, Protocol,
};

fn small() -> (Dataset, Hyperparams) {
    let ds = generate_synthetic(&SyntheticSpec {
        n_seen: 8,
        n_unseen: 3,
        d_a: 8,
        d_v: 16,
        samples_per_class: 15,
        n_superclusters: 3,
        seed: 5,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let hp = Hyperparams {
        ways: 5,
        query_per_class: 3,
        d: 12,
        lr: 1e-3,
        epochs: 6,
        seed: 9,
        ..Hyperparams::default()
    };
    (ds, hp)
}

fn episode(ds: &Dataset, hp: &Hyperparams, seed: u64) -> Episode {
    sample_episode(ds, hp.ways, hp.shots, hp.query_per_class, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn loss_of(ds: &Dataset, hp: &Hyperparams, variant: AblationVariant, ep: &Episode) -> (f64, f64) {
    let wiring = apply_variant(variant, hp);
    let mut params = ModelParams::<f64>::init(&model_dims(ds, hp, &wiring), hp.seed).unwrap();
    let r = episode_loss(&mut params, hp, &wiring, ep, ds).unwrap();
    (r.total, r.ce_loss)
}

#[test]
fn no_propagation_is_zero_steps() {
    let (ds, hp) = small();
    let ep = episode(&ds, &hp, 1);
    let zero = Hyperparams { steps: 0, ..hp.clone() };
    assert_eq!(
        loss_of(&ds, &hp, AblationVariant::NoPropagation, &ep),
        loss_of(&ds, &zero, AblationVariant::Full, &ep)
    );
}

#[test]
fn no_consistency_is_zero_weight() {
    let (ds, hp) = small();
    let ep = episode(&ds, &hp, 2);
    let zero = Hyperparams { consistency_weight: 0.0, ..hp.clone() };
    assert_eq!(
        loss_of(&ds, &hp, AblationVariant::NoConsistency, &ep),
        loss_of(&ds, &zero, AblationVariant::Full, &ep)
    );
}

#[test]
fn prototypes_ignore_the_query_set() {
    let (ds, hp) = small();
    let wiring = apply_variant(AblationVariant::Full, &hp);
    let params = ModelParams::<f64>::init(&model_dims(&ds, &hp, &wiring), hp.seed).unwrap();
    let ep = episode(&ds, &hp, 3);
    // same classes and support, different queries
    let mut other = ep.clone();
    for (i, &c) in ep.classes.iter().enumerate() {
        let fresh: Vec<usize> = ds
            .train_pool(c)
            .iter()
            .copied()
            .filter(|j| !ep.support_of(i).contains(j))
            .rev()
            .take(hp.query_per_class)
            .collect();
        other.query[i * hp.query_per_class..(i + 1) * hp.query_per_class].copy_from_slice(&fresh);
    }
    assert_ne!(other.query, ep.query);
    let snap = |e: &Episode| {
        let inputs = EpisodeInputs::<f64>::gather(&ds, e).unwrap();
        let mut t = Tape::new();
        let fwd = episode_forward(&mut t, &params, &hp, &wiring, &inputs, None, None).unwrap();
        fwd.propagated.trace.snapshot(&t)
    };
    let (a, b) = (snap(&ep), snap(&other));
    for (x, y) in a.visual.iter().chain(&a.semantic).zip(b.visual.iter().chain(&b.semantic)) {
        assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn losses_are_non_negative_and_grads_cleared() {
    let (ds, hp) = small();
    for variant in AblationVariant::ALL {
        let wiring = apply_variant(variant, &hp);
        let mut params = ModelParams::<f32>::init(&model_dims(&ds, &hp, &wiring), hp.seed).unwrap();
        let mut opt = OptimizerState::new(&params, hp.decay_biases);
        for s in 0..3 {
            let r = episode_loss(&mut params, &hp, &wiring, &episode(&ds, &hp, s), &ds).unwrap();
            assert!(r.ce_loss >= 0.0 && r.consistency_loss >= -1e-6 && r.total >= 0.0, "{variant}: {r:?}");
            assert!(params.tensors().iter().any(|p| p.grad.iter().any(|&g| g != 0.0)));
            adam_step(&mut opt, &mut params, hp.lr, hp.weight_decay);
            assert!(params.tensors().iter().all(|p| p.grad.iter().all(|&g| g == 0.0)));
        }
    }
}

#[test]
fn resume_matches_unbroken_run() {
    let (ds, hp) = small();
    let unbroken = fit(&ds, &hp, AblationVariant::Full, &mut |_, _| Ok(())).unwrap();

    let mut first = Trainer::new(&ds, &hp, AblationVariant::Full).unwrap();
    for _ in 0..3 {
        first.run_epoch().unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(
        &Checkpoint {
            model: first.model(),
            epoch: first.epoch(),
            optimizer: Some(first.optimizer().clone()),
        },
        dir.path(),
    )
    .unwrap();
    drop(first);

    let ck = load_checkpoint(dir.path()).unwrap();
    let mut resumed = Trainer::resume(
        &ds,
        &ck.model.hp,
        ck.model.variant,
        ck.model.params,
        ck.optimizer.unwrap(),
        ck.epoch,
    )
    .unwrap();
    while !resumed.is_done() {
        let log = resumed.run_epoch().unwrap();
        let want = &unbroken.log[log.epoch];
        assert_eq!(log.episode, want.episode);
        for (a, b) in [(log.ce, want.ce), (log.consistency, want.consistency), (log.total, want.total)] {
            assert!((a - b).abs() <= 1e-6, "epoch {}: {a} vs {b}", log.epoch);
        }
    }
    assert_eq!(resumed.model(), unbroken.model);
}

#[test]
fn resume_rejects_mismatched_model() {
    let (ds, hp) = small();
    let t = Trainer::new(&ds, &hp, AblationVariant::Full).unwrap();
    let wider = Hyperparams { d: 16, ..hp.clone() };
    let r = Trainer::resume(&ds, &wider, AblationVariant::Full, t.params().clone(), t.optimizer().clone(), 1);
    assert!(matches!(r, Err(Error::Manifest(_))));
}

#[test]
fn training_raises_query_accuracy_and_is_deterministic() {
    let ds = generate_synthetic(&SyntheticSpec::default()).unwrap();
    let hp = Hyperparams {
        epochs: 30,
        ..Hyperparams::desk_scale()
    };
    let a = fit(&ds, &hp, AblationVariant::Full, &mut |_, _| Ok(())).unwrap();
    let first = a.log[0].query_acc;
    let best = a.log.iter().map(|l| l.query_acc).fold(0.0, f64::max);
    assert!(best > first, "{first} -> {best}");
    let b = fit(&ds, &hp, AblationVariant::Full, &mut |_, _| Ok(())).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.model, b.model);
    let gzsl = evaluate(&a.model, &ds, Protocol::Gzsl).unwrap();
    let zsl = evaluate(&a.model, &ds, Protocol::Zsl).unwrap();
    assert!(zsl.acc_unseen >= gzsl.acc_unseen);
}

#[test]
fn divergence_names_last_finite_epoch() {
    let (ds, hp) = small();
    let hp = Hyperparams { lr: 1e30, epochs: 4, ..hp };
    match fit(&ds, &hp, AblationVariant::Full, &mut |_, _| Ok(())) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("last finite epoch"), "{msg}"),
        other => panic!("expected a numeric failure, got {:?}", other.map(|o| o.log)),
    }
}

#[test]
fn too_many_ways_is_rejected_up_front() {
    let (ds, hp) = small();
    let hp = Hyperparams { ways: 9, ..hp };
    assert!(matches!(Trainer::new(&ds, &hp, AblationVariant::Full), Err(Error::Config(_))));
}
