//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use ipn_core::classifier::classify;
use ipn_core::cli::{check_episode, mean_std, micro_episode, train_and_score, RunConfig, RunScore, STEP, TOLERANCE};
use ipn_core::datasets::{ClassId, Topology};
use ipn_core::diffcore::{Tape, COSINE_GUARD};
use ipn_core::evaluation::{score_samples, test_prototypes};
use ipn_core::propagation::{
    build_graph, consistency, propagate_step, run_propagation, AttentionHead, CategoryGraph, PrototypeState,
    SpaceSetup,
};
use ipn_core::training::{EpochLog, Trainer};
use ipn_core::{
    evaluate, fit, harmonic, hit_at_k, load_checkpoint, load_dataset, per_class_accuracy, save_checkpoint,
    save_dataset, AblationVariant, Checkpoint, Dataset, Model, Protocol,
};

type Check = Result<(bool, String), String>;

const UNSEEN_FLOOR: f64 = 0.40;
const HARMONIC_FLOOR: f64 = 0.40;
const SEEDS: u64 = 5;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn report(id: u32, name: &str, started: Instant, outcome: Check) -> bool {
    let secs = started.elapsed().as_secs_f64();
    let (pass, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
    println!(
        "[{}] criterion {id} {name}: {detail} ({secs:.1} s)",
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

// ---------------------------------------------------------------- 1

fn gradient_oracle() -> Check {
    let started = Instant::now();
    let (ds, hp, ep) = micro_episode(0).map_err(err)?;
    let shape_ok = hp.ways == 5 && hp.shots == 1 && hp.query_per_class == 2 && hp.d == 8 && hp.steps == 2;
    let rep = check_episode(&ds, &hp, AblationVariant::Full, &ep, STEP, None).map_err(err)?;
    let groups: Vec<&str> = rep.groups.iter().map(|g| g.group.as_str()).collect();
    let expected = ["W", "experts", "h_v", "h_s", "W1", "W2", "b1", "w", "b"];
    let elapsed = started.elapsed();
    let pass = shape_ok
        && groups == expected
        && rep.passes(TOLERANCE)
        && elapsed <= Duration::from_secs(60);
    let worst = rep
        .groups
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .map(|g| g.group.clone())
        .unwrap_or_default();
    Ok((
        pass,
        format!(
            "max rel err {:.2e} (worst group {worst}) over groups {groups:?}, tolerance {TOLERANCE:.0e}",
            rep.max_rel_error()
        ),
    ))
}

// ---------------------------------------------------------------- 2

fn metric_fidelity() -> Check {
    let h1 = harmonic(0.792, 0.675);
    let h2 = harmonic(0.738, 0.602);
    let mut pass = (h1 - 0.729).abs() <= 5e-4 && (h2 - 0.663).abs() <= 5e-4;

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cases = 200;
    let mut mismatches = 0;
    for _ in 0..cases {
        let n_classes = rng.gen_range(2..=6);
        let n = rng.gen_range(1..=40);
        let labels: Vec<ClassId> = (0..n).map(|_| rng.gen_range(0..n_classes)).collect();
        let preds: Vec<ClassId> = (0..n).map(|_| rng.gen_range(0..n_classes)).collect();
        let mut present: Vec<ClassId> = labels.clone();
        present.sort_unstable();
        present.dedup();
        let targets: Vec<ClassId> = present.iter().copied().filter(|_| rng.gen_bool(0.7)).collect();
        let targets = if targets.is_empty() { vec![present[0]] } else { targets };

        // hand count, class by class
        let mut total = 0.0;
        for &c in &targets {
            let mut hit = 0usize;
            let mut seen = 0usize;
            for i in 0..n {
                if labels[i] == c {
                    seen += 1;
                    if preds[i] == c {
                        hit += 1;
                    }
                }
            }
            total += hit as f64 / seen as f64;
        }
        let expected = total / targets.len() as f64;
        if per_class_accuracy(&preds, &labels, &targets).map_err(err)? != expected {
            mismatches += 1;
        }
    }
    pass &= mismatches == 0;
    Ok((
        pass,
        format!("H(0.792,0.675)={h1:.5}, H(0.738,0.602)={h2:.5}, per-class accuracy {mismatches}/{cases} mismatches"),
    ))
}

// ---------------------------------------------------------------- 3

fn int_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: i32) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..=bound) as f64)
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal))
}

/// All-pairs thresholding with plain loops.
fn oracle_graph(p: &Array2<f64>, w: &Array2<f64>, eps: f64) -> Vec<Vec<usize>> {
    let (n, d) = p.dim();
    let h: Vec<Vec<f64>> = (0..n)
        .map(|y| (0..d).map(|k| (0..d).map(|j| w[[k, j]] * p[[y, j]]).sum()).collect())
        .collect();
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum();
        let nb: f64 = b.iter().map(|x| x * x).sum();
        dot / (na.sqrt() * nb.sqrt() + COSINE_GUARD)
    };
    (0..n)
        .map(|y| (0..n).filter(|&z| z == y || cos(&h[y], &h[z]) >= eps).collect())
        .collect()
}

#[derive(Default)]
struct InvariantStats {
    row_sum_dev: f64,
    off_graph_mass: f64,
    graph_mismatches: usize,
    fixed_point_dev: f64,
    min_kl: f64,
    tied_kl: f64,
}

fn propagation_episode(rng: &mut ChaCha8Rng, st: &mut InvariantStats) -> Result<(), String> {
    let n = rng.gen_range(2..=10);
    let d = rng.gen_range(2..=16);
    let gamma = rng.gen_range(1.0..20.0);
    let classes: Vec<ClassId> = (0..n).map(|i| i * 3 + 1).collect();

    // graph generation and attention, on integer inputs so every dot
    // product is exact
    let eps = rng.gen_range(-1.0..1.0);
    let p0 = int_matrix(rng, n, d, 3);
    let w0 = int_matrix(rng, d, d, 2);
    let mut tape = Tape::<f64>::new();
    let p = tape.leaf(p0.clone());
    let head = AttentionHead {
        transform: tape.leaf(w0.clone()),
        gamma,
    };
    let g = build_graph(&tape, p, &head, eps, &classes).map_err(err)?;
    if g.neighbors != oracle_graph(&p0, &w0, eps) {
        st.graph_mismatches += 1;
    }
    let att = head.attention_weights(&mut tape, p, &g).map_err(err)?;
    let mask = g.mask();
    for (y, row) in tape.value(att).rows().into_iter().enumerate() {
        st.row_sum_dev = st.row_sum_dev.max((row.sum() - 1.0).abs());
        for (z, &a) in row.iter().enumerate() {
            if !mask[[y, z]] {
                st.off_graph_mass = st.off_graph_mass.max(a.abs());
            }
        }
    }

    // one class cut off from every other
    let iso = rng.gen_range(0..n);
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if a != iso && b != iso && rng.gen_bool(0.5) {
                edges.push((classes[a], classes[b]));
            }
        }
    }
    let graph = CategoryGraph::from_edges(&classes, &edges);
    let v0 = normal_matrix(rng, n, d);
    let s0 = normal_matrix(rng, n, d);
    let wv = normal_matrix(rng, d, d);
    let ws = normal_matrix(rng, d, d);
    let mut t = Tape::<f64>::new();
    let hv = AttentionHead { transform: t.leaf(wv.clone()), gamma };
    let hs = AttentionHead { transform: t.leaf(ws), gamma };
    let setup_v = SpaceSetup { head: hv, graph: &graph, propagate: true };
    let setup_s = SpaceSetup { head: hs, graph: &graph, propagate: true };
    let state = PrototypeState {
        classes: classes.clone(),
        visual: t.leaf(v0.clone()),
        semantic: t.leaf(s0.clone()),
        step: 0,
    };
    let out = propagate_step(&mut t, &state, &setup_v, &setup_s).map_err(err)?;
    let dv = (&t.value(out.state.visual).row(iso) - &v0.row(iso)).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
    let ds = (&t.value(out.state.semantic).row(iso) - &s0.row(iso)).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
    st.fixed_point_dev = st.fixed_point_dev.max(dv).max(ds);

    let tau = rng.gen_range(1..=3);
    let trace = run_propagation(&mut t, state, &setup_v, &setup_s, tau).map_err(err)?;
    let kl = consistency(&mut t, &trace).map_err(err)?.ok_or("no consistency term")?;
    st.min_kl = st.min_kl.min(t.scalar(kl));

    // tied heads, identical starting prototypes
    let mut t2 = Tape::<f64>::new();
    let shared = AttentionHead { transform: t2.leaf(wv), gamma };
    let setup = SpaceSetup { head: shared, graph: &graph, propagate: true };
    let state = PrototypeState {
        classes: classes.clone(),
        visual: t2.leaf(v0.clone()),
        semantic: t2.leaf(v0),
        step: 0,
    };
    let trace = run_propagation(&mut t2, state, &setup, &setup, tau).map_err(err)?;
    let kl = consistency(&mut t2, &trace).map_err(err)?.ok_or("no consistency term")?;
    st.tied_kl = st.tied_kl.max(t2.scalar(kl).abs());
    Ok(())
}

fn propagation_invariants() -> Check {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let episodes = 1000;
    let mut st = InvariantStats {
        min_kl: f64::INFINITY,
        ..Default::default()
    };
    for _ in 0..episodes {
        propagation_episode(&mut rng, &mut st)?;
    }
    let pass = st.row_sum_dev <= 1e-6
        && st.off_graph_mass == 0.0
        && st.graph_mismatches == 0
        && st.fixed_point_dev <= 1e-6
        && st.min_kl >= -1e-9
        && st.tied_kl <= 1e-9
        && started.elapsed() <= Duration::from_secs(120);
    Ok((
        pass,
        format!(
            "{episodes} episodes: row-sum dev {:.1e}, off-graph mass {:.1e}, graph mismatches {}, \
             isolated drift {:.1e}, min KL {:.1e}, tied KL {:.1e}",
            st.row_sum_dev, st.off_graph_mass, st.graph_mismatches, st.fixed_point_dev, st.min_kl, st.tied_kl
        ),
    ))
}

// ---------------------------------------------------------------- 4-7

struct FullRun {
    model: Model,
    log: Vec<EpochLog>,
    score: RunScore,
    elapsed: Duration,
}

struct Benchmark {
    cfg: RunConfig,
    ds: Dataset,
    full: Vec<FullRun>,
    others: BTreeMap<&'static str, Vec<RunScore>>,
}

fn desk_config() -> Result<RunConfig, String> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json");
    RunConfig::load(path).map_err(err)
}

fn train_full(ds: &Dataset, cfg: &RunConfig, seed: u64) -> Result<FullRun, String> {
    let started = Instant::now();
    let mut hp = cfg.hyperparams.clone();
    hp.seed = seed;
    let out = fit(ds, &hp, AblationVariant::Full, &mut |_, _| Ok(())).map_err(err)?;
    let r = evaluate(&out.model, ds, Protocol::Gzsl).map_err(err)?;
    Ok(FullRun {
        score: RunScore {
            seed,
            seen: r.acc_seen.unwrap_or(0.0),
            unseen: r.acc_unseen,
            harmonic: r.harmonic.unwrap_or(0.0),
        },
        model: out.model,
        log: out.log,
        elapsed: started.elapsed(),
    })
}

fn benchmark() -> Result<Benchmark, String> {
    let cfg = desk_config()?;
    let ds = cfg.dataset().map_err(err)?;
    let mut full = Vec::new();
    for seed in 0..SEEDS {
        full.push(train_full(&ds, &cfg, cfg.hyperparams.seed + seed)?);
    }
    let mut others = BTreeMap::new();
    for v in [
        AblationVariant::NoConsistency,
        AblationVariant::NoPropagation,
        AblationVariant::VisualPropOnly,
        AblationVariant::SemanticPropOnly,
    ] {
        let mut runs = Vec::new();
        for seed in 0..SEEDS {
            let mut hp = cfg.hyperparams.clone();
            hp.seed = cfg.hyperparams.seed + seed;
            runs.push(train_and_score(&ds, &hp, v).map_err(err)?);
        }
        others.insert(v.name(), runs);
    }
    Ok(Benchmark { cfg, ds, full, others })
}

fn synthetic_learning(b: &Benchmark) -> Check {
    let spec = b.cfg.synthetic.as_ref().ok_or("desk config has no synthetic spec")?;
    let spec_ok = spec.n_seen == 20
        && spec.n_unseen == 5
        && spec.d_a == 16
        && spec.d_v == 64
        && spec.samples_per_class == 30
        && spec.noise_sigma == 0.1
        && spec.topology == Topology::Mixed
        && spec.seed == 0
        && b.cfg.hyperparams.epochs == 200
        && b.cfg.hyperparams.lr == 1e-3;
    let u: Vec<f64> = b.full.iter().map(|r| r.score.unseen).collect();
    let h: Vec<f64> = b.full.iter().map(|r| r.score.harmonic).collect();
    let (mu, su) = mean_std(&u);
    let (mh, sh) = mean_std(&h);
    let slowest = b.full.iter().map(|r| r.elapsed).max().unwrap_or_default();
    let pass = spec_ok
        && mu >= UNSEEN_FLOOR
        && mh >= HARMONIC_FLOOR
        && slowest <= Duration::from_secs(300);
    Ok((
        pass,
        format!(
            "{SEEDS} seeds: unseen {mu:.3}±{su:.3} (≥ {UNSEEN_FLOOR}), H {mh:.3}±{sh:.3} (≥ {HARMONIC_FLOOR}), \
             slowest seed {:.1} s",
            slowest.as_secs_f64()
        ),
    ))
}

/// `a ≥ b`, where a shortfall within one standard error of the difference
/// of the two means counts as a tie.
fn at_least(a: &[f64], b: &[f64]) -> (bool, String) {
    let (ma, sa) = mean_std(a);
    let (mb, sb) = mean_std(b);
    let se = (sa * sa / a.len() as f64 + sb * sb / b.len() as f64).sqrt();
    (ma >= mb - se, format!("{ma:.3} vs {mb:.3} (se {se:.3})"))
}

fn ablation_direction(b: &Benchmark) -> Check {
    let full_h: Vec<f64> = b.full.iter().map(|r| r.score.harmonic).collect();
    let full_u: Vec<f64> = b.full.iter().map(|r| r.score.unseen).collect();
    let h_of = |v: &str| b.others[v].iter().map(|r| r.harmonic).collect::<Vec<_>>();
    let u_of = |v: &str| b.others[v].iter().map(|r| r.unseen).collect::<Vec<_>>();
    let checks = [
        ("H full ≥ no-consistency", at_least(&full_h, &h_of("no-consistency"))),
        ("H full ≥ no-propagation", at_least(&full_h, &h_of("no-propagation"))),
        ("U full ≥ visual-prop-only", at_least(&full_u, &u_of("visual-prop-only"))),
        ("U full ≥ semantic-prop-only", at_least(&full_u, &u_of("semantic-prop-only"))),
    ];
    let pass = checks.iter().all(|(_, (ok, _))| *ok);
    let detail = checks
        .iter()
        .map(|(name, (ok, s))| format!("{name}: {s} {}", if *ok { "ok" } else { "NO" }))
        .collect::<Vec<_>>()
        .join("; ");
    Ok((pass, detail))
}

fn protocol_consistency(b: &Benchmark) -> Check {
    let unseen = &b.ds.split().unseen;
    let ks: Vec<usize> = (1..=unseen.len()).collect();
    let mut pass = true;
    let mut worst_gap = f64::INFINITY;
    let mut worst_hit1 = 0.0f64;
    for run in &b.full {
        let zsl = evaluate(&run.model, &b.ds, Protocol::Zsl).map_err(err)?;
        let gzsl = evaluate(&run.model, &b.ds, Protocol::Gzsl).map_err(err)?;
        worst_gap = worst_gap.min(zsl.acc_unseen - gzsl.acc_unseen);

        let protos = test_prototypes(&run.model, &b.ds, Protocol::Zsl).map_err(err)?;
        let samples = &b.ds.split().test_unseen;
        let scores = score_samples(&run.model, &b.ds, &protos, samples).map_err(err)?;
        let mut correct = 0usize;
        for (row, &i) in scores.rows().into_iter().zip(samples) {
            if classify(&row.to_vec(), &protos.classes, unseen).map_err(err)? == b.ds.label(i) {
                correct += 1;
            }
        }
        let micro = correct as f64 / samples.len() as f64;
        let hits = hit_at_k(&run.model, &b.ds, &ks).map_err(err)?;
        worst_hit1 = worst_hit1.max((hits[&1] - micro).abs());
        let monotone = ks.windows(2).all(|w| hits[&w[0]] <= hits[&w[1]]);
        pass &= monotone;
    }
    pass &= worst_gap >= 0.0 && worst_hit1 <= 1e-9;
    Ok((
        pass,
        format!(
            "{} checkpoints: min(ZSL U − GZSL U) {worst_gap:.3}, max |hit@1 − ZSL micro acc| {worst_hit1:.1e}, \
             hit@k monotone for k ≤ {}: {pass}",
            b.full.len(),
            unseen.len()
        ),
    ))
}

fn bits(a: &Array2<f32>) -> Vec<u32> {
    a.iter().map(|x| x.to_bits()).collect()
}

fn determinism(b: &Benchmark) -> Check {
    let first = &b.full[0];
    let again = train_full(&b.ds, &b.cfg, first.score.seed)?;
    let log_dev = first
        .log
        .iter()
        .zip(&again.log)
        .flat_map(|(x, y)| [(x.ce - y.ce).abs(), (x.consistency - y.consistency).abs(), (x.total - y.total).abs()])
        .fold(0.0, f64::max);
    let logs_ok = first.log.len() == again.log.len() && log_dev <= 1e-6;

    let dir = tempfile::tempdir().map_err(err)?;
    save_dataset(&b.ds, dir.path().join("data")).map_err(err)?;
    let back = load_dataset(dir.path().join("data")).map_err(err)?;
    let data_ok = bits(back.features()) == bits(b.ds.features())
        && bits(back.attributes()) == bits(b.ds.attributes())
        && back.labels() == b.ds.labels()
        && back.class_names() == b.ds.class_names()
        && back.split() == b.ds.split()
        && back.edges() == b.ds.edges()
        && back.synthetic_spec() == b.ds.synthetic_spec();

    let mut trainer = Trainer::new(&b.ds, &b.cfg.hyperparams, AblationVariant::Full).map_err(err)?;
    for _ in 0..3 {
        trainer.run_epoch().map_err(err)?;
    }
    let ck = Checkpoint {
        model: trainer.model(),
        epoch: trainer.epoch(),
        optimizer: Some(trainer.optimizer().clone()),
    };
    save_checkpoint(&ck, dir.path().join("ck")).map_err(err)?;
    let loaded = load_checkpoint(dir.path().join("ck")).map_err(err)?;
    let tensors_ok = ck
        .model
        .params
        .tensors()
        .iter()
        .zip(loaded.model.params.tensors())
        .all(|(a, b)| bits(&a.value) == bits(&b.value));
    let opt_ok = match (&ck.optimizer, &loaded.optimizer) {
        (Some(a), Some(b)) => {
            a.step == b.step
                && a.m.iter().zip(&b.m).all(|(x, y)| bits(x) == bits(y))
                && a.v.iter().zip(&b.v).all(|(x, y)| bits(x) == bits(y))
        }
        _ => false,
    };
    let ck_ok = tensors_ok
        && opt_ok
        && loaded.epoch == ck.epoch
        && loaded.model.hp == ck.model.hp
        && loaded.model.variant == ck.model.variant;

    Ok((
        logs_ok && data_ok && ck_ok,
        format!(
            "rerun log max dev {log_dev:.1e} over {} epochs, dataset round-trip exact: {data_ok}, \
             checkpoint round-trip exact: {ck_ok}",
            first.log.len()
        ),
    ))
}

fn main() -> ExitCode {
    let mut passed = Vec::new();

    let t = Instant::now();
    passed.push(report(1, "gradient oracle", t, gradient_oracle()));
    let t = Instant::now();
    passed.push(report(2, "metric fidelity", t, metric_fidelity()));
    let t = Instant::now();
    passed.push(report(3, "propagation invariants", t, propagation_invariants()));

    let t = Instant::now();
    match benchmark() {
        Ok(b) => {
            println!(
                "       trained {} full and {} ablation runs in {:.1} s",
                b.full.len(),
                b.others.values().map(Vec::len).sum::<usize>(),
                t.elapsed().as_secs_f64()
            );
            let t = Instant::now();
            passed.push(report(4, "synthetic GZSL learning", t, synthetic_learning(&b)));
            let t = Instant::now();
            passed.push(report(5, "ablation direction", t, ablation_direction(&b)));
            let t = Instant::now();
            passed.push(report(6, "protocol consistency", t, protocol_consistency(&b)));
            let t = Instant::now();
            passed.push(report(7, "determinism and round-trips", t, determinism(&b)));
        }
        Err(e) => {
            for (id, name) in [
                (4, "synthetic GZSL learning"),
                (5, "ablation direction"),
                (6, "protocol consistency"),
                (7, "determinism and round-trips"),
            ] {
                passed.push(report(id, name, t, Err(format!("benchmark training failed: {e}"))));
            }
        }
    }

    let failed = passed.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", passed.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
