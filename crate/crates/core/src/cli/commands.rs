use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use super::config::{write_provenance, RunConfig};
use super::gradcheck::{check_episode, micro_episode};
use crate::checkpoint::{check_compatible, load_checkpoint, save_checkpoint, Checkpoint};
use crate::datasets::{generate_synthetic, save_dataset, Dataset, SyntheticSpec};
use crate::diffcore::gradcheck::GradCheckReport;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_with, export_prototypes, hit_at_k_with, test_prototypes, EvalReport, Protocol};
use crate::training::{AblationVariant, EpochLog, Hyperparams, Model, Trainer};

/// Parameters accepted by `sweep`.
pub const SWEEP_PARAMS: [&str; 8] = [
    "gamma",
    "edge_threshold",
    "steps",
    "ways",
    "shots",
    "weight_decay",
    "consistency_weight",
    "init_neighbors",
];

/// Threshold values swept when none are given.
pub const THRESHOLD_PRESETS: [&str; 3] = ["cos30", "cos40", "cos50"];

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

pub fn cmd_generate(spec: &SyntheticSpec, out: &Path) -> Result<Dataset> {
    let ds = generate_synthetic(spec)?;
    save_dataset(&ds, out)?;
    Ok(ds)
}

/// One-line description of a dataset's size and split.
pub fn dataset_summary(ds: &Dataset) -> String {
    let s = ds.split();
    format!(
        "classes {} (seen {}, unseen {}), samples {} (train {}, test seen {}, test unseen {}), feature width {}, attribute width {}",
        ds.n_classes(),
        s.seen.len(),
        s.unseen.len(),
        ds.n_samples(),
        s.train.len(),
        s.test_seen.len(),
        s.test_unseen.len(),
        ds.d_feat(),
        ds.d_attr()
    )
}

#[derive(Serialize)]
struct EvalRecord<'a> {
    epoch: usize,
    #[serde(flatten)]
    report: &'a EvalReport,
}

/// Trains and writes `checkpoint/`, `train_log.jsonl` and `run.json` under
/// the output directory. With `resume`, continues from that checkpoint and
/// appends to the log.
pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<(Model, Vec<EpochLog>)> {
    cfg.validate()?;
    let ds = cfg.dataset()?;
    let out = cfg.prepare_output()?;
    write_provenance(cfg, "train", out)?;
    let log_path = out.join("train_log.jsonl");
    let eval_path = out.join("eval_log.jsonl");
    let mut trainer = match resume {
        None => {
            for p in [&log_path, &eval_path] {
                if p.exists() {
                    fs::remove_file(p).map_err(|e| Error::io(p, e))?;
                }
            }
            Trainer::new(&ds, &cfg.hyperparams, cfg.variant)?
        }
        Some(dir) => {
            let ck = load_checkpoint(dir)?;
            check_compatible(&ck.model, &ds)?;
            let opt = ck.optimizer.ok_or_else(|| {
                Error::Config(format!("checkpoint {} has no optimizer state to resume from", dir.display()))
            })?;
            Trainer::resume(&ds, &cfg.hyperparams, cfg.variant, ck.model.params, opt, ck.epoch)?
        }
    };
    let mut log = Vec::new();
    while !trainer.is_done() {
        let rec = trainer.run_epoch()?;
        append_line(&log_path, &serde_json::to_string(&rec)?)?;
        if cfg.eval_every > 0 && (rec.epoch + 1) % cfg.eval_every == 0 {
            let model = trainer.model();
            let protos = test_prototypes(&model, &ds, Protocol::Gzsl)?;
            let report = evaluate_with(&model, &ds, &protos)?;
            let line = serde_json::to_string(&EvalRecord {
                epoch: rec.epoch,
                report: &report,
            })?;
            append_line(&eval_path, &line)?;
        }
        log.push(rec);
    }
    let ck = Checkpoint {
        model: trainer.model(),
        epoch: trainer.epoch(),
        optimizer: Some(trainer.optimizer().clone()),
    };
    save_checkpoint(&ck, out.join("checkpoint"))?;
    Ok((ck.model, log))
}

/// Reports for every configured protocol; hit@k, when configured, is
/// attached to the ZSL report.
pub fn evaluate_model(cfg: &RunConfig, model: &Model, ds: &Dataset, export_dir: Option<&Path>) -> Result<Vec<EvalReport>> {
    check_compatible(model, ds)?;
    let mut protocols = cfg.protocols.clone();
    if !cfg.hit_at_k.is_empty() && !protocols.contains(&Protocol::Zsl) {
        protocols.push(Protocol::Zsl);
    }
    let mut reports = Vec::new();
    for protocol in protocols {
        let protos = test_prototypes(model, ds, protocol)?;
        let mut report = evaluate_with(model, ds, &protos)?;
        if protocol == Protocol::Zsl && !cfg.hit_at_k.is_empty() {
            let mut ks = cfg.hit_at_k.clone();
            ks.sort_unstable();
            ks.dedup();
            report.hit_at_k = Some(hit_at_k_with(model, ds, &protos, &ks)?);
        }
        if let Some(dir) = export_dir {
            export_prototypes(&protos.snapshot, ds.class_names(), dir.join(format!("prototypes_{protocol}.csv")))?;
        }
        reports.push(report);
    }
    Ok(reports)
}

/// Evaluates a checkpoint and writes `eval_<protocol>.json` files.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<Vec<EvalReport>> {
    cfg.validate()?;
    let ds = cfg.dataset()?;
    let out = cfg.prepare_output()?;
    let ck = load_checkpoint(checkpoint)?;
    let export = cfg.export_prototypes.then_some(out);
    let reports = evaluate_model(cfg, &ck.model, &ds, export)?;
    for r in &reports {
        write_file(
            &out.join(format!("eval_{}.json", r.protocol)),
            &(serde_json::to_string_pretty(r)? + "\n"),
        )?;
    }
    Ok(reports)
}

/// Seen, unseen and harmonic GZSL accuracy of one training run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunScore {
    pub seed: u64,
    pub seen: f64,
    pub unseen: f64,
    pub harmonic: f64,
}

/// Trains with `hp` and evaluates under GZSL.
pub fn train_and_score(ds: &Dataset, hp: &Hyperparams, variant: AblationVariant) -> Result<RunScore> {
    let mut trainer = Trainer::new(ds, hp, variant)?;
    while !trainer.is_done() {
        trainer.run_epoch()?;
    }
    let model = trainer.into_model();
    let protos = test_prototypes(&model, ds, Protocol::Gzsl)?;
    let r = evaluate_with(&model, ds, &protos)?;
    Ok(RunScore {
        seed: hp.seed,
        seen: r.acc_seen.unwrap_or(0.0),
        unseen: r.acc_unseen,
        harmonic: r.harmonic.unwrap_or(0.0),
    })
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub group: &'static str,
    pub variant: AblationVariant,
    pub runs: Vec<RunScore>,
}

impl AblationRow {
    pub fn seen(&self) -> (f64, f64) {
        mean_std(&self.runs.iter().map(|r| r.seen).collect::<Vec<_>>())
    }

    pub fn unseen(&self) -> (f64, f64) {
        mean_std(&self.runs.iter().map(|r| r.unseen).collect::<Vec<_>>())
    }

    pub fn harmonic(&self) -> (f64, f64) {
        mean_std(&self.runs.iter().map(|r| r.harmonic).collect::<Vec<_>>())
    }
}

fn seeds(cfg: &RunConfig) -> Vec<u64> {
    (0..cfg.seeds as u64).map(|i| cfg.hyperparams.seed + i).collect()
}

/// Trains and evaluates each variant for every seed. Rows come in the
/// canonical variant order regardless of the requested order.
pub fn run_ablation(cfg: &RunConfig, ds: &Dataset) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let variants: Vec<AblationVariant> = if cfg.variants.is_empty() {
        AblationVariant::ALL.to_vec()
    } else {
        AblationVariant::ALL
            .into_iter()
            .filter(|v| cfg.variants.contains(v))
            .collect()
    };
    let jobs: Vec<(AblationVariant, u64)> = variants
        .iter()
        .flat_map(|&v| seeds(cfg).into_iter().map(move |s| (v, s)))
        .collect();
    let scores: Vec<RunScore> = jobs
        .par_iter()
        .map(|&(v, seed)| {
            let hp = Hyperparams {
                seed,
                ..cfg.hyperparams.clone()
            };
            train_and_score(ds, &hp, v)
        })
        .collect::<Result<_>>()?;
    Ok(variants
        .iter()
        .map(|&v| AblationRow {
            group: v.group(),
            variant: v,
            runs: jobs
                .iter()
                .zip(&scores)
                .filter(|((jv, _), _)| *jv == v)
                .map(|(_, s)| s.clone())
                .collect(),
        })
        .collect())
}

pub fn ablation_csv(rows: &[AblationRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "group", "variant", "seeds", "seen_mean", "seen_std", "unseen_mean", "unseen_std", "h_mean", "h_std",
    ])?;
    for r in rows {
        let (s, ss) = r.seen();
        let (u, us) = r.unseen();
        let (h, hs) = r.harmonic();
        let seeds: Vec<String> = r.runs.iter().map(|x| x.seed.to_string()).collect();
        w.write_record([
            r.group.to_string(),
            r.variant.to_string(),
            seeds.join(" "),
            format!("{s:.6}"),
            format!("{ss:.6}"),
            format!("{u:.6}"),
            format!("{us:.6}"),
            format!("{h:.6}"),
            format!("{hs:.6}"),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| Error::Contract(e.to_string()))?).expect("utf-8"))
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    let ds = cfg.dataset()?;
    let rows = run_ablation(cfg, &ds)?;
    let out = cfg.prepare_output()?;
    write_provenance(cfg, "ablate", out)?;
    write_file(&out.join("ablation.csv"), &ablation_csv(&rows)?)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub param: String,
    pub value: String,
    pub score: RunScore,
}

pub fn run_sweep(cfg: &RunConfig, ds: &Dataset, param: &str, values: &[String]) -> Result<Vec<SweepRow>> {
    if !SWEEP_PARAMS.contains(&param) {
        return Err(Error::Config(format!(
            "cannot sweep `{param}`; valid parameters: {}",
            SWEEP_PARAMS.join(", ")
        )));
    }
    let values: Vec<String> = if values.is_empty() && param == "edge_threshold" {
        THRESHOLD_PRESETS.iter().map(|s| s.to_string()).collect()
    } else if values.is_empty() {
        return Err(Error::Config(format!("no values given for `{param}`")));
    } else {
        values.to_vec()
    };
    let mut jobs = Vec::new();
    for v in &values {
        for seed in seeds(cfg) {
            let mut hp = cfg.hyperparams.clone();
            hp.set(param, v)?;
            hp.seed = seed;
            hp.validate()?;
            jobs.push((v.clone(), hp));
        }
    }
    jobs.par_iter()
        .map(|(v, hp)| {
            Ok(SweepRow {
                param: param.to_string(),
                value: v.clone(),
                score: train_and_score(ds, hp, cfg.variant)?,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["param", "value", "seed", "seen", "unseen", "harmonic"])?;
    for r in rows {
        w.write_record([
            r.param.clone(),
            r.value.clone(),
            r.score.seed.to_string(),
            format!("{:.6}", r.score.seen),
            format!("{:.6}", r.score.unseen),
            format!("{:.6}", r.score.harmonic),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| Error::Contract(e.to_string()))?).expect("utf-8"))
}

pub fn cmd_sweep(cfg: &RunConfig, param: &str, values: &[String]) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let ds = cfg.dataset()?;
    let rows = run_sweep(cfg, &ds, param, values)?;
    let out = cfg.prepare_output()?;
    write_provenance(cfg, "sweep", out)?;
    write_file(&out.join(format!("sweep_{param}.csv")), &sweep_csv(&rows)?)?;
    Ok(rows)
}

/// Gradient check of the fixed micro-episode for the configured seed and
/// variant.
pub fn cmd_gradcheck(cfg: &RunConfig, step: f64, corrupt: Option<&str>) -> Result<GradCheckReport> {
    let (ds, hp, ep) = micro_episode(cfg.hyperparams.seed)?;
    check_episode(&ds, &hp, cfg.variant, &ep, step, corrupt)
}
