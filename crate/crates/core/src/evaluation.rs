//! Test-time protocols and metrics.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::classifier::{classify, RelationScorer};
use crate::datasets::{ClassId, Dataset};
use crate::diffcore::{Tape, Var};
use crate::error::{Error, Result};
use crate::propagation::TraceSnapshot;
use crate::prototypes::training_means;
use crate::training::{head_var, propagate, GraphPair, Model};

/// Test-time class set: unseen only, or seen and unseen together.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Zsl,
    Gzsl,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Zsl => "zsl",
            Protocol::Gzsl => "gzsl",
        })
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zsl" => Ok(Protocol::Zsl),
            "gzsl" => Ok(Protocol::Gzsl),
            _ => Err(Error::Config(format!("unknown protocol `{s}`; expected zsl or gzsl"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub acc_seen: Option<f64>,
    pub acc_unseen: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub harmonic: Option<f64>,
    pub per_class: BTreeMap<ClassId, f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hit_at_k: Option<BTreeMap<usize, f64>>,
}

/// Accuracy of each target class over its own samples.
pub fn class_accuracies(
    predictions: &[ClassId],
    labels: &[ClassId],
    target_classes: &[ClassId],
) -> Result<BTreeMap<ClassId, f64>> {
    if predictions.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut counts: BTreeMap<ClassId, (usize, usize)> =
        target_classes.iter().map(|&c| (c, (0, 0))).collect();
    for (&p, &y) in predictions.iter().zip(labels) {
        if let Some(e) = counts.get_mut(&y) {
            e.1 += 1;
            if p == y {
                e.0 += 1;
            }
        }
    }
    counts
        .into_iter()
        .map(|(c, (hit, n))| {
            if n == 0 {
                Err(Error::Contract(format!("class {c} has no test samples")))
            } else {
                Ok((c, hit as f64 / n as f64))
            }
        })
        .collect()
}

/// Mean over `target_classes` of the within-class accuracy.
pub fn per_class_accuracy(
    predictions: &[ClassId],
    labels: &[ClassId],
    target_classes: &[ClassId],
) -> Result<f64> {
    if target_classes.is_empty() {
        return Err(Error::Contract("no target classes".into()));
    }
    let acc = class_accuracies(predictions, labels, target_classes)?;
    Ok(acc.values().sum::<f64>() / acc.len() as f64)
}

/// `2·S·U / (S + U)`, zero when both are zero.
pub fn harmonic(acc_seen: f64, acc_unseen: f64) -> f64 {
    let s = acc_seen + acc_unseen;
    if s == 0.0 {
        0.0
    } else {
        2.0 * acc_seen * acc_unseen / s
    }
}

/// Prototypes of a protocol's class set after propagation.
#[derive(Clone, Debug)]
pub struct TestPrototypes {
    pub protocol: Protocol,
    /// Row order of every matrix below.
    pub classes: Vec<ClassId>,
    pub snapshot: TraceSnapshot<f32>,
    /// What the classifier scores against, one row per class.
    pub classifier_protos: Array2<f32>,
    pub graphs: GraphPair,
    /// For each unseen class, the seen classes mixed into its step-0
    /// visual prototype.
    pub unseen_neighbors: Vec<Vec<ClassId>>,
}

/// Seen visual prototypes from all training samples of each class, unseen
/// ones from their semantic neighbours, graphs regenerated over the
/// protocol's classes.
pub fn test_prototypes(model: &Model, ds: &Dataset, protocol: Protocol) -> Result<TestPrototypes> {
    let split = ds.split();
    if split.unseen.is_empty() {
        return Err(Error::Contract("dataset has no unseen classes".into()));
    }
    let hp = &model.hp;
    let wiring = model.wiring();
    let mut tape = Tape::<f32>::new();
    let bound = model.params.bind(&mut tape);
    let attrs = |tape: &mut Tape<f32>, classes: &[ClassId]| -> Var {
        tape.leaf(ds.attribute_rows(classes))
    };
    let seen_means = tape.leaf(training_means(ds, &split.seen)?);
    let visual_seen = bound.net.init_visual_seen(&mut tape, seen_means)?;
    let a_seen = attrs(&mut tape, &split.seen);
    let semantic_seen = bound.net.init_semantic(&mut tape, a_seen)?;
    let a_unseen = attrs(&mut tape, &split.unseen);
    let semantic_unseen = bound.net.init_semantic(&mut tape, a_unseen)?;
    let unseen = bound.net.init_visual_unseen(
        &mut tape,
        semantic_unseen,
        semantic_seen,
        seen_means,
        head_var(&bound, wiring.semantic_head),
        hp.gamma as f32,
        hp.init_neighbors,
    )?;
    let (classes, visual0, semantic0) = match protocol {
        Protocol::Zsl => (split.unseen.clone(), unseen.prototypes, semantic_unseen),
        Protocol::Gzsl => {
            let classes = split.seen.iter().chain(&split.unseen).copied().collect();
            let v = tape.concat_rows(visual_seen, unseen.prototypes)?;
            let s = tape.concat_rows(semantic_seen, semantic_unseen)?;
            (classes, v, s)
        }
    };
    let prop = propagate(
        &mut tape, &bound, hp, &wiring, &classes, visual0, semantic0, ds.edges(), None,
    )?;
    Ok(TestPrototypes {
        protocol,
        snapshot: prop.trace.snapshot(&tape),
        classifier_protos: tape.value(prop.classifier_protos).clone(),
        graphs: prop.graphs,
        unseen_neighbors: unseen
            .neighbors
            .iter()
            .map(|n| n.iter().map(|&j| split.seen[j]).collect())
            .collect(),
        classes,
    })
}

/// Relation scores of `samples` against every class in `protos`.
pub fn score_samples(model: &Model, ds: &Dataset, protos: &TestPrototypes, samples: &[usize]) -> Result<Array2<f32>> {
    let mut x = Array2::zeros((samples.len(), ds.d_feat()));
    for (r, &i) in samples.iter().enumerate() {
        x.row_mut(r).assign(&ds.feature(i));
    }
    RelationScorer::new(&model.params).score_matrix(x.view(), protos.classifier_protos.view())
}

fn predict(scores: &Array2<f32>, classes: &[ClassId]) -> Result<Vec<ClassId>> {
    scores
        .rows()
        .into_iter()
        .map(|r| classify(r.as_slice().expect("contiguous"), classes, classes))
        .collect()
}

/// Classifies every test sample of the protocol with the protocol's class
/// set as search space.
pub fn evaluate(model: &Model, ds: &Dataset, protocol: Protocol) -> Result<EvalReport> {
    let protos = test_prototypes(model, ds, protocol)?;
    evaluate_with(model, ds, &protos)
}

pub fn evaluate_with(model: &Model, ds: &Dataset, protos: &TestPrototypes) -> Result<EvalReport> {
    let split = ds.split();
    let run = |samples: &[usize], targets: &[ClassId]| -> Result<BTreeMap<ClassId, f64>> {
        let scores = score_samples(model, ds, protos, samples)?;
        let pred = predict(&scores, &protos.classes)?;
        let labels: Vec<ClassId> = samples.iter().map(|&i| ds.label(i)).collect();
        class_accuracies(&pred, &labels, targets)
    };
    let mean = |m: &BTreeMap<ClassId, f64>| m.values().sum::<f64>() / m.len() as f64;
    let unseen = run(&split.test_unseen, &split.unseen)?;
    let acc_unseen = mean(&unseen);
    match protos.protocol {
        Protocol::Zsl => Ok(EvalReport {
            protocol: Protocol::Zsl,
            acc_seen: None,
            acc_unseen,
            harmonic: None,
            per_class: unseen,
            hit_at_k: None,
        }),
        Protocol::Gzsl => {
            let mut per_class = run(&split.test_seen, &split.seen)?;
            let acc_seen = mean(&per_class);
            per_class.extend(unseen);
            Ok(EvalReport {
                protocol: Protocol::Gzsl,
                acc_seen: Some(acc_seen),
                acc_unseen,
                harmonic: Some(harmonic(acc_seen, acc_unseen)),
                per_class,
                hit_at_k: None,
            })
        }
    }
}

/// Fraction of unseen test samples whose class ranks in the top `k` of
/// the unseen classes, for each `k`. Ranking is by score, then class id.
pub fn hit_at_k(model: &Model, ds: &Dataset, ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    let protos = test_prototypes(model, ds, Protocol::Zsl)?;
    hit_at_k_with(model, ds, &protos, ks)
}

pub fn hit_at_k_with(
    model: &Model,
    ds: &Dataset,
    protos: &TestPrototypes,
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    let n_classes = protos.classes.len();
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > n_classes) {
        return Err(Error::Config(format!(
            "hit@{k} is undefined over {n_classes} classes"
        )));
    }
    let samples = &ds.split().test_unseen;
    if samples.is_empty() {
        return Err(Error::Contract("no unseen test samples".into()));
    }
    let scores = score_samples(model, ds, protos, samples)?;
    let mut ranks = Vec::with_capacity(samples.len());
    for (row, &i) in scores.rows().into_iter().zip(samples) {
        let y = ds.label(i);
        let col = protos
            .classes
            .iter()
            .position(|&c| c == y)
            .ok_or_else(|| Error::Contract(format!("class {y} is not a test class")))?;
        let s = row[col];
        let rank = row
            .iter()
            .zip(&protos.classes)
            .filter(|&(&v, &c)| v > s || (v == s && c < y))
            .count();
        ranks.push(rank);
    }
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = ranks.iter().filter(|&&r| r < k).count();
            (k, hits as f64 / ranks.len() as f64)
        })
        .collect())
}

/// Writes every prototype of every step as one CSV row:
/// `class_id,class_name,space,step,p0..p{d-1}`, sorted by class id.
pub fn export_prototypes(snapshot: &TraceSnapshot<f32>, class_names: &[String], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let d = snapshot.visual.first().map_or(0, |m| m.ncols());
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["class_id".to_string(), "class_name".into(), "space".into(), "step".into()];
    header.extend((0..d).map(|j| format!("p{j}")));
    w.write_record(&header)?;
    let mut order: Vec<usize> = (0..snapshot.classes.len()).collect();
    order.sort_by_key(|&r| snapshot.classes[r]);
    for r in order {
        let c = snapshot.classes[r];
        let name = class_names.get(c).map_or("", String::as_str);
        for (space, mats) in [("visual", &snapshot.visual), ("semantic", &snapshot.semantic)] {
            for (step, m) in mats.iter().enumerate() {
                let mut rec = vec![c.to_string(), name.to_string(), space.to_string(), step.to_string()];
                rec.extend(m.row(r).iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_class_examples() {
        assert_eq!(per_class_accuracy(&[0, 1, 1], &[0, 1, 1], &[0, 1]).unwrap(), 1.0);
        // class 0 fully right (3 samples), class 1 fully wrong (1 sample)
        assert_eq!(per_class_accuracy(&[0, 0, 0, 0], &[0, 0, 0, 1], &[0, 1]).unwrap(), 0.5);
        let pred = [0, 0, 0, 1, 1, 0];
        let lab = [0, 0, 0, 0, 1, 1];
        assert_eq!(per_class_accuracy(&pred, &lab, &[0, 1]).unwrap(), 0.625);
        assert!(matches!(per_class_accuracy(&[0], &[0], &[0, 3]), Err(Error::Contract(_))));
    }

    #[test]
    fn harmonic_examples() {
        assert!((harmonic(0.792, 0.675) - 0.729).abs() <= 0.0005);
        assert!((harmonic(0.738, 0.602) - 0.663).abs() <= 0.0005);
        assert_eq!(harmonic(0.0, 0.0), 0.0);
        assert!((harmonic(0.3, 0.3) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn protocol_parse() {
        assert_eq!("gzsl".parse::<Protocol>().unwrap(), Protocol::Gzsl);
        assert!("all".parse::<Protocol>().is_err());
    }
}
