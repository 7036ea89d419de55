use ndarray::Array2;

use super::{ClassifierInput, HeadChoice, Hyperparams, Reduction, Wiring};
use crate::datasets::{ClassId, Dataset, Episode};
use crate::diffcore::{Real, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ModelDims, ModelParams};
use crate::propagation::{
    build_graph, consistency, fuse, run_propagation, AttentionHead, CategoryGraph,
    PropagationTrace, PrototypeState, SpaceSetup,
};
use crate::prototypes::class_means;

/// Model dimensions implied by a dataset, settings and wiring.
pub fn model_dims(ds: &Dataset, hp: &Hyperparams, wiring: &Wiring) -> ModelDims {
    ModelDims {
        d_v: ds.d_feat(),
        d_a: ds.d_attr(),
        d: hp.d,
        d_h: hp.hidden_width(),
        experts: hp.experts,
        proto_width: wiring.proto_width(hp.d),
    }
}

/// Dense inputs of one episode, gathered from the dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeInputs<T> {
    pub classes: Vec<ClassId>,
    /// Mean support feature per class.
    pub support_means: Array2<T>,
    pub attributes: Array2<T>,
    pub queries: Array2<T>,
    /// Row in `classes` of each query.
    pub targets: Vec<usize>,
}

impl<T: Real> EpisodeInputs<T> {
    pub fn gather(ds: &Dataset, ep: &Episode) -> Result<Self> {
        let groups: Vec<&[usize]> = (0..ep.classes.len()).map(|i| ep.support_of(i)).collect();
        let support_means = class_means(ds, &groups)?;
        let attributes = ds.attribute_rows(&ep.classes).mapv(|v| T::of(v as f64));
        let mut queries = Array2::zeros((ep.query.len(), ds.d_feat()));
        for (r, &i) in ep.query.iter().enumerate() {
            queries.row_mut(r).assign(&ds.feature(i).mapv(|v| T::of(v as f64)));
        }
        Ok(EpisodeInputs {
            classes: ep.classes.clone(),
            support_means,
            attributes,
            queries,
            targets: ep.query_targets(),
        })
    }
}

/// Category graphs of the two spaces.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphPair {
    pub visual: CategoryGraph,
    pub semantic: CategoryGraph,
}

pub(crate) fn head_var(bound: &BoundParams, choice: HeadChoice) -> Var {
    match choice {
        HeadChoice::Visual => bound.head_v,
        HeadChoice::Semantic => bound.head_s,
    }
}

/// Prototypes after propagation, and what the classifier consumes.
#[derive(Clone, Debug)]
pub struct Propagated {
    pub graphs: GraphPair,
    pub trace: PropagationTrace,
    pub classifier_protos: Var,
}

/// Graphs (generated from step-0 prototypes unless `edges` or `graphs`
/// are given), `τ` propagation steps and the classifier input.
#[allow(clippy::too_many_arguments)]
pub fn propagate<T: Real>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    hp: &Hyperparams,
    wiring: &Wiring,
    classes: &[ClassId],
    visual0: Var,
    semantic0: Var,
    edges: Option<&[(ClassId, ClassId)]>,
    graphs: Option<&GraphPair>,
) -> Result<Propagated> {
    let gamma = T::of(hp.gamma);
    let head_v = AttentionHead {
        transform: head_var(bound, wiring.visual_head),
        gamma,
    };
    let head_s = AttentionHead {
        transform: head_var(bound, wiring.semantic_head),
        gamma,
    };
    let graphs = match (graphs, edges) {
        (Some(g), _) => g.clone(),
        (None, Some(e)) => {
            let g = CategoryGraph::from_edges(classes, e);
            GraphPair {
                visual: g.clone(),
                semantic: g,
            }
        }
        (None, None) => GraphPair {
            visual: build_graph(tape, visual0, &head_v, hp.edge_threshold, classes)?,
            semantic: build_graph(tape, semantic0, &head_s, hp.edge_threshold, classes)?,
        },
    };
    let state = PrototypeState {
        classes: classes.to_vec(),
        visual: visual0,
        semantic: semantic0,
        step: 0,
    };
    let vs = SpaceSetup {
        head: head_v,
        graph: &graphs.visual,
        propagate: wiring.propagate_visual,
    };
    let ss = SpaceSetup {
        head: head_s,
        graph: &graphs.semantic,
        propagate: wiring.propagate_semantic,
    };
    let trace = run_propagation(tape, state, &vs, &ss, wiring.steps)?;
    let classifier_protos = match wiring.classifier_input {
        ClassifierInput::Fused => fuse(tape, &trace)?,
        ClassifierInput::Visual => trace.last().visual,
        ClassifierInput::Semantic => trace.last().semantic,
    };
    Ok(Propagated {
        graphs,
        trace,
        classifier_protos,
    })
}

/// Everything recorded by one episode's forward pass.
#[derive(Clone, Debug)]
pub struct EpisodeForward {
    pub bound: BoundParams,
    pub propagated: Propagated,
    pub scores: Var,
    pub ce: Var,
    /// Reduced consistency term, before the λ weight; `None` when `τ = 0`.
    pub consistency: Option<Var>,
    /// `ce + λ·consistency`.
    pub objective: Var,
}

/// Builds the episode objective on `tape`. Prototypes come from the
/// support means only.
pub fn episode_forward<T: Real>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    hp: &Hyperparams,
    wiring: &Wiring,
    inputs: &EpisodeInputs<T>,
    edges: Option<&[(ClassId, ClassId)]>,
    graphs: Option<&GraphPair>,
) -> Result<EpisodeForward> {
    let bound = params.bind(tape);
    let means = tape.leaf(inputs.support_means.clone());
    let attrs = tape.leaf(inputs.attributes.clone());
    let visual0 = bound.net.init_visual_seen(tape, means)?;
    let semantic0 = bound.net.init_semantic(tape, attrs)?;
    let propagated = propagate(
        tape,
        &bound,
        hp,
        wiring,
        &inputs.classes,
        visual0,
        semantic0,
        edges,
        graphs,
    )?;
    let queries = tape.leaf(inputs.queries.clone());
    let scores = bound
        .classifier
        .scores(tape, queries, propagated.classifier_protos)?;
    let ce = tape.cross_entropy(scores, &inputs.targets, hp.ce_reduction == Reduction::Mean)?;
    let consistency = match consistency(tape, &propagated.trace)? {
        Some(kl) if hp.consistency_reduction == Reduction::Mean => {
            Some(tape.scale(kl, T::of(1.0 / inputs.classes.len() as f64)))
        }
        other => other,
    };
    let objective = match consistency {
        Some(c) if wiring.consistency_weight != 0.0 => {
            let weighted = tape.scale(c, T::of(wiring.consistency_weight));
            tape.add(ce, weighted)?
        }
        _ => ce,
    };
    Ok(EpisodeForward {
        bound,
        propagated,
        scores,
        ce,
        consistency,
        objective,
    })
}

/// Loss terms and diagnostics of one training episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    pub ce_loss: f64,
    pub consistency_loss: f64,
    /// `(weight_decay / 2) · Σθ²` over decayed tensors.
    pub decay_loss: f64,
    /// `ce + λ·consistency + decay`.
    pub total: f64,
    pub query_accuracy: f64,
    /// Predicted class of each query.
    pub predictions: Vec<ClassId>,
    /// `p^v[t]` for `t = 1..=τ`.
    pub dist_visual: Vec<Array2<f64>>,
    pub dist_semantic: Vec<Array2<f64>>,
}

pub(crate) fn decay_loss<T: Real>(params: &ModelParams<T>, hp: &Hyperparams) -> f64 {
    let sq: f64 = params
        .tensors()
        .iter()
        .zip(params.tensor_info())
        .filter(|(_, info)| hp.decay_biases || !info.is_bias)
        .map(|(p, _)| p.value.iter().map(|&v| Real::to_f64(v).powi(2)).sum::<f64>())
        .sum();
    0.5 * hp.weight_decay * sq
}

fn non_finite<T: Real>(tape: &Tape<T>, what: &str) -> Error {
    match tape.first_non_finite() {
        Some((v, op)) => Error::Numeric(format!(
            "non-finite {what}; first non-finite node is #{} ({op})",
            v.id()
        )),
        None => Error::Numeric(format!("non-finite {what}")),
    }
}

/// Forward and backward pass of one episode; gradients are added into
/// `params`.
pub fn episode_loss<T: Real>(
    params: &mut ModelParams<T>,
    hp: &Hyperparams,
    wiring: &Wiring,
    episode: &Episode,
    ds: &Dataset,
) -> Result<EpisodeResult> {
    let inputs = EpisodeInputs::gather(ds, episode)?;
    let mut tape = Tape::new();
    let fwd = episode_forward(&mut tape, params, hp, wiring, &inputs, ds.edges(), None)?;
    let objective = tape.scalar(fwd.objective);
    if !objective.is_finite() {
        return Err(non_finite(&tape, "episode loss"));
    }
    let grads = tape.backward(fwd.objective)?;
    params.accumulate_grads(&fwd.bound, &grads);
    if params
        .tensors()
        .iter()
        .any(|p| p.grad.iter().any(|g| !g.is_finite()))
    {
        return Err(Error::Numeric("non-finite gradient".into()));
    }

    let ce_loss = tape.scalar(fwd.ce).to_f64();
    let consistency_loss = fwd.consistency.map_or(0.0, |c| tape.scalar(c).to_f64());
    let decay = decay_loss(params, hp);
    let scores = tape.value(fwd.scores);
    let mut correct = 0;
    let predictions: Vec<ClassId> = scores
        .rows()
        .into_iter()
        .zip(&inputs.targets)
        .map(|(row, &t)| {
            let mut best = 0;
            for (j, &s) in row.iter().enumerate() {
                if s > row[best] {
                    best = j;
                }
            }
            if best == t {
                correct += 1;
            }
            inputs.classes[best]
        })
        .collect();
    let to64 = |v: Var| tape.value(v).mapv(|x| x.to_f64());
    let trace = &fwd.propagated.trace;
    Ok(EpisodeResult {
        ce_loss,
        consistency_loss,
        decay_loss: decay,
        total: ce_loss + wiring.consistency_weight * consistency_loss + decay,
        query_accuracy: correct as f64 / inputs.targets.len() as f64,
        predictions,
        dist_visual: trace.dist_v.iter().map(|&v| to64(v)).collect(),
        dist_semantic: trace.dist_s.iter().map(|&v| to64(v)).collect(),
    })
}
