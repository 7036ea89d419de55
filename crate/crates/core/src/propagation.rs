//! Category graphs and attention propagation in the two prototype spaces.

use std::collections::BTreeSet;

use ndarray::Array2;

use crate::datasets::ClassId;
use crate::diffcore::{cosine_slices, CosineMode, Real, Tape, Var, COSINE_GUARD};
use crate::error::{Error, Result};

/// Learnable square map applied before cosine similarity, with the
/// temperature of the neighbourhood softmax.
#[derive(Clone, Copy, Debug)]
pub struct AttentionHead<T> {
    pub transform: Var,
    pub gamma: T,
}

impl<T: Real> AttentionHead<T> {
    /// `|rows| × |rows|` cosine similarities after the transform.
    pub fn similarities(&self, tape: &mut Tape<T>, protos: Var) -> Result<Var> {
        let (d_out, d_in) = tape.shape(self.transform);
        if d_out != d_in {
            return Err(Error::Dimension(format!(
                "attention transform must be square, got {d_out}x{d_in}"
            )));
        }
        let h = tape.linear(protos, self.transform, None)?;
        tape.cosine_rows(h, h)
    }

    /// Row-stochastic attention restricted to each class's neighbours.
    pub fn attention_weights(
        &self,
        tape: &mut Tape<T>,
        protos: Var,
        graph: &CategoryGraph,
    ) -> Result<Var> {
        let sims = self.similarities(tape, protos)?;
        tape.softmax_rows(sims, self.gamma, Some(graph.mask()))
    }

    /// Temperature-1 softmax over every class, used for the consistency term.
    pub fn class_distribution(&self, tape: &mut Tape<T>, protos: Var) -> Result<Var> {
        let sims = self.similarities(tape, protos)?;
        tape.softmax_rows(sims, T::one(), None)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GraphSource {
    Generated,
    External,
}

/// Neighbour sets over an episode's classes. Neighbours are stored as row
/// positions into `classes`, ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CategoryGraph {
    pub classes: Vec<ClassId>,
    pub neighbors: Vec<Vec<usize>>,
    pub source: GraphSource,
}

impl CategoryGraph {
    pub fn mask(&self) -> Array2<bool> {
        let n = self.classes.len();
        let mut m = Array2::from_elem((n, n), false);
        for (y, ns) in self.neighbors.iter().enumerate() {
            for &z in ns {
                m[[y, z]] = true;
            }
        }
        m
    }

    pub fn is_symmetric(&self) -> bool {
        let m = self.mask();
        m == m.t()
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }

    /// Graph over `classes` from an external edge list. Edges are
    /// symmetrized, edges touching classes outside `classes` are dropped,
    /// and every class keeps a self-edge.
    pub fn from_edges(classes: &[ClassId], edges: &[(ClassId, ClassId)]) -> Self {
        let pos = |c: ClassId| classes.iter().position(|&x| x == c);
        let mut sets: Vec<BTreeSet<usize>> = (0..classes.len()).map(|i| BTreeSet::from([i])).collect();
        for &(a, b) in edges {
            if let (Some(i), Some(j)) = (pos(a), pos(b)) {
                sets[i].insert(j);
                sets[j].insert(i);
            }
        }
        CategoryGraph {
            classes: classes.to_vec(),
            neighbors: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
            source: GraphSource::External,
        }
    }
}

/// Thresholds transformed-cosine similarity of step-0 prototypes: `(y, z)`
/// is an edge iff `c(P_y, P_z) ≥ epsilon`. The result is a constant and is
/// not recorded on the tape.
pub fn build_graph<T: Real>(
    tape: &Tape<T>,
    protos: Var,
    head: &AttentionHead<T>,
    epsilon: f64,
    classes: &[ClassId],
) -> Result<CategoryGraph> {
    if !(-1.0..=1.0).contains(&epsilon) {
        return Err(Error::Config(format!("edge threshold {epsilon} outside [-1, 1]")));
    }
    let p = tape.value(protos);
    if p.nrows() != classes.len() {
        return Err(Error::Dimension(format!(
            "{} prototype rows for {} classes",
            p.nrows(),
            classes.len()
        )));
    }
    let h = p.dot(&tape.value(head.transform).t());
    let delta = match tape.mode() {
        CosineMode::Guarded => T::of(COSINE_GUARD),
        CosineMode::Strict => T::zero(),
    };
    let eps = T::of(epsilon);
    let rows: Vec<Vec<T>> = h.rows().into_iter().map(|r| r.to_vec()).collect();
    let n = rows.len();
    let mut neighbors = vec![Vec::new(); n];
    for y in 0..n {
        for z in 0..n {
            // a zero-norm row still keeps its self-edge
            if y == z || cosine_slices(&rows[y], &rows[z], delta) >= eps {
                neighbors[y].push(z);
            }
        }
    }
    Ok(CategoryGraph {
        classes: classes.to_vec(),
        neighbors,
        source: GraphSource::Generated,
    })
}

/// Prototypes of both spaces at one propagation step.
#[derive(Clone, Debug)]
pub struct PrototypeState {
    pub classes: Vec<ClassId>,
    pub visual: Var,
    pub semantic: Var,
    pub step: usize,
}

/// Graph, attention head and whether the space propagates at all.
#[derive(Clone, Copy, Debug)]
pub struct SpaceSetup<'a, T> {
    pub head: AttentionHead<T>,
    pub graph: &'a CategoryGraph,
    pub propagate: bool,
}

/// Output of one [`propagate_step`].
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub state: PrototypeState,
    pub attention_v: Option<Var>,
    pub attention_s: Option<Var>,
    pub dist_v: Var,
    pub dist_s: Var,
}

fn step_space<T: Real>(
    tape: &mut Tape<T>,
    protos: Var,
    setup: &SpaceSetup<'_, T>,
) -> Result<(Var, Option<Var>)> {
    if !setup.propagate {
        return Ok((protos, None));
    }
    let att = setup.head.attention_weights(tape, protos, setup.graph)?;
    let next = tape.matmul(att, protos)?;
    Ok((next, Some(att)))
}

/// `P_y[t+1] = Σ_{z∈N_y} a(P_y[t], P_z[t]) · P_z[t]` in each space, all rows
/// updated from step-`t` values. The step-`t+1` consistency distributions
/// are computed from the updated prototypes.
pub fn propagate_step<T: Real>(
    tape: &mut Tape<T>,
    state: &PrototypeState,
    visual: &SpaceSetup<'_, T>,
    semantic: &SpaceSetup<'_, T>,
) -> Result<StepOutput> {
    let (pv, attention_v) = step_space(tape, state.visual, visual)?;
    let (ps, attention_s) = step_space(tape, state.semantic, semantic)?;
    let dist_v = visual.head.class_distribution(tape, pv)?;
    let dist_s = semantic.head.class_distribution(tape, ps)?;
    Ok(StepOutput {
        state: PrototypeState {
            classes: state.classes.clone(),
            visual: pv,
            semantic: ps,
            step: state.step + 1,
        },
        attention_v,
        attention_s,
        dist_v,
        dist_s,
    })
}

/// States `0..=τ` and the per-step records of a propagation run.
#[derive(Clone, Debug)]
pub struct PropagationTrace {
    pub states: Vec<PrototypeState>,
    pub attention_v: Vec<Var>,
    pub attention_s: Vec<Var>,
    /// `dist_v[t-1]` holds `p^v[t]`, one row per class.
    pub dist_v: Vec<Var>,
    pub dist_s: Vec<Var>,
}

impl PropagationTrace {
    pub fn last(&self) -> &PrototypeState {
        self.states.last().expect("trace has the initial state")
    }

    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    /// Visual and semantic prototype values at every step.
    pub fn snapshot<T: Real>(&self, tape: &Tape<T>) -> TraceSnapshot<T> {
        TraceSnapshot {
            classes: self.states[0].classes.clone(),
            visual: self.states.iter().map(|s| tape.value(s.visual).clone()).collect(),
            semantic: self.states.iter().map(|s| tape.value(s.semantic).clone()).collect(),
        }
    }
}

/// Concrete prototype values of a trace, detached from the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceSnapshot<T> {
    pub classes: Vec<ClassId>,
    pub visual: Vec<Array2<T>>,
    pub semantic: Vec<Array2<T>>,
}

pub fn run_propagation<T: Real>(
    tape: &mut Tape<T>,
    initial: PrototypeState,
    visual: &SpaceSetup<'_, T>,
    semantic: &SpaceSetup<'_, T>,
    tau: usize,
) -> Result<PropagationTrace> {
    let mut trace = PropagationTrace {
        states: vec![initial],
        attention_v: Vec::new(),
        attention_s: Vec::new(),
        dist_v: Vec::new(),
        dist_s: Vec::new(),
    };
    for _ in 0..tau {
        let out = propagate_step(tape, trace.last(), visual, semantic)?;
        trace.attention_v.extend(out.attention_v);
        trace.attention_s.extend(out.attention_s);
        trace.dist_v.push(out.dist_v);
        trace.dist_s.push(out.dist_s);
        trace.states.push(out.state);
    }
    Ok(trace)
}

/// `[P^v[τ] ‖ P^s[τ]]`, visual half first.
pub fn fuse<T: Real>(tape: &mut Tape<T>, trace: &PropagationTrace) -> Result<Var> {
    let last = trace.last();
    tape.concat_cols(last.visual, last.semantic)
}

/// `Σ_t Σ_y KL(p^v_y[t] ‖ p^s_y[t])`, or `None` when `τ = 0`.
pub fn consistency<T: Real>(tape: &mut Tape<T>, trace: &PropagationTrace) -> Result<Option<Var>> {
    let mut acc = None;
    for (&pv, &ps) in trace.dist_v.iter().zip(&trace.dist_s) {
        let kl = tape.kl_rows(pv, ps)?;
        acc = Some(match acc {
            None => kl,
            Some(a) => tape.add(a, kl)?,
        });
    }
    Ok(acc)
}
