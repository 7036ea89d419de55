//! Relation-layer scoring of queries against class prototypes:
//! `f(x, P_y) = w · relu(W1·x + W2·P_y + b1) + b`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;

use crate::datasets::ClassId;
use crate::diffcore::{softmax_slice, Real, Tape, Var};
use crate::error::{Error, Result};
use crate::params::ModelParams;

/// Tape handles of the classifier parameters.
#[derive(Clone, Copy, Debug)]
pub struct RelationClassifier {
    /// `d_h × d_v`, applied to the query feature.
    pub w1: Var,
    /// `d_h × p`, applied to the prototype.
    pub w2: Var,
    /// `1 × d_h`.
    pub b1: Var,
    /// `1 × d_h`.
    pub w: Var,
    /// `1 × 1`.
    pub b: Var,
}

impl RelationClassifier {
    /// Scores of every query row against every prototype row, `n_q × n_c`.
    pub fn scores<T: Real>(&self, tape: &mut Tape<T>, queries: Var, protos: Var) -> Result<Var> {
        let nq = tape.shape(queries).0;
        let nc = tape.shape(protos).0;
        let u = tape.linear(queries, self.w1, Some(self.b1))?;
        let v = tape.linear(protos, self.w2, None)?;
        let pairs = tape.pair_add(u, v)?;
        let hidden = tape.relu(pairs);
        let s = tape.linear(hidden, self.w, Some(self.b))?;
        tape.reshape(s, nq, nc)
    }
}

/// Read-only classifier weights for batch evaluation outside a tape.
#[derive(Clone, Copy, Debug)]
pub struct RelationScorer<'a, T> {
    w1: ArrayView2<'a, T>,
    w2: ArrayView2<'a, T>,
    b1: ArrayView1<'a, T>,
    w: ArrayView1<'a, T>,
    b: T,
}

impl<'a, T: Real> RelationScorer<'a, T> {
    pub fn new(params: &'a ModelParams<T>) -> Self {
        RelationScorer {
            w1: params.w1.value.view(),
            w2: params.w2.value.view(),
            b1: params.b1.value.row(0),
            w: params.w_out.value.row(0),
            b: params.b_out.value[[0, 0]],
        }
    }

    fn check(&self, d_x: usize, d_p: usize) -> Result<()> {
        if d_x != self.w1.ncols() || d_p != self.w2.ncols() {
            return Err(Error::Dimension(format!(
                "classifier expects feature width {} and prototype width {}, got {d_x} and {d_p}",
                self.w1.ncols(),
                self.w2.ncols()
            )));
        }
        Ok(())
    }

    /// `f(x, proto)` for one pair.
    pub fn score(&self, x: ArrayView1<T>, proto: ArrayView1<T>) -> Result<T> {
        self.check(x.len(), proto.len())?;
        let pre = self.w1.dot(&x) + self.w2.dot(&proto) + self.b1;
        Ok(self.hidden_to_score(pre.view()))
    }

    fn hidden_to_score(&self, pre: ArrayView1<T>) -> T {
        let mut s = self.b;
        for (&h, &wi) in pre.iter().zip(self.w.iter()) {
            if h > T::zero() {
                s += wi * h;
            }
        }
        s
    }

    /// Scores of each query row against each prototype row. Rows are
    /// scored in parallel; each row's arithmetic order is fixed.
    pub fn score_matrix(&self, queries: ArrayView2<T>, protos: ArrayView2<T>) -> Result<Array2<T>> {
        self.check(queries.ncols(), protos.ncols())?;
        let u = queries.dot(&self.w1.t()) + self.b1;
        let v = protos.dot(&self.w2.t());
        let rows: Vec<Array1<T>> = u
            .axis_iter(Axis(0))
            .into_par_iter()
            .map(|ur| {
                v.rows()
                    .into_iter()
                    .map(|vr| {
                        let pre = &ur + &vr;
                        self.hidden_to_score(pre.view())
                    })
                    .collect()
            })
            .collect();
        let mut out = Array2::zeros((queries.nrows(), protos.nrows()));
        for (i, r) in rows.into_iter().enumerate() {
            out.row_mut(i).assign(&r);
        }
        Ok(out)
    }
}

/// `Pr(y | x)`: softmax of the relation scores at temperature 1.
pub fn predict_distribution<T: Real>(scores: &[T]) -> Result<Vec<T>> {
    if scores.is_empty() {
        return Err(Error::Contract("cannot normalise scores over zero classes".into()));
    }
    Ok(softmax_slice(scores, T::one()))
}

/// Most probable class among `search_space`; `classes[i]` names column `i`
/// of `scores`. Ties go to the lower class id.
pub fn classify<T: Real>(scores: &[T], classes: &[ClassId], search_space: &[ClassId]) -> Result<ClassId> {
    if search_space.is_empty() {
        return Err(Error::Contract("empty classification search space".into()));
    }
    let mut best: Option<(T, ClassId)> = None;
    for &c in search_space {
        let i = classes
            .iter()
            .position(|&x| x == c)
            .ok_or_else(|| Error::Contract(format!("class {c} is not among the scored classes")))?;
        let s = scores[i];
        best = match best {
            Some((bs, bc)) if bs > s || (bs == s && bc < c) => Some((bs, bc)),
            _ => Some((s, c)),
        };
    }
    Ok(best.expect("non-empty").1)
}
