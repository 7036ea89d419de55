use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};

use super::{dot_norms, Real};
use crate::error::{Error, Result};

/// Denominator guard added to cosine similarities in guarded mode.
pub const COSINE_GUARD: f64 = 1e-12;

/// How cosine similarity treats zero-norm inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CosineMode {
    /// Adds [`COSINE_GUARD`] to the denominator.
    #[default]
    Guarded,
    /// No guard; a zero-norm row is a [`Error::Degenerate`].
    Strict,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// A recorded primitive and the nodes it consumed.
#[derive(Clone, Debug)]
pub enum Op<T> {
    Leaf,
    /// `x · wᵀ (+ b)`, rows of `x` are a batch.
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, factor: T },
    Relu { x: Var },
    /// Pairwise cosine between the rows of `a` and the rows of `b`.
    CosineRows { a: Var, b: Var, delta: T },
    /// Row-wise `softmax(gamma · x)` over the entries allowed by `mask`.
    SoftmaxRows {
        x: Var,
        gamma: T,
        mask: Option<Array2<bool>>,
    },
    /// `Σ_rows KL(p_row ‖ q_row)`.
    KlRows { p: Var, q: Var },
    ConcatCols { a: Var, b: Var },
    ConcatRows { a: Var, b: Var },
    /// Row `i·|v| + j` of the output is `u_i + v_j`.
    PairAdd { u: Var, v: Var },
    Reshape { x: Var },
    /// Softmax cross-entropy of each row against a target column.
    CrossEntropy {
        scores: Var,
        targets: Vec<usize>,
        mean: bool,
    },
    Sum { x: Var },
}

impl<T> Op<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Linear { .. } => "linear",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Scale { .. } => "scale",
            Op::Relu { .. } => "relu",
            Op::CosineRows { .. } => "cosine",
            Op::SoftmaxRows { .. } => "softmax",
            Op::KlRows { .. } => "kl",
            Op::ConcatCols { .. } => "concat_cols",
            Op::ConcatRows { .. } => "concat_rows",
            Op::PairAdd { .. } => "pair_add",
            Op::Reshape { .. } => "reshape",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum { .. } => "sum",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
}

/// Append-only record of executed operations.
///
/// Node ids increase monotonically and every op only refers to earlier
/// nodes, so iterating in reverse visits each node after all its consumers.
#[derive(Clone, Debug)]
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    mode: CosineMode,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(op: &str, detail: String) -> Error {
    Error::Dimension(format!("{op}: {detail}"))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self::with_mode(CosineMode::Guarded)
    }

    pub fn with_mode(mode: CosineMode) -> Self {
        Tape {
            nodes: Vec::new(),
            mode,
        }
    }

    pub fn mode(&self) -> CosineMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op(&self, v: Var) -> &Op<T> {
        &self.nodes[v.0].op
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Registers an input. Whether it is trainable is the caller's concern:
    /// gradients are available for every node after [`Tape::backward`].
    pub fn leaf(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn row(&mut self, values: &[T]) -> Var {
        let a = Array2::from_shape_vec((1, values.len()), values.to_vec())
            .expect("row vector shape");
        self.leaf(a)
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[[0, 0]]
    }

    /// First node (in execution order) holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<(Var, &'static str)> {
        self.nodes
            .iter()
            .position(|n| n.value.iter().any(|v| !v.is_finite()))
            .map(|i| (Var(i), self.nodes[i].op.name()))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, d_in) = self.shape(x);
        let (d_out, w_in) = self.shape(w);
        if d_in != w_in {
            return Err(dim_err(
                "linear",
                format!("input width {d_in} but weight is {d_out}x{w_in}"),
            ));
        }
        let mut out = self.value(x).dot(&self.value(w).t());
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs != (1, d_out) {
                return Err(dim_err(
                    "linear",
                    format!("bias is {}x{}, expected 1x{d_out}", bs.0, bs.1),
                ));
            }
            out += self.value(b);
        }
        debug_assert_eq!(out.dim(), (n, d_out));
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(dim_err("matmul", format!("{m}x{k} times {k2}x{n}")));
        }
        let out = self.value(a).dot(self.value(b));
        Ok(self.push(out, Op::MatMul { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = self.value(a) + self.value(b);
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x) * factor;
        self.push(out, Op::Scale { x, factor })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu { x })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        self.push(Array2::from_elem((1, 1), total), Op::Sum { x })
    }

    /// Cosine similarity between every row of `a` and every row of `b`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, da) = self.shape(a);
        let (nb, db) = self.shape(b);
        if da != db {
            return Err(dim_err("cosine", format!("widths {da} and {db}")));
        }
        let delta = match self.mode {
            CosineMode::Guarded => T::of(super::COSINE_GUARD),
            CosineMode::Strict => T::zero(),
        };
        let av = self.value(a);
        let bv = self.value(b);
        if self.mode == CosineMode::Strict {
            for (side, m) in [("left", av), ("right", bv)] {
                if let Some(i) = m
                    .rows()
                    .into_iter()
                    .position(|r| r.iter().all(|&x| x == T::zero()))
                {
                    return Err(Error::Degenerate(format!(
                        "cosine of zero-norm {side} row {i}"
                    )));
                }
            }
        }
        let mut out = Array2::zeros((na, nb));
        for (i, ra) in av.rows().into_iter().enumerate() {
            let ra = ra.to_slice().expect("contiguous row");
            for (j, rb) in bv.rows().into_iter().enumerate() {
                let rb = rb.to_slice().expect("contiguous row");
                out[[i, j]] = super::cosine_slices(ra, rb, delta);
            }
        }
        Ok(self.push(out, Op::CosineRows { a, b, delta }))
    }

    /// Row-wise tempered softmax. With a mask, entries outside it are
    /// exactly zero and excluded from normalization.
    pub fn softmax_rows(
        &mut self,
        x: Var,
        gamma: T,
        mask: Option<Array2<bool>>,
    ) -> Result<Var> {
        let (n, m) = self.shape(x);
        if m == 0 {
            return Err(dim_err("softmax", "empty score row".into()));
        }
        if let Some(mask) = &mask {
            if mask.dim() != (n, m) {
                return Err(dim_err(
                    "softmax",
                    format!("mask {:?} for scores {n}x{m}", mask.dim()),
                ));
            }
            if let Some(i) = mask.rows().into_iter().position(|r| !r.iter().any(|&b| b)) {
                return Err(Error::Contract(format!("softmax row {i} has no admissible entry")));
            }
        }
        let xv = self.value(x);
        let mut out = Array2::zeros((n, m));
        for i in 0..n {
            let allowed = |j: usize| mask.as_ref().map_or(true, |mk| mk[[i, j]]);
            let mut max = T::neg_infinity();
            for j in (0..m).filter(|&j| allowed(j)) {
                max = max.max(gamma * xv[[i, j]]);
            }
            let mut total = T::zero();
            for j in (0..m).filter(|&j| allowed(j)) {
                let e = (gamma * xv[[i, j]] - max).exp();
                out[[i, j]] = e;
                total += e;
            }
            out.row_mut(i).mapv_inplace(|e| e / total);
        }
        Ok(self.push(out, Op::SoftmaxRows { x, gamma, mask }))
    }

    /// Sum over rows of `KL(p_i ‖ q_i)`, with `0·log(0/q) = 0`.
    pub fn kl_rows(&mut self, p: Var, q: Var) -> Result<Var> {
        if self.shape(p) != self.shape(q) {
            return Err(dim_err(
                "kl",
                format!("{:?} vs {:?}", self.shape(p), self.shape(q)),
            ));
        }
        let mut total = T::zero();
        Zip::from(self.value(p))
            .and(self.value(q))
            .for_each(|&pv, &qv| {
                if pv > T::zero() {
                    total += pv * (pv / qv).ln();
                }
            });
        Ok(self.push(Array2::from_elem((1, 1), total), Op::KlRows { p, q }))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).0 != self.shape(b).0 {
            return Err(dim_err(
                "concat_cols",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("checked shapes");
        Ok(self.push(out, Op::ConcatCols { a, b }))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).1 != self.shape(b).1 {
            return Err(dim_err(
                "concat_rows",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = concatenate(Axis(0), &[self.value(a).view(), self.value(b).view()])
            .expect("checked shapes");
        Ok(self.push(out, Op::ConcatRows { a, b }))
    }

    pub fn pair_add(&mut self, u: Var, v: Var) -> Result<Var> {
        let (nu, h) = self.shape(u);
        let (nv, h2) = self.shape(v);
        if h != h2 {
            return Err(dim_err("pair_add", format!("widths {h} and {h2}")));
        }
        let uv = self.value(u);
        let vv = self.value(v);
        let mut out = Array2::zeros((nu * nv, h));
        for i in 0..nu {
            let block = out.slice_mut(s![i * nv..(i + 1) * nv, ..]);
            Zip::from(block)
                .and(vv)
                .and_broadcast(uv.row(i))
                .for_each(|o, &b, &a| *o = a + b);
        }
        Ok(self.push(out, Op::PairAdd { u, v }))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if r * c != rows * cols {
            return Err(dim_err("reshape", format!("{r}x{c} into {rows}x{cols}")));
        }
        let flat: Vec<T> = self.value(x).iter().copied().collect();
        let out = Array2::from_shape_vec((rows, cols), flat).expect("checked size");
        Ok(self.push(out, Op::Reshape { x }))
    }

    /// `−log softmax(scores_i)[targets_i]`, summed or averaged over rows.
    pub fn cross_entropy(&mut self, scores: Var, targets: &[usize], mean: bool) -> Result<Var> {
        let (n, c) = self.shape(scores);
        if targets.len() != n {
            return Err(dim_err(
                "cross_entropy",
                format!("{} targets for {n} rows", targets.len()),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(dim_err("cross_entropy", format!("target {t} >= {c} classes")));
        }
        let sv = self.value(scores);
        let mut total = T::zero();
        for (row, &t) in sv.rows().into_iter().zip(targets) {
            total += log_sum_exp(row.as_slice().expect("contiguous")) - row[t];
        }
        if mean && n > 0 {
            total /= T::of(n as f64);
        }
        Ok(self.push(
            Array2::from_elem((1, 1), total),
            Op::CrossEntropy {
                scores,
                targets: targets.to_vec(),
                mean,
            },
        ))
    }

    /// Reverse sweep from a scalar node. Gradients of nodes used more than
    /// once accumulate additively.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward from non-scalar node of shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Array2<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, id: usize, g: &Array2<T>, grads: &mut [Option<Array2<T>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                accumulate(grads, *x, g.dot(wv));
                accumulate(grads, *w, g.t().dot(xv));
                if let Some(b) = b {
                    accumulate(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MatMul { a, b } => {
                accumulate(grads, *a, g.dot(&self.value(*b).t()));
                accumulate(grads, *b, self.value(*a).t().dot(g));
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Scale { x, factor } => accumulate(grads, *x, g * *factor),
            Op::Relu { x } => {
                let mut gx = g.clone();
                Zip::from(&mut gx)
                    .and(self.value(*x))
                    .for_each(|gi, &xi| {
                        if xi <= T::zero() {
                            *gi = T::zero();
                        }
                    });
                accumulate(grads, *x, gx);
            }
            Op::Sum { x } => {
                let s = g[[0, 0]];
                accumulate(grads, *x, Array2::from_elem(self.shape(*x), s));
            }
            Op::CosineRows { a, b, delta } => {
                let (ga, gb) = cosine_backward(self.value(*a).view(), self.value(*b).view(), *delta, g);
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::SoftmaxRows { x, gamma, .. } => {
                let y = &node.value;
                let mut gx = Array2::zeros(y.dim());
                for ((yr, gr), mut out) in y
                    .rows()
                    .into_iter()
                    .zip(g.rows())
                    .zip(gx.rows_mut())
                {
                    let inner: T = yr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum();
                    Zip::from(&mut out)
                        .and(&yr)
                        .and(&gr)
                        .for_each(|o, &yi, &gi| *o = *gamma * yi * (gi - inner));
                }
                accumulate(grads, *x, gx);
            }
            Op::KlRows { p, q } => {
                let s = g[[0, 0]];
                let pv = self.value(*p);
                let qv = self.value(*q);
                let mut gp = Array2::zeros(pv.dim());
                let mut gq = Array2::zeros(qv.dim());
                Zip::from(&mut gp)
                    .and(&mut gq)
                    .and(pv)
                    .and(qv)
                    .for_each(|dp, dq, &pi, &qi| {
                        if pi > T::zero() {
                            *dp = s * ((pi / qi).ln() + T::one());
                            *dq = -s * pi / qi;
                        }
                    });
                accumulate(grads, *p, gp);
                accumulate(grads, *q, gq);
            }
            Op::ConcatCols { a, b } => {
                let ca = self.shape(*a).1;
                accumulate(grads, *a, g.slice(s![.., ..ca]).to_owned());
                accumulate(grads, *b, g.slice(s![.., ca..]).to_owned());
            }
            Op::ConcatRows { a, b } => {
                let ra = self.shape(*a).0;
                accumulate(grads, *a, g.slice(s![..ra, ..]).to_owned());
                accumulate(grads, *b, g.slice(s![ra.., ..]).to_owned());
            }
            Op::PairAdd { u, v } => {
                let (nu, h) = self.shape(*u);
                let nv = self.shape(*v).0;
                let mut gu = Array2::zeros((nu, h));
                let mut gv = Array2::zeros((nv, h));
                for i in 0..nu {
                    let block = g.slice(s![i * nv..(i + 1) * nv, ..]);
                    gu.row_mut(i).assign(&block.sum_axis(Axis(0)));
                    gv += &block;
                }
                accumulate(grads, *u, gu);
                accumulate(grads, *v, gv);
            }
            Op::Reshape { x } => {
                let flat: Vec<T> = g.iter().copied().collect();
                let gx = Array2::from_shape_vec(self.shape(*x), flat).expect("same size");
                accumulate(grads, *x, gx);
            }
            Op::CrossEntropy {
                scores,
                targets,
                mean,
            } => {
                let sv = self.value(*scores);
                let n = targets.len();
                let mut s = g[[0, 0]];
                if *mean && n > 0 {
                    s /= T::of(n as f64);
                }
                let mut gs = Array2::zeros(sv.dim());
                for ((row, mut out), &t) in sv.rows().into_iter().zip(gs.rows_mut()).zip(targets) {
                    let probs = super::softmax_slice(row.as_slice().expect("contiguous"), T::one());
                    for (j, p) in probs.into_iter().enumerate() {
                        out[j] = s * (p - if j == t { T::one() } else { T::zero() });
                    }
                }
                accumulate(grads, *scores, gs);
            }
        }
    }
}

fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let total: T = row.iter().map(|&x| (x - max).exp()).sum();
    max + total.ln()
}

fn cosine_backward<T: Real>(
    a: ArrayView2<T>,
    b: ArrayView2<T>,
    delta: T,
    g: &Array2<T>,
) -> (Array2<T>, Array2<T>) {
    let mut ga = Array2::zeros(a.dim());
    let mut gb = Array2::zeros(b.dim());
    let d = a.ncols();
    for (i, ra) in a.rows().into_iter().enumerate() {
        let ra = ra.to_slice().expect("contiguous");
        for (j, rb) in b.rows().into_iter().enumerate() {
            let gij = g[[i, j]];
            if gij == T::zero() {
                continue;
            }
            let rb = rb.to_slice().expect("contiguous");
            let (dot, na2, nb2) = dot_norms(ra, rb);
            let na = na2.sqrt();
            let nb = nb2.sqrt();
            let den = na * nb + delta;
            let inv = T::one() / den;
            // d(dot/den)/da = b/den - dot/den² · nb · a/na
            let ca = if na > T::zero() { dot * nb / (den * den * na) } else { T::zero() };
            let cb = if nb > T::zero() { dot * na / (den * den * nb) } else { T::zero() };
            for k in 0..d {
                ga[[i, k]] += gij * (rb[k] * inv - ca * ra[k]);
                gb[[j, k]] += gij * (ra[k] * inv - cb * rb[k]);
            }
        }
    }
    (ga, gb)
}

fn accumulate<T: Real>(grads: &mut [Option<Array2<T>>], v: Var, g: Array2<T>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `v`, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Array2<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zeros of `shape` if the loss does not reach it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Array2<T> {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(shape))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn linear_identity_and_hand_arithmetic() {
        let mut t = Tape::<f64>::new();
        let x = t.row(&[1.0, 2.0]);
        let eye = t.leaf(array![[1.0, 0.0], [0.0, 1.0]]);
        let zero = t.leaf(array![[0.0, 0.0]]);
        let y = t.linear(x, eye, Some(zero)).unwrap();
        assert_eq!(t.value(y), &array![[1.0, 2.0]]);

        let x = t.row(&[3.0, 4.0]);
        let w = t.leaf(array![[1.0, 1.0], [0.0, 1.0]]);
        let y = t.linear(x, w, None).unwrap();
        assert_eq!(t.value(y), &array![[7.0, 4.0]]);
    }

    #[test]
    fn linear_shape_mismatch_is_dimension_error() {
        let mut t = Tape::<f64>::new();
        let x = t.row(&[1.0, 2.0, 3.0]);
        let w = t.leaf(Array2::zeros((2, 2)));
        assert!(matches!(t.linear(x, w, None), Err(Error::Dimension(_))));
        let w = t.leaf(Array2::zeros((2, 3)));
        let b = t.leaf(Array2::zeros((1, 3)));
        assert!(matches!(t.linear(x, w, Some(b)), Err(Error::Dimension(_))));
    }

    #[test]
    fn relu_examples() {
        let mut t = Tape::<f64>::new();
        let x = t.row(&[-1.0, 0.0, 2.0]);
        let y = t.relu(x);
        assert_eq!(t.value(y), &array![[0.0, 0.0, 2.0]]);
        let x = t.row(&[-1.0, -3.0, -0.5]);
        let y = t.relu(x);
        assert!(t.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_gradient_is_indicator_and_zero_at_kink() {
        let mut t = Tape::<f64>::new();
        let x = t.row(&[-1.0, 0.0, 2.0, 0.5]);
        let y = t.relu(x);
        let l = t.sum(y);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &array![[0.0, 0.0, 1.0, 1.0]]);
    }

    #[test]
    fn cosine_examples() {
        let mut t = Tape::<f64>::with_mode(CosineMode::Strict);
        let u = t.row(&[1.0, 0.0]);
        let v = t.row(&[0.0, 1.0]);
        let c = t.cosine_rows(u, v).unwrap();
        assert_eq!(t.scalar(c), 0.0);

        let u = t.row(&[1.0, 1.0]);
        let v = t.row(&[1.0, 0.0]);
        let c = t.cosine_rows(u, v).unwrap();
        assert_abs_diff_eq!(t.scalar(c), std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-12);

        let u = t.row(&[0.3, -2.0, 5.5]);
        let c = t.cosine_rows(u, u).unwrap();
        assert_abs_diff_eq!(t.scalar(c), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn cosine_zero_norm_strict_errors_guarded_returns_zero() {
        let mut t = Tape::<f64>::with_mode(CosineMode::Strict);
        let z = t.row(&[0.0, 0.0]);
        assert!(matches!(t.cosine_rows(z, z), Err(Error::Degenerate(_))));

        let mut t = Tape::<f64>::new();
        let z = t.row(&[0.0, 0.0]);
        let c = t.cosine_rows(z, z).unwrap();
        assert_eq!(t.scalar(c), 0.0);
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::<f64>::new();
        let x = t.row(&[0.7, 0.7, 0.7]);
        let y = t.softmax_rows(x, 10.0, None).unwrap();
        for &v in t.value(y) {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let x = t.row(&[1.0, 0.5]);
        let y = t.softmax_rows(x, 10.0, None).unwrap();
        let expected = 1.0 / (1.0 + (-5.0f64).exp());
        assert_abs_diff_eq!(t.value(y)[[0, 0]], expected, epsilon = 1e-12);
        assert_abs_diff_eq!(t.value(y)[[0, 0]], 0.99331, epsilon = 5e-6);
        assert_abs_diff_eq!(t.value(y)[[0, 1]], 0.00669, epsilon = 5e-6);
        let x = t.row(&[42.0]);
        let y = t.softmax_rows(x, 10.0, None).unwrap();
        assert_eq!(t.scalar(y), 1.0);
    }

    #[test]
    fn softmax_empty_is_dimension_error() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Array2::zeros((1, 0)));
        assert!(matches!(t.softmax_rows(x, 1.0, None), Err(Error::Dimension(_))));
    }

    #[test]
    fn masked_softmax_zeroes_excluded_entries() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(array![[0.9, 0.5, 0.1]]);
        let mask = array![[true, true, false]];
        let y = t.softmax_rows(x, 10.0, Some(mask)).unwrap();
        let v = t.value(y);
        assert_eq!(v[[0, 2]], 0.0);
        assert_abs_diff_eq!(v[[0, 0]], 0.98201, epsilon = 5e-6);
        assert_abs_diff_eq!(v[[0, 1]], 0.01799, epsilon = 5e-6);
    }

    #[test]
    fn kl_examples() {
        let mut t = Tape::<f64>::new();
        let p = t.row(&[1.0, 0.0]);
        let q = t.row(&[0.5, 0.5]);
        let k = t.kl_rows(p, q).unwrap();
        assert_abs_diff_eq!(t.scalar(k), std::f64::consts::LN_2, epsilon = 1e-12);
        let p = t.row(&[0.2, 0.3, 0.5]);
        let k = t.kl_rows(p, p).unwrap();
        assert_eq!(t.scalar(k), 0.0);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Array2::from_elem((2, 3), 0.25));
        let l = t.sum(x);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &Array2::<f64>::ones((2, 3)));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::<f64>::new();
        let x = t.row(&[1.0, 2.0]);
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn multi_use_accumulates() {
        // loss = sum(x + x) -> grad 2
        let mut t = Tape::<f64>::new();
        let x = t.row(&[1.0, -4.0]);
        let y = t.add(x, x).unwrap();
        let l = t.sum(y);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &array![[2.0, 2.0]]);
    }

    #[test]
    fn pair_add_layout() {
        let mut t = Tape::<f64>::new();
        let u = t.leaf(array![[1.0, 2.0], [3.0, 4.0]]);
        let v = t.leaf(array![[10.0, 20.0], [30.0, 40.0], [50.0, 60.0]]);
        let p = t.pair_add(u, v).unwrap();
        assert_eq!(t.shape(p), (6, 2));
        assert_eq!(t.value(p).row(4).to_vec(), vec![33.0, 44.0]);
    }

    #[test]
    fn cross_entropy_uniform_scores() {
        let mut t = Tape::<f64>::new();
        let s = t.leaf(Array2::zeros((2, 4)));
        let l = t.cross_entropy(s, &[0, 3], true).unwrap();
        assert_abs_diff_eq!(t.scalar(l), 4f64.ln(), epsilon = 1e-12);
    }
}
