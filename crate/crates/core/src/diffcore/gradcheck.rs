//! Central finite-difference oracle for analytic gradients.

use ndarray::Array2;
use serde::Serialize;

use super::Real;
use crate::error::{Error, Result};

/// Smallest denominator used when forming relative errors.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct GroupCheck {
    pub group: String,
    pub n_scalars: usize,
    pub max_rel_error: f64,
    /// Analytic and numeric values at the worst scalar.
    pub worst: (f64, f64),
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct GradCheckReport {
    pub step: f64,
    pub groups: Vec<GroupCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.groups.iter().all(|g| g.max_rel_error <= tol)
    }
}

/// Compares `analytic[i]` against `(loss(θ+h) − loss(θ−h)) / 2h` for every
/// scalar of every tensor in `values`.
///
/// `groups[i]` names the report group of tensor `i`; tensors sharing a name
/// are merged, and groups appear in first-seen order. `values` is restored
/// exactly before returning. The loss may be evaluated in a wider type
/// than `f64` to keep cancellation error out of the differences.
pub fn grad_check<L, F>(
    values: &mut [Array2<f64>],
    groups: &[String],
    analytic: &[Array2<f64>],
    h: f64,
    mut loss: F,
) -> Result<GradCheckReport>
where
    L: Real,
    F: FnMut(&[Array2<f64>]) -> Result<L>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::Config(format!(
            "finite-difference step {h} outside [1e-6, 1e-4]"
        )));
    }
    if values.len() != groups.len() || values.len() != analytic.len() {
        return Err(Error::Contract(
            "grad_check needs one group name and one analytic gradient per tensor".into(),
        ));
    }
    let base = loss(values)?;
    if !base.is_finite() {
        return Err(Error::Degenerate(format!("loss is {base} at the base point")));
    }

    let mut report: Vec<GroupCheck> = Vec::new();
    for t in 0..values.len() {
        if values[t].dim() != analytic[t].dim() {
            return Err(Error::Dimension(format!(
                "analytic gradient {:?} for tensor {:?}",
                analytic[t].dim(),
                values[t].dim()
            )));
        }
        let idx = match report.iter().position(|g| g.group == groups[t]) {
            Some(i) => i,
            None => {
                report.push(GroupCheck {
                    group: groups[t].clone(),
                    n_scalars: 0,
                    max_rel_error: 0.0,
                    worst: (0.0, 0.0),
                });
                report.len() - 1
            }
        };
        let shape = values[t].dim();
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let orig = values[t][[r, c]];
                values[t][[r, c]] = orig + h;
                let plus = loss(values)?;
                values[t][[r, c]] = orig - h;
                let minus = loss(values)?;
                values[t][[r, c]] = orig;
                if !plus.is_finite() || !minus.is_finite() {
                    return Err(Error::Degenerate(format!(
                        "loss became non-finite perturbing {}[{r},{c}]",
                        groups[t]
                    )));
                }
                let numeric = ((plus - minus) / L::of(2.0 * h)).to_f64();
                let a = analytic[t][[r, c]];
                let err = relative_error(a, numeric);
                let entry = &mut report[idx];
                entry.n_scalars += 1;
                if err > entry.max_rel_error || entry.n_scalars == 1 {
                    entry.max_rel_error = entry.max_rel_error.max(err);
                    entry.worst = (a, numeric);
                }
            }
        }
    }
    Ok(GradCheckReport {
        step: h,
        groups: report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tape;
    use ndarray::array;

    fn quadratic(v: &[Array2<f64>]) -> Result<f64> {
        Ok(0.5 * v[0].iter().map(|x| x * x).sum::<f64>())
    }

    #[test]
    fn quadratic_gradient_is_identity() {
        let x = array![[0.3, -1.2, 2.0]];
        let mut vals = vec![x.clone()];
        let rep = grad_check(&mut vals, &["x".to_string()], &[x.clone()], 1e-5, quadratic).unwrap();
        assert!(rep.max_rel_error() <= 1e-9, "{rep:?}");
        assert_eq!(vals[0], x);
    }

    #[test]
    fn rejects_step_out_of_range() {
        let x = array![[1.0]];
        let mut vals = vec![x.clone()];
        let r = grad_check(&mut vals, &["x".into()], &[x], 1e-3, quadratic);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn non_finite_loss_is_degenerate() {
        let x = array![[1.0]];
        let mut vals = vec![x.clone()];
        let r = grad_check(&mut vals, &["x".into()], &[x], 1e-5, |_| Ok(f64::NAN));
        assert!(matches!(r, Err(Error::Degenerate(_))));
    }

    #[test]
    fn detects_wrong_gradient() {
        let x = array![[0.5, 2.0]];
        let mut vals = vec![x.clone()];
        let wrong = &x * 1.01;
        let rep = grad_check(&mut vals, &["x".into()], &[wrong], 1e-5, quadratic).unwrap();
        assert!(rep.max_rel_error() > 5e-3);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-10, 0.0) - 1e-2).abs() < 1e-15);
    }

    #[test]
    fn tape_cosine_gradient_matches_oracle() {
        let u0 = array![[0.4, -1.1, 0.7, 2.0]];
        let v = array![[1.5, 0.2, -0.3, 0.9]];
        let f = |vals: &[Array2<f64>]| -> Result<f64> {
            let mut t = Tape::<f64>::new();
            let u = t.leaf(vals[0].clone());
            let vv = t.leaf(v.clone());
            let c = t.cosine_rows(u, vv)?;
            Ok(t.scalar(c))
        };
        let mut t = Tape::<f64>::new();
        let u = t.leaf(u0.clone());
        let vv = t.leaf(v.clone());
        let c = t.cosine_rows(u, vv).unwrap();
        let g = t.backward(c).unwrap();
        let mut vals = vec![u0];
        let rep = grad_check(&mut vals, &["u".into()], &[g.get(u).unwrap().clone()], 1e-5, f).unwrap();
        assert!(rep.max_rel_error() <= 1e-6, "{rep:?}");
    }
}
