use ndarray::{Array2, Zip};

use crate::diffcore::Real;
use crate::params::ModelParams;

/// First and second moment estimates for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<Array2<T>>,
    pub v: Vec<Array2<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Whether weight decay also applies to bias vectors.
    pub decay_biases: bool,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &ModelParams<T>, decay_biases: bool) -> Self {
        let zeros = || {
            params
                .tensors()
                .iter()
                .map(|p| Array2::zeros(p.shape()))
                .collect()
        };
        OptimizerState {
            m: zeros(),
            v: zeros(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_biases,
        }
    }
}

/// One Adam update with L2 decay added to the gradients, then zeroes
/// every gradient buffer.
pub fn adam_step<T: Real>(
    opt: &mut OptimizerState<T>,
    params: &mut ModelParams<T>,
    lr: f64,
    weight_decay: f64,
) {
    opt.step += 1;
    let t = opt.step as i32;
    let b1 = T::of(opt.beta1);
    let b2 = T::of(opt.beta2);
    let c1 = T::of(1.0 - opt.beta1.powi(t));
    let c2 = T::of(1.0 - opt.beta2.powi(t));
    let eps = T::of(opt.eps);
    let lr = T::of(lr);
    let one = T::one();
    let info = params.tensor_info();
    for (((p, m), v), info) in params
        .tensors_mut()
        .into_iter()
        .zip(&mut opt.m)
        .zip(&mut opt.v)
        .zip(info)
    {
        let wd = if info.is_bias && !opt.decay_biases {
            T::zero()
        } else {
            T::of(weight_decay)
        };
        Zip::from(&mut p.value)
            .and(&mut p.grad)
            .and(m)
            .and(v)
            .for_each(|theta, g, m, v| {
                let g_eff = *g + wd * *theta;
                *m = b1 * *m + (one - b1) * g_eff;
                *v = b2 * *v + (one - b2) * g_eff * g_eff;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
                *g = T::zero();
            });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ModelDims;

    fn tiny() -> ModelParams<f64> {
        let dims = ModelDims {
            d_v: 2,
            d_a: 2,
            d: 2,
            d_h: 2,
            experts: 1,
            proto_width: 4,
        };
        ModelParams::init(&dims, 3).unwrap()
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut p = tiny();
        let before = p.clone();
        let mut opt = OptimizerState::new(&p, true);
        adam_step(&mut opt, &mut p, 0.1, 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = tiny();
        p.b_out.value[[0, 0]] = 0.5;
        p.b_out.grad[[0, 0]] = 1.0;
        let mut opt = OptimizerState::new(&p, true);
        adam_step(&mut opt, &mut p, 0.1, 0.0);
        assert!((p.b_out.value[[0, 0]] - 0.4).abs() < 1e-6);
        assert!(p.tensors().iter().all(|t| t.grad.iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn quadratic_converges() {
        let mut p = tiny();
        p.b_out.value[[0, 0]] = 1.0;
        let mut opt = OptimizerState::new(&p, true);
        for _ in 0..100 {
            p.zero_grads();
            p.b_out.grad[[0, 0]] = p.b_out.value[[0, 0]];
            adam_step(&mut opt, &mut p, 0.1, 0.0);
        }
        assert!(p.b_out.value[[0, 0]].abs() < 0.05, "{}", p.b_out.value[[0, 0]]);
    }

    #[test]
    fn bias_decay_can_be_disabled() {
        let mut p = tiny();
        p.b1.value.fill(1.0);
        let mut opt = OptimizerState::new(&p, false);
        adam_step(&mut opt, &mut p, 0.1, 0.5);
        assert!(p.b1.value.iter().all(|&v| v == 1.0));
    }
}
