//! Trainable tensors of the model and their gradient slots.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::RelationClassifier;
use crate::diffcore::{Gradients, Real, Tape, Var};
use crate::error::{Error, Result};
use crate::prototypes::{Expert, PrototypeNet};

/// A trainable tensor with its gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Array2<T>,
    pub grad: Array2<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Array2<T>) -> Self {
        let grad = Array2::zeros(value.dim());
        Param { value, grad }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.dim()
    }
}

/// Layer widths of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Feature width.
    pub d_v: usize,
    /// Attribute width.
    pub d_a: usize,
    /// Prototype width, shared by both spaces.
    pub d: usize,
    /// Classifier hidden width.
    pub d_h: usize,
    pub experts: usize,
    /// Width of the prototype fed to the classifier (`2d` when fused).
    pub proto_width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertParams<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    /// Feature projection `W`, `d × d_v`.
    pub proj: Param<T>,
    pub experts: Vec<ExpertParams<T>>,
    pub head_v: Param<T>,
    pub head_s: Param<T>,
    pub w1: Param<T>,
    pub w2: Param<T>,
    pub b1: Param<T>,
    pub w_out: Param<T>,
    pub b_out: Param<T>,
}

/// Name, report group and bias flag of one tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub group: &'static str,
    pub is_bias: bool,
}

/// Parameter groups in canonical order.
pub const GROUPS: [&str; 9] = ["W", "experts", "h_v", "h_s", "W1", "W2", "b1", "w", "b"];

fn uniform<T: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<T> {
    let bound = 1.0 / (cols as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || T::of(rng.gen_range(-bound..bound)))
}

impl<T: Real> ModelParams<T> {
    /// Weights uniform in `±1/√fan_in`, biases zero.
    pub fn init(dims: &ModelDims, seed: u64) -> Result<Self> {
        if dims.d == 0 || dims.d_h == 0 || dims.experts == 0 || dims.proto_width == 0 {
            return Err(Error::Config(format!("degenerate model dims {dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let proj = Param::new(uniform(&mut rng, dims.d, dims.d_v));
        let experts = (0..dims.experts)
            .map(|_| ExpertParams {
                weight: Param::new(uniform(&mut rng, dims.d, dims.d_a)),
                bias: Param::new(Array2::zeros((1, dims.d))),
            })
            .collect();
        let head_v = Param::new(uniform(&mut rng, dims.d, dims.d));
        let head_s = Param::new(uniform(&mut rng, dims.d, dims.d));
        let w1 = Param::new(uniform(&mut rng, dims.d_h, dims.d_v));
        let w2 = Param::new(uniform(&mut rng, dims.d_h, dims.proto_width));
        let b1 = Param::new(Array2::zeros((1, dims.d_h)));
        let w_out = Param::new(uniform(&mut rng, 1, dims.d_h));
        let b_out = Param::new(Array2::zeros((1, 1)));
        Ok(ModelParams {
            proj,
            experts,
            head_v,
            head_s,
            w1,
            w2,
            b1,
            w_out,
            b_out,
        })
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            d_v: self.proj.shape().1,
            d_a: self.experts[0].weight.shape().1,
            d: self.proj.shape().0,
            d_h: self.w1.shape().0,
            experts: self.experts.len(),
            proto_width: self.w2.shape().1,
        }
    }

    /// Metadata for [`ModelParams::tensors`], same order.
    pub fn tensor_info(&self) -> Vec<TensorInfo> {
        let info = |name: String, group, is_bias| TensorInfo {
            name,
            group,
            is_bias,
        };
        let mut out = vec![info("W".into(), "W", false)];
        for e in 0..self.experts.len() {
            out.push(info(format!("experts.{e}.weight"), "experts", false));
            out.push(info(format!("experts.{e}.bias"), "experts", true));
        }
        out.extend([
            info("h_v".into(), "h_v", false),
            info("h_s".into(), "h_s", false),
            info("W1".into(), "W1", false),
            info("W2".into(), "W2", false),
            info("b1".into(), "b1", true),
            info("w".into(), "w", false),
            info("b".into(), "b", true),
        ]);
        out
    }

    pub fn tensors(&self) -> Vec<&Param<T>> {
        let mut out = vec![&self.proj];
        for e in &self.experts {
            out.push(&e.weight);
            out.push(&e.bias);
        }
        out.extend([
            &self.head_v,
            &self.head_s,
            &self.w1,
            &self.w2,
            &self.b1,
            &self.w_out,
            &self.b_out,
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = vec![&mut self.proj];
        for e in &mut self.experts {
            out.push(&mut e.weight);
            out.push(&mut e.bias);
        }
        out.extend([
            &mut self.head_v,
            &mut self.head_s,
            &mut self.w1,
            &mut self.w2,
            &mut self.b1,
            &mut self.w_out,
            &mut self.b_out,
        ]);
        out
    }

    pub fn zero_grads(&mut self) {
        for p in self.tensors_mut() {
            p.grad.fill(T::zero());
        }
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors().iter().map(|p| p.value.len()).sum()
    }

    /// Element type conversion; gradients are reset.
    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let c = |p: &Param<T>| Param::new(p.value.mapv(|v| U::of(v.to_f64())));
        ModelParams {
            proj: c(&self.proj),
            experts: self
                .experts
                .iter()
                .map(|e| ExpertParams {
                    weight: c(&e.weight),
                    bias: c(&e.bias),
                })
                .collect(),
            head_v: c(&self.head_v),
            head_s: c(&self.head_s),
            w1: c(&self.w1),
            w2: c(&self.w2),
            b1: c(&self.b1),
            w_out: c(&self.w_out),
            b_out: c(&self.b_out),
        }
    }

    /// Rebuilds parameters from tensors in [`ModelParams::tensors`] order.
    pub fn from_tensors(dims: &ModelDims, values: Vec<Array2<T>>) -> Result<Self> {
        let mut template = Self::init(dims, 0)?;
        let slots = template.tensors_mut();
        if slots.len() != values.len() {
            return Err(Error::Manifest(format!(
                "expected {} tensors, got {}",
                slots.len(),
                values.len()
            )));
        }
        for (slot, v) in slots.into_iter().zip(values) {
            if slot.value.dim() != v.dim() {
                return Err(Error::Manifest(format!(
                    "tensor shape {:?} where {:?} is expected",
                    v.dim(),
                    slot.value.dim()
                )));
            }
            *slot = Param::new(v);
        }
        Ok(template)
    }

    /// Registers every tensor as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundParams {
        let proj = tape.leaf(self.proj.value.clone());
        let experts = self
            .experts
            .iter()
            .map(|e| Expert {
                weight: tape.leaf(e.weight.value.clone()),
                bias: tape.leaf(e.bias.value.clone()),
            })
            .collect();
        let head_v = tape.leaf(self.head_v.value.clone());
        let head_s = tape.leaf(self.head_s.value.clone());
        let classifier = RelationClassifier {
            w1: tape.leaf(self.w1.value.clone()),
            w2: tape.leaf(self.w2.value.clone()),
            b1: tape.leaf(self.b1.value.clone()),
            w: tape.leaf(self.w_out.value.clone()),
            b: tape.leaf(self.b_out.value.clone()),
        };
        BoundParams {
            net: PrototypeNet { proj, experts },
            head_v,
            head_s,
            classifier,
        }
    }

    /// Adds the gradients of `bound` into each tensor's grad slot.
    pub fn accumulate_grads(&mut self, bound: &BoundParams, grads: &Gradients<T>) {
        for (p, v) in self.tensors_mut().into_iter().zip(bound.vars()) {
            if let Some(g) = grads.get(v) {
                p.grad += g;
            }
        }
    }
}

/// Tape handles of every parameter tensor.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub net: PrototypeNet,
    pub head_v: Var,
    pub head_s: Var,
    pub classifier: RelationClassifier,
}

impl BoundParams {
    /// Vars in [`ModelParams::tensors`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.net.proj];
        for e in &self.net.experts {
            out.push(e.weight);
            out.push(e.bias);
        }
        let c = &self.classifier;
        out.extend([self.head_v, self.head_s, c.w1, c.w2, c.b1, c.w, c.b]);
        out
    }
}
