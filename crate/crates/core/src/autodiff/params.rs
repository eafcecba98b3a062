//! Named parameter storage, tape binding, and the Adam optimizer.
//!
//! Parameters live outside any tape. Each training step binds them onto a
//! fresh tape as gradient-tracked leaves, runs forward/backward, pulls the
//! gradients back, and lets the optimizer update the stored values.

use rand::Rng;

use super::{Tape, Tensor, Var};
use crate::util::randn_vec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

/// Ordered collection of learnable tensors. Registration order is the
/// canonical order used by checkpoints, so it must be deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) -> ParamId {
        assert!(
            !self.params.iter().any(|p| p.name == name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            tensor: Tensor::new(shape, data, true),
        });
        id
    }

    /// Registers a parameter with normal(0, scale) init.
    pub fn register_normal<R: Rng>(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        rng: &mut R,
        scale: f64,
    ) -> ParamId {
        let n = shape.iter().product();
        self.register(name, shape, randn_vec(rng, n, scale))
    }

    pub fn register_zeros(&mut self, name: &str, shape: Vec<usize>) -> ParamId {
        let n = shape.iter().product();
        self.register(name, shape, vec![0.0; n])
    }

    pub fn register_ones(&mut self, name: &str, shape: Vec<usize>) -> ParamId {
        let n = shape.iter().product();
        self.register(name, shape, vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Euclidean distance between two parameter sets of identical layout.
    pub fn euclidean_distance(&self, other: &ParamSet) -> f64 {
        assert_eq!(self.params.len(), other.params.len(), "layout mismatch");
        let mut acc = 0.0;
        for (a, b) in self.params.iter().zip(other.params.iter()) {
            assert_eq!(a.name, b.name, "layout mismatch at {}", a.name);
            for (x, y) in a.tensor.data.iter().zip(&b.tensor.data) {
                let d = x - y;
                acc += d * d;
            }
        }
        acc.sqrt()
    }

    /// Puts every parameter on the tape as a gradient-tracked leaf.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone()))
            .collect();
        Binding { vars }
    }

    /// Copies gradients accumulated on the tape back into the stored
    /// parameters. Parameters off the loss path get zero gradients.
    pub fn absorb_grads(&mut self, tape: &Tape, binding: &Binding) {
        for (param, &var) in self.params.iter_mut().zip(&binding.vars) {
            param.tensor.grad = Some(match tape.grad(var) {
                Some(g) => g.to_vec(),
                None => vec![0.0; param.tensor.len()],
            });
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.iter_mut() {
            p.tensor.grad = None;
        }
    }
}

/// Maps a [`ParamSet`] onto the leaf [`Var`]s of one tape.
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Adam with bias correction. Moments are kept per parameter element,
/// aligned with the set's registration order.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.tensor.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.tensor.len()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over all parameters. Missing gradients count as zero.
    /// Gradients are cleared afterwards.
    pub fn step(&mut self, params: &mut ParamSet, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, param) in (0..params.len()).map(ParamId).map(|id| (id.0, id)) {
            let p = params.param_mut(param);
            let zeros;
            let grad: &[f64] = match p.tensor.grad.as_deref() {
                Some(g) => g,
                None => {
                    zeros = vec![0.0; p.tensor.len()];
                    &zeros
                }
            };
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..p.tensor.data.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.tensor.data[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        params.zero_grads();
    }
}
