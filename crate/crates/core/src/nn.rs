//! Parameter storage, initialization and the optimizer.
//!
//! Parameters live in a [`ParamStore`] keyed by stable hierarchical names
//! (`"backbone.stage1.mix0.conv1.weight"`). Modules are stateless
//! descriptors that register parameters at init and fetch them by name at
//! forward time; the checkpoint container serializes the store directly.

use std::collections::BTreeMap;

use ndarray::{Array1, Array4, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::tensor::Real;

#[derive(Debug, Clone)]
pub struct Param<F: Real> {
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
    pub trainable: bool,
}

/// Ordered collection of named parameters. Iteration order is the sorted
/// name order, which keeps optimizer updates and serialization
/// deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F: Real> {
    params: BTreeMap<String, Param<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<F>) {
        assert!(
            !self.params.contains_key(name),
            "duplicate parameter name: {name}"
        );
        let grad = ArrayD::zeros(value.raw_dim());
        self.params.insert(name.to_string(), Param { value, grad, trainable: true });
    }

    pub fn get(&self, name: &str) -> &Param<F> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter: {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param<F> {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter: {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn accumulate_grad(&mut self, name: &str, delta: &ArrayD<F>) {
        let p = self.get_mut(name);
        p.grad += delta;
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(F::zero());
        }
    }

    /// Marks every parameter under `prefix` as frozen (or unfrozen).
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<F>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<F>)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Bitwise equality of values (used by checkpoint round-trip tests).
    pub fn values_equal(&self, other: &ParamStore<F>) -> bool {
        if self.params.len() != other.params.len() {
            return false;
        }
        self.params.iter().all(|(name, p)| {
            other
                .params
                .get(name)
                .map(|q| q.value.shape() == p.value.shape() && q.value == p.value)
                .unwrap_or(false)
        })
    }
}

/// Fan-in-scaled uniform init: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn fan_in_uniform<F: Real>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<F> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<F> = (0..n)
        .map(|_| F::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Descriptor for a 2-D convolution layer; parameters are registered under
/// `<name>.weight` / `<name>.bias`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, in_c: usize, out_c: usize, k: usize, stride: usize) -> Self {
        Conv2d { name: name.into(), in_c, out_c, k, stride, pad: k / 2 }
    }

    pub fn register<F: Real>(&self, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng) {
        self.register_with(store, rng, false)
    }

    /// `zero_bias` forces the bias to start at exactly zero (the focus-map
    /// fusion head uses this so the untrained map sits at 0.5).
    pub fn register_with<F: Real>(
        &self,
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        zero_bias: bool,
    ) {
        let fan_in = self.in_c * self.k * self.k;
        let w = fan_in_uniform::<F>(rng, &[self.out_c, self.in_c, self.k, self.k], fan_in);
        store.insert(&format!("{}.weight", self.name), w);
        let b = if zero_bias {
            ArrayD::zeros(IxDyn(&[self.out_c]))
        } else {
            fan_in_uniform::<F>(rng, &[self.out_c], fan_in)
        };
        store.insert(&format!("{}.bias", self.name), b);
    }

    /// Registers with all-zero weight and bias (test scaffolding for the
    /// "zero parameters" contract cases).
    pub fn register_zeros<F: Real>(&self, store: &mut ParamStore<F>) {
        store.insert(
            &format!("{}.weight", self.name),
            ArrayD::zeros(IxDyn(&[self.out_c, self.in_c, self.k, self.k])),
        );
        store.insert(&format!("{}.bias", self.name), ArrayD::zeros(IxDyn(&[self.out_c])));
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Var {
        let w = tape.param(store, &format!("{}.weight", self.name));
        let b = tape.param(store, &format!("{}.bias", self.name));
        tape.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn weight_value<F: Real>(&self, store: &ParamStore<F>) -> Array4<F> {
        store
            .get(&format!("{}.weight", self.name))
            .value
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap()
            .to_owned()
    }

    pub fn bias_value<F: Real>(&self, store: &ParamStore<F>) -> Array1<F> {
        store
            .get(&format!("{}.bias", self.name))
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned()
    }
}

/// Decoupled-weight-decay Adam. State arrays are keyed by parameter name and
/// updated in sorted-name order.
pub struct AdamW<F: Real> {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: usize,
    state: BTreeMap<String, (ArrayD<F>, ArrayD<F>)>,
}

impl<F: Real> AdamW<F> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One optimizer step over every trainable parameter, consuming the
    /// accumulated gradients (which are then zeroed by the caller).
    pub fn step(&mut self, store: &mut ParamStore<F>) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let one = F::one();
        let bc1 = F::from_f64(1.0 - self.beta1.powi(t));
        let bc2 = F::from_f64(1.0 - self.beta2.powi(t));
        let lr = F::from_f64(self.lr);
        let wd = F::from_f64(self.weight_decay);
        let eps = F::from_f64(self.eps);

        for (name, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let (m, v) = self
                .state
                .entry(name.clone())
                .or_insert_with(|| (ArrayD::zeros(p.value.raw_dim()), ArrayD::zeros(p.value.raw_dim())));
            for ((pv, g), (mv, vv)) in p
                .value
                .iter_mut()
                .zip(p.grad.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = b1 * *mv + (one - b1) * *g;
                *vv = b2 * *vv + (one - b2) * *g * *g;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv = *pv - lr * (mhat / (vhat.sqrt() + eps) + wd * *pv);
            }
        }
    }

    /// (name, m, v) triples for checkpointing.
    pub fn state(&self) -> impl Iterator<Item = (&str, &ArrayD<F>, &ArrayD<F>)> {
        self.state.iter().map(|(k, (m, v))| (k.as_str(), m, v))
    }

    pub fn restore_state(&mut self, step: usize, entries: Vec<(String, ArrayD<F>, ArrayD<F>)>) {
        self.step = step;
        self.state = entries.into_iter().map(|(k, m, v)| (k, (m, v))).collect();
    }
}
