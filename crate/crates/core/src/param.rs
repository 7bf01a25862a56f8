//! Named parameters, the Adam optimizer and gradient clipping.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph};
use crate::tensor::{Precision, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Owns every learnable tensor of a model.
#[derive(Debug, Clone)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, ParamId>,
    precision: Precision,
}

impl ParamStore {
    pub fn new(precision: Precision) -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: BTreeMap::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Switches precision. Going to `Single` rounds stored values.
    pub fn set_precision(&mut self, precision: Precision) {
        self.precision = precision;
        for p in &mut self.params {
            precision.round_slice(p.value.data_mut());
        }
    }

    pub fn add(&mut self, name: impl Into<String>, mut value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter {name}")));
        }
        self.precision.round_slice(value.data_mut());
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.rows(), value.cols());
        self.params.push(Parameter {
            name: name.clone(),
            value,
            grad,
            trainable: true,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Marks exactly the parameters whose name satisfies `pred` as trainable.
    pub fn train_only(&mut self, pred: impl Fn(&str) -> bool) {
        for p in &mut self.params {
            p.trainable = pred(&p.name);
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Adds the gradients of all parameter leaves on `graph` into the stored
    /// gradients. Frozen parameters receive nothing.
    pub fn accumulate(&mut self, graph: &Graph, grads: &Gradients) {
        for (var, id) in graph.param_nodes() {
            let p = &mut self.params[id.0];
            if !p.trainable {
                continue;
            }
            if let Some(g) = grads.wrt(var) {
                p.grad.add_assign(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.grad.sq_norm())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales trainable gradients so their global L2 norm is at most
    /// `max_norm`. Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for p in self.params.iter_mut().filter(|p| p.trainable) {
                p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
            }
        }
        norm
    }

    /// Copies the values of every parameter.
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor]) {
        for (p, v) in self.params.iter_mut().zip(snapshot) {
            p.value = v.clone();
        }
    }

    /// FNV-1a over the bit patterns of one parameter's values.
    pub fn fingerprint(&self, id: ParamId) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.params[id.0].value.data() {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = |p: &Parameter| Tensor::zeros(p.value.rows(), p.value.cols());
        AdamState {
            step: 0,
            m: store.params.iter().map(zeros).collect(),
            v: store.params.iter().map(zeros).collect(),
        }
    }
}

/// One bias-corrected Adam update of every trainable parameter from its stored
/// gradient. Frozen parameters and their moments are left untouched.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if state.m.len() != store.params.len()
        || state
            .m
            .iter()
            .zip(&store.params)
            .any(|(m, p)| m.shape() != p.value.shape())
    {
        return Err(Error::shape("adam_step", "optimizer state does not match parameters"));
    }
    if let Some(p) = store
        .params
        .iter()
        .find(|p| p.trainable && !p.grad.all_finite())
    {
        return Err(Error::NonFinite(format!("gradient of {}", p.name)));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let precision = store.precision;
    for (i, p) in store.params.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, (w, &g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *w = precision.round(*w - cfg.lr * mhat / (vhat.sqrt() + cfg.eps));
        }
    }
    Ok(())
}
