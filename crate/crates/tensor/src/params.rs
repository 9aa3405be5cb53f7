use std::sync::Arc;

use rand::Rng;

use crate::{Grads, Graph, Scalar, Tensor, Var};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of parameter tensors.
///
/// Insertion order is the serialization order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor<T>>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(Arc::new(t));
        ParamId(self.tensors.len() - 1)
    }

    /// Kaiming-uniform weight with bound `1/sqrt(fan_in)`.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.add(name, Tensor::uniform(shape, bound, rng))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.tensors[id.0])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names.iter().zip(&self.tensors).enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t.as_ref()))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Record every tensor as a leaf on `graph`.
    pub fn bind<'g>(&self, graph: &'g Graph<T>, trainable: bool) -> Bound<'g, T> {
        Bound { vars: self.tensors.iter().map(|t| graph.leaf(t.clone(), trainable)).collect() }
    }

    /// Same names and shapes, converted element type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(|t| Arc::new(t.cast())).collect() }
    }

    /// Replace a tensor, keeping its name. Panics on shape change.
    pub fn set(&mut self, id: ParamId, t: Tensor<T>) {
        assert_eq!(self.tensors[id.0].shape(), t.shape(), "parameter {} changes shape", self.names[id.0]);
        self.tensors[id.0] = Arc::new(t);
    }
}

/// Parameters of one store recorded on a graph.
pub struct Bound<'g, T: Scalar> {
    vars: Vec<Var<'g, T>>,
}

impl<'g, T: Scalar> Bound<'g, T> {
    pub fn var(&self, id: ParamId) -> Var<'g, T> {
        self.vars[id.0]
    }

    /// Two views over one bound store, split at index `at`; ids of the second
    /// view are shifted down by `at`.
    pub fn split(&self, at: usize) -> (Bound<'g, T>, Bound<'g, T>) {
        let (a, b) = self.vars.split_at(at);
        (Bound { vars: a.to_vec() }, Bound { vars: b.to_vec() })
    }

    /// Gradients for every parameter, in store order.
    pub fn grads(&self, grads: &mut Grads<T>) -> Vec<Option<Tensor<T>>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}

impl<'g, T: Scalar> std::ops::Index<ParamId> for Bound<'g, T> {
    type Output = Var<'g, T>;

    fn index(&self, id: ParamId) -> &Var<'g, T> {
        &self.vars[id.0]
    }
}

/// Adam with optional global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: None, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn with_clip_norm(mut self, clip: f64) -> Self {
        self.clip_norm = Some(clip);
        self
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update; `grads` is aligned with the store order. Returns the
    /// pre-clipping gradient norm.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> f64 {
        assert_eq!(grads.len(), store.len(), "gradient list does not match store");
        if self.m.len() != store.len() {
            self.m = vec![None; store.len()];
            self.v = vec![None; store.len()];
        }
        let norm = grads
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter().map(|v| v.as_f64().powi(2)))
            .sum::<f64>()
            .sqrt();
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let step_size = T::of(self.lr / bc1);
        let bc2_sqrt = T::of(bc2.sqrt());
        let eps = T::of(self.eps);
        let scale = T::of(scale);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let p = store.get_mut(ParamId(i));
            for (((pv, mv), vv), &gv) in
                p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data())
            {
                let gv = gv * scale;
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                *pv = *pv - step_size * *mv / (vv.sqrt() / bc2_sqrt + eps);
            }
        }
        norm
    }
}
