//! Named parameter storage and the per-forward binding of parameters to a
//! graph.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

use crate::graph::{Gradients, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
}

/// Ordered collection of named tensors. Insertion order is preserved so
/// serialization is stable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter. Panics if the name is already taken.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(Param {
            name,
            value,
            frozen: false,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.entries[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.entries[id.0].frozen = frozen;
    }

    pub fn freeze_prefix(&mut self, prefix: &str, frozen: bool) {
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            e.frozen = frozen;
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.name.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_elements(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.value.len())
            .sum()
    }
}

/// Which parameters become gradient-carrying leaves in a [`Session`].
#[derive(Clone, Debug, Default)]
pub enum Trainable {
    #[default]
    All,
    Nothing,
    Prefixes(Vec<String>),
    Ids(Vec<ParamId>),
}

impl Trainable {
    pub fn prefixes<S: AsRef<str>>(prefixes: &[S]) -> Self {
        Trainable::Prefixes(prefixes.iter().map(|p| p.as_ref().to_string()).collect())
    }

    fn admits(&self, id: ParamId, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::Nothing => false,
            Trainable::Prefixes(p) => p.iter().any(|p| name.starts_with(p.as_str())),
            Trainable::Ids(ids) => ids.contains(&id),
        }
    }
}

/// Binds stored parameters into one graph. Parameters are materialized
/// lazily, once per session.
pub struct Session<'g, 's> {
    graph: &'g Graph,
    store: &'s ParamStore,
    trainable: Trainable,
    training: bool,
    bound: RefCell<Vec<(ParamId, Var<'g>)>>,
    rng: RefCell<StdRng>,
}

impl<'g, 's> Session<'g, 's> {
    pub fn new(graph: &'g Graph, store: &'s ParamStore) -> Self {
        Self {
            graph,
            store,
            trainable: Trainable::All,
            training: true,
            bound: RefCell::new(Vec::new()),
            rng: RefCell::new(StdRng::seed_from_u64(0)),
        }
    }

    pub fn with_trainable(mut self, trainable: Trainable) -> Self {
        self.trainable = trainable;
        self
    }

    /// Training flag, read by layers whose behavior differs at inference.
    pub fn with_training(mut self, training: bool) -> Self {
        self.training = training;
        self
    }

    /// Seed for stochastic layers (dropout).
    pub fn with_seed(self, seed: u64) -> Self {
        *self.rng.borrow_mut() = StdRng::seed_from_u64(seed);
        self
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn param(&self, id: ParamId) -> Var<'g> {
        if let Some(&(_, v)) = self.bound.borrow().iter().find(|(p, _)| *p == id) {
            return v;
        }
        let p = self.store.param(id);
        let value = p.value.clone();
        let var = if !p.frozen && self.trainable.admits(id, &p.name) {
            self.graph.leaf(value)
        } else {
            self.graph.constant(value)
        };
        self.bound.borrow_mut().push((id, var));
        var
    }

    pub fn constant(&self, value: Tensor) -> Var<'g> {
        self.graph.constant(value)
    }

    /// Uniform draws in `[0, 1)` of the given shape from the session stream.
    pub fn uniform(&self, shape: &[usize]) -> Tensor {
        let mut rng = self.rng.borrow_mut();
        Tensor::from_shape_simple_fn(shape, || rng.random::<f64>())
    }

    /// Gradients of every trainable parameter touched in this session.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        self.bound
            .borrow()
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .map(|&(id, v)| (id, grads.get_or_zeros(v)))
            .collect()
    }
}

/// Initializers. All take an explicit RNG so model construction is seeded.
pub mod init {
    use super::*;

    /// Kaiming (He) uniform for ReLU stacks: `U(-b, b)`, `b = sqrt(6 / fan_in)`.
    pub fn kaiming_uniform<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        uniform(shape, -bound, bound, rng)
    }

    pub fn uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Tensor {
        Tensor::from_shape_simple_fn(shape, || rng.random_range(lo..hi))
    }

    pub fn normal<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
        Tensor::from_shape_simple_fn(shape, || {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::zeros(shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> (ParamStore, ParamId, ParamId) {
        let mut s = ParamStore::new();
        let a = s.insert("enc.w", init::zeros(&[2]));
        let b = s.insert("dec.w", init::zeros(&[3]));
        (s, a, b)
    }

    #[test]
    fn trainable_selects_leaves_by_prefix() {
        let (s, a, b) = store();
        let g = Graph::new();
        let sess = Session::new(&g, &s).with_trainable(Trainable::prefixes(&["dec."]));
        assert!(!sess.param(a).requires_grad());
        assert!(sess.param(b).requires_grad());
        assert_eq!(sess.param(b).id(), sess.param(b).id());
    }

    #[test]
    fn frozen_prefix_overrides_trainable() {
        let (mut s, a, b) = store();
        s.freeze_prefix("enc.", true);
        assert!(s.is_frozen(a) && !s.is_frozen(b));
        let g = Graph::new();
        let sess = Session::new(&g, &s);
        assert!(!sess.param(a).requires_grad());
        assert_eq!(s.num_elements(""), 5);
        assert_eq!(s.ids_with_prefix("dec."), vec![b]);
    }

    #[test]
    fn session_streams_are_seeded() {
        let (s, _, _) = store();
        let g = Graph::new();
        let draw = |seed| Session::new(&g, &s).with_seed(seed).uniform(&[4]);
        assert_eq!(draw(9), draw(9));
        assert_ne!(draw(9), draw(10));
    }
}
