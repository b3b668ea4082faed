//! Named parameters, ownership groups, and per-forward binding onto a graph.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{Gradients, Graph, Real, Tensor, Var};

/// Ownership group of a parameter. Training stages own whole groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    VideoEncoder,
    VideoAdapter,
    Periodicity,
    Projector,
    TextEncoder,
    TextHead,
    Temperature,
    LmBase,
    LmAdapter,
    CountTokens,
}

impl Group {
    pub const ALL: [Group; 10] = [
        Group::VideoEncoder,
        Group::VideoAdapter,
        Group::Periodicity,
        Group::Projector,
        Group::TextEncoder,
        Group::TextHead,
        Group::Temperature,
        Group::LmBase,
        Group::LmAdapter,
        Group::CountTokens,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::VideoEncoder => "video-encoder",
            Group::VideoAdapter => "video-adapter",
            Group::Periodicity => "periodicity",
            Group::Projector => "projector",
            Group::TextEncoder => "text-encoder",
            Group::TextHead => "text-head",
            Group::Temperature => "temperature",
            Group::LmBase => "lm-base",
            Group::LmAdapter => "lm-adapter",
            Group::CountTokens => "count-tokens",
        }
    }

    pub fn code(self) -> u8 {
        Group::ALL.iter().position(|&g| g == self).unwrap() as u8
    }

    pub fn from_code(code: u8) -> Option<Group> {
        Group::ALL.get(code as usize).copied()
    }

    fn bit(self) -> u16 {
        1 << Group::ALL.iter().position(|&g| g == self).unwrap()
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct GroupSet(u16);

impl GroupSet {
    pub const EMPTY: GroupSet = GroupSet(0);

    pub fn of(groups: &[Group]) -> Self {
        GroupSet(groups.iter().fold(0, |acc, g| acc | g.bit()))
    }

    pub fn contains(self, g: Group) -> bool {
        self.0 & g.bit() != 0
    }

    pub fn with(self, g: Group) -> Self {
        GroupSet(self.0 | g.bit())
    }

    pub fn without(self, g: Group) -> Self {
        GroupSet(self.0 & !g.bit())
    }

    pub fn complement(self) -> Self {
        GroupSet(!self.0 & ((1 << Group::ALL.len()) - 1))
    }

    pub fn is_disjoint(self, other: GroupSet) -> bool {
        self.0 & other.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Group> {
        Group::ALL.into_iter().filter(move |&g| self.contains(g))
    }
}

impl fmt::Debug for GroupSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

struct Entry<T> {
    name: String,
    group: Group,
    value: Arc<Tensor<T>>,
}

/// Ordered collection of named 2-D parameter tensors.
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    group: e.group,
                    value: e.value.clone(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

impl<T: Real> PartialEq for ParamStore<T> {
    fn eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name && a.group == b.group && bit_equal(&a.value, &b.value)
            })
    }
}

impl<T: Real> fmt::Debug for ParamStore<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_map()
            .entries(self.entries.iter().map(|e| (&e.name, e.value.shape())))
            .finish()
    }
}

/// Bitwise equality, so `-0.0 != 0.0` and NaNs compare by payload.
pub fn bit_equal<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> bool {
    if a.shape() != b.shape() {
        return false;
    }
    let (mut ba, mut bb) = (Vec::new(), Vec::new());
    for (&x, &y) in a.data().iter().zip(b.data()) {
        ba.clear();
        bb.clear();
        x.write_le(&mut ba);
        y.write_le(&mut bb);
        if ba != bb {
            return false;
        }
    }
    true
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, group: Group, value: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if value.rank() != 2 {
            return Err(Error::Config(format!("parameter {name} must be 2-D, got {:?}", value.shape())));
        }
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            group,
            value: Arc::new(value),
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.entries[id].name
    }

    pub fn group(&self, id: usize) -> Group {
        self.entries[id].group
    }

    pub fn value(&self, id: usize) -> &Arc<Tensor<T>> {
        &self.entries[id].value
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.id(name)
            .map(|id| &*self.entries[id].value)
            .ok_or_else(|| Error::Config(format!("no parameter named {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Replaces a value; the shape must be unchanged.
    pub fn set(&mut self, id: usize, value: Tensor<T>) -> Result<()> {
        let e = &mut self.entries[id];
        if e.value.shape() != value.shape() {
            return Err(Error::dim(
                "set",
                format!("{}: {:?} -> {:?}", e.name, e.value.shape(), value.shape()),
            ));
        }
        e.value = Arc::new(value);
        Ok(())
    }

    pub fn set_by_name(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Config(format!("no parameter named {name}")))?;
        self.set(id, value)
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        0..self.entries.len()
    }

    pub fn ids_in(&self, groups: GroupSet) -> impl Iterator<Item = usize> + '_ {
        self.ids().filter(move |&id| groups.contains(self.entries[id].group))
    }

    pub fn groups(&self) -> GroupSet {
        self.entries.iter().fold(GroupSet::EMPTY, |s, e| s.with(e.group))
    }

    pub fn count_in(&self, groups: GroupSet) -> usize {
        self.ids_in(groups).map(|id| self.entries[id].value.len()).sum()
    }

    /// True when every parameter of `groups` is bit-identical in `other`.
    pub fn groups_equal(&self, other: &ParamStore<T>, groups: GroupSet) -> bool {
        self.ids_in(groups).all(|id| {
            other
                .id(&self.entries[id].name)
                .is_some_and(|j| bit_equal(&self.entries[id].value, &other.entries[j].value))
        })
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for e in &self.entries {
            out.insert(e.name.clone(), e.group, e.value.cast())
                .expect("names are unique");
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.all_finite())
    }
}

/// Initialisers for freshly built models.
pub struct Init<'a, R: Rng> {
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    pub fn normal<T: Real>(&mut self, rows: usize, cols: usize, std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(&[rows, cols], |_| T::from_f64(dist.sample(self.rng)))
    }

    /// Fan-in scaled weights for a `rows x cols` projection.
    pub fn dense<T: Real>(&mut self, rows: usize, cols: usize) -> Tensor<T> {
        self.normal(rows, cols, 1.0 / (rows as f64).sqrt())
    }
}

/// Binds parameters of a store onto a fresh graph, once per forward pass.
pub struct Ctx<'a, T> {
    pub g: Graph<T>,
    store: &'a ParamStore<T>,
    trainable: GroupSet,
    bound: Vec<Option<Var>>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(store: &'a ParamStore<T>, trainable: GroupSet) -> Self {
        Self::with_graph(Graph::new(), store, trainable)
    }

    pub fn with_graph(g: Graph<T>, store: &'a ParamStore<T>, trainable: GroupSet) -> Self {
        Ctx {
            g,
            store,
            trainable,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    /// The graph variable of parameter `name`.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        let id = self
            .store
            .id(name)
            .ok_or_else(|| Error::Config(format!("model has no parameter {name}")))?;
        if let Some(v) = self.bound[id] {
            return Ok(v);
        }
        let rg = self.trainable.contains(self.store.group(id));
        let v = self.g.shared_leaf(self.store.value(id).clone(), rg)?;
        self.bound[id] = Some(v);
        Ok(v)
    }

    /// `x W + b` with `W = {prefix}.w`, `b = {prefix}.b`.
    pub fn affine(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        let y = self.g.matmul(x, w)?;
        self.g.add_row(y, b)
    }

    pub fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gain = self.p(&format!("{prefix}.g"))?;
        let bias = self.p(&format!("{prefix}.b"))?;
        self.g.layer_norm(x, gain, bias)
    }

    /// Trainable parameters bound in this pass, with their graph variables.
    pub fn trainable_bindings(&self) -> Vec<(usize, Var)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(id, v)| v.filter(|&v| self.g.requires_grad(v)).map(|v| (id, v)))
            .collect()
    }

    /// Moves the gradients of bound trainable parameters into `acc`.
    pub fn collect(&self, grads: &mut Gradients<T>, acc: &mut GradBuffer<T>) {
        for (id, v) in self.trainable_bindings() {
            if let Some(gr) = grads.take(v) {
                acc.add(id, gr);
            }
        }
    }
}

/// Gradient accumulator indexed by parameter id.
pub struct GradBuffer<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> GradBuffer<T> {
    pub fn new(n_params: usize) -> Self {
        GradBuffer {
            grads: (0..n_params).map(|_| None).collect(),
        }
    }

    pub fn add(&mut self, id: usize, g: Tensor<T>) {
        match &mut self.grads[id] {
            Some(existing) => {
                for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += *v;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Adds every gradient of `other`, in id order.
    pub fn merge(&mut self, other: GradBuffer<T>) {
        for (id, g) in other.grads.into_iter().enumerate() {
            if let Some(g) = g {
                self.add(id, g);
            }
        }
    }

    pub fn get(&self, id: usize) -> Option<&Tensor<T>> {
        self.grads.get(id).and_then(Option::as_ref)
    }

    pub fn scale(&mut self, f: T) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= f;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor<T>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(id, g)| g.as_ref().map(|g| (id, g)))
    }

    pub fn global_norm(&self) -> f64 {
        self.iter()
            .map(|(_, g)| g.data().iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|(_, g)| g.all_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_sets() {
        let s = GroupSet::of(&[Group::Periodicity, Group::TextHead]);
        assert!(s.contains(Group::Periodicity));
        assert!(!s.contains(Group::LmBase));
        assert!(s.is_disjoint(s.complement()));
        assert_eq!(s.iter().count(), 2);
        assert_eq!(s.with(Group::LmBase).without(Group::LmBase), s);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        store.insert("a.w", Group::Periodicity, Tensor::full(&[2, 2], 1.0)).unwrap();
        store.insert("a.b", Group::LmBase, Tensor::full(&[1, 2], 0.5)).unwrap();
        let mut ctx = Ctx::new(&store, GroupSet::of(&[Group::Periodicity]));
        let x = ctx.g.constant(Tensor::full(&[1, 2], 2.0)).unwrap();
        let y = ctx.affine(x, "a").unwrap();
        let s = ctx.g.sum_all(y).unwrap();
        let mut grads = ctx.g.backward(s).unwrap();
        let mut acc = GradBuffer::new(store.len());
        ctx.collect(&mut grads, &mut acc);
        assert!(acc.get(0).is_some());
        assert!(acc.get(1).is_none());
        assert_eq!(acc.get(0).unwrap().data(), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.insert("x", Group::Projector, Tensor::zeros(&[1, 1])).unwrap();
        assert!(store.insert("x", Group::Projector, Tensor::zeros(&[1, 1])).is_err());
    }

    #[test]
    fn bit_equality_distinguishes_signed_zero() {
        let a = Tensor::<f32>::full(&[1, 1], 0.0);
        let b = Tensor::<f32>::full(&[1, 1], -0.0);
        assert!(!bit_equal(&a, &b));
        assert!(bit_equal(&a, &a.clone()));
    }
}
