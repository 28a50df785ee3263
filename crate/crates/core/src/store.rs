//! Named parameter storage shared by every network module.
//!
//! Parameters are dense 2-D arrays addressed by a stable [`ParamId`] in
//! creation order; names are unique, hierarchical (e.g. `asm.layer2.attn.wq`)
//! and are the serialization key. Freezing is a per-parameter flag consulted
//! when parameters are injected into a tape and by the optimizer.

use ndarray::Array2;

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Param<S: Scalar> {
    name: String,
    value: Array2<S>,
    frozen: bool,
}

#[derive(Debug, Clone)]
pub struct ParamStore<S: Scalar> {
    params: Vec<Param<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    /// Registers a parameter; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Array2<S>) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name:?}"
        );
        self.params.push(Param { name, value, frozen: false });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Array2<S> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<S> {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.params[id.0].frozen
    }

    /// Sets the frozen flag on every parameter whose name starts with `prefix`.
    /// Returns how many parameters matched.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.frozen = frozen;
                n += 1;
            }
        }
        n
    }

    /// Ids in creation order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Converts every parameter to another scalar type.
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.mapv(|x| T::narrow(x.widen())),
                    frozen: p.frozen,
                })
                .collect(),
        }
    }
}

/// Per-parameter gradients, indexed like the store; missing entries mean the
/// parameter did not participate (or is frozen).
#[derive(Debug, Clone)]
pub struct ParamGrads<S: Scalar> {
    grads: Vec<Option<Array2<S>>>,
}

impl<S: Scalar> ParamGrads<S> {
    pub fn zeros(n_params: usize) -> Self {
        ParamGrads { grads: vec![None; n_params] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<S>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn accumulate(&mut self, id: ParamId, grad: Array2<S>) {
        match &mut self.grads[id.0] {
            Some(g) => *g += &grad,
            slot @ None => *slot = Some(grad),
        }
    }

    /// Merges another gradient set (summing overlaps). Order of merges is the
    /// caller's responsibility; the training loop merges samples in index
    /// order so accumulation is bit-deterministic.
    pub fn merge(&mut self, other: ParamGrads<S>) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (idx, g) in other.grads.into_iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(idx), g);
            }
        }
    }

    /// Scales every gradient in place (e.g. 1/batch for mean reduction).
    pub fn scale(&mut self, factor: S) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * factor);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array2<S>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    /// Largest absolute gradient entry, for divergence monitoring.
    pub fn max_abs(&self) -> f64 {
        let mut m = 0.0f64;
        for (_, g) in self.iter() {
            for x in g.iter() {
                m = m.max(x.widen().abs());
            }
        }
        m
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|(_, g)| g.iter().all(|x| x.widen().is_finite()))
    }
}

/// First and second gradient-moment accumulators for the AdamW update,
/// stored in parameter-index order alongside the update count.
#[derive(Debug, Clone)]
pub struct AdamState<S: Scalar> {
    pub step: u64,
    pub m: Vec<Array2<S>>,
    pub v: Vec<Array2<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn zeros_like(store: &ParamStore<S>) -> Self {
        let m = store
            .params
            .iter()
            .map(|p| Array2::zeros(p.value.dim()))
            .collect::<Vec<_>>();
        AdamState { step: 0, v: m.clone(), m }
    }

    pub fn cast<T: Scalar>(&self) -> AdamState<T> {
        let conv = |xs: &Vec<Array2<S>>| {
            xs.iter()
                .map(|a| a.mapv(|x| T::narrow(x.widen())))
                .collect()
        };
        AdamState { step: self.step, m: conv(&self.m), v: conv(&self.v) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn add_find_freeze() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("vae.enc.w", Array2::zeros((2, 2)));
        let b = store.add("asm.head.w", Array2::zeros((3, 1)));
        assert_eq!(store.find("vae.enc.w"), Some(a));
        assert_eq!(store.find("nope"), None);
        assert_eq!(store.set_frozen_prefix("vae.", true), 1);
        assert!(store.is_frozen(a));
        assert!(!store.is_frozen(b));
        assert_eq!(store.total_elements(), 7);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Array2::zeros((1, 1)));
        store.add("w", Array2::zeros((1, 1)));
    }

    #[test]
    fn grads_accumulate_and_merge() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Array2::zeros((1, 2)));
        let mut g1 = ParamGrads::zeros(store.len());
        g1.accumulate(a, arr2(&[[1.0, 2.0]]));
        let mut g2 = ParamGrads::zeros(store.len());
        g2.accumulate(a, arr2(&[[0.5, -1.0]]));
        g1.merge(g2);
        assert_eq!(g1.get(a).unwrap(), &arr2(&[[1.5, 1.0]]));
        assert!((g1.max_abs() - 1.5).abs() < 1e-15);
        assert!(g1.all_finite());
    }
}
