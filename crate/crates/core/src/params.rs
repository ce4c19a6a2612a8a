//! Named parameter storage with seeded initialization.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a fresh parameter is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in [−1/√fan_in, 1/√fan_in].
    FanIn(usize),
    Zeros,
    Constant(f64),
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Rc<Tensor>,
    frozen: bool,
}

/// All trainable tensors of a model, addressable by id or dotted name.
#[derive(Debug, Clone)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: BTreeMap<String, ParamId>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            entries: Vec::new(),
            by_name: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        let numel: usize = shape.iter().product();
        let data = match init {
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..numel).map(|_| self.rng.random_range(-bound..=bound)).collect()
            }
            Init::Zeros => vec![0.0; numel],
            Init::Constant(v) => vec![v; numel],
        };
        let t = Tensor::new(shape, data).expect("parameter shapes are non-empty");
        self.insert(name.into(), t)
    }

    pub fn add_tensor(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.insert(name.into(), t)
    }

    fn insert(&mut self, name: String, t: Tensor) -> ParamId {
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            value: Rc::new(t),
            frozen: false,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub(crate) fn shared(&self, id: ParamId) -> Rc<Tensor> {
        Rc::clone(&self.entries[id.0].value)
    }

    /// Mutable access; copies the tensor if a live graph still shares it.
    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        Rc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, t: Tensor) -> Result<()> {
        if t.shape() != self.get(id).shape() {
            return Err(invalid!(
                "parameter {} has shape {:?}, got {:?}",
                self.name(id),
                self.get(id).shape(),
                t.shape()
            ));
        }
        self.entries[id.0].value = Rc::new(t);
        Ok(())
    }

    /// Frozen parameters enter graphs as constants.
    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.entries[id.0].frozen = frozen;
    }

    pub fn freeze_prefix(&mut self, prefix: &str, frozen: bool) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.frozen = frozen;
            }
        }
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    pub fn zero_grads(&mut self) {
        for id in 0..self.entries.len() {
            if self.entries[id].value.grad.is_some() {
                Rc::make_mut(&mut self.entries[id].value).zero_grad();
            }
        }
    }

    pub fn count(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &*e.value))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fan_in_init_is_bounded_and_seeded() {
        let mut a = ParamStore::new(7);
        let mut b = ParamStore::new(7);
        let ia = a.add("w", &[16, 8], Init::FanIn(16));
        let ib = b.add("w", &[16, 8], Init::FanIn(16));
        assert_eq!(a.get(ia), b.get(ib));
        assert!(a.get(ia).data().iter().all(|v| v.abs() <= 0.25));
        let mut c = ParamStore::new(8);
        let ic = c.add("w", &[16, 8], Init::FanIn(16));
        assert_ne!(a.get(ia), c.get(ic));
    }

    #[test]
    fn lookup_and_counts() {
        let mut s = ParamStore::new(0);
        s.add("block.0.w", &[3, 4], Init::Zeros);
        s.add("block.1.w", &[2], Init::Constant(1.0));
        assert_eq!(s.count(), 14);
        assert_eq!(s.count_prefix("block.1"), 2);
        let id = s.id("block.1.w").unwrap();
        assert_eq!(s.get(id).data(), &[1.0, 1.0]);
        assert!(s.set(id, Tensor::zeros(&[3])).is_err());
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_panic() {
        let mut s = ParamStore::new(0);
        s.add("w", &[1], Init::Zeros);
        s.add("w", &[1], Init::Zeros);
    }
}
