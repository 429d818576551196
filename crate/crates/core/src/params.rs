//! Named parameter storage shared by the recurrent cells and the joint model.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Decides whether a parameter is subject to L2 regularization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    Embedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

/// Draws from N(0, std^2) truncated at two standard deviations.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, kind, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn add_random<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        kind: ParamKind,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| truncated_normal(rng, std)).collect();
        self.add(name, kind, Tensor::from_parts(shape.to_vec(), data))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(self.entries[id.0].value.shape(), value.shape());
        self.entries[id.0].value = value;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Places every parameter on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self.entries.iter().map(|e| tape.leaf(e.value.clone())).collect();
        Bound { vars }
    }
}

/// Tape handles for every parameter of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Collects per-parameter gradients, zero for parameters the loss does
    /// not reach.
    pub fn gradients(&self, tape: &Tape, grads: &Gradients) -> ParamGrads {
        ParamGrads {
            grads: self.vars.iter().map(|&v| grads.get(tape, v)).collect(),
        }
    }

    /// Like [`Bound::gradients`] but keeps `None` for unreached parameters.
    pub fn reached(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|&v| grads.try_get(v).cloned()).collect()
    }
}

/// Gradients aligned with the entries of a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub grads: Vec<Tensor>,
}

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn norm(&self) -> f64 {
        self.grads.iter().map(Tensor::sum_squares).sum::<f64>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn truncated_normal_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws: Vec<f64> = (0..5000).map(|_| truncated_normal(&mut rng, 0.1)).collect();
        assert!(draws.iter().all(|v| v.abs() <= 0.2));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!(mean.abs() < 0.01);
        // truncation at 2 sigma shrinks the std to about 0.88 sigma
        let var = draws.iter().map(|v| v * v).sum::<f64>() / draws.len() as f64;
        assert!((var.sqrt() - 0.088).abs() < 0.005, "{}", var.sqrt());
    }

    #[test]
    fn bind_and_collect() {
        let mut store = ParamStore::new();
        let a = store.add("a", ParamKind::Weight, Tensor::vector(vec![1.0, 2.0]).unwrap());
        let b = store.add("b", ParamKind::Bias, Tensor::vector(vec![3.0]).unwrap());
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let loss = tape.sum(bound.var(a)).unwrap();
        let g = tape.backward(loss).unwrap();
        let pg = bound.gradients(&tape, &g);
        assert_eq!(pg.get(a).data(), &[1.0, 1.0]);
        assert_eq!(pg.get(b).data(), &[0.0]);
        assert!(bound.reached(&g)[b.index()].is_none());
        assert_eq!(store.find("b"), Some(b));
    }
}
