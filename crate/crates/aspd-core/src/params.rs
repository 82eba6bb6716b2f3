//! Named parameter collections shared by the models, the optimizer and the
//! checkpoint format.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor};

/// An ordered name -> tensor map. Iteration order is always the sorted
/// name order, which keeps initialization, optimization and serialization
/// deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Registers every tensor on the tape; trainable parameters receive
    /// gradients, frozen ones participate in the forward pass only.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> ParamSet {
        let entries = self
            .entries
            .iter()
            .map(|(k, v)| {
                let bound = if trainable {
                    tape.param(v)
                } else {
                    tape.constant(v)
                };
                (k.clone(), bound)
            })
            .collect();
        ParamSet { entries }
    }

    /// Extracts gradients for a bound set, name by name.
    pub fn grads(&self, g: &Gradients) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        for (name, tensor) in &self.entries {
            out.insert(name.clone(), g.get(tensor)?);
        }
        Ok(out)
    }

    /// Merges another set into this one; duplicate names are an error.
    pub fn merge(&mut self, other: ParamSet) -> Result<()> {
        for (name, t) in other.entries {
            if self.entries.contains_key(&name) {
                return Err(Error::Config(format!("duplicate parameter '{name}'")));
            }
            self.entries.insert(name, t);
        }
        Ok(())
    }
}

/// Uniform Glorot initialization for a rows x cols weight matrix.
pub fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("finite init")
}

/// A zero-filled bias vector.
pub fn zero_bias(len: usize) -> Tensor {
    Tensor::zeros(vec![len])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn bind_and_grads_roundtrip_names() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut set = ParamSet::new();
        set.insert("a.w", glorot(&mut rng, 2, 3));
        set.insert("a.b", zero_bias(3));

        let tape = Tape::new();
        let bound = set.bind(&tape, true);
        let y = tape
            .linear(
                &Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap(),
                bound.get("a.w").unwrap(),
                bound.get("a.b").unwrap(),
            )
            .unwrap();
        let loss = tape.sum(&y).unwrap();
        let grads = bound.grads(&tape.backward(&loss).unwrap()).unwrap();
        assert_eq!(grads.len(), 2);
        assert_eq!(grads.get("a.b").unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn merge_rejects_duplicates() {
        let mut a = ParamSet::new();
        a.insert("x", Tensor::zeros(vec![1]));
        let mut b = ParamSet::new();
        b.insert("x", Tensor::zeros(vec![1]));
        assert!(a.merge(b).is_err());
    }
}
