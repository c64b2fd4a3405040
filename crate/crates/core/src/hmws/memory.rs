use std::collections::HashSet;

use crate::ad::{ParamStore, Tape};
use crate::error::Result;
use crate::model::HybridModel;
use crate::prob::StreamRng;

/// Per-datapoint set of discrete latents.
///
/// Entries are unique under the model's canonical key except when the memory
/// is flagged `degenerate`: the discrete support reachable by sampling was
/// smaller than the requested size.
#[derive(Clone, Debug, PartialEq)]
pub struct Memory<Z> {
    pub entries: Vec<Z>,
    pub degenerate: bool,
}

impl<Z> Memory<Z> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl<Z: Clone> Memory<Z> {
    /// Canonical keys of the entries, in order.
    pub fn keys<M: HybridModel<Discrete = Z>>(&self, model: &M) -> Vec<Vec<u8>> {
        self.entries
            .iter()
            .map(|z| model.canonical_key(z))
            .collect()
    }

    pub fn from_keys<M: HybridModel<Discrete = Z>>(
        model: &M,
        keys: &[Vec<u8>],
        size: usize,
    ) -> Option<Self> {
        let entries: Option<Vec<Z>> = keys.iter().map(|k| model.from_key(k)).collect();
        let entries = entries?;
        let unique: HashSet<&Vec<u8>> = keys.iter().collect();
        let degenerate = unique.len() < size;
        Some(Memory {
            entries,
            degenerate,
        })
    }
}

/// Fills a memory of `size` unique latents.
///
/// Draws from `q(z_d | x)` for up to `50 · size` attempts, then from the prior
/// for another `50 · size`. If uniqueness is still not reached, the memory is
/// padded with repeats of its first entry and flagged degenerate; wake updates
/// deduplicate it later.
pub fn init_memory<M: HybridModel>(
    model: &M,
    store: &ParamStore,
    x: &M::Obs,
    size: usize,
    rng: &mut StreamRng,
) -> Result<Memory<M::Discrete>> {
    let mut tape = Tape::new(store);
    let enc = model.encode(&mut tape, store, x)?;
    let mut seen = HashSet::new();
    let mut entries = Vec::with_capacity(size);
    let cap = 50 * size;
    for _ in 0..cap {
        if entries.len() == size {
            break;
        }
        let z = model.sample_discrete(&mut tape, store, enc, rng)?;
        if seen.insert(model.canonical_key(&z)) {
            entries.push(z);
        }
    }
    for _ in 0..cap {
        if entries.len() == size {
            break;
        }
        let z = model.sample_prior_discrete(store, rng)?;
        if seen.insert(model.canonical_key(&z)) {
            entries.push(z);
        }
    }
    let degenerate = entries.len() < size;
    while entries.len() < size {
        entries.push(entries[0].clone());
    }
    Ok(Memory {
        entries,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prob::{stream, ConjugateTestbed, TestbedModel};

    fn setup(d: usize) -> (TestbedModel, ParamStore) {
        let tb = ConjugateTestbed::new(
            vec![1.0 / d as f64; d],
            (0..d).map(|i| i as f64).collect(),
            1.0,
            1.0,
        )
        .unwrap();
        let model = TestbedModel::new(d);
        let store = model.init_store(&tb).unwrap();
        (model, store)
    }

    #[test]
    fn uniform_q_fills_unique_entries() {
        let (model, store) = setup(10);
        let mut rng = stream(3, 0, 0);
        let mem = init_memory(&model, &store, &0.5, 4, &mut rng).unwrap();
        assert_eq!(mem.len(), 4);
        assert!(!mem.degenerate);
        let keys: HashSet<_> = mem.keys(&model).into_iter().collect();
        assert_eq!(keys.len(), 4);
    }

    #[test]
    fn single_entry_is_never_degenerate() {
        let (model, store) = setup(1);
        let mem = init_memory(&model, &store, &0.0, 1, &mut stream(0, 0, 0)).unwrap();
        assert_eq!(mem.entries, vec![0]);
        assert!(!mem.degenerate);
    }

    #[test]
    fn binary_support_is_exhausted() {
        let (model, store) = setup(2);
        let mem = init_memory(&model, &store, &0.0, 2, &mut stream(1, 0, 0)).unwrap();
        let mut e = mem.entries.clone();
        e.sort();
        assert_eq!(e, vec![0, 1]);
    }

    #[test]
    fn oversized_memory_is_flagged() {
        let (model, store) = setup(2);
        let mem = init_memory(&model, &store, &0.0, 3, &mut stream(1, 0, 0)).unwrap();
        assert_eq!(mem.len(), 3);
        assert!(mem.degenerate);
    }

    #[test]
    fn keys_round_trip() {
        let (model, store) = setup(5);
        let mem = init_memory(&model, &store, &0.0, 3, &mut stream(2, 0, 0)).unwrap();
        let back = Memory::from_keys(&model, &mem.keys(&model), 3).unwrap();
        assert_eq!(back, mem);
    }
}
