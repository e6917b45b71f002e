//! Named parameter sets.
//!
//! All learnable tensors live in one ordered map under stable dotted names
//! (`block0.attn.wq`, `block1.ffn.gen.up`, `block0.saa.3.gate.A`, ...).
//! Each entry carries a frozen flag; frozen tensors never receive
//! gradients and must stay bit-identical across optimizer steps. The same
//! map serializes to the checkpoint container in name order.

use std::collections::btree_map;
use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{read_tensors, write_tensors, Tensor};

#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub frozen: bool,
}

/// Ordered name → parameter map.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    map: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        assert!(
            self.map.insert(name.clone(), Param { value, frozen: false }).is_none(),
            "duplicate parameter `{name}`"
        );
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.map.get(name).ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self.map.get_mut(name).ok_or_else(|| Error::MissingParameter(name.to_string()))?;
        assert_eq!(p.value.shape(), value.shape(), "parameter `{name}` changed shape");
        p.value = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> btree_map::Iter<'_, String, Param> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    /// Freeze exactly the parameters matching the predicate, thawing the
    /// rest.
    pub fn set_frozen_where(&mut self, frozen: impl Fn(&str) -> bool) {
        for (name, p) in self.map.iter_mut() {
            p.frozen = frozen(name);
        }
    }

    pub fn frozen_names(&self) -> Vec<String> {
        self.map.iter().filter(|(_, p)| p.frozen).map(|(n, _)| n.clone()).collect()
    }

    /// FNV-1a over the exact bit patterns of the selected tensors, in name
    /// order. Used by freeze-contract checks.
    pub fn checksum_where(&self, select: impl Fn(&str) -> bool) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for (name, p) in self.map.iter() {
            if !select(name) {
                continue;
            }
            for b in name.as_bytes() {
                mix(*b);
            }
            for v in p.value.data() {
                for b in v.to_le_bytes() {
                    mix(b);
                }
            }
        }
        h
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors: Vec<(String, Tensor)> =
            self.map.iter().map(|(n, p)| (n.clone(), p.value.clone())).collect();
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_tensors(&mut f, &tensors)
    }

    /// Load values into an existing set; every stored name must exist here
    /// with a matching shape. Frozen flags are untouched (they belong to
    /// the training plan, not the checkpoint).
    pub fn load_into(&mut self, path: &Path) -> Result<()> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        for (name, value) in read_tensors(&mut f)? {
            let p = self
                .map
                .get_mut(&name)
                .ok_or_else(|| Error::MissingParameter(name.clone()))?;
            if p.value.shape() != value.shape() {
                return Err(Error::ShapeMismatch {
                    context: "checkpoint load",
                    expected: p.value.shape().to_vec(),
                    got: value.shape().to_vec(),
                });
            }
            p.value = value;
        }
        Ok(())
    }
}

/// Lazily binds parameters onto a tape as leaves, once per name per
/// forward pass, so repeated uses share one node and gradients accumulate.
/// Frozen parameters bind as constants and can never accrue gradient.
pub struct Binder<'t, 'p> {
    tape: &'t crate::tensor::Tape,
    params: &'p ParamSet,
    bound: std::cell::RefCell<BTreeMap<String, crate::tensor::Value<'t>>>,
}

impl<'t, 'p> Binder<'t, 'p> {
    pub fn new(tape: &'t crate::tensor::Tape, params: &'p ParamSet) -> Self {
        Binder { tape, params, bound: std::cell::RefCell::new(BTreeMap::new()) }
    }

    pub fn tape(&self) -> &'t crate::tensor::Tape {
        self.tape
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn get(&self, name: &str) -> crate::tensor::Value<'t> {
        if let Some(v) = self.bound.borrow().get(name) {
            return *v;
        }
        let p = self.params.get(name).unwrap_or_else(|e| panic!("{e}"));
        let tensor =
            if p.frozen { p.value.clone() } else { p.value.clone().with_grad() };
        let v = self.tape.leaf(tensor);
        self.bound.borrow_mut().insert(name.to_string(), v);
        v
    }

    /// Translate a leaf-id gradient map into parameter names.
    pub fn grads_by_name(&self, grads: crate::tensor::GradMap) -> BTreeMap<String, Tensor> {
        let bound = self.bound.borrow();
        let mut by_id: BTreeMap<usize, &str> = BTreeMap::new();
        for (name, v) in bound.iter() {
            by_id.insert(v.id(), name.as_str());
        }
        let mut out = BTreeMap::new();
        for (id, g) in grads {
            if let Some(name) = by_id.get(&id) {
                out.insert(name.to_string(), g);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn binder_shares_leaves_and_skips_frozen() {
        let mut rng = seeded(3);
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::randn(vec![2], 1.0, &mut rng));
        ps.insert("c", Tensor::randn(vec![2], 1.0, &mut rng));
        ps.set_frozen_where(|n| n == "c");
        let tape = crate::tensor::Tape::new();
        let binder = Binder::new(&tape, &ps);
        let w1 = binder.get("w");
        let w2 = binder.get("w");
        assert_eq!(w1.id(), w2.id());
        let c = binder.get("c");
        let loss = ((w1 * c) + (w2 * c)).sum();
        let grads = binder.grads_by_name(tape.backward(loss).unwrap());
        // w used twice: gradient is 2·c
        let gw = &grads["w"];
        for (g, cv) in gw.data().iter().zip(ps.value("c").unwrap().data()) {
            assert!((g - 2.0 * cv).abs() < 1e-12);
        }
        assert!(!grads.contains_key("c"));
    }

    #[test]
    fn freeze_flags_and_checksums() {
        let mut rng = seeded(1);
        let mut ps = ParamSet::new();
        ps.insert("a.w", Tensor::randn(vec![2, 2], 1.0, &mut rng));
        ps.insert("b.w", Tensor::randn(vec![2], 1.0, &mut rng));
        ps.set_frozen_where(|n| n.starts_with("a."));
        assert_eq!(ps.frozen_names(), vec!["a.w".to_string()]);
        let before = ps.checksum_where(|n| n == "a.w");
        ps.set_value("b.w", Tensor::zeros(vec![2])).unwrap();
        assert_eq!(before, ps.checksum_where(|n| n == "a.w"));
        ps.set_value("a.w", Tensor::zeros(vec![2, 2])).unwrap();
        assert_ne!(before, ps.checksum_where(|n| n == "a.w"));
    }

    #[test]
    fn save_load_round_trip() {
        let mut rng = seeded(2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.ocat");
        let mut ps = ParamSet::new();
        ps.insert("x", Tensor::randn(vec![3, 3], 1.0, &mut rng));
        ps.insert("y", Tensor::randn(vec![4], 1.0, &mut rng));
        ps.save(&path).unwrap();
        let mut ps2 = ps.clone();
        ps2.set_value("x", Tensor::zeros(vec![3, 3])).unwrap();
        ps2.load_into(&path).unwrap();
        assert_eq!(ps2.value("x").unwrap().data(), ps.value("x").unwrap().data());
    }
}
