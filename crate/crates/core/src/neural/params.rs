//! Named parameter tensors with trainable flags.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Scalar, Tensor};
use crate::container::TensorMap;
use crate::error::{param_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
struct Entry<T: Scalar> {
    tensor: Tensor<T>,
    trainable: bool,
}

/// Ordered map of parameters. `seed` drives initialization helpers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    entries: BTreeMap<String, Entry<T>>,
    pub seed: u64,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            entries: BTreeMap::new(),
            seed,
        }
    }

    /// Insert or replace a tensor.
    pub fn insert(&mut self, name: &str, tensor: Tensor<T>, trainable: bool) {
        self.entries
            .insert(name.to_owned(), Entry { tensor, trainable });
    }

    pub fn entry(&self, name: &str) -> Option<(&Tensor<T>, bool)> {
        self.entries.get(name).map(|e| (&e.tensor, e.trainable))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::Param(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| Error::Param(format!("missing parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|e| e.trainable)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.tensor.len()).sum()
    }

    /// Make exactly the matching tensors trainable and freeze the rest.
    /// Returns the match count.
    pub fn mark_trainable(&mut self, pred: impl Fn(&str) -> bool) -> Result<usize> {
        let hits = self.entries.keys().filter(|k| pred(k)).count();
        if hits == 0 {
            return param_err("trainable predicate matched no parameters");
        }
        for (k, e) in self.entries.iter_mut() {
            e.trainable = pred(k);
        }
        Ok(hits)
    }

    /// [`ParamStore::mark_trainable`] with `*` wildcard patterns; a name is
    /// trainable if any pattern matches.
    pub fn mark_trainable_glob(&mut self, patterns: &[&str]) -> Result<usize> {
        self.mark_trainable(|name| patterns.iter().any(|p| glob_match(p, name)))
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        Entry {
                            tensor: e.tensor.cast(),
                            trainable: e.trainable,
                        },
                    )
                })
                .collect(),
            seed: self.seed,
        }
    }

    /// Deterministic RNG for initializing tensor `name`.
    fn init_rng(&self, name: &str) -> ChaCha8Rng {
        let mut h = self.seed ^ 0x9e37_79b9_7f4a_7c15;
        for b in name.bytes() {
            h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
        }
        ChaCha8Rng::seed_from_u64(h)
    }

    /// Insert a normal tensor with standard deviation `std`.
    pub fn init_normal(&mut self, name: &str, shape: &[usize], std: f64) {
        let mut rng = self.init_rng(name);
        let dist = Normal::new(0.0, std.max(0.0)).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(dist.sample(&mut rng))).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).unwrap(), true);
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape), true);
    }
}

impl ParamStore<f32> {
    /// Tensors under `prefix` plus a `u8` trainable flag per tensor.
    pub fn to_tensors(&self, prefix: &str) -> TensorMap {
        let mut out = TensorMap::new();
        for (k, e) in &self.entries {
            out.insert(format!("{prefix}{k}"), e.tensor.to_container());
            out.insert(
                format!("{prefix}{k}@trainable"),
                crate::container::Tensor::u8(vec![1], vec![e.trainable as u8]),
            );
        }
        out
    }

    /// Inverse of [`ParamStore::to_tensors`]; tensors lacking a flag load as
    /// trainable.
    pub fn from_tensors(map: &TensorMap, prefix: &str, seed: u64) -> Self {
        let mut store = Self::new(seed);
        for (k, t) in map.range(prefix.to_owned()..) {
            let Some(name) = k.strip_prefix(prefix) else { break };
            if name.ends_with("@trainable") {
                continue;
            }
            let trainable = map
                .get(&format!("{k}@trainable"))
                .map(|f| f.to_f64_vec().first().copied().unwrap_or(1.0) != 0.0)
                .unwrap_or(true);
            store.insert(name, Tensor::from_container(t), trainable);
        }
        store
    }
}

/// `*` matches any run of characters; everything else is literal.
pub fn glob_match(pattern: &str, name: &str) -> bool {
    let parts: Vec<&str> = pattern.split('*').collect();
    if parts.len() == 1 {
        return pattern == name;
    }
    let mut rest = name;
    let (first, last) = (parts[0], parts[parts.len() - 1]);
    let Some(r) = rest.strip_prefix(first) else { return false };
    rest = r;
    for mid in &parts[1..parts.len() - 1] {
        match rest.find(mid) {
            Some(i) => rest = &rest[i + mid.len()..],
            None => return false,
        }
    }
    rest.len() >= last.len() && rest.ends_with(last)
}

/// Append `extra` zero input channels to an HWIO conv weight.
pub fn pad_input_channels<T: Scalar>(weight: &Tensor<T>, extra: usize) -> Result<Tensor<T>> {
    if extra == 0 {
        return param_err("channel padding needs extra >= 1");
    }
    let s = weight.shape();
    if s.len() != 4 {
        return param_err(format!("expected an HWIO conv weight, got shape {s:?}"));
    }
    let (kh, kw, cin, cout) = (s[0], s[1], s[2], s[3]);
    let new_cin = cin + extra;
    let mut out = Tensor::zeros(&[kh, kw, new_cin, cout]);
    let src = weight.data();
    let dst = out.data_mut();
    for k in 0..kh * kw {
        let from = &src[k * cin * cout..(k + 1) * cin * cout];
        dst[k * new_cin * cout..k * new_cin * cout + cin * cout].copy_from_slice(from);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glob_semantics() {
        assert!(glob_match("encoder.conv*", "encoder.conv_in.weight"));
        assert!(!glob_match("encoder.conv*", "decoder.conv_out.weight"));
        assert!(glob_match("*", "anything"));
        assert!(glob_match("a*b*c", "aXXbYc"));
        assert!(!glob_match("a*b*c", "aXXcYb"));
        assert!(glob_match("exact", "exact"));
        assert!(!glob_match("ab*ba", "aba"));
    }

    #[test]
    fn mark_trainable_resets_flags() {
        let mut s = ParamStore::<f32>::new(1);
        for n in ["encoder.conv_in.weight", "decoder.conv_out.weight", "mid.attn_mix.weight"] {
            s.init_zeros(n, &[1]);
        }
        assert_eq!(s.mark_trainable_glob(&["encoder.conv*"]).unwrap(), 1);
        assert!(s.is_trainable("encoder.conv_in.weight"));
        assert!(!s.is_trainable("decoder.conv_out.weight"));
        s.mark_trainable_glob(&["decoder.*"]).unwrap();
        assert!(!s.is_trainable("encoder.conv_in.weight"));
        assert!(s.is_trainable("decoder.conv_out.weight"));
        assert!(s.mark_trainable_glob(&["nothing*"]).is_err());
    }

    #[test]
    fn padding_copies_and_zero_fills() {
        let w = Tensor::<f32>::new(vec![3, 3, 3, 4], (0..108).map(|i| i as f32 - 50.0).collect()).unwrap();
        let p = pad_input_channels(&w, 8).unwrap();
        assert_eq!(p.shape(), &[3, 3, 11, 4]);
        assert_eq!(p.norm(), w.norm());
        for k in 0..9 {
            for ci in 0..11 {
                for co in 0..4 {
                    let v = p.data()[(k * 11 + ci) * 4 + co];
                    if ci < 3 {
                        assert_eq!(v, w.data()[(k * 3 + ci) * 4 + co]);
                    } else {
                        assert_eq!(v, 0.0);
                    }
                }
            }
        }
        assert!(pad_input_channels(&w, 0).is_err());
    }

    #[test]
    fn container_round_trip_keeps_flags() {
        let mut s = ParamStore::<f32>::new(3);
        s.init_normal("a.weight", &[2, 3], 1.0);
        s.init_zeros("b.bias", &[3]);
        s.mark_trainable(|n| n.starts_with('a')).unwrap();
        let back = ParamStore::from_tensors(&s.to_tensors("lift."), "lift.", 3);
        assert_eq!(back, s);
    }

    #[test]
    fn init_is_deterministic_per_name() {
        let mut a = ParamStore::<f32>::new(5);
        let mut b = ParamStore::<f32>::new(5);
        a.init_normal("x", &[10], 1.0);
        b.init_normal("y", &[3], 1.0);
        b.init_normal("x", &[10], 1.0);
        assert_eq!(a.get("x").unwrap(), b.get("x").unwrap());
    }
}
