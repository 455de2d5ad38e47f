//! Named, ordered parameter collections with functional replacement.

use std::collections::HashMap;

use crate::autodiff::Tensor;
use crate::{Error, Result};

/// Which inner-loop role a parameter plays.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Partition {
    /// Updated by the inner loop (fast weights).
    Adapted,
    /// Held fixed during the inner loop; only the outer loop moves it.
    Shared,
}

impl Partition {
    pub fn as_byte(self) -> u8 {
        match self {
            Partition::Adapted => 0,
            Partition::Shared => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Partition::Adapted),
            1 => Some(Partition::Shared),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub partition: Partition,
}

/// Ordered list of uniquely named tensors. Replacement never mutates the
/// source set; it returns a new one sharing untouched tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor, partition: Partition) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            tensor,
            partition,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entry(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Parameter count summed over every tensor.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn names_in(&self, partition: Partition) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| e.partition == partition)
            .map(|e| e.name.clone())
            .collect()
    }

    pub fn adapted_names(&self) -> Vec<String> {
        self.names_in(Partition::Adapted)
    }

    pub fn shared_names(&self) -> Vec<String> {
        self.names_in(Partition::Shared)
    }

    /// Copy with the named tensors swapped in. Shapes must match.
    pub fn with_replaced(&self, updates: &[(String, Tensor)]) -> Result<ParamSet> {
        let mut out = self.clone();
        for (name, tensor) in updates {
            let &i = out
                .index
                .get(name)
                .ok_or_else(|| Error::MissingParam(name.clone()))?;
            if out.entries[i].tensor.shape() != tensor.shape() {
                return Err(Error::ParamShape {
                    name: name.clone(),
                    expected: out.entries[i].tensor.shape().to_vec(),
                    got: tensor.shape().to_vec(),
                });
            }
            out.entries[i].tensor = tensor.clone();
        }
        Ok(out)
    }

    pub fn map_tensors(&self, f: impl Fn(&Tensor) -> Tensor) -> ParamSet {
        let mut out = self.clone();
        for e in &mut out.entries {
            e.tensor = f(&e.tensor);
        }
        out
    }

    /// Fresh differentiable leaves holding the same values.
    pub fn to_vars(&self) -> ParamSet {
        self.map_tensors(Tensor::to_var)
    }

    pub fn detached(&self) -> ParamSet {
        self.map_tensors(Tensor::detach)
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|e| e.tensor.clone()).collect()
    }

    /// All values concatenated in entry order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|e| e.tensor.data().iter().copied())
            .collect()
    }

    /// Largest absolute elementwise difference; errors if layouts differ.
    pub fn max_abs_diff(&self, other: &ParamSet) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::Config(format!(
                "parameter sets differ in length: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        let mut worst = 0.0f64;
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name || a.tensor.shape() != b.tensor.shape() {
                return Err(Error::Config(format!("layout mismatch at {} / {}", a.name, b.name)));
            }
            for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
                worst = worst.max((x - y).abs());
            }
        }
        Ok(worst)
    }

    /// Concatenate two sets, prefixing names. Used for joint gradchecks.
    pub fn merged(parts: &[(&str, &ParamSet)]) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        for (prefix, set) in parts {
            for e in set.iter() {
                out.push(format!("{prefix}{}", e.name), e.tensor.clone(), e.partition)?;
            }
        }
        Ok(out)
    }

    /// Inverse of [`ParamSet::merged`] for one prefix.
    pub fn strip_prefix(&self, prefix: &str) -> ParamSet {
        let mut out = ParamSet::new();
        for e in self.iter() {
            if let Some(rest) = e.name.strip_prefix(prefix) {
                out.push(rest, e.tensor.clone(), e.partition)
                    .expect("names unique in source set");
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set() -> ParamSet {
        let mut p = ParamSet::new();
        p.push("a", Tensor::ones(&[2]), Partition::Shared).unwrap();
        p.push("b", Tensor::zeros(&[3]), Partition::Adapted).unwrap();
        p
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = set();
        assert!(matches!(
            p.push("a", Tensor::ones(&[1]), Partition::Shared),
            Err(Error::DuplicateParam(_))
        ));
    }

    #[test]
    fn replacement_leaves_original_untouched() {
        let p = set();
        let q = p
            .with_replaced(&[("b".to_string(), Tensor::ones(&[3]))])
            .unwrap();
        assert_eq!(p.get("b").unwrap().data(), &[0.0; 3]);
        assert_eq!(q.get("b").unwrap().data(), &[1.0; 3]);
        assert!(p.with_replaced(&[("b".to_string(), Tensor::ones(&[2]))]).is_err());
    }

    #[test]
    fn partitions_cover_everything() {
        let p = set();
        assert_eq!(p.adapted_names(), vec!["b"]);
        assert_eq!(p.shared_names(), vec!["a"]);
        assert_eq!(p.numel(), 5);
    }

    #[test]
    fn merge_and_strip() {
        let p = set();
        let m = ParamSet::merged(&[("x.", &p), ("y.", &p)]).unwrap();
        assert_eq!(m.len(), 4);
        let back = m.strip_prefix("y.");
        assert_eq!(back.names().collect::<Vec<_>>(), vec!["a", "b"]);
    }
}
