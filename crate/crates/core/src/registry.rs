//! Ordered set of known domains and the one-hot domain mask.

use std::collections::HashMap;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DomainRegistry {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl DomainRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut r = Self::new();
        for n in names {
            r.register(n.as_ref())?;
        }
        Ok(r)
    }

    /// Appends a domain and returns its zero-based position.
    pub fn register(&mut self, name: &str) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::Registry(format!("domain `{name}` is already registered")));
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        Ok(self.names.len() - 1)
    }

    pub fn remove(&mut self, name: &str) -> Result<usize> {
        let pos = self
            .index
            .remove(name)
            .ok_or_else(|| Error::Registry(format!("domain `{name}` is not registered")))?;
        self.names.remove(pos);
        for (i, n) in self.names.iter().enumerate().skip(pos) {
            self.index.insert(n.clone(), i);
        }
        Ok(pos)
    }

    /// Zero-based position, if registered.
    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Indicator vector over registered domains; all zeros for an unknown
    /// name.
    pub fn build_mask(&self, name: &str) -> Vec<u8> {
        self.names.iter().map(|n| u8::from(n == name)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masks_are_indicators() {
        let r = DomainRegistry::from_names(&["a", "b", "c"]).unwrap();
        assert_eq!(r.build_mask("b"), vec![0, 1, 0]);
        assert_eq!(r.build_mask("zzz"), vec![0, 0, 0]);
        let one = DomainRegistry::from_names(&["a"]).unwrap();
        assert_eq!(one.build_mask("a"), vec![1]);
    }

    #[test]
    fn duplicate_and_missing_names_are_registry_errors() {
        let mut r = DomainRegistry::from_names(&["a", "b"]).unwrap();
        assert!(matches!(r.register("a"), Err(Error::Registry(_))));
        assert!(matches!(r.remove("q"), Err(Error::Registry(_))));
        r.remove("a").unwrap();
        assert_eq!(r.position("b"), Some(0));
        assert_eq!(r.names(), &["b".to_string()]);
    }
}
