//! Name-keyed registries for interchangeable strategies.
//!
//! Each registry maps a stable string name (as written in config files and CLI flags) to
//! a strategy value, typically a boxed trait object or a constructor function.

use crate::error::{Error, Result};

pub struct Registry<T> {
    kind: &'static str,
    entries: Vec<(&'static str, T)>,
}

impl<T> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: Vec::new(),
        }
    }

    /// Registers `value` under `name`, replacing any earlier entry with that name.
    pub fn register(&mut self, name: &'static str, value: T) -> &mut Self {
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((name, value)),
        }
        self
    }

    pub fn with(mut self, name: &'static str, value: T) -> Self {
        self.register(name, value);
        self
    }

    pub fn get(&self, name: &str) -> Result<&T> {
        self.entries
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, v)| v)
            .ok_or_else(|| Error::UnknownStrategy {
                kind: self.kind,
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| *n == name)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }

    pub fn kind(&self) -> &'static str {
        self.kind
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_and_replace() {
        let mut r = Registry::new("thing").with("a", 1).with("b", 2);
        assert_eq!(*r.get("b").unwrap(), 2);
        r.register("a", 10);
        assert_eq!(*r.get("a").unwrap(), 10);
        assert_eq!(r.names(), vec!["a", "b"]);
    }

    #[test]
    fn unknown_names_list_alternatives() {
        let r = Registry::new("mixer").with("lrb", ()).with("roa", ());
        let err = r.get("swin").unwrap_err().to_string();
        assert!(err.contains("swin") && err.contains("lrb, roa"), "{err}");
    }
}
