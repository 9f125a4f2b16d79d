//! Name-keyed registries of interchangeable strategies (losses, label
//! assignment modes, optimizers). Configs carry a [`StrategySpec`]; the
//! registry turns it into a boxed trait object at run time.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SpiceError};

/// A strategy name with an optional numeric parameter, written `name` or `name:param`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySpec {
    pub name: String,
    pub param: Option<f64>,
}

impl StrategySpec {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            param: None,
        }
    }

    pub fn with_param(name: impl Into<String>, param: f64) -> Self {
        Self {
            name: name.into(),
            param: Some(param),
        }
    }
}

impl FromStr for StrategySpec {
    type Err = SpiceError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s.split_once(':') {
            None if !s.is_empty() => Ok(Self::new(s)),
            Some((name, p)) if !name.is_empty() => {
                let param = p.trim().parse::<f64>().map_err(|_| {
                    SpiceError::Config(format!("bad strategy parameter `{p}` in `{s}`"))
                })?;
                Ok(Self::with_param(name.trim(), param))
            }
            _ => Err(SpiceError::Config(format!("bad strategy `{s}`"))),
        }
    }
}

impl fmt::Display for StrategySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.param {
            Some(p) => write!(f, "{}:{}", self.name, p),
            None => f.write_str(&self.name),
        }
    }
}

pub type Factory<T> = fn(Option<f64>) -> Result<Box<T>>;

struct Entry<T: ?Sized> {
    name: &'static str,
    aliases: &'static [&'static str],
    summary: &'static str,
    factory: Factory<T>,
}

pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: Vec<Entry<T>>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: Vec::new(),
        }
    }

    pub fn register(
        mut self,
        name: &'static str,
        aliases: &'static [&'static str],
        summary: &'static str,
        factory: Factory<T>,
    ) -> Self {
        assert!(
            self.lookup(name).is_none(),
            "duplicate {} strategy {name}",
            self.kind
        );
        self.entries.push(Entry {
            name,
            aliases,
            summary,
            factory,
        });
        self
    }

    fn lookup(&self, name: &str) -> Option<&Entry<T>> {
        self.entries
            .iter()
            .find(|e| e.name == name || e.aliases.contains(&name))
    }

    pub fn create(&self, spec: &StrategySpec) -> Result<Box<T>> {
        let entry = self
            .lookup(&spec.name)
            .ok_or_else(|| SpiceError::UnknownStrategy {
                kind: self.kind,
                name: spec.name.clone(),
                available: self.names().join(", "),
            })?;
        (entry.factory)(spec.param)
    }

    /// Canonical name for `name` (resolving aliases), if registered.
    pub fn canonical(&self, name: &str) -> Option<&'static str> {
        self.lookup(name).map(|e| e.name)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|e| e.name).collect()
    }

    pub fn describe(&self) -> Vec<(&'static str, &'static str)> {
        self.entries.iter().map(|e| (e.name, e.summary)).collect()
    }
}
