//! Name-keyed registry of federated learning algorithms.
//!
//! Built-ins register under plain names ("fedavg"). Dotted names like
//! `my_plugin.MyAlg` resolve against a plugins directory: `my_plugin.yaml`
//! declares algorithms derived from a built-in base plus a configuration
//! fragment that is merged over the user's algorithm file.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use crate::config::{algorithm_config_from_value, AlgorithmConfig};
use crate::error::{Error, Result};
use crate::protocol::{ClientBehavior, ServerBehavior};

/// A registered algorithm: hyperparameter validation plus factories for
/// the server behavior and per-client behaviors.
#[derive(Clone, Debug)]
pub struct AlgorithmDescriptor {
    pub name: String,
    /// Documented hyperparameter defaults, as dotted config keys.
    pub defaults: &'static [(&'static str, f64)],
    pub validate: fn(&AlgorithmConfig) -> Result<()>,
    pub make_server: fn(&AlgorithmConfig) -> Result<Box<dyn ServerBehavior>>,
    pub make_client: fn(&AlgorithmConfig, usize) -> Result<Box<dyn ClientBehavior>>,
}

/// A descriptor plus any plugin configuration fragment to merge in.
#[derive(Debug)]
pub struct ResolvedAlgorithm {
    pub descriptor: AlgorithmDescriptor,
    overlay: Option<serde_yaml::Value>,
}

impl ResolvedAlgorithm {
    /// Merge the plugin fragment (if any) over the raw document, then parse
    /// and run the algorithm's own hyperparameter validation.
    pub fn build_config(&self, raw: serde_yaml::Value) -> Result<AlgorithmConfig> {
        let merged = match &self.overlay {
            Some(overlay) => merge_yaml(raw, overlay.clone()),
            None => raw,
        };
        let cfg = algorithm_config_from_value(merged)?;
        (self.descriptor.validate)(&cfg)?;
        Ok(cfg)
    }

    pub fn make_server(&self, cfg: &AlgorithmConfig) -> Result<Box<dyn ServerBehavior>> {
        (self.descriptor.make_server)(cfg)
    }

    pub fn make_client(&self, cfg: &AlgorithmConfig, index: usize) -> Result<Box<dyn ClientBehavior>> {
        (self.descriptor.make_client)(cfg, index)
    }
}

/// Recursive map merge; the overlay wins at leaves.
fn merge_yaml(base: serde_yaml::Value, overlay: serde_yaml::Value) -> serde_yaml::Value {
    use serde_yaml::Value;
    match (base, overlay) {
        (Value::Mapping(mut base), Value::Mapping(overlay)) => {
            for (key, value) in overlay {
                let merged = match base.remove(&key) {
                    Some(existing) => merge_yaml(existing, value),
                    None => value,
                };
                base.insert(key, merged);
            }
            Value::Mapping(base)
        }
        (_, overlay) => overlay,
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PluginFile {
    algorithms: BTreeMap<String, PluginAlgorithm>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PluginAlgorithm {
    base: String,
    #[serde(default)]
    config: Option<serde_yaml::Value>,
}

#[derive(Default)]
pub struct Registry {
    algorithms: BTreeMap<String, AlgorithmDescriptor>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// The four shipped algorithms.
    pub fn with_builtins() -> Self {
        let mut registry = Self::new();
        for descriptor in [
            super::fedavg::descriptor(),
            super::fedprox::descriptor(),
            super::scaffold::descriptor(),
            super::fedopt::descriptor(),
        ] {
            registry.register(descriptor).expect("builtin names are distinct");
        }
        registry
    }

    pub fn register(&mut self, descriptor: AlgorithmDescriptor) -> Result<()> {
        if self.algorithms.contains_key(&descriptor.name) {
            return Err(Error::Algorithm(format!(
                "algorithm `{}` is already registered",
                descriptor.name
            )));
        }
        self.algorithms.insert(descriptor.name.clone(), descriptor);
        Ok(())
    }

    pub fn names(&self) -> Vec<String> {
        self.algorithms.keys().cloned().collect()
    }

    /// Look up a registered name.
    pub fn resolve(&self, name: &str) -> Result<ResolvedAlgorithm> {
        match self.algorithms.get(name) {
            Some(descriptor) => Ok(ResolvedAlgorithm {
                descriptor: descriptor.clone(),
                overlay: None,
            }),
            None => Err(Error::Algorithm(format!(
                "unknown algorithm `{name}`; available: {}",
                self.names().join(", ")
            ))),
        }
    }

    /// Look up a name, falling back to `module.Name` resolution against the
    /// plugins directory for dotted names.
    pub fn resolve_with_plugins(
        &self,
        name: &str,
        plugins_dir: Option<&Path>,
    ) -> Result<ResolvedAlgorithm> {
        if self.algorithms.contains_key(name) {
            return self.resolve(name);
        }
        let Some((module, alg_name)) = name.split_once('.') else {
            return self.resolve(name); // not dotted: report the usual error
        };
        let Some(dir) = plugins_dir else {
            return Err(Error::Algorithm(format!(
                "`{name}` looks like a plugin algorithm but no plugins directory \
                 was given (pass --plugins DIR)"
            )));
        };
        let path = dir.join(format!("{module}.yaml"));
        let text = std::fs::read_to_string(&path).map_err(|e| {
            Error::Algorithm(format!(
                "cannot read plugin file {}: {e}",
                path.display()
            ))
        })?;
        let plugin: PluginFile = serde_yaml::from_str(&text)?;
        let entry = plugin.algorithms.get(alg_name).ok_or_else(|| {
            Error::Algorithm(format!(
                "plugin `{module}` defines no algorithm `{alg_name}`; it has: {}",
                plugin.algorithms.keys().cloned().collect::<Vec<_>>().join(", ")
            ))
        })?;
        let base = self
            .algorithms
            .get(&entry.base)
            .ok_or_else(|| {
                Error::Algorithm(format!(
                    "plugin algorithm `{name}` builds on unknown base `{}`; available: {}",
                    entry.base,
                    self.names().join(", ")
                ))
            })?
            .clone();
        Ok(ResolvedAlgorithm {
            descriptor: AlgorithmDescriptor {
                name: name.to_string(),
                ..base
            },
            overlay: entry.config.clone(),
        })
    }
}

/// Reject a hyperparameter an algorithm does not use.
pub(crate) fn reject_param<T>(value: &Option<T>, key: &str, algorithm: &str) -> Result<()> {
    if value.is_some() {
        Err(Error::config(
            key,
            format!("not a hyperparameter of {algorithm}"),
        ))
    } else {
        Ok(())
    }
}
