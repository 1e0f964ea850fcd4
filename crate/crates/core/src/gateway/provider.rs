use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use async_trait::async_trait;
use thiserror::Error;

use super::{CompletionRequest, GatewayError, HttpProvider, HttpProviderConfig, ProviderScript, ScriptedProvider};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    /// Worth retrying: timeouts, rate limits, 5xx.
    #[error("transient: {0}")]
    Transient(String),
    #[error("fatal: {0}")]
    Fatal(String),
    /// A scripted provider has no answer for the request.
    #[error("script miss")]
    ScriptMiss,
}

/// A chat-completion backend.
#[async_trait]
pub trait Provider: Send + Sync {
    fn name(&self) -> &'static str;

    fn fingerprint(&self) -> String;

    /// Context size in characters, when the backend has one.
    fn context_limit(&self) -> Option<usize> {
        None
    }

    /// `prompt` is `request` rendered and fitted to the context limit.
    async fn complete(
        &self,
        request: &CompletionRequest,
        prompt: &str,
    ) -> Result<String, ProviderError>;
}

/// Everything a provider factory may need, gathered from flags and the environment.
#[derive(Debug, Clone, Default)]
pub struct ProviderSpec {
    pub name: String,
    pub script: Option<PathBuf>,
    pub http: HttpProviderConfig,
}

type Factory = fn(&ProviderSpec) -> Result<Arc<dyn Provider>, GatewayError>;

/// Providers selectable by name at runtime.
pub struct ProviderRegistry {
    factories: BTreeMap<&'static str, Factory>,
}

fn scripted(spec: &ProviderSpec) -> Result<Arc<dyn Provider>, GatewayError> {
    let path = spec
        .script
        .as_ref()
        .ok_or_else(|| GatewayError::Config("scripted provider needs --script".into()))?;
    let script = ProviderScript::load(path)?;
    Ok(Arc::new(ScriptedProvider::new(script)))
}

fn http(spec: &ProviderSpec) -> Result<Arc<dyn Provider>, GatewayError> {
    Ok(Arc::new(HttpProvider::new(spec.http.clone())?))
}

impl ProviderRegistry {
    pub fn empty() -> ProviderRegistry {
        ProviderRegistry {
            factories: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> ProviderRegistry {
        let mut registry = ProviderRegistry::empty();
        registry.register("scripted", scripted);
        registry.register("http", http);
        registry
    }

    pub fn register(&mut self, name: &'static str, factory: Factory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.factories.keys().copied().collect()
    }

    pub fn build(&self, spec: &ProviderSpec) -> Result<Arc<dyn Provider>, GatewayError> {
        let factory = self.factories.get(spec.name.as_str()).ok_or_else(|| {
            GatewayError::Config(format!(
                "unknown provider {:?} (available: {})",
                spec.name,
                self.names().join(", ")
            ))
        })?;
        factory(spec)
    }
}

impl Default for ProviderRegistry {
    fn default() -> Self {
        ProviderRegistry::with_builtins()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_registered() {
        assert_eq!(ProviderRegistry::default().names(), vec!["http", "scripted"]);
    }

    #[test]
    fn unknown_provider_rejected() {
        let spec = ProviderSpec {
            name: "carrier-pigeon".into(),
            ..ProviderSpec::default()
        };
        let err = ProviderRegistry::default().build(&spec).err().unwrap();
        assert!(err.to_string().contains("carrier-pigeon"));
    }

    #[test]
    fn scripted_needs_a_script() {
        let spec = ProviderSpec {
            name: "scripted".into(),
            ..ProviderSpec::default()
        };
        assert!(matches!(
            ProviderRegistry::default().build(&spec),
            Err(GatewayError::Config(_))
        ));
    }
}
