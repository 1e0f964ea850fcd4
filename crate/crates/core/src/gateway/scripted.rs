use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{CompletionRequest, GatewayError, Provider, ProviderError};
use crate::digest;
use crate::synth::SentinelRules;

/// Canned responses for a hermetic run.
///
/// `entries` maps `<template>:<variables digest>` (see
/// [`CompletionRequest::script_key`]) to response text. A synthetic world adds
/// `sentinel` rules that answer any request from marker tokens in its slots.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderScript {
    #[serde(default = "script_version")]
    pub version: u32,
    #[serde(default)]
    pub entries: BTreeMap<String, String>,
    #[serde(default)]
    pub sentinel: Option<SentinelRules>,
}

fn script_version() -> u32 {
    1
}

impl ProviderScript {
    pub fn load(path: &Path) -> Result<ProviderScript, GatewayError> {
        let bytes = std::fs::read(path)
            .map_err(|e| GatewayError::Config(format!("reading {}: {e}", path.display())))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| GatewayError::Config(format!("parsing {}: {e}", path.display())))
    }

    pub fn digest(&self) -> String {
        digest::canonical_digest(self)
    }

    pub fn insert(&mut self, request: &CompletionRequest, response: impl Into<String>) {
        self.entries.insert(request.script_key(), response.into());
    }
}

type Responder = dyn Fn(&CompletionRequest) -> Option<String> + Send + Sync;

/// Deterministic provider: the response is a pure function of the request.
pub struct ScriptedProvider {
    script: ProviderScript,
    responder: Option<Arc<Responder>>,
    fallback: Option<String>,
}

impl ScriptedProvider {
    pub fn new(script: ProviderScript) -> ScriptedProvider {
        ScriptedProvider {
            script,
            responder: None,
            fallback: None,
        }
    }

    /// Answers every request with `text`.
    pub fn fixed(text: impl Into<String>) -> ScriptedProvider {
        ScriptedProvider {
            fallback: Some(text.into()),
            ..ScriptedProvider::new(ProviderScript::default())
        }
    }

    /// Consulted after exact entries and sentinel rules.
    pub fn with_responder(
        mut self,
        responder: impl Fn(&CompletionRequest) -> Option<String> + Send + Sync + 'static,
    ) -> ScriptedProvider {
        self.responder = Some(Arc::new(responder));
        self
    }

    pub fn script(&self) -> &ProviderScript {
        &self.script
    }

    fn lookup(&self, request: &CompletionRequest) -> Option<String> {
        if let Some(text) = self.script.entries.get(&request.script_key()) {
            return Some(text.clone());
        }
        if let Some(text) = self.script.sentinel.as_ref().and_then(|r| r.respond(request)) {
            return Some(text);
        }
        if let Some(text) = self.responder.as_ref().and_then(|r| r(request)) {
            return Some(text);
        }
        self.fallback.clone()
    }
}

#[async_trait]
impl Provider for ScriptedProvider {
    fn name(&self) -> &'static str {
        "scripted"
    }

    fn fingerprint(&self) -> String {
        let mut fp = format!("script:{}", self.script.digest());
        if let Some(text) = &self.fallback {
            fp.push_str(&format!("+fixed:{}", &digest::sha256_hex(text.as_bytes())[..12]));
        }
        if self.responder.is_some() {
            fp.push_str("+responder");
        }
        fp
    }

    async fn complete(
        &self,
        request: &CompletionRequest,
        _prompt: &str,
    ) -> Result<String, ProviderError> {
        self.lookup(request).ok_or(ProviderError::ScriptMiss)
    }
}

/// Fails the first `failures` calls with a transient error, then delegates.
pub struct FlakyProvider {
    inner: Arc<dyn Provider>,
    remaining: AtomicU32,
}

impl FlakyProvider {
    pub fn new(inner: Arc<dyn Provider>, failures: u32) -> FlakyProvider {
        FlakyProvider {
            inner,
            remaining: AtomicU32::new(failures),
        }
    }
}

#[async_trait]
impl Provider for FlakyProvider {
    fn name(&self) -> &'static str {
        "flaky"
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    fn context_limit(&self) -> Option<usize> {
        self.inner.context_limit()
    }

    async fn complete(
        &self,
        request: &CompletionRequest,
        prompt: &str,
    ) -> Result<String, ProviderError> {
        let failing = self
            .remaining
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok();
        if failing {
            return Err(ProviderError::Transient("injected fault".into()));
        }
        self.inner.complete(request, prompt).await
    }
}
