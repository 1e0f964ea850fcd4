//! Uniform access to chat-completion providers.
//!
//! Every pipeline stage talks to a model through [`Gateway::complete`], which
//! renders the role's prompt template, fits it to the provider's context,
//! bounds in-flight concurrency, applies an optional token-bucket rate limit
//! and retries transient failures with exponential backoff.

mod http;
mod provider;
mod scripted;
pub mod templates;

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;
use tokio::sync::Semaphore;

use crate::digest;

pub use http::{HttpProvider, HttpProviderConfig};
pub use provider::{Provider, ProviderError, ProviderRegistry, ProviderSpec};
pub use scripted::{FlakyProvider, ProviderScript, ScriptedProvider};
pub use templates::{render, TemplateId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("template error: {0}")]
    Template(String),
    #[error("{template}: prompt needs {needed} chars but the context limit is {limit}")]
    ContextOverflow {
        template: TemplateId,
        needed: usize,
        limit: usize,
    },
    #[error("{template}: transport failed after {attempts} attempts: {message}")]
    Transport {
        template: TemplateId,
        attempts: u32,
        message: String,
    },
    #[error("script has no entry for {key}")]
    ScriptMiss { key: String },
    #[error("{template}: provider rejected request: {message}")]
    Rejected {
        template: TemplateId,
        message: String,
    },
    #[error("provider configuration: {0}")]
    Config(String),
}

/// One templated request. `variables` fills the template's `{{slot}}`s.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompletionRequest {
    pub template: TemplateId,
    pub variables: BTreeMap<String, String>,
    pub max_output: u32,
    pub temperature: f64,
}

impl CompletionRequest {
    pub fn new(template: TemplateId) -> CompletionRequest {
        CompletionRequest {
            template,
            variables: BTreeMap::new(),
            max_output: 2048,
            temperature: 0.0,
        }
    }

    pub fn var(mut self, slot: &str, value: impl Into<String>) -> CompletionRequest {
        self.variables.insert(slot.to_string(), value.into());
        self
    }

    pub fn get(&self, slot: &str) -> Option<&str> {
        self.variables.get(slot).map(String::as_str)
    }

    pub fn variables_digest(&self) -> String {
        digest::canonical_digest(&self.variables)
    }

    /// `<template>:<sha256 of canonical variables>`, the lookup key for scripts.
    pub fn script_key(&self) -> String {
        format!("{}:{}", self.template, self.variables_digest())
    }

    pub fn render(&self) -> Result<String, GatewayError> {
        templates::render(self.template, &self.variables)
    }
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    /// Retries after the first attempt for transient failures.
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub max_backoff: Duration,
    /// Maximum requests in flight at once.
    pub concurrency: usize,
    /// Sustained requests per second; `None` disables rate limiting.
    pub rate_per_sec: Option<f64>,
    /// Context limit in characters; overrides the provider's own limit.
    pub context_limit: Option<usize>,
    pub max_output: u32,
    pub temperature: f64,
    /// Keep every rendered prompt in memory (see [`Gateway::calls`]).
    pub record_calls: bool,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            max_retries: 3,
            initial_backoff: Duration::from_millis(250),
            max_backoff: Duration::from_secs(8),
            concurrency: 8,
            rate_per_sec: None,
            context_limit: None,
            max_output: 2048,
            temperature: 0.0,
            record_calls: false,
        }
    }
}

impl GatewayConfig {
    /// No backoff delays and call recording on; meant for scripted runs.
    pub fn for_tests() -> GatewayConfig {
        GatewayConfig {
            initial_backoff: Duration::ZERO,
            max_backoff: Duration::ZERO,
            record_calls: true,
            ..GatewayConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum CallOutcome {
    Ok,
    Transient(String),
    Failed(String),
}

/// One provider attempt as seen by the gateway.
#[derive(Debug, Clone, Serialize)]
pub struct CallRecord {
    pub template: TemplateId,
    pub key: String,
    pub attempt: u32,
    pub prompt: String,
    pub outcome: CallOutcome,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub attempts: u32,
    pub key: String,
}

struct TokenBucket {
    rate: f64,
    burst: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    fn new(rate: f64) -> TokenBucket {
        let burst = rate.max(1.0);
        TokenBucket {
            rate,
            burst,
            state: Mutex::new((burst, Instant::now())),
        }
    }

    async fn acquire(&self) {
        loop {
            let wait = {
                let mut state = self.state.lock().unwrap();
                let now = Instant::now();
                let (tokens, last) = *state;
                let tokens = (tokens + now.duration_since(last).as_secs_f64() * self.rate)
                    .min(self.burst);
                if tokens >= 1.0 {
                    *state = (tokens - 1.0, now);
                    return;
                }
                *state = (tokens, now);
                Duration::from_secs_f64((1.0 - tokens) / self.rate)
            };
            tokio::time::sleep(wait).await;
        }
    }
}

pub struct Gateway {
    provider: Arc<dyn Provider>,
    config: GatewayConfig,
    permits: Semaphore,
    limiter: Option<TokenBucket>,
    calls: Mutex<Vec<CallRecord>>,
}

impl Gateway {
    pub fn new(provider: Arc<dyn Provider>, config: GatewayConfig) -> Gateway {
        let limiter = config
            .rate_per_sec
            .filter(|r| *r > 0.0)
            .map(TokenBucket::new);
        Gateway {
            permits: Semaphore::new(config.concurrency.max(1)),
            provider,
            config,
            limiter,
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn concurrency(&self) -> usize {
        self.config.concurrency.max(1)
    }

    pub fn provider_name(&self) -> &str {
        self.provider.name()
    }

    /// Model id for live providers, script digest for scripted ones.
    pub fn provider_fingerprint(&self) -> String {
        self.provider.fingerprint()
    }

    pub fn request(&self, template: TemplateId) -> CompletionRequest {
        CompletionRequest {
            max_output: self.config.max_output,
            temperature: self.config.temperature,
            ..CompletionRequest::new(template)
        }
    }

    fn context_limit(&self) -> Option<usize> {
        self.config.context_limit.or(self.provider.context_limit())
    }

    /// True when the rendered prompt fits without trimming.
    pub fn fits(&self, request: &CompletionRequest) -> Result<bool, GatewayError> {
        let len = request.render()?.chars().count();
        Ok(self.context_limit().is_none_or(|limit| len <= limit))
    }

    /// Renders the prompt, prefix-trimming the trace slot of classification
    /// prompts until it fits the context limit.
    fn fit(&self, request: &mut CompletionRequest) -> Result<String, GatewayError> {
        let mut prompt = request.render()?;
        let Some(limit) = self.context_limit() else {
            return Ok(prompt);
        };
        loop {
            let needed = prompt.chars().count();
            if needed <= limit {
                return Ok(prompt);
            }
            let overflow = || GatewayError::ContextOverflow {
                template: request.template,
                needed,
                limit,
            };
            if !request.template.is_classification() {
                return Err(overflow());
            }
            let trace = request.variables.get_mut("trace").ok_or_else(overflow)?;
            let trace_len = trace.chars().count();
            if trace_len == 0 {
                return Err(overflow());
            }
            let drop = (needed - limit).min(trace_len);
            let cut = trace
                .char_indices()
                .nth(drop)
                .map_or(trace.len(), |(i, _)| i);
            trace.drain(..cut);
            prompt = request.render()?;
        }
    }

    fn record(&self, record: CallRecord) {
        if self.config.record_calls {
            self.calls.lock().unwrap().push(record);
        }
    }

    pub async fn complete(&self, mut request: CompletionRequest) -> Result<Completion, GatewayError> {
        let prompt = self.fit(&mut request)?;
        let key = request.script_key();
        let _permit = self
            .permits
            .acquire()
            .await
            .expect("gateway semaphore is never closed");
        let mut backoff = self.config.initial_backoff;
        let mut attempt = 0;
        loop {
            attempt += 1;
            if let Some(limiter) = &self.limiter {
                limiter.acquire().await;
            }
            let result = self.provider.complete(&request, &prompt).await;
            let outcome = match &result {
                Ok(_) => CallOutcome::Ok,
                Err(ProviderError::Transient(m)) => CallOutcome::Transient(m.clone()),
                Err(e) => CallOutcome::Failed(e.to_string()),
            };
            tracing::debug!(template = %request.template, %key, attempt, ?outcome, "completion");
            self.record(CallRecord {
                template: request.template,
                key: key.clone(),
                attempt,
                prompt: if self.config.record_calls {
                    prompt.clone()
                } else {
                    String::new()
                },
                outcome,
            });
            match result {
                Ok(text) => {
                    return Ok(Completion {
                        text,
                        attempts: attempt,
                        key,
                    })
                }
                Err(ProviderError::Transient(message)) => {
                    if attempt > self.config.max_retries {
                        tracing::warn!(template = %request.template, %key, attempt, "retries exhausted");
                        return Err(GatewayError::Transport {
                            template: request.template,
                            attempts: attempt,
                            message,
                        });
                    }
                    if !backoff.is_zero() {
                        tokio::time::sleep(backoff).await;
                    }
                    backoff = (backoff * 2).min(self.config.max_backoff);
                }
                Err(ProviderError::ScriptMiss) => return Err(GatewayError::ScriptMiss { key }),
                Err(ProviderError::Fatal(message)) => {
                    return Err(GatewayError::Rejected {
                        template: request.template,
                        message,
                    })
                }
            }
        }
    }

    /// Provider attempts recorded so far (empty unless `record_calls`).
    pub fn calls(&self) -> Vec<CallRecord> {
        self.calls.lock().unwrap().clone()
    }

    pub fn clear_calls(&self) {
        self.calls.lock().unwrap().clear();
    }
}
