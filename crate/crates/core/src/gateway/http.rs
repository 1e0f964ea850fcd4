use std::time::Duration;

use async_trait::async_trait;
use serde_json::{json, Value};

use super::{CompletionRequest, GatewayError, Provider, ProviderError};

pub const ENV_BASE_URL: &str = "ERRATA_API_BASE";
pub const ENV_API_KEY: &str = "ERRATA_API_KEY";
pub const ENV_MODEL: &str = "ERRATA_MODEL";
pub const ENV_CONTEXT_CHARS: &str = "ERRATA_CONTEXT_CHARS";

#[derive(Debug, Clone, Default)]
pub struct HttpProviderConfig {
    pub base_url: Option<String>,
    pub api_key: Option<String>,
    pub model: Option<String>,
    pub context_chars: Option<usize>,
    pub timeout: Option<Duration>,
}

impl HttpProviderConfig {
    /// Reads endpoint, credential, model and context size from the environment.
    pub fn from_env() -> HttpProviderConfig {
        let var = |name| std::env::var(name).ok().filter(|v: &String| !v.is_empty());
        HttpProviderConfig {
            base_url: var(ENV_BASE_URL),
            api_key: var(ENV_API_KEY),
            model: var(ENV_MODEL),
            context_chars: var(ENV_CONTEXT_CHARS).and_then(|v| v.parse().ok()),
            timeout: None,
        }
    }
}

/// OpenAI-compatible `/chat/completions` client.
pub struct HttpProvider {
    client: reqwest::Client,
    url: String,
    api_key: Option<String>,
    model: String,
    context_chars: Option<usize>,
}

impl HttpProvider {
    pub fn new(config: HttpProviderConfig) -> Result<HttpProvider, GatewayError> {
        let base = config
            .base_url
            .ok_or_else(|| GatewayError::Config(format!("{ENV_BASE_URL} is not set")))?;
        let model = config
            .model
            .ok_or_else(|| GatewayError::Config(format!("{ENV_MODEL} is not set")))?;
        let client = reqwest::Client::builder()
            .timeout(config.timeout.unwrap_or(Duration::from_secs(120)))
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        Ok(HttpProvider {
            client,
            url: format!("{}/chat/completions", base.trim_end_matches('/')),
            api_key: config.api_key,
            model,
            context_chars: config.context_chars,
        })
    }
}

#[async_trait]
impl Provider for HttpProvider {
    fn name(&self) -> &'static str {
        "http"
    }

    fn fingerprint(&self) -> String {
        format!("http:{}", self.model)
    }

    fn context_limit(&self) -> Option<usize> {
        self.context_chars
    }

    async fn complete(
        &self,
        request: &CompletionRequest,
        prompt: &str,
    ) -> Result<String, ProviderError> {
        let body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "max_tokens": request.max_output,
            "temperature": request.temperature,
        });
        let mut builder = self.client.post(&self.url).json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder
            .send()
            .await
            .map_err(|e| ProviderError::Transient(e.to_string()))?;
        let status = response.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(ProviderError::Transient(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let text = response.text().await.unwrap_or_default();
            return Err(ProviderError::Fatal(format!("HTTP {status}: {text}")));
        }
        let value: Value = response
            .json()
            .await
            .map_err(|e| ProviderError::Transient(format!("bad response body: {e}")))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| ProviderError::Fatal("response has no message content".into()))
    }
}
