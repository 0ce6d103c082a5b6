//! OpenAI-compatible chat-completions provider.

use std::time::Instant;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{CallUsage, ModelReply, ModelRequest, Provider, ProviderError};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HttpProviderConfig {
    /// Full chat-completions URL, e.g. `https://api.openai.com/v1/chat/completions`.
    pub endpoint: String,
    pub model_id: String,
    /// Name of the environment variable holding the bearer credential.
    pub credential_env: String,
    #[serde(default)]
    pub temperature: Option<f64>,
}

impl Default for HttpProviderConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model_id: "gpt-4o-mini".into(),
            credential_env: "OPENAI_API_KEY".into(),
            temperature: None,
        }
    }
}

pub struct HttpProvider {
    client: reqwest::Client,
    config: HttpProviderConfig,
    credential: Option<String>,
}

impl HttpProvider {
    /// Reads the credential from the configured environment variable.
    pub fn from_env(config: HttpProviderConfig) -> Self {
        let credential = std::env::var(&config.credential_env).ok().filter(|c| !c.is_empty());
        Self::with_credential(config, credential)
    }

    pub fn with_credential(config: HttpProviderConfig, credential: Option<String>) -> Self {
        Self {
            client: reqwest::Client::new(),
            config,
            credential,
        }
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

#[async_trait]
impl Provider for HttpProvider {
    async fn complete(&self, request: &ModelRequest) -> Result<ModelReply, ProviderError> {
        let mut body = json!({
            "model": self.config.model_id,
            "messages": [{"role": "user", "content": request.prompt}],
        });
        if let Some(t) = self.config.temperature {
            body["temperature"] = json!(t);
        }
        let mut builder = self.client.post(&self.config.endpoint).json(&body);
        if let Some(cred) = &self.credential {
            builder = builder.bearer_auth(cred);
        }
        let started = Instant::now();
        let resp = builder
            .send()
            .await
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp
            .text()
            .await
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Err(ProviderError::Auth(format!("status {}", status.as_u16())));
        }
        if !status.is_success() {
            return Err(ProviderError::Status {
                status: status.as_u16(),
                body: text.chars().take(500).collect(),
            });
        }
        let parsed: ChatResponse =
            serde_json::from_str(&text).map_err(|e| ProviderError::Payload(e.to_string()))?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| ProviderError::Payload("no choices in response".into()))?;
        let usage = parsed.usage.unwrap_or(Usage {
            prompt_tokens: 0,
            completion_tokens: 0,
        });
        Ok(ModelReply {
            text: content,
            usage: CallUsage {
                prompt_tokens: usage.prompt_tokens,
                completion_tokens: usage.completion_tokens,
                wall_time: started.elapsed(),
                model_id: self.config.model_id.clone(),
            },
        })
    }

    fn model_id(&self) -> &str {
        &self.config.model_id
    }
}
