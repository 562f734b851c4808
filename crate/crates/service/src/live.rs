use std::time::Duration;

use serde::{Deserialize, Serialize};
use sourceconf_core::annotator::Backend;
use sourceconf_core::{Error, Result};

pub const DEFAULT_ENDPOINT: &str = "https://api.openai.com/v1/chat/completions";
pub const DEFAULT_KEY_VAR: &str = "SOURCECONF_API_KEY";

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
}

#[derive(Deserialize)]
struct ChatReply {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Reply,
}

#[derive(Deserialize)]
struct Reply {
    content: Option<String>,
}

/// OpenAI-compatible chat completions backend.
pub struct ChatBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    model: String,
    key: String,
}

impl ChatBackend {
    /// Reads the credential from the environment variable `key_var`.
    pub fn from_env(endpoint: &str, model: &str, key_var: &str) -> Result<Self> {
        let key = std::env::var(key_var).map_err(|_| Error::Config(format!("{key_var} is not set")))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| Error::Backend(e.to_string()))?;
        Ok(Self { client, endpoint: endpoint.to_string(), model: model.to_string(), key })
    }
}

impl Backend for ChatBackend {
    fn id(&self) -> &str {
        "openai-chat"
    }

    fn snapshot(&self) -> &str {
        &self.model
    }

    fn send(&self, prompt: &str) -> Result<String> {
        let body = ChatRequest {
            model: &self.model,
            messages: [ChatMessage { role: "user", content: prompt }],
            temperature: 0.0,
        };
        let resp = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.key)
            .json(&body)
            .send()
            .map_err(|e| Error::Backend(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(Error::Backend(format!("{status}: {}", text.chars().take(200).collect::<String>())));
        }
        let reply: ChatReply = resp.json().map_err(|e| Error::Backend(format!("malformed reply: {e}")))?;
        reply
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| Error::Backend("reply has no content".into()))
    }
}
