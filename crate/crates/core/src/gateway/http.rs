//! HTTP transport speaking the common hosted-API JSON protocol.

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{
    BackendConfig, ChatReply, ChatRequest, FinishReason, GatewayError, Transport, TransportError,
};

/// Blocking HTTP client for `/v1/chat/completions` and `/v1/embeddings`.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    chat_url: String,
    embed_url: String,
    bearer: Option<String>,
}

impl HttpTransport {
    pub fn new(cfg: &BackendConfig) -> Result<Self, GatewayError> {
        if cfg.endpoint_url.is_empty() {
            return Err(GatewayError::InvalidConfig("endpoint_url is empty".into()));
        }
        let bearer = if cfg.auth_token_env_var.is_empty() {
            None
        } else {
            match std::env::var(&cfg.auth_token_env_var) {
                Ok(token) if !token.is_empty() => Some(token),
                _ => {
                    return Err(GatewayError::Auth(format!(
                        "auth token environment variable {} is not set",
                        cfg.auth_token_env_var
                    )))
                }
            }
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(cfg.request_timeout_ms))
            .build()
            .map_err(|e| GatewayError::InvalidConfig(format!("http client: {e}")))?;
        let base = cfg.endpoint_url.trim_end_matches('/');
        Ok(HttpTransport {
            client,
            chat_url: format!("{base}/v1/chat/completions"),
            embed_url: format!("{base}/v1/embeddings"),
            bearer,
        })
    }

    fn post(&self, url: &str, body: &serde_json::Value) -> Result<Vec<u8>, TransportError> {
        let mut request = self.client.post(url).json(body);
        if let Some(token) = &self.bearer {
            request = request.bearer_auth(token);
        }
        let response = request.send().map_err(|e| {
            if e.is_timeout() || e.is_connect() {
                TransportError::Network(e.to_string())
            } else {
                TransportError::Protocol(e.to_string())
            }
        })?;
        let status = response.status().as_u16();
        let bytes = response
            .bytes()
            .map_err(|e| TransportError::Network(e.to_string()))?;
        if status == 401 || status == 403 {
            return Err(TransportError::Auth(format!(
                "HTTP {status}: {}",
                snippet(&bytes)
            )));
        }
        if !(200..300).contains(&status) {
            return Err(TransportError::Http {
                status,
                message: snippet(&bytes),
            });
        }
        Ok(bytes.to_vec())
    }
}

fn snippet(bytes: &[u8]) -> String {
    let text = String::from_utf8_lossy(bytes);
    text.chars().take(200).collect()
}

#[derive(Deserialize)]
struct ChatCompletionBody {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct EmbeddingBody {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    index: usize,
    embedding: Vec<f32>,
}

impl Transport for HttpTransport {
    fn chat(&self, req: &ChatRequest) -> Result<ChatReply, TransportError> {
        let body = json!({
            "model": req.model_tag,
            "messages": [
                {"role": "system", "content": req.system_prompt},
                {"role": "user", "content": req.user_prompt},
            ],
            "max_tokens": req.max_tokens,
            "temperature": req.temperature,
            "top_k": req.top_k,
        });
        let bytes = self.post(&self.chat_url, &body)?;
        let parsed: ChatCompletionBody = serde_json::from_slice(&bytes)
            .map_err(|e| TransportError::Protocol(format!("chat response: {e}")))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| TransportError::Protocol("chat response has no choices".into()))?;
        let text = choice
            .message
            .content
            .ok_or_else(|| TransportError::Protocol("chat choice has no content".into()))?;
        let finish_reason = match choice.finish_reason.as_deref() {
            Some("length") => FinishReason::Length,
            _ => FinishReason::Stop,
        };
        Ok(ChatReply {
            text,
            finish_reason,
        })
    }

    fn embed(&self, model_tag: &str, texts: &[String]) -> Result<Vec<Vec<f32>>, TransportError> {
        let body = json!({
            "model": model_tag,
            "input": texts,
        });
        let bytes = self.post(&self.embed_url, &body)?;
        let parsed: EmbeddingBody = serde_json::from_slice(&bytes)
            .map_err(|e| TransportError::Protocol(format!("embedding response: {e}")))?;
        if parsed.data.len() != texts.len() {
            return Err(TransportError::Protocol(format!(
                "embedding response has {} rows for {} inputs",
                parsed.data.len(),
                texts.len()
            )));
        }
        let mut rows = parsed.data;
        rows.sort_by_key(|d| d.index);
        Ok(rows.into_iter().map(|d| d.embedding).collect())
    }
}
