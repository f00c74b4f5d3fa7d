//! Chat-completions and embeddings over HTTP.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::backend::{Embedder, TextGenerator};
use super::{BackendReply, GenerationRequest, ProviderError, TokenUsage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            initial_backoff_ms: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    /// Base URL up to and including the API version, e.g.
    /// `https://api.openai.com/v1`.
    pub base_url: String,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub embedding_model: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_timeout() -> u64 {
    120
}

pub struct HttpBackend {
    config: HttpConfig,
    api_key: String,
    agent: ureq::Agent,
}

impl HttpBackend {
    /// Fails before any network traffic if the key variable is unset.
    pub fn from_env(config: HttpConfig) -> Result<Self, ProviderError> {
        let api_key = std::env::var(&config.api_key_env).map_err(|_| {
            ProviderError::Config(format!(
                "environment variable {} is not set",
                config.api_key_env
            ))
        })?;
        Ok(Self::with_key(config, api_key))
    }

    pub fn with_key(config: HttpConfig, api_key: String) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            config,
            api_key,
            agent,
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.config.base_url.trim_end_matches('/'), path)
    }

    fn post_once(&self, path: &str, body: &Value) -> Result<Value, ProviderError> {
        let mut resp = self
            .agent
            .post(&self.url(path))
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(body)
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        match status {
            200..=299 => serde_json::from_str(&text)
                .map_err(|e| ProviderError::Transport(format!("bad response body: {e}"))),
            408 | 429 | 500..=599 => Err(ProviderError::Transport(format!(
                "HTTP {status}: {text}"
            ))),
            _ => Err(ProviderError::Config(format!("HTTP {status}: {text}"))),
        }
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, ProviderError> {
        let policy = &self.config.retry;
        let mut attempt = 0;
        loop {
            match self.post_once(path, body) {
                Err(err) if err.is_transient() && attempt < policy.max_retries => {
                    let wait = policy.initial_backoff_ms << attempt;
                    tracing::warn!(%err, attempt, wait_ms = wait, "retrying request");
                    std::thread::sleep(Duration::from_millis(wait));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

fn parse_chat(v: &Value) -> Result<BackendReply, ProviderError> {
    let text = v["choices"][0]["message"]["content"]
        .as_str()
        .or_else(|| v["choices"][0]["text"].as_str())
        .ok_or_else(|| ProviderError::Transport("response has no message content".into()))?;
    let usage = match (
        v["usage"]["prompt_tokens"].as_u64(),
        v["usage"]["completion_tokens"].as_u64(),
    ) {
        (Some(p), Some(c)) => Some(TokenUsage {
            prompt_tokens: p,
            completion_tokens: c,
        }),
        _ => None,
    };
    Ok(BackendReply {
        text: text.to_string(),
        usage,
    })
}

impl TextGenerator for HttpBackend {
    fn complete(&self, req: &GenerationRequest) -> Result<BackendReply, ProviderError> {
        let body = json!({
            "model": req.model_id,
            "messages": [{ "role": "user", "content": req.prompt }],
            "temperature": req.temperature,
            "top_p": req.top_p,
            "max_tokens": req.max_tokens,
        });
        parse_chat(&self.post("chat/completions", &body)?)
    }
}

impl Embedder for HttpBackend {
    fn model_id(&self) -> String {
        self.config.embedding_model.clone()
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, ProviderError> {
        let body = json!({ "model": self.config.embedding_model, "input": text });
        let v = self.post("embeddings", &body)?;
        v["data"][0]["embedding"]
            .as_array()
            .ok_or_else(|| ProviderError::Transport("response has no embedding".into()))?
            .iter()
            .map(|x| {
                x.as_f64()
                    .ok_or_else(|| ProviderError::Transport("non-numeric embedding".into()))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    /// Serves `replies` in order, one per connection.
    fn serve(replies: Vec<(u16, String)>) -> (String, Arc<AtomicUsize>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        std::thread::spawn(move || {
            for (status, body) in replies {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                counter.fetch_add(1, Ordering::SeqCst);
                let resp = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(resp.as_bytes()).unwrap();
            }
        });
        (format!("http://{addr}/v1"), hits)
    }

    fn config(base_url: String) -> HttpConfig {
        HttpConfig {
            base_url,
            api_key_env: "UNUSED".into(),
            embedding_model: "emb".into(),
            timeout_secs: 5,
            retry: RetryPolicy {
                max_retries: 3,
                initial_backoff_ms: 1,
            },
        }
    }

    #[test]
    fn chat_with_retry() {
        let ok = r#"{"choices":[{"message":{"content":"Answer: C."}}],"usage":{"prompt_tokens":12,"completion_tokens":3}}"#;
        let (url, hits) = serve(vec![
            (503, "{}".into()),
            (429, "{}".into()),
            (200, ok.into()),
        ]);
        let backend = HttpBackend::with_key(config(url), "k".into());
        let reply = backend
            .complete(&GenerationRequest::new("gpt", "hi"))
            .unwrap();
        assert_eq!(reply.text, "Answer: C.");
        assert_eq!(
            reply.usage,
            Some(TokenUsage {
                prompt_tokens: 12,
                completion_tokens: 3
            })
        );
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn gives_up_after_bounded_retries() {
        let (url, hits) = serve(vec![(500, "{}".into()); 4]);
        let backend = HttpBackend::with_key(config(url), "k".into());
        let err = backend
            .complete(&GenerationRequest::new("gpt", "hi"))
            .unwrap_err();
        assert!(err.is_transient());
        assert_eq!(hits.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn client_errors_are_not_retried() {
        let (url, hits) = serve(vec![(401, "{}".into())]);
        let backend = HttpBackend::with_key(config(url), "k".into());
        let err = backend
            .complete(&GenerationRequest::new("gpt", "hi"))
            .unwrap_err();
        assert!(matches!(err, ProviderError::Config(_)));
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn embeddings() {
        let (url, _) = serve(vec![(200, r#"{"data":[{"embedding":[0.5,-0.25]}]}"#.into())]);
        let backend = HttpBackend::with_key(config(url), "k".into());
        assert_eq!(backend.embed("x").unwrap(), vec![0.5, -0.25]);
    }

    #[test]
    fn missing_key_is_config_error() {
        let mut cfg = config("http://127.0.0.1:9".into());
        cfg.api_key_env = "COO_TEST_SURELY_UNSET_KEY".into();
        assert!(matches!(
            HttpBackend::from_env(cfg),
            Err(ProviderError::Config(_))
        ));
    }
}
