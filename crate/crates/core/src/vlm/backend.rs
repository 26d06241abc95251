//! Chat backends: a byte-deterministic mock that replays fixture files and
//! an HTTP client for OpenAI-style chat-completion endpoints.

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::vlm::{ChatTurn, VlmEndpointConfig};

/// A conversational model the enrichment protocol can talk to.
///
/// `complete` receives the conversation so far (ending with a user turn) and
/// returns the assistant's reply. `key` names the step within the protocol
/// (e.g. `q1`, `pseudo-2`); the mock backend uses it to locate the fixture
/// answer, a live backend ignores it.
pub trait ChatBackend {
    fn complete(&mut self, sample_id: &str, key: &str, turns: &[ChatTurn]) -> Result<String>;

    /// Timestamp for newly created turns, in seconds. Live backends report
    /// wall-clock time; the mock uses a logical counter so transcripts are
    /// byte-for-byte reproducible.
    fn now(&mut self) -> u64;

    /// Number of completions served so far (cache hits do not call the
    /// backend, so this counts real work).
    fn calls(&self) -> u64;
}

/// Replays canned answers from `<dir>/<sample_id>/<key>.txt`.
pub struct MockBackend {
    dir: PathBuf,
    calls: u64,
    clock: u64,
}

impl MockBackend {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        MockBackend {
            dir: dir.into(),
            calls: 0,
            clock: 0,
        }
    }
}

impl ChatBackend for MockBackend {
    fn complete(&mut self, sample_id: &str, key: &str, _turns: &[ChatTurn]) -> Result<String> {
        let path = self.dir.join(sample_id).join(format!("{key}.txt"));
        let text = std::fs::read_to_string(&path).map_err(|_| {
            Error::Transport(format!(
                "no mock answer for sample '{sample_id}' step '{key}' (expected {})",
                path.display()
            ))
        })?;
        self.calls += 1;
        Ok(text.trim_end().to_string())
    }

    fn now(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    fn calls(&self) -> u64 {
        self.calls
    }
}

/// Talks to an OpenAI-style `/chat/completions` endpoint.
///
/// The bearer token is read from the environment variable named by
/// `cfg.token_env` at construction time and is never written to logs or
/// error messages.
pub struct HttpBackend {
    cfg: VlmEndpointConfig,
    token: String,
    client: reqwest::blocking::Client,
    calls: u64,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        // Deliberately omits the token.
        f.debug_struct("HttpBackend")
            .field("base_url", &self.cfg.base_url)
            .field("model", &self.cfg.model)
            .field("calls", &self.calls)
            .finish()
    }
}

impl HttpBackend {
    pub fn new(cfg: VlmEndpointConfig) -> Result<Self> {
        let token = std::env::var(&cfg.token_env).map_err(|_| {
            Error::Config(format!(
                "environment variable {} is not set (it must hold the endpoint bearer token)",
                cfg.token_env
            ))
        })?;
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| Error::Transport(format!("building http client: {e}")))?;
        Ok(HttpBackend {
            cfg,
            token,
            client,
            calls: 0,
        })
    }

    fn message_json(turn: &ChatTurn) -> serde_json::Value {
        match &turn.image {
            Some(image) => serde_json::json!({
                "role": turn.role,
                "content": [
                    { "type": "text", "text": turn.text },
                    { "type": "image_url", "image_url": { "url": image } },
                ],
            }),
            None => serde_json::json!({ "role": turn.role, "content": turn.text }),
        }
    }

    fn extract_content(body: &serde_json::Value) -> Option<String> {
        let content = body
            .get("choices")?
            .get(0)?
            .get("message")?
            .get("content")?;
        match content {
            serde_json::Value::String(s) => Some(s.clone()),
            serde_json::Value::Array(parts) => {
                let mut out = String::new();
                for part in parts {
                    if let Some(text) = part.get("text").and_then(|t| t.as_str()) {
                        out.push_str(text);
                    }
                }
                Some(out)
            }
            _ => None,
        }
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&mut self, _sample_id: &str, _key: &str, turns: &[ChatTurn]) -> Result<String> {
        let url = format!(
            "{}/chat/completions",
            self.cfg.base_url.trim_end_matches('/')
        );
        let body = serde_json::json!({
            "model": self.cfg.model,
            "messages": turns.iter().map(Self::message_json).collect::<Vec<_>>(),
        });

        let attempts = self.cfg.retry.max_attempts.max(1);
        let mut last_error = String::new();
        for attempt in 1..=attempts {
            if attempt > 1 {
                std::thread::sleep(std::time::Duration::from_millis(
                    self.cfg.retry.backoff_ms * u64::from(attempt - 1),
                ));
            }
            let sent = self
                .client
                .post(&url)
                .bearer_auth(&self.token)
                .json(&body)
                .send();
            match sent {
                Err(e) => {
                    // reqwest redacts credentials from its Display output,
                    // and we add none of our own here.
                    last_error = format!("request failed: {e}");
                }
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        let parsed: serde_json::Value = resp.json().map_err(|e| {
                            Error::Transport(format!("decoding endpoint response: {e}"))
                        })?;
                        let content = Self::extract_content(&parsed).ok_or_else(|| {
                            Error::Transport(
                                "endpoint response has no choices[0].message.content".into(),
                            )
                        })?;
                        self.calls += 1;
                        return Ok(content);
                    }
                    let retryable = status.as_u16() == 429 || status.is_server_error();
                    last_error = format!("endpoint returned status {status}");
                    if !retryable {
                        return Err(Error::Transport(last_error));
                    }
                }
            }
        }
        Err(Error::Transport(format!(
            "{last_error} (after {attempts} attempts)"
        )))
    }

    fn now(&mut self) -> u64 {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
    }

    fn calls(&self) -> u64 {
        self.calls
    }
}
