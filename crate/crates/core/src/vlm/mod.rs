//! Vision-language assistant integration: chat backends, answer parsing,
//! and the scene-enrichment and pseudo-labeling protocols.
//!
//! Everything here runs against the [`backend::ChatBackend`] trait; the
//! mock backend replays fixture answers byte-deterministically, the HTTP
//! backend talks to a live endpoint. Transcripts are cached per sample and
//! keyed by a hash of the prompts, so reruns answer from the cache without
//! touching the backend.

pub mod backend;
pub mod enrich;
pub mod parse;

use crate::error::{Error, Result};

/// Where and how to reach a live endpoint.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct VlmEndpointConfig {
    /// Base URL, e.g. `https://host/v1`.
    pub base_url: String,
    /// Model identifier sent with each request.
    pub model: String,
    /// Name of the environment variable holding the bearer token. Only the
    /// variable's *name* ever appears in output; the value is never logged.
    pub token_env: String,
    pub timeout_secs: u64,
    pub retry: RetryPolicy,
}

impl Default for VlmEndpointConfig {
    fn default() -> Self {
        VlmEndpointConfig {
            base_url: "http://localhost:8080/v1".into(),
            model: "default".into(),
            token_env: "VLM_API_TOKEN".into(),
            timeout_secs: 60,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            backoff_ms: 500,
        }
    }
}

/// One message in a conversation.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ChatTurn {
    /// "user" or "assistant".
    pub role: String,
    pub text: String,
    /// Optional image reference attached to a user turn.
    #[serde(default)]
    pub image: Option<String>,
    /// Seconds — wall clock against a live endpoint, a logical counter in
    /// mock mode so cached bytes are reproducible.
    pub timestamp: u64,
}

/// A cached conversation for one sample and phase.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ChatTranscript {
    pub sample_id: String,
    /// "enrich" or "pseudo".
    pub phase: String,
    /// Hash of the prompts that produced this transcript; a mismatch on
    /// rerun invalidates the cache entry.
    pub prompt_hash: String,
    pub turns: Vec<ChatTurn>,
}

impl ChatTranscript {
    /// Assistant replies in order.
    pub fn answers(&self) -> Vec<&str> {
        self.turns
            .iter()
            .filter(|t| t.role == "assistant")
            .map(|t| t.text.as_str())
            .collect()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
        }
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Parse(format!("serializing transcript: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &std::path::Path) -> Result<ChatTranscript> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Parse(format!("transcript {}: {e}", path.display())))
    }
}

/// Scene knowledge extracted for one sample.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EnrichmentResult {
    pub sample_id: String,
    /// Canonical objects seen in the scene, most frequent first.
    pub objects: Vec<String>,
    /// The subset of `objects` that matters for the driving decision.
    pub relevant: Vec<String>,
    /// Per-object detail sentences (at most one per relevant object).
    pub descriptions: Vec<String>,
}
