//! Description-service clients: a live chat-completions client, a replay
//! client over a recorded transcript, and a fixture client keyed by image
//! file name.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// One description request: the rendered prompt and its attachments.
#[derive(Clone, Debug)]
pub struct DescriptionRequest {
    pub prompt: String,
    /// File name of the image, the fixture lookup key.
    pub image_name: String,
    pub image: Vec<u8>,
    pub mask: Option<Vec<u8>>,
}

impl DescriptionRequest {
    /// Content hash of prompt and attachments, the replay lookup key.
    pub fn key(&self) -> String {
        let mut h = Sha256::new();
        for part in [self.prompt.as_bytes(), &self.image, self.mask.as_deref().unwrap_or_default()] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part);
        }
        h.update([u8::from(self.mask.is_some())]);
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ClientError {
    #[error("description service timed out")]
    Timeout,
    #[error("description service refused: {0}")]
    Refused(String),
    #[error("description service transport error: {0}")]
    Transport(String),
    #[error("no recorded response for {0}")]
    NotFound(String),
    #[error("client configuration: {0}")]
    Config(String),
}

impl ClientError {
    /// Whether another attempt may succeed.
    pub fn is_transient(&self) -> bool {
        matches!(self, ClientError::Timeout | ClientError::Refused(_) | ClientError::Transport(_))
    }
}

/// Safe to call from several build workers at once.
pub trait DescriptionClient: Send + Sync {
    fn describe(&self, request: &DescriptionRequest) -> Result<String, ClientError>;
}

impl<C: DescriptionClient + ?Sized> DescriptionClient for Box<C> {
    fn describe(&self, request: &DescriptionRequest) -> Result<String, ClientError> {
        (**self).describe(request)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LiveClientConfig {
    /// Full chat-completions URL.
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable that holds the API key.
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub max_tokens: u32,
    pub temperature: f64,
}

impl Default for LiveClientConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o".into(),
            api_key_env: "TAMPERSCOPE_API_KEY".into(),
            timeout_secs: 120,
            max_tokens: 600,
            temperature: 0.0,
        }
    }
}

/// OpenAI-compatible chat-completions client sending both attachments as
/// inline PNG data URLs.
pub struct LiveClient {
    config: LiveClientConfig,
    api_key: String,
    http: reqwest::blocking::Client,
}

impl LiveClient {
    /// Reads the key from the configured environment variable.
    pub fn from_env(config: LiveClientConfig) -> Result<Self, ClientError> {
        let api_key = std::env::var(&config.api_key_env)
            .map_err(|_| ClientError::Config(format!("environment variable {} is not set", config.api_key_env)))?;
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| ClientError::Config(e.to_string()))?;
        Ok(Self { config, api_key, http })
    }

    pub fn request_body(&self, request: &DescriptionRequest) -> serde_json::Value {
        let data_url = |bytes: &[u8]| format!("data:image/png;base64,{}", base64::engine::general_purpose::STANDARD.encode(bytes));
        let mut content = vec![serde_json::json!({ "type": "text", "text": request.prompt })];
        content.push(serde_json::json!({ "type": "image_url", "image_url": { "url": data_url(&request.image) } }));
        if let Some(mask) = &request.mask {
            content.push(serde_json::json!({ "type": "image_url", "image_url": { "url": data_url(mask) } }));
        }
        serde_json::json!({
            "model": self.config.model,
            "max_tokens": self.config.max_tokens,
            "temperature": self.config.temperature,
            "messages": [{ "role": "user", "content": content }],
        })
    }
}

impl DescriptionClient for LiveClient {
    fn describe(&self, request: &DescriptionRequest) -> Result<String, ClientError> {
        let response = self
            .http
            .post(&self.config.endpoint)
            .bearer_auth(&self.api_key)
            .json(&self.request_body(request))
            .send()
            .map_err(|e| if e.is_timeout() { ClientError::Timeout } else { ClientError::Transport(e.to_string()) })?;
        let status = response.status();
        let body: serde_json::Value = response.json().map_err(|e| ClientError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(ClientError::Transport(format!("HTTP {status}: {body}")));
        }
        let message = &body["choices"][0]["message"];
        if let Some(refusal) = message["refusal"].as_str() {
            return Err(ClientError::Refused(refusal.to_string()));
        }
        if body["choices"][0]["finish_reason"] == "content_filter" {
            return Err(ClientError::Refused("content filter".into()));
        }
        message["content"].as_str().map(str::to_string).ok_or_else(|| ClientError::Transport("response has no message content".into()))
    }
}

/// One transcript line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub key: String,
    pub image_name: String,
    pub response: String,
}

/// Answers from a JSON Lines transcript keyed by [`DescriptionRequest::key`].
#[derive(Clone, Debug, Default)]
pub struct ReplayClient {
    responses: HashMap<String, String>,
}

impl ReplayClient {
    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut responses = HashMap::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let entry: TranscriptEntry = serde_json::from_str(line)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{}:{}: {e}", path.display(), n + 1)))?;
            responses.insert(entry.key, entry.response);
        }
        Ok(Self { responses })
    }

    pub fn from_entries(entries: impl IntoIterator<Item = TranscriptEntry>) -> Self {
        Self { responses: entries.into_iter().map(|e| (e.key, e.response)).collect() }
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl DescriptionClient for ReplayClient {
    fn describe(&self, request: &DescriptionRequest) -> Result<String, ClientError> {
        self.responses.get(&request.key()).cloned().ok_or_else(|| ClientError::NotFound(request.image_name.clone()))
    }
}

/// Canned responses keyed by image file name.
#[derive(Clone, Debug, Default)]
pub struct FixtureClient {
    responses: HashMap<String, String>,
}

impl FixtureClient {
    pub fn new(responses: HashMap<String, String>) -> Self {
        Self { responses }
    }

    /// Reads a JSON object mapping file names to response text.
    pub fn load(path: &Path) -> std::io::Result<Self> {
        let bytes = std::fs::read(path)?;
        let responses = serde_json::from_slice(&bytes).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        Ok(Self { responses })
    }
}

impl DescriptionClient for FixtureClient {
    fn describe(&self, request: &DescriptionRequest) -> Result<String, ClientError> {
        self.responses.get(&request.image_name).cloned().ok_or_else(|| ClientError::NotFound(request.image_name.clone()))
    }
}

/// Appends every successful response of `inner` to a transcript file.
pub struct RecordingClient<C> {
    inner: C,
    path: PathBuf,
    lock: Mutex<()>,
}

impl<C: DescriptionClient> RecordingClient<C> {
    pub fn new(inner: C, path: PathBuf) -> Self {
        Self { inner, path, lock: Mutex::new(()) }
    }
}

impl<C: DescriptionClient> DescriptionClient for RecordingClient<C> {
    fn describe(&self, request: &DescriptionRequest) -> Result<String, ClientError> {
        let response = self.inner.describe(request)?;
        let entry = TranscriptEntry { key: request.key(), image_name: request.image_name.clone(), response: response.clone() };
        let mut line = serde_json::to_string(&entry).expect("transcript entry serializes");
        line.push('\n');
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .and_then(|mut f| f.write_all(line.as_bytes()))
            .map_err(|e| ClientError::Transport(format!("cannot append to transcript: {e}")))?;
        Ok(response)
    }
}
