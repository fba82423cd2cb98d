//! Cosine semantic similarity between predicted and reference explanations.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::EvalError;

/// Maps text to a fixed-width vector.
pub trait Embedder: Send + Sync {
    /// Recorded in every report that uses the embedder.
    fn id(&self) -> String;
    fn embed(&self, text: &str) -> Result<Vec<f64>, EvalError>;
}

/// Cosine of two vectors; zero when either has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(str::to_lowercase)
}

/// Signed feature hashing of lowercase words and word bigrams. Deterministic
/// across platforms and releases.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { dim: 512 }
    }
}

impl HashEmbedder {
    fn bump(&self, v: &mut [f64], feature: &str) {
        let h = Sha256::digest(feature.as_bytes());
        let index = u64::from_le_bytes(h[..8].try_into().expect("8 bytes")) % self.dim as u64;
        v[index as usize] += if h[8] & 1 == 0 { 1.0 } else { -1.0 };
    }
}

impl Embedder for HashEmbedder {
    fn id(&self) -> String {
        format!("hash-words-bigrams-{}", self.dim)
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EvalError> {
        let mut v = vec![0.0; self.dim.max(1)];
        let tokens: Vec<String> = words(text).collect();
        for w in &tokens {
            self.bump(&mut v, w);
        }
        for pair in tokens.windows(2) {
            self.bump(&mut v, &format!("{} {}", pair[0], pair[1]));
        }
        Ok(v)
    }
}

/// OpenAI-compatible embeddings endpoint. The key is read from the
/// environment variable named by `api_key_env`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LiveEmbedderConfig {
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
    pub timeout_secs: u64,
}

impl Default for LiveEmbedderConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/embeddings".into(),
            model: "text-embedding-3-small".into(),
            api_key_env: "TAMPERSCOPE_API_KEY".into(),
            timeout_secs: 60,
        }
    }
}

pub struct LiveEmbedder {
    config: LiveEmbedderConfig,
    api_key: String,
    http: reqwest::blocking::Client,
}

impl LiveEmbedder {
    pub fn from_env(config: LiveEmbedderConfig) -> Result<Self, EvalError> {
        let api_key = std::env::var(&config.api_key_env)
            .map_err(|_| EvalError::Embedder(format!("environment variable {} is not set", config.api_key_env)))?;
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| EvalError::Embedder(e.to_string()))?;
        Ok(Self { config, api_key, http })
    }
}

impl Embedder for LiveEmbedder {
    fn id(&self) -> String {
        format!("live:{}", self.config.model)
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EvalError> {
        let body = serde_json::json!({ "model": self.config.model, "input": text });
        let response = self
            .http
            .post(&self.config.endpoint)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(|e| EvalError::Embedder(e.to_string()))?;
        let value: serde_json::Value = response.json().map_err(|e| EvalError::Embedder(e.to_string()))?;
        value["data"][0]["embedding"]
            .as_array()
            .and_then(|a| a.iter().map(serde_json::Value::as_f64).collect::<Option<Vec<_>>>())
            .ok_or_else(|| EvalError::Embedder("response has no embedding".into()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedderConfig {
    Hash { dim: usize },
    Live(LiveEmbedderConfig),
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig::Hash { dim: HashEmbedder::default().dim }
    }
}

impl EmbedderConfig {
    pub fn build(&self) -> Result<Box<dyn Embedder>, EvalError> {
        Ok(match self {
            EmbedderConfig::Hash { dim } => Box::new(HashEmbedder { dim: *dim }),
            EmbedderConfig::Live(c) => Box::new(LiveEmbedder::from_env(c.clone())?),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExplanationEval {
    pub mean_css: f64,
    pub embedder_id: String,
    pub per_pair: Vec<f64>,
    /// Pairs whose prediction was empty; they score 0.
    pub empty_predictions: Vec<usize>,
}

pub fn eval_css(preds: &[&str], gts: &[&str], embedder: &dyn Embedder) -> Result<ExplanationEval, EvalError> {
    if preds.len() != gts.len() {
        return Err(EvalError::Length { preds: preds.len(), gts: gts.len() });
    }
    let mut per_pair = Vec::with_capacity(preds.len());
    let mut empty_predictions = Vec::new();
    for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
        if p.trim().is_empty() {
            empty_predictions.push(i);
            per_pair.push(0.0);
            continue;
        }
        per_pair.push(cosine(&embedder.embed(p)?, &embedder.embed(g)?));
    }
    let mean_css = if per_pair.is_empty() { 0.0 } else { per_pair.iter().sum::<f64>() / per_pair.len() as f64 };
    Ok(ExplanationEval { mean_css, embedder_id: embedder.id(), per_pair, empty_predictions })
}
