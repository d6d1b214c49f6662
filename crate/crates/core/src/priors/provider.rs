//! External model providers, one interface per role, and JSON-over-HTTP
//! adapters for each.
//!
//! Wire format (all `POST`, JSON bodies, optional `Authorization: Bearer`):
//!
//! * text: `{"model", "prompt", "n", "temperature"}` returns
//!   `{"descriptions": [..]}` or `{"text": ".."}` (one description per line)
//! * image: `{"model", "prompt", "seed"}` returns `{"image_base64": "..",
//!   "settings": {..}}`
//! * embedding: `{"model", "inputs": [{"text": ..} | {"image_base64": ..}]}`
//!   returns `{"embeddings": [[..], ..]}`

use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{KadError, Result};

pub trait TextGenerator: Send + Sync {
    /// Up to `n` descriptions answering `prompt`.
    fn describe(&self, prompt: &str, n: usize) -> Result<Vec<String>>;
    fn identity(&self) -> String;
    fn temperature(&self) -> Option<f64> {
        None
    }
}

pub struct GeneratedImage {
    /// Encoded image bytes as returned by the provider.
    pub bytes: Vec<u8>,
    pub settings: serde_json::Map<String, Value>,
}

pub trait ImageGenerator: Send + Sync {
    fn generate(&self, prompt: &str, seed: u64) -> Result<GeneratedImage>;
    fn identity(&self) -> String;
}

pub enum EmbedInput<'a> {
    Text(&'a str),
    Image(&'a [u8]),
}

pub trait Embedder: Send + Sync {
    fn embed(&self, inputs: &[EmbedInput<'_>]) -> Result<Vec<Vec<f32>>>;
    fn identity(&self) -> String;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub retries: u32,
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            retries: 2,
            backoff_ms: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleConfig {
    pub endpoint: String,
    /// Environment variable holding the API key; `None` for open endpoints.
    #[serde(default)]
    pub credential_env: Option<String>,
    pub model: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_timeout() -> f64 {
    60.0
}

impl RoleConfig {
    pub fn validate(&self, role: &str) -> Result<()> {
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(KadError::Config(format!("{role}: timeout must be > 0")));
        }
        if self.endpoint.is_empty() {
            return Err(KadError::Config(format!("{role}: empty endpoint")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub text: RoleConfig,
    pub image: RoleConfig,
    pub embedding: RoleConfig,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Image `j` of description `i` uses seed `image_seed + i * 1000 + j`.
    #[serde(default)]
    pub image_seed: u64,
    /// Categories processed concurrently.
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

fn default_temperature() -> f64 {
    0.7
}

fn default_parallelism() -> usize {
    4
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<()> {
        self.text.validate("text")?;
        self.image.validate("image")?;
        self.embedding.validate("embedding")?;
        if self.parallelism == 0 {
            return Err(KadError::Config("parallelism must be >= 1".into()));
        }
        Ok(())
    }
}

/// JSON POST client with timeout, retries and bearer auth.
#[derive(Clone)]
pub struct HttpClient {
    agent: ureq::Agent,
    endpoint: String,
    token: Option<String>,
    retry: RetryPolicy,
}

impl std::fmt::Debug for HttpClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpClient").field("endpoint", &self.endpoint).finish()
    }
}

impl HttpClient {
    /// Resolves the credential now, so a missing key fails at startup.
    pub fn new(cfg: &RoleConfig) -> Result<Self> {
        let token = match &cfg.credential_env {
            Some(var) => Some(std::env::var(var).map_err(|_| KadError::MissingCredential(var.clone()))?),
            None => None,
        };
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .build();
        Ok(HttpClient {
            agent,
            endpoint: cfg.endpoint.clone(),
            token,
            retry: cfg.retry.clone(),
        })
    }

    pub fn post(&self, body: &Value) -> Result<Value> {
        let mut last = String::new();
        for attempt in 0..=self.retry.retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(self.retry.backoff_ms << (attempt - 1).min(6)));
            }
            let mut req = self.agent.post(&self.endpoint).set("Content-Type", "application/json");
            if let Some(t) = &self.token {
                req = req.set("Authorization", &format!("Bearer {t}"));
            }
            match req.send_json(body.clone()) {
                Ok(resp) => {
                    return resp
                        .into_json::<Value>()
                        .map_err(|e| KadError::Provider(format!("{}: bad response body: {e}", self.endpoint)));
                }
                // client errors other than rate limiting will not improve on retry
                Err(ureq::Error::Status(code, resp)) if (400..500).contains(&code) && code != 429 => {
                    let text = resp.into_string().unwrap_or_default();
                    return Err(KadError::Provider(format!("{}: HTTP {code}: {text}", self.endpoint)));
                }
                Err(e) => {
                    last = e.to_string();
                    log::warn!("{} attempt {} failed: {last}", self.endpoint, attempt + 1);
                }
            }
        }
        Err(KadError::Provider(format!(
            "{}: gave up after {} attempts: {last}",
            self.endpoint,
            self.retry.retries + 1
        )))
    }
}

fn field<'a>(v: &'a Value, key: &str, endpoint: &str) -> Result<&'a Value> {
    v.get(key)
        .ok_or_else(|| KadError::Provider(format!("{endpoint}: response has no {key:?} field")))
}

/// Splits free text into description lines, dropping list markers.
pub fn split_descriptions(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| {
            l.trim()
                .trim_start_matches(|c: char| c.is_ascii_digit() || matches!(c, '.' | ')' | '-' | '*'))
                .trim()
                .to_string()
        })
        .filter(|l| !l.is_empty())
        .collect()
}

pub struct HttpTextGenerator {
    client: HttpClient,
    model: String,
    temperature: f64,
}

impl HttpTextGenerator {
    pub fn new(cfg: &RoleConfig, temperature: f64) -> Result<Self> {
        Ok(HttpTextGenerator {
            client: HttpClient::new(cfg)?,
            model: cfg.model.clone(),
            temperature,
        })
    }
}

impl TextGenerator for HttpTextGenerator {
    fn describe(&self, prompt: &str, n: usize) -> Result<Vec<String>> {
        let resp = self.client.post(&json!({
            "model": self.model,
            "prompt": prompt,
            "n": n,
            "temperature": self.temperature,
        }))?;
        let ep = &self.client.endpoint;
        if let Some(list) = resp.get("descriptions") {
            let list = list
                .as_array()
                .ok_or_else(|| KadError::Provider(format!("{ep}: descriptions is not a list")))?;
            return list
                .iter()
                .map(|d| {
                    d.as_str()
                        .map(str::to_string)
                        .ok_or_else(|| KadError::Provider(format!("{ep}: description is not a string")))
                })
                .collect();
        }
        let text = field(&resp, "text", ep)?
            .as_str()
            .ok_or_else(|| KadError::Provider(format!("{ep}: text is not a string")))?;
        Ok(split_descriptions(text))
    }

    fn identity(&self) -> String {
        self.model.clone()
    }

    fn temperature(&self) -> Option<f64> {
        Some(self.temperature)
    }
}

pub struct HttpImageGenerator {
    client: HttpClient,
    model: String,
}

impl HttpImageGenerator {
    pub fn new(cfg: &RoleConfig) -> Result<Self> {
        Ok(HttpImageGenerator {
            client: HttpClient::new(cfg)?,
            model: cfg.model.clone(),
        })
    }
}

impl ImageGenerator for HttpImageGenerator {
    fn generate(&self, prompt: &str, seed: u64) -> Result<GeneratedImage> {
        let resp = self.client.post(&json!({
            "model": self.model,
            "prompt": prompt,
            "seed": seed,
        }))?;
        let ep = &self.client.endpoint;
        let b64 = field(&resp, "image_base64", ep)?
            .as_str()
            .ok_or_else(|| KadError::Provider(format!("{ep}: image_base64 is not a string")))?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(b64)
            .map_err(|e| KadError::Provider(format!("{ep}: invalid base64 image: {e}")))?;
        let settings = resp
            .get("settings")
            .and_then(Value::as_object)
            .cloned()
            .unwrap_or_default();
        Ok(GeneratedImage { bytes, settings })
    }

    fn identity(&self) -> String {
        self.model.clone()
    }
}

pub struct HttpEmbedder {
    client: HttpClient,
    model: String,
}

impl HttpEmbedder {
    pub fn new(cfg: &RoleConfig) -> Result<Self> {
        Ok(HttpEmbedder {
            client: HttpClient::new(cfg)?,
            model: cfg.model.clone(),
        })
    }
}

impl Embedder for HttpEmbedder {
    fn embed(&self, inputs: &[EmbedInput<'_>]) -> Result<Vec<Vec<f32>>> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let items: Vec<Value> = inputs
            .iter()
            .map(|i| match i {
                EmbedInput::Text(t) => json!({ "text": t }),
                EmbedInput::Image(b) => json!({ "image_base64": base64::engine::general_purpose::STANDARD.encode(b) }),
            })
            .collect();
        let resp = self.client.post(&json!({ "model": self.model, "inputs": items }))?;
        let ep = &self.client.endpoint;
        let rows: Vec<Vec<f32>> = serde_json::from_value(field(&resp, "embeddings", ep)?.clone())
            .map_err(|e| KadError::Provider(format!("{ep}: embeddings malformed: {e}")))?;
        if rows.len() != inputs.len() {
            return Err(KadError::Provider(format!(
                "{ep}: {} embeddings for {} inputs",
                rows.len(),
                inputs.len()
            )));
        }
        Ok(rows)
    }

    fn identity(&self) -> String {
        self.model.clone()
    }
}
