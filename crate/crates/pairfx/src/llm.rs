//! Chat-completion HTTP client with a content-addressed disk cache,
//! exponential-backoff retries, bounded batch parallelism, and an offline
//! mode that serves entirely from cache.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::io::sha256_hex;
use crate::rng::SplitMix64;

/// Anything that can answer a prompt with text. The funnel and the remote
/// generation backend accept this trait so tests can script responses.
pub trait Completer: Sync {
    fn complete(&self, prompt: &str) -> Result<String>;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeParams {
    pub temperature: f64,
    pub max_tokens: usize,
}

impl Default for DecodeParams {
    fn default() -> Self {
        // Temperature 0 keeps filtering reproducible.
        DecodeParams {
            temperature: 0.0,
            max_tokens: 256,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClientConfig {
    pub base_url: String,
    pub model_name: String,
    /// Read from PAIRFX_API_KEY; never logged.
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub parallelism: usize,
    pub cache_dir: PathBuf,
    pub offline: bool,
    /// Backoff base in milliseconds (factor 2, jittered). Tunable so tests
    /// do not sleep for real seconds.
    pub backoff_base_ms: u64,
}

impl ClientConfig {
    pub fn new(base_url: &str, model_name: &str, cache_dir: &Path) -> Self {
        ClientConfig {
            base_url: base_url.trim_end_matches('/').to_string(),
            model_name: model_name.to_string(),
            api_key: std::env::var("PAIRFX_API_KEY").ok(),
            timeout_secs: 60,
            max_retries: 5,
            parallelism: 4,
            cache_dir: cache_dir.to_path_buf(),
            offline: false,
            backoff_base_ms: 1000,
        }
    }
}

/// Content hash keying one completion: model, full prompt, decode params.
pub fn cache_key(model: &str, prompt: &str, decode: &DecodeParams) -> String {
    let payload = format!(
        "{model}\x1f{prompt}\x1f{}\x1f{}",
        decode.temperature, decode.max_tokens
    );
    sha256_hex(payload.as_bytes())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub response: String,
    pub timestamp: u64,
}

/// One file per entry under `dir`, written atomically (write then rename)
/// so concurrent writers never expose partial entries.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(ResponseCache { dir: dir.to_path_buf() })
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Result<Option<String>> {
        let path = self.path_for(key);
        if !path.exists() {
            return Ok(None);
        }
        let entry: CacheEntry = serde_json::from_str(&fs::read_to_string(path)?)?;
        Ok(Some(entry.response))
    }

    pub fn put(&self, key: &str, response: &str) -> Result<()> {
        let entry = CacheEntry {
            key: key.to_string(),
            response: response.to_string(),
            timestamp: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        let tmp = self.dir.join(format!(".{key}.tmp"));
        fs::write(&tmp, serde_json::to_string(&entry)?)?;
        fs::rename(&tmp, self.path_for(key))?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CompletionResult {
    pub text: String,
    pub cached: bool,
}

pub struct LlmClient {
    pub config: ClientConfig,
    cache: ResponseCache,
    http: reqwest::blocking::Client,
}

impl LlmClient {
    pub fn new(config: ClientConfig) -> Result<Self> {
        let cache = ResponseCache::new(&config.cache_dir)?;
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::fault(format!("http client init: {e}")))?;
        Ok(LlmClient { config, cache, http })
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    /// Cache-first completion. On a miss (online only) the request is sent
    /// with exponential backoff on 429/5xx, and the response is persisted
    /// before returning.
    pub fn complete_with(&self, prompt: &str, decode: &DecodeParams) -> Result<CompletionResult> {
        let key = cache_key(&self.config.model_name, prompt, decode);
        if let Some(text) = self.cache.get(&key)? {
            return Ok(CompletionResult { text, cached: true });
        }
        if self.config.offline {
            return Err(Error::OfflineCacheMiss(key));
        }
        let text = self.request_with_retries(prompt, decode, &key)?;
        self.cache.put(&key, &text)?;
        Ok(CompletionResult { text, cached: false })
    }

    fn request_with_retries(&self, prompt: &str, decode: &DecodeParams, key: &str) -> Result<String> {
        let url = format!("{}/chat/completions", self.config.base_url);
        let body = json!({
            "model": self.config.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": decode.temperature,
            "max_tokens": decode.max_tokens,
        });
        // Jitter stream seeded from the cache key so retry timing is
        // reproducible per request.
        let mut jitter = SplitMix64::substream(
            u64::from_str_radix(&key[..16], 16).unwrap_or(0),
            "backoff",
        );
        let mut last_status = String::from("none");
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                let base = self.config.backoff_base_ms << (attempt - 1);
                let sleep_ms = base + (jitter.next_f64() * base as f64 * 0.5) as u64;
                std::thread::sleep(Duration::from_millis(sleep_ms));
            }
            let mut req = self.http.post(&url).json(&body);
            if let Some(key) = &self.config.api_key {
                req = req.bearer_auth(key);
            }
            match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        let value: serde_json::Value = resp
                            .json()
                            .map_err(|e| Error::Protocol(format!("bad response body: {e}")))?;
                        return value["choices"][0]["message"]["content"]
                            .as_str()
                            .map(str::to_string)
                            .ok_or_else(|| {
                                Error::Protocol("missing choices[0].message.content".into())
                            });
                    }
                    let transient = status.as_u16() == 429 || status.is_server_error();
                    last_status = status.as_u16().to_string();
                    if !transient {
                        return Err(Error::RemoteUnavailable {
                            attempts: attempt + 1,
                            last_status,
                        });
                    }
                }
                Err(e) => {
                    last_status = format!("transport: {e}");
                }
            }
        }
        Err(Error::RemoteUnavailable {
            attempts: self.config.max_retries + 1,
            last_status,
        })
    }

    /// Complete many prompts with at most `parallelism` requests in flight.
    /// Results come back in input order; per-item failures do not abort the
    /// batch.
    pub fn batch_complete(&self, prompts: &[String]) -> Vec<Result<CompletionResult>> {
        let n = prompts.len();
        let results: Mutex<Vec<Option<Result<CompletionResult>>>> =
            Mutex::new((0..n).map(|_| None).collect());
        let next = AtomicUsize::new(0);
        let workers = self.config.parallelism.max(1).min(n.max(1));
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let idx = next.fetch_add(1, Ordering::SeqCst);
                    if idx >= n {
                        break;
                    }
                    let result = self.complete_with(&prompts[idx], &DecodeParams::default());
                    results.lock().unwrap()[idx] = Some(result);
                });
            }
        });
        results
            .into_inner()
            .unwrap()
            .into_iter()
            .map(|r| r.expect("worker filled every slot"))
            .collect()
    }
}

impl Completer for LlmClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        self.complete_with(prompt, &DecodeParams::default()).map(|r| r.text)
    }
}

/// Embedding provider backed by a `{base_url}/embeddings` endpoint, cached
/// through the same disk cache as completions.
pub struct RemoteEmbedder {
    pub client: LlmClient,
    pub dim: usize,
}

impl crate::metrics::EmbeddingProvider for RemoteEmbedder {
    fn id(&self) -> String {
        format!("remote-{}", self.client.config.model_name)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        let key = sha256_hex(
            format!("embed\x1f{}\x1f{text}", self.client.config.model_name).as_bytes(),
        );
        if let Some(cached) = self.client.cache.get(&key)? {
            let values: Vec<f32> = serde_json::from_str(&cached)?;
            return Ok(values);
        }
        if self.client.config.offline {
            return Err(Error::OfflineCacheMiss(key));
        }
        let url = format!("{}/embeddings", self.client.config.base_url);
        let mut req = self.client.http.post(&url).json(&json!({
            "model": self.client.config.model_name,
            "input": [text],
        }));
        if let Some(api_key) = &self.client.config.api_key {
            req = req.bearer_auth(api_key);
        }
        let value: serde_json::Value = req
            .send()
            .map_err(|e| Error::RemoteUnavailable {
                attempts: 1,
                last_status: format!("transport: {e}"),
            })?
            .json()
            .map_err(|e| Error::Protocol(format!("bad embeddings body: {e}")))?;
        let values: Vec<f32> = value["data"][0]["embedding"]
            .as_array()
            .ok_or_else(|| Error::Protocol("missing data[0].embedding".into()))?
            .iter()
            .map(|v| v.as_f64().unwrap_or(0.0) as f32)
            .collect();
        if values.len() != self.dim {
            return Err(Error::Protocol(format!(
                "embedding dim {} != configured {}",
                values.len(),
                self.dim
            )));
        }
        self.client.cache.put(&key, &serde_json::to_string(&values)?)?;
        Ok(values)
    }
}
