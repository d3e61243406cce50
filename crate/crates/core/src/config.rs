//! Run configuration: one TOML document with `backends`, `templates`,
//! `retrieval`, `pipeline` and `eval` sections. Secrets are read from the
//! environment variables the document names.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decorate::RetrievalConfig;
use crate::gateway::http::{HttpSettings, OpenAiBackend, ScoringProtocol};
use crate::gateway::mock::MockBackend;
use crate::gateway::{Endpoint, Gateway, ModelBackend, RetryPolicy};
use crate::metrics::DEFAULT_NEGATIVE_BATCH;
use crate::pipeline::PipelineSettings;
use crate::templates::{PromptTemplateSet, TemplateOverrides};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// OpenAI-compatible HTTP server.
    #[default]
    Openai,
    /// Deterministic in-process backend driven by a JSON fixture.
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    pub timeout_secs: u64,
    pub max_parallel_requests: usize,
    pub retry: RetryPolicy,
    pub scoring_protocol: ScoringProtocol,
    pub token_logprobs: bool,
    pub image_embedding: bool,
    /// Mock fixture file, relative to the config file.
    pub fixture: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Openai,
            endpoint: None,
            model: None,
            api_key_env: None,
            timeout_secs: 120,
            max_parallel_requests: 4,
            retry: RetryPolicy::default(),
            scoring_protocol: ScoringProtocol::default(),
            token_logprobs: true,
            image_embedding: true,
            fixture: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendsConfig {
    pub chat: Option<BackendConfig>,
    pub scorer: Option<BackendConfig>,
    pub embedder: Option<BackendConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub negative_batch: usize,
    pub seed: u64,
    pub top_k: Vec<usize>,
    pub tfr_thresholds: Vec<f64>,
    pub kid_subsets: usize,
    pub kid_subset_size: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            negative_batch: DEFAULT_NEGATIVE_BATCH,
            seed: 0,
            top_k: vec![1, 5, 10],
            tfr_thresholds: vec![0.5, 0.8, 0.9],
            kid_subsets: 100,
            kid_subset_size: 1000,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub backends: BackendsConfig,
    pub templates: TemplateOverrides,
    pub retrieval: RetrievalConfig,
    pub pipeline: PipelineSettings,
    pub eval: EvalSettings,
    /// Directory relative paths resolve against; not part of the document.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Config {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut cfg: Config =
            toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.retrieval
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("retrieval: {e}")))?;
        cfg.pipeline
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("pipeline: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Config::parse(&text, &base).map_err(|e| match e {
            ConfigError::Invalid(m) => ConfigError::Read {
                path: path.to_path_buf(),
                message: m,
            },
            other => other,
        })
    }

    pub fn templates(&self) -> PromptTemplateSet {
        PromptTemplateSet::with_overrides(&self.templates)
    }

    /// The document as structured data, for embedding in output artifacts.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Builds the gateway. `jobs` caps every endpoint's concurrency. Mock
    /// backends naming the same fixture share one instance.
    pub fn gateway(&self, jobs: Option<usize>) -> Result<Gateway, ConfigError> {
        let mut mocks: HashMap<Option<PathBuf>, Arc<MockBackend>> = HashMap::new();
        let mut endpoint = |role: &str,
                            cfg: &Option<BackendConfig>|
         -> Result<Endpoint, ConfigError> {
            let cfg = cfg.as_ref().ok_or_else(|| {
                ConfigError::Invalid(format!("backends.{role} is not configured"))
            })?;
            let max = match jobs {
                Some(j) => cfg.max_parallel_requests.min(j),
                None => cfg.max_parallel_requests,
            };
            if max == 0 {
                return Err(ConfigError::Invalid(format!(
                    "backends.{role}: max_parallel_requests and --jobs must be at least 1"
                )));
            }
            let backend: Arc<dyn ModelBackend> = match cfg.kind {
                BackendKind::Mock => {
                    let key = cfg.fixture.as_ref().map(|p| self.resolve(p));
                    match mocks.get(&key) {
                        Some(m) => m.clone(),
                        None => {
                            let m = Arc::new(match &key {
                                Some(p) => MockBackend::from_json_file(p).map_err(|e| {
                                    ConfigError::Invalid(format!("backends.{role}: {e}"))
                                })?,
                                None => MockBackend::new(),
                            });
                            mocks.insert(key, m.clone());
                            m
                        }
                    }
                }
                BackendKind::Openai => {
                    let need = |v: &Option<String>, what: &str| {
                        v.clone().ok_or_else(|| {
                            ConfigError::Invalid(format!("backends.{role}.{what} is required"))
                        })
                    };
                    let mut s = HttpSettings::new(
                        need(&cfg.endpoint, "endpoint")?,
                        need(&cfg.model, "model")?,
                    );
                    if let Some(var) = &cfg.api_key_env {
                        s.api_key = Some(std::env::var(var).map_err(|_| {
                            ConfigError::Invalid(format!(
                                "backends.{role}: environment variable {var} is not set"
                            ))
                        })?);
                    }
                    s.timeout = Duration::from_secs(cfg.timeout_secs);
                    s.scoring_protocol = cfg.scoring_protocol;
                    s.token_logprobs = cfg.token_logprobs;
                    s.image_embedding = cfg.image_embedding;
                    Arc::new(
                        OpenAiBackend::new(s)
                            .map_err(|e| ConfigError::Invalid(format!("backends.{role}: {e}")))?,
                    )
                }
            };
            Ok(Endpoint::new(backend, max, cfg.retry))
        };
        let chat = endpoint("chat", &self.backends.chat)?;
        let scorer = endpoint("scorer", &self.backends.scorer)?;
        let embedder = endpoint("embedder", &self.backends.embedder)?;
        Ok(Gateway::new(chat, scorer, embedder))
    }
}
