//! The boundary to every neural model the pipeline uses.
//!
//! A [`Gateway`] routes three kinds of calls to configured backends:
//! chat generation, image-conditioned token log-likelihood scoring, and
//! embeddings. Each route has its own concurrency bound and retry policy.
//! Backends implement [`ModelBackend`]; the crate ships an OpenAI-compatible
//! HTTP client ([`http::OpenAiBackend`]) and a deterministic in-process mock
//! ([`mock::MockBackend`]).

pub mod http;
pub mod mock;

use std::fmt;
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    /// Instruction prepended to the user content.
    pub instruction: String,
    pub user_content: String,
    pub max_tokens: u32,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn new(instruction: impl Into<String>, user_content: impl Into<String>) -> Self {
        ChatRequest {
            instruction: instruction.into(),
            user_content: user_content.into(),
            max_tokens: 1024,
            temperature: 0.0,
            seed: None,
        }
    }

    /// The single user message sent to the model: instruction, newline, content.
    pub fn rendered(&self) -> String {
        if self.instruction.is_empty() {
            self.user_content.clone()
        } else {
            format!("{}\n{}", self.instruction, self.user_content)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    /// The backend stopped at `max_tokens`.
    pub truncated: bool,
}

/// Path or URL of an image.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageRef(pub String);

impl ImageRef {
    pub fn new(s: impl Into<String>) -> Self {
        ImageRef(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// An image prepared for scoring. Loading once and scoring many times is what
/// lets batched retrieval touch every asset image exactly once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageFeatures {
    pub image: ImageRef,
    /// Backend-specific encoded form (a data URL for HTTP backends).
    pub payload: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub image: ImageRef,
    pub prefix_prompt: String,
    pub target_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub token_logprobs: Vec<TokenLogprob>,
    pub sum_logprob: f64,
}

impl ScoreResponse {
    pub fn from_tokens(token_logprobs: Vec<TokenLogprob>) -> Self {
        let sum_logprob = token_logprobs.iter().map(|t| t.logprob).sum();
        ScoreResponse {
            token_logprobs,
            sum_logprob,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedInput {
    Text(String),
    Image(ImageRef),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub input: EmbedInput,
}

impl EmbedRequest {
    pub fn text(s: impl Into<String>) -> Self {
        EmbedRequest {
            input: EmbedInput::Text(s.into()),
        }
    }

    pub fn image(image: ImageRef) -> Self {
        EmbedRequest {
            input: EmbedInput::Image(image),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    /// Unit L2 norm.
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub chat: bool,
    pub token_logprobs: bool,
    pub text_embedding: bool,
    pub image_embedding: bool,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GatewayError {
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("HTTP {status} after {attempts} attempt(s): {body}")]
    Http {
        status: u16,
        body: String,
        attempts: u32,
    },
    #[error("invalid request: {0}")]
    Validation(String),
    #[error("backend lacks capability: {0}")]
    Capability(String),
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("malformed backend response: {0}")]
    Protocol(String),
    #[error("cannot read image {image}: {message}")]
    Image { image: String, message: String },
}

impl GatewayError {
    fn is_retryable(&self) -> bool {
        match self {
            GatewayError::Transport { .. } | GatewayError::Timeout { .. } => true,
            GatewayError::Http { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }

    fn with_attempts(self, n: u32) -> Self {
        match self {
            GatewayError::Transport { message, .. } => GatewayError::Transport {
                attempts: n,
                message,
            },
            GatewayError::Timeout { .. } => GatewayError::Timeout { attempts: n },
            GatewayError::Http { status, body, .. } => GatewayError::Http {
                status,
                body,
                attempts: n,
            },
            other => other,
        }
    }
}

/// A model service. All methods may be called from many threads at once.
pub trait ModelBackend: Send + Sync {
    fn describe(&self) -> String;
    fn capabilities(&self) -> Capabilities;
    fn generate(&self, req: &ChatRequest) -> Result<Completion, GatewayError>;
    fn load_image(&self, image: &ImageRef) -> Result<ImageFeatures, GatewayError>;
    /// Teacher-forced log-probabilities of `target` given the image and
    /// `prefix`, one entry per target token.
    fn score(
        &self,
        image: &ImageFeatures,
        prefix: &str,
        target: &str,
    ) -> Result<Vec<TokenLogprob>, GatewayError>;
    /// Raw (not necessarily normalized) embedding.
    fn embed(&self, input: &EmbedInput) -> Result<Vec<f64>, GatewayError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub count: u32,
    /// Delay before retry `k` is `backoff_ms * 2^(k-1)`.
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            count: 2,
            backoff_ms: 500,
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        RetryPolicy {
            count: 0,
            backoff_ms: 0,
        }
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
pub struct Limiter {
    max: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a> {
    limiter: &'a Limiter,
}

impl Limiter {
    pub fn new(max: usize) -> Self {
        Limiter {
            max: max.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn max(&self) -> usize {
        self.max
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().expect("limiter poisoned");
        while *n >= self.max {
            n = self.freed.wait(n).expect("limiter poisoned");
        }
        *n += 1;
        Permit { limiter: self }
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.limiter.in_flight.lock().expect("limiter poisoned");
        *n -= 1;
        self.limiter.freed.notify_one();
    }
}

/// One routed backend with its bound and retry policy.
#[derive(Clone)]
pub struct Endpoint {
    backend: Arc<dyn ModelBackend>,
    limiter: Arc<Limiter>,
    retry: RetryPolicy,
}

impl Endpoint {
    pub fn new(backend: Arc<dyn ModelBackend>, max_parallel: usize, retry: RetryPolicy) -> Self {
        Endpoint {
            backend,
            limiter: Arc::new(Limiter::new(max_parallel)),
            retry,
        }
    }

    /// Shares `limiter` with other endpoints.
    pub fn with_limiter(
        backend: Arc<dyn ModelBackend>,
        limiter: Arc<Limiter>,
        retry: RetryPolicy,
    ) -> Self {
        Endpoint {
            backend,
            limiter,
            retry,
        }
    }

    pub fn backend(&self) -> &Arc<dyn ModelBackend> {
        &self.backend
    }

    pub fn max_parallel(&self) -> usize {
        self.limiter.max()
    }

    fn call<T>(
        &self,
        f: impl Fn(&dyn ModelBackend) -> Result<T, GatewayError>,
    ) -> Result<T, GatewayError> {
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            let result = {
                let _permit = self.limiter.acquire();
                f(self.backend.as_ref())
            };
            match result {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt <= self.retry.count => {
                    let delay = self
                        .retry
                        .backoff_ms
                        .saturating_mul(1u64 << (attempt - 1).min(16));
                    log::debug!("retrying after {e} (attempt {attempt}, sleeping {delay} ms)");
                    if delay > 0 {
                        thread::sleep(Duration::from_millis(delay));
                    }
                }
                Err(e) => return Err(e.with_attempts(attempt)),
            }
        }
    }
}

#[derive(Clone)]
pub struct Gateway {
    chat: Endpoint,
    scorer: Endpoint,
    embedder: Endpoint,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("chat", &self.chat.backend.describe())
            .field("scorer", &self.scorer.backend.describe())
            .field("embedder", &self.embedder.backend.describe())
            .finish()
    }
}

impl Gateway {
    pub fn new(chat: Endpoint, scorer: Endpoint, embedder: Endpoint) -> Self {
        Gateway {
            chat,
            scorer,
            embedder,
        }
    }

    /// Routes all three kinds of call to one backend under one shared bound.
    pub fn single(backend: Arc<dyn ModelBackend>, max_parallel: usize, retry: RetryPolicy) -> Self {
        let limiter = Arc::new(Limiter::new(max_parallel));
        let ep = Endpoint::with_limiter(backend, limiter, retry);
        Gateway {
            chat: ep.clone(),
            scorer: ep.clone(),
            embedder: ep,
        }
    }

    pub fn chat_endpoint(&self) -> &Endpoint {
        &self.chat
    }

    pub fn scorer_endpoint(&self) -> &Endpoint {
        &self.scorer
    }

    pub fn embedder_endpoint(&self) -> &Endpoint {
        &self.embedder
    }

    pub fn generate(&self, req: &ChatRequest) -> Result<Completion, GatewayError> {
        if req.max_tokens == 0 {
            return Err(GatewayError::Validation(
                "max_tokens must be at least 1".into(),
            ));
        }
        if !req.temperature.is_finite() || req.temperature < 0.0 {
            return Err(GatewayError::Validation(format!(
                "temperature must be non-negative, got {}",
                req.temperature
            )));
        }
        let completion = self.chat.call(|b| b.generate(req))?;
        if completion.truncated {
            log::warn!("completion truncated at {} tokens", req.max_tokens);
        }
        Ok(completion)
    }

    pub fn load_image(&self, image: &ImageRef) -> Result<ImageFeatures, GatewayError> {
        self.scorer.call(|b| b.load_image(image))
    }

    pub fn score_features(
        &self,
        features: &ImageFeatures,
        prefix: &str,
        target: &str,
    ) -> Result<ScoreResponse, GatewayError> {
        if target.trim().is_empty() {
            return Err(GatewayError::Validation("empty target text".into()));
        }
        if !self.scorer.backend.capabilities().token_logprobs {
            return Err(GatewayError::Capability(format!(
                "{} cannot return token log-probabilities",
                self.scorer.backend.describe()
            )));
        }
        let tokens = self.scorer.call(|b| b.score(features, prefix, target))?;
        if tokens.is_empty() {
            return Err(GatewayError::Protocol(format!(
                "no scored tokens for target {target:?}"
            )));
        }
        if let Some(bad) = tokens
            .iter()
            .find(|t| !t.logprob.is_finite() || t.logprob > 0.0)
        {
            return Err(GatewayError::Protocol(format!(
                "invalid log-probability {} for token {:?}",
                bad.logprob, bad.token
            )));
        }
        Ok(ScoreResponse::from_tokens(tokens))
    }

    pub fn score_text(&self, req: &ScoreRequest) -> Result<ScoreResponse, GatewayError> {
        if req.target_text.trim().is_empty() {
            return Err(GatewayError::Validation("empty target text".into()));
        }
        let features = self.load_image(&req.image)?;
        self.score_features(&features, &req.prefix_prompt, &req.target_text)
    }

    pub fn can_embed_images(&self) -> bool {
        self.embedder.backend.capabilities().image_embedding
    }

    pub fn embed(&self, req: &EmbedRequest) -> Result<EmbedResponse, GatewayError> {
        let caps = self.embedder.backend.capabilities();
        match &req.input {
            EmbedInput::Text(_) if !caps.text_embedding => {
                return Err(GatewayError::Capability("text embedding".into()))
            }
            EmbedInput::Image(_) if !caps.image_embedding => {
                return Err(GatewayError::Capability("image embedding".into()))
            }
            _ => {}
        }
        let raw = self.embedder.call(|b| b.embed(&req.input))?;
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if raw.is_empty() || !norm.is_finite() || norm == 0.0 {
            return Err(GatewayError::Protocol(
                "embedding is empty, zero or non-finite".into(),
            ));
        }
        Ok(EmbedResponse {
            vector: raw.into_iter().map(|v| v / norm).collect(),
        })
    }

    /// Like [`Gateway::embed`] but rejects vectors of the wrong dimension.
    pub fn embed_with_dim(
        &self,
        req: &EmbedRequest,
        dim: Option<usize>,
    ) -> Result<EmbedResponse, GatewayError> {
        let resp = self.embed(req)?;
        match dim {
            Some(d) if d != resp.vector.len() => Err(GatewayError::Configuration(format!(
                "embedding backend returned dimension {}, inventory declares {d}",
                resp.vector.len()
            ))),
            _ => Ok(resp),
        }
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::mock::{MockBackend, MockFixture, Op};
    use super::*;

    fn gateway(mock: MockBackend, retries: u32) -> (Arc<MockBackend>, Gateway) {
        let mock = Arc::new(mock);
        let gw = Gateway::single(
            mock.clone(),
            4,
            RetryPolicy {
                count: retries,
                backoff_ms: 0,
            },
        );
        (mock, gw)
    }

    #[test]
    fn mock_chat_table() {
        let (_, gw) = gateway(MockBackend::new().with_chat_exact("ping", "pong"), 0);
        let out = gw.generate(&ChatRequest::new("", "ping")).unwrap();
        assert_eq!(out.text, "pong");
        assert!(!out.truncated);
        let mut zero = ChatRequest::new("", "ping");
        zero.max_tokens = 0;
        assert!(matches!(
            gw.generate(&zero),
            Err(GatewayError::Validation(_))
        ));
    }

    #[test]
    fn scoring_examples() {
        let (_, gw) = gateway(MockBackend::new().with_default_token_logprob(-0.5), 0);
        let req = ScoreRequest {
            image: ImageRef::new("chair.png"),
            prefix_prompt: "What is shown in this image?".into(),
            target_text: "red chair".into(),
        };
        let r = gw.score_text(&req).unwrap();
        assert_eq!(r.token_logprobs.len(), 2);
        assert_eq!(r.sum_logprob, -1.0);
        assert_eq!(gw.score_text(&req).unwrap(), r);
        let empty = ScoreRequest {
            target_text: "".into(),
            ..req
        };
        assert!(matches!(
            gw.score_text(&empty),
            Err(GatewayError::Validation(_))
        ));
    }

    #[test]
    fn sum_matches_tokens() {
        let (_, gw) = gateway(MockBackend::new(), 0);
        let r = gw
            .score_text(&ScoreRequest {
                image: ImageRef::new("x.png"),
                prefix_prompt: "q".into(),
                target_text: "a tall oak wardrobe with brass handles".into(),
            })
            .unwrap();
        let sum: f64 = r.token_logprobs.iter().map(|t| t.logprob).sum();
        assert!((sum - r.sum_logprob).abs() < 1e-6);
        assert!(r.token_logprobs.iter().all(|t| t.logprob <= 0.0));
    }

    #[test]
    fn missing_logprob_capability() {
        let fixture = MockFixture {
            token_logprobs: false,
            ..MockFixture::default()
        };
        let (_, gw) = gateway(MockBackend::from_fixture(fixture), 0);
        let err = gw
            .score_text(&ScoreRequest {
                image: ImageRef::new("x.png"),
                prefix_prompt: String::new(),
                target_text: "chair".into(),
            })
            .unwrap_err();
        assert!(matches!(err, GatewayError::Capability(_)));
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let (_, gw) = gateway(
            MockBackend::new()
                .with_embed_dim(3)
                .with_text_embedding("a", vec![2.0, 0.0, 0.0]),
            0,
        );
        assert_eq!(
            gw.embed(&EmbedRequest::text("a")).unwrap().vector,
            vec![1.0, 0.0, 0.0]
        );
        for s in ["b", "a longer input", ""] {
            let v = gw.embed(&EmbedRequest::text(s)).unwrap().vector;
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
            assert!((cosine(&v, &v) - 1.0).abs() < 1e-12);
        }
        assert!(matches!(
            gw.embed_with_dim(&EmbedRequest::text("a"), Some(4)),
            Err(GatewayError::Configuration(_))
        ));
    }

    #[test]
    fn retries_transient_failures() {
        let (mock, gw) = gateway(MockBackend::new().with_chat_exact("ping", "pong"), 2);
        mock.fail_next(Op::Generate, 2);
        assert_eq!(
            gw.generate(&ChatRequest::new("", "ping")).unwrap().text,
            "pong"
        );
        assert_eq!(mock.stats().generate_calls, 3);

        mock.fail_next(Op::Generate, 5);
        let err = gw.generate(&ChatRequest::new("", "ping")).unwrap_err();
        assert!(matches!(err, GatewayError::Transport { attempts: 3, .. }));
        assert_eq!(mock.stats().generate_calls, 6);
    }

    #[test]
    fn validation_errors_are_not_retried() {
        let (mock, gw) = gateway(MockBackend::new(), 3);
        assert!(gw.generate(&ChatRequest::new("", "unmapped")).is_err());
        assert_eq!(mock.stats().generate_calls, 1);
    }

    #[test]
    fn in_flight_requests_respect_bound() {
        let mock = Arc::new(MockBackend::new().with_latency(Duration::from_millis(15)));
        let gw = Gateway::single(mock.clone(), 3, RetryPolicy::none());
        thread::scope(|s| {
            for i in 0..12 {
                let gw = &gw;
                s.spawn(move || {
                    gw.embed(&EmbedRequest::text(format!("q{i}"))).unwrap();
                });
            }
        });
        let stats = mock.stats();
        assert_eq!(stats.embed_calls, 12);
        assert!(stats.max_in_flight <= 3, "{}", stats.max_in_flight);
        assert!(stats.max_in_flight >= 2, "bound never exercised");
    }
}
