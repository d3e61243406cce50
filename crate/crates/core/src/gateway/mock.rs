//! Deterministic in-process backend for tests, demos and golden runs.
//!
//! Every response is a pure function of the request and the fixture. Unmapped
//! scoring and embedding requests fall back to values derived from a SHA-256
//! hash of the request, so any input gets a stable answer. Unmapped chat
//! requests fail unless `chat_fallback` is set.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    Capabilities, ChatRequest, Completion, EmbedInput, GatewayError, ImageFeatures, ImageRef,
    ModelBackend, TokenLogprob,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChatMatch {
    /// The whole rendered message (instruction + newline + content).
    Exact(String),
    /// The user content alone.
    Content(String),
    /// Substring of the rendered message.
    Contains(String),
}

impl ChatMatch {
    fn matches(&self, req: &ChatRequest) -> bool {
        match self {
            ChatMatch::Exact(s) => req.rendered() == *s,
            ChatMatch::Content(s) => req.user_content == *s,
            ChatMatch::Contains(s) => req.rendered().contains(s.as_str()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRule {
    #[serde(rename = "match")]
    pub pattern: ChatMatch,
    /// Returned in sequence on repeated matches; the last one repeats.
    pub responses: Vec<String>,
    #[serde(default)]
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub image: String,
    pub target: String,
    /// One value per whitespace-separated token of `target`.
    pub logprobs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEntry {
    /// Applies to every image when absent.
    #[serde(default)]
    pub image: Option<String>,
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    #[serde(default)]
    pub entries: Vec<ScoreEntry>,
    #[serde(default)]
    pub tokens: Vec<TokenEntry>,
    #[serde(default)]
    pub default_token_logprob: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedEntry {
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default)]
    pub image: Option<String>,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedTable {
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default)]
    pub entries: Vec<EmbedEntry>,
}

fn default_dim() -> usize {
    8
}

impl Default for EmbedTable {
    fn default() -> Self {
        EmbedTable {
            dim: default_dim(),
            entries: Vec::new(),
        }
    }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockFixture {
    #[serde(default)]
    pub chat: Vec<ChatRule>,
    #[serde(default)]
    pub chat_fallback: Option<String>,
    #[serde(default)]
    pub score: ScoreTable,
    #[serde(default)]
    pub embed: EmbedTable,
    /// Images whose loading fails.
    #[serde(default)]
    pub failing_images: Vec<String>,
    #[serde(default = "yes")]
    pub token_logprobs: bool,
    #[serde(default = "yes")]
    pub image_embedding: bool,
}

impl Default for MockFixture {
    fn default() -> Self {
        MockFixture {
            chat: Vec::new(),
            chat_fallback: None,
            score: ScoreTable::default(),
            embed: EmbedTable::default(),
            failing_images: Vec::new(),
            token_logprobs: true,
            image_embedding: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Op {
    Generate,
    LoadImage,
    Score,
    Embed,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MockStats {
    pub generate_calls: usize,
    pub load_image_calls: usize,
    pub score_calls: usize,
    pub embed_calls: usize,
    pub image_loads: BTreeMap<String, usize>,
    pub image_embeds: BTreeMap<String, usize>,
    pub max_in_flight: usize,
    pub chat_log: Vec<ChatRequest>,
}

#[derive(Default)]
struct State {
    stats: MockStats,
    rule_hits: HashMap<usize, usize>,
    pending_failures: HashMap<Op, usize>,
}

pub struct MockBackend {
    fixture: MockFixture,
    latency: Option<Duration>,
    state: Mutex<State>,
    in_flight: AtomicUsize,
}

impl Default for MockBackend {
    fn default() -> Self {
        MockBackend::new()
    }
}

struct Flight<'a>(&'a AtomicUsize);

impl Drop for Flight<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

impl MockBackend {
    pub fn new() -> Self {
        MockBackend::from_fixture(MockFixture::default())
    }

    pub fn from_fixture(fixture: MockFixture) -> Self {
        MockBackend {
            fixture,
            latency: None,
            state: Mutex::new(State::default()),
            in_flight: AtomicUsize::new(0),
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            GatewayError::Configuration(format!("cannot read mock fixture {}: {e}", path.display()))
        })?;
        let fixture: MockFixture = serde_json::from_str(&text).map_err(|e| {
            GatewayError::Configuration(format!("invalid mock fixture {}: {e}", path.display()))
        })?;
        Ok(MockBackend::from_fixture(fixture))
    }

    pub fn fixture(&self) -> &MockFixture {
        &self.fixture
    }

    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = Some(latency);
        self
    }

    pub fn with_chat_rule(mut self, pattern: ChatMatch, responses: Vec<String>) -> Self {
        self.fixture.chat.push(ChatRule {
            pattern,
            responses,
            truncated: false,
        });
        self
    }

    pub fn with_chat_exact(self, rendered: &str, response: &str) -> Self {
        self.with_chat_rule(ChatMatch::Exact(rendered.into()), vec![response.into()])
    }

    pub fn with_chat_contains(self, needle: &str, response: &str) -> Self {
        self.with_chat_rule(ChatMatch::Contains(needle.into()), vec![response.into()])
    }

    pub fn with_chat_fallback(mut self, response: &str) -> Self {
        self.fixture.chat_fallback = Some(response.into());
        self
    }

    pub fn with_default_token_logprob(mut self, lp: f64) -> Self {
        self.fixture.score.default_token_logprob = Some(lp);
        self
    }

    pub fn with_score(mut self, image: &str, target: &str, logprobs: Vec<f64>) -> Self {
        self.fixture.score.entries.push(ScoreEntry {
            image: image.into(),
            target: target.into(),
            logprobs,
        });
        self
    }

    pub fn with_token_logprob(mut self, image: Option<&str>, token: &str, lp: f64) -> Self {
        self.fixture.score.tokens.push(TokenEntry {
            image: image.map(str::to_string),
            token: token.into(),
            logprob: lp,
        });
        self
    }

    pub fn with_embed_dim(mut self, dim: usize) -> Self {
        self.fixture.embed.dim = dim;
        self
    }

    pub fn with_text_embedding(mut self, text: &str, vector: Vec<f64>) -> Self {
        self.fixture.embed.entries.push(EmbedEntry {
            text: Some(text.into()),
            image: None,
            vector,
        });
        self
    }

    pub fn with_image_embedding(mut self, image: &str, vector: Vec<f64>) -> Self {
        self.fixture.embed.entries.push(EmbedEntry {
            text: None,
            image: Some(image.into()),
            vector,
        });
        self
    }

    pub fn with_failing_image(mut self, image: &str) -> Self {
        self.fixture.failing_images.push(image.into());
        self
    }

    /// The next `n` calls of `op` fail with a transient transport error.
    pub fn fail_next(&self, op: Op, n: usize) {
        self.lock().pending_failures.insert(op, n);
    }

    pub fn stats(&self) -> MockStats {
        self.lock().stats.clone()
    }

    pub fn reset_stats(&self) {
        self.lock().stats = MockStats::default();
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().expect("mock state poisoned")
    }

    fn enter(&self, op: Op) -> Result<Flight<'_>, GatewayError> {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        let flight = Flight(&self.in_flight);
        {
            let mut st = self.lock();
            st.stats.max_in_flight = st.stats.max_in_flight.max(now);
            match op {
                Op::Generate => st.stats.generate_calls += 1,
                Op::LoadImage => st.stats.load_image_calls += 1,
                Op::Score => st.stats.score_calls += 1,
                Op::Embed => st.stats.embed_calls += 1,
            }
            if let Some(n) = st.pending_failures.get_mut(&op) {
                if *n > 0 {
                    *n -= 1;
                    return Err(GatewayError::Transport {
                        attempts: 1,
                        message: "injected mock failure".into(),
                    });
                }
            }
        }
        if let Some(d) = self.latency {
            thread::sleep(d);
        }
        Ok(flight)
    }
}

fn hash_unit(parts: &[&str]) -> f64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    (u64::from_le_bytes(bytes) >> 11) as f64 / (1u64 << 53) as f64
}

impl ModelBackend for MockBackend {
    fn describe(&self) -> String {
        "mock".into()
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            chat: true,
            token_logprobs: self.fixture.token_logprobs,
            text_embedding: true,
            image_embedding: self.fixture.image_embedding,
        }
    }

    fn generate(&self, req: &ChatRequest) -> Result<Completion, GatewayError> {
        let _f = self.enter(Op::Generate)?;
        let mut st = self.lock();
        st.stats.chat_log.push(req.clone());
        for (i, rule) in self.fixture.chat.iter().enumerate() {
            if rule.pattern.matches(req) && !rule.responses.is_empty() {
                let hit = st.rule_hits.entry(i).or_insert(0);
                let text = rule.responses[(*hit).min(rule.responses.len() - 1)].clone();
                *hit += 1;
                return Ok(Completion {
                    text,
                    truncated: rule.truncated,
                });
            }
        }
        match &self.fixture.chat_fallback {
            Some(text) => Ok(Completion {
                text: text.clone(),
                truncated: false,
            }),
            None => {
                let preview: String = req.rendered().chars().take(80).collect();
                Err(GatewayError::Configuration(format!(
                    "mock has no chat response for {preview:?}"
                )))
            }
        }
    }

    fn load_image(&self, image: &ImageRef) -> Result<ImageFeatures, GatewayError> {
        let _f = self.enter(Op::LoadImage)?;
        *self
            .lock()
            .stats
            .image_loads
            .entry(image.0.clone())
            .or_insert(0) += 1;
        if self.fixture.failing_images.iter().any(|f| f == &image.0) {
            return Err(GatewayError::Image {
                image: image.0.clone(),
                message: "unreadable (mock)".into(),
            });
        }
        Ok(ImageFeatures {
            image: image.clone(),
            payload: None,
        })
    }

    fn score(
        &self,
        image: &ImageFeatures,
        prefix: &str,
        target: &str,
    ) -> Result<Vec<TokenLogprob>, GatewayError> {
        let _f = self.enter(Op::Score)?;
        let img = image.image.as_str();
        let tokens: Vec<&str> = target.split_whitespace().collect();
        let table = &self.fixture.score;
        if let Some(entry) = table
            .entries
            .iter()
            .find(|e| e.image == img && e.target == target)
        {
            if entry.logprobs.len() != tokens.len() {
                return Err(GatewayError::Protocol(format!(
                    "mock entry for {img} has {} log-probabilities for {} tokens",
                    entry.logprobs.len(),
                    tokens.len()
                )));
            }
            return Ok(tokens
                .iter()
                .zip(&entry.logprobs)
                .map(|(t, lp)| TokenLogprob {
                    token: (*t).into(),
                    logprob: *lp,
                })
                .collect());
        }
        let out = tokens
            .iter()
            .enumerate()
            .map(|(i, tok)| {
                let specific = table
                    .tokens
                    .iter()
                    .find(|e| e.token == *tok && e.image.as_deref() == Some(img));
                let generic = || {
                    table
                        .tokens
                        .iter()
                        .find(|e| e.token == *tok && e.image.is_none())
                };
                let logprob = specific
                    .or_else(generic)
                    .map(|e| e.logprob)
                    .or(table.default_token_logprob)
                    .unwrap_or_else(|| {
                        let pos = i.to_string();
                        -(0.05 + 5.95 * hash_unit(&[img, prefix, &pos, tok]))
                    });
                TokenLogprob {
                    token: (*tok).into(),
                    logprob,
                }
            })
            .collect();
        Ok(out)
    }

    fn embed(&self, input: &EmbedInput) -> Result<Vec<f64>, GatewayError> {
        let _f = self.enter(Op::Embed)?;
        let (kind, key) = match input {
            EmbedInput::Text(t) => ("text", t.as_str()),
            EmbedInput::Image(i) => {
                *self
                    .lock()
                    .stats
                    .image_embeds
                    .entry(i.0.clone())
                    .or_insert(0) += 1;
                if self.fixture.failing_images.iter().any(|f| f == &i.0) {
                    return Err(GatewayError::Image {
                        image: i.0.clone(),
                        message: "unreadable (mock)".into(),
                    });
                }
                ("image", i.as_str())
            }
        };
        let hit = self.fixture.embed.entries.iter().find(|e| match input {
            EmbedInput::Text(t) => e.text.as_deref() == Some(t.as_str()),
            EmbedInput::Image(i) => e.image.as_deref() == Some(i.as_str()),
        });
        if let Some(e) = hit {
            return Ok(e.vector.clone());
        }
        let dim = self.fixture.embed.dim.max(1);
        Ok((0..dim)
            .map(|j| 2.0 * hash_unit(&[kind, key, &j.to_string()]) - 1.0)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_json_roundtrip() {
        let json = r#"{
            "chat": [{"match": {"contains": "layout"}, "responses": ["room { }", "second"]}],
            "score": {"default_token_logprob": -1.0,
                      "entries": [{"image": "a.png", "target": "x y", "logprobs": [-0.1, -0.2]}]},
            "embed": {"dim": 4},
            "failing_images": ["broken.png"]
        }"#;
        let fx: MockFixture = serde_json::from_str(json).unwrap();
        assert!(fx.token_logprobs);
        assert_eq!(fx.embed.dim, 4);
        let back: MockFixture = serde_json::from_str(&serde_json::to_string(&fx).unwrap()).unwrap();
        assert_eq!(fx, back);
    }

    #[test]
    fn scripted_responses_advance() {
        let m = MockBackend::new().with_chat_rule(
            ChatMatch::Content("c".into()),
            vec!["one".into(), "two".into()],
        );
        let req = ChatRequest::new("i", "c");
        let got: Vec<String> = (0..3).map(|_| m.generate(&req).unwrap().text).collect();
        assert_eq!(got, ["one", "two", "two"]);
        assert_eq!(m.stats().chat_log.len(), 3);
    }

    #[test]
    fn score_lookup_precedence() {
        let m = MockBackend::new()
            .with_default_token_logprob(-3.0)
            .with_token_logprob(None, "oak", -1.0)
            .with_token_logprob(Some("a.png"), "oak", -0.5)
            .with_score("a.png", "exact text", vec![-0.01, -0.02]);
        let f = |img: &str| ImageFeatures {
            image: ImageRef::new(img),
            payload: None,
        };
        let lps = |img: &str, t: &str| -> Vec<f64> {
            m.score(&f(img), "", t)
                .unwrap()
                .into_iter()
                .map(|t| t.logprob)
                .collect()
        };
        assert_eq!(lps("a.png", "oak desk"), [-0.5, -3.0]);
        assert_eq!(lps("b.png", "oak desk"), [-1.0, -3.0]);
        assert_eq!(lps("a.png", "exact text"), [-0.01, -0.02]);
    }

    #[test]
    fn hash_fallback_is_stable() {
        let m = MockBackend::new();
        let f = ImageFeatures {
            image: ImageRef::new("z.png"),
            payload: None,
        };
        let a = m.score(&f, "p", "grey fabric sofa").unwrap();
        let b = m.score(&f, "p", "grey fabric sofa").unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|t| t.logprob <= -0.05 && t.logprob >= -6.0));
        let other = m.score(&f, "q", "grey fabric sofa").unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn failing_images() {
        let m = MockBackend::new().with_failing_image("bad.png");
        assert!(matches!(
            m.load_image(&ImageRef::new("bad.png")),
            Err(GatewayError::Image { .. })
        ));
        assert!(m.load_image(&ImageRef::new("good.png")).is_ok());
        assert_eq!(m.stats().image_loads.len(), 2);
    }
}
