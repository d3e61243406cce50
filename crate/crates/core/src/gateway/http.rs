//! OpenAI-compatible HTTP backend (vLLM, llama.cpp server, hosted APIs).
//!
//! Generation uses `/chat/completions`. Embeddings use `/embeddings`.
//! Scoring sends the image and prefix as the user turn and the target text as
//! a pre-filled assistant turn, then reads back the log-probabilities of the
//! prompt tokens. Servers expose these in one of two shapes, selected by
//! [`ScoringProtocol`]. The trailing tokens whose concatenation spells the
//! target are the scored span.

use std::path::Path;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    Capabilities, ChatRequest, Completion, EmbedInput, GatewayError, ImageFeatures, ImageRef,
    ModelBackend, TokenLogprob,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringProtocol {
    /// Top-level `prompt_logprobs` list as returned by vLLM.
    #[default]
    PromptLogprobs,
    /// Echoed prompt tokens in `choices[0].logprobs.content`.
    EchoLogprobs,
}

#[derive(Debug, Clone)]
pub struct HttpSettings {
    /// Base URL including the API prefix, e.g. `http://localhost:8000/v1`.
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub scoring_protocol: ScoringProtocol,
    pub token_logprobs: bool,
    pub image_embedding: bool,
}

impl HttpSettings {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        HttpSettings {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: None,
            timeout: Duration::from_secs(120),
            scoring_protocol: ScoringProtocol::default(),
            token_logprobs: true,
            image_embedding: true,
        }
    }
}

pub struct OpenAiBackend {
    settings: HttpSettings,
    client: reqwest::blocking::Client,
}

impl OpenAiBackend {
    pub fn new(settings: HttpSettings) -> Result<Self, GatewayError> {
        if settings.endpoint.trim().is_empty() {
            return Err(GatewayError::Configuration("empty endpoint URL".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(settings.timeout)
            .build()
            .map_err(|e| GatewayError::Configuration(format!("HTTP client: {e}")))?;
        Ok(OpenAiBackend { settings, client })
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{path}", self.settings.endpoint.trim_end_matches('/'))
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, GatewayError> {
        let mut req = self.client.post(self.url(path)).json(body);
        if let Some(key) = &self.settings.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(map_reqwest)?;
        let status = resp.status();
        let text = resp.text().map_err(map_reqwest)?;
        if !status.is_success() {
            return Err(GatewayError::Http {
                status: status.as_u16(),
                body: text.chars().take(500).collect(),
                attempts: 1,
            });
        }
        serde_json::from_str(&text)
            .map_err(|e| GatewayError::Protocol(format!("response is not JSON: {e}")))
    }

    fn scoring_messages(image: &ImageFeatures, prefix: &str, target: &str) -> Value {
        let url = image
            .payload
            .clone()
            .unwrap_or_else(|| image.image.0.clone());
        json!([
            {"role": "user", "content": [
                {"type": "image_url", "image_url": {"url": url}},
                {"type": "text", "text": prefix}
            ]},
            {"role": "assistant", "content": target}
        ])
    }
}

fn map_reqwest(e: reqwest::Error) -> GatewayError {
    if e.is_timeout() {
        GatewayError::Timeout { attempts: 1 }
    } else {
        GatewayError::Transport {
            attempts: 1,
            message: e.to_string(),
        }
    }
}

fn mime_for(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("jpg") | Some("jpeg") => "image/jpeg",
        Some("webp") => "image/webp",
        Some("gif") => "image/gif",
        Some("bmp") => "image/bmp",
        _ => "image/png",
    }
}

/// Data URL for a local image; URLs pass through unchanged.
pub fn image_url(image: &ImageRef) -> Result<String, GatewayError> {
    let s = image.as_str();
    if s.starts_with("http://") || s.starts_with("https://") || s.starts_with("data:") {
        return Ok(s.to_string());
    }
    let path = Path::new(s);
    let bytes = std::fs::read(path).map_err(|e| GatewayError::Image {
        image: s.to_string(),
        message: e.to_string(),
    })?;
    let b64 = base64::engine::general_purpose::STANDARD.encode(bytes);
    Ok(format!("data:{};base64,{b64}", mime_for(path)))
}

fn is_special(token: &str) -> bool {
    let t = token.trim();
    t.is_empty() || (t.starts_with('<') && t.ends_with('>') && t.len() > 2)
}

fn squash(s: &str) -> String {
    s.chars()
        .filter(|c| !c.is_whitespace() && *c != '\u{2581}' && *c != '\u{0120}')
        .collect()
}

/// Picks the trailing prompt tokens that spell `target`, ignoring whitespace
/// and end-of-turn markers after it.
pub fn target_span(
    tokens: &[(String, f64)],
    target: &str,
) -> Result<Vec<TokenLogprob>, GatewayError> {
    let want = squash(target);
    let mut acc = String::new();
    let mut span = Vec::new();
    for (tok, lp) in tokens.iter().rev() {
        if span.is_empty() && is_special(tok) {
            continue;
        }
        acc.insert_str(0, &squash(tok));
        span.push(TokenLogprob {
            token: tok.clone(),
            logprob: *lp,
        });
        if acc == want {
            span.reverse();
            return Ok(span);
        }
        if !want.ends_with(acc.as_str()) {
            break;
        }
    }
    Err(GatewayError::Protocol(format!(
        "prompt tokens do not end with the target text {target:?}"
    )))
}

fn parse_prompt_logprobs(v: &Value) -> Result<Vec<(String, f64)>, GatewayError> {
    let list = v
        .get("prompt_logprobs")
        .and_then(Value::as_array)
        .ok_or_else(|| GatewayError::Protocol("missing prompt_logprobs".into()))?;
    let mut out = Vec::with_capacity(list.len());
    for entry in list {
        let Some(map) = entry.as_object() else {
            continue;
        };
        // With `prompt_logprobs: 0` each position holds only the actual token.
        let best = map
            .values()
            .min_by_key(|e| e.get("rank").and_then(Value::as_u64).unwrap_or(u64::MAX))
            .ok_or_else(|| GatewayError::Protocol("empty prompt_logprobs entry".into()))?;
        let token = best
            .get("decoded_token")
            .and_then(Value::as_str)
            .unwrap_or_default()
            .to_string();
        let lp = best
            .get("logprob")
            .and_then(Value::as_f64)
            .ok_or_else(|| GatewayError::Protocol("prompt_logprobs entry lacks logprob".into()))?;
        out.push((token, lp));
    }
    Ok(out)
}

fn parse_echo_logprobs(v: &Value) -> Result<Vec<(String, f64)>, GatewayError> {
    let content = v
        .pointer("/choices/0/logprobs/content")
        .and_then(Value::as_array)
        .ok_or_else(|| GatewayError::Protocol("missing choices[0].logprobs.content".into()))?;
    content
        .iter()
        .map(|e| {
            let token = e.get("token").and_then(Value::as_str);
            let lp = e.get("logprob").and_then(Value::as_f64);
            match (token, lp) {
                (Some(t), Some(lp)) => Ok((t.to_string(), lp)),
                _ => Err(GatewayError::Protocol("malformed logprobs entry".into())),
            }
        })
        .collect()
}

impl ModelBackend for OpenAiBackend {
    fn describe(&self) -> String {
        format!("{} at {}", self.settings.model, self.settings.endpoint)
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            chat: true,
            token_logprobs: self.settings.token_logprobs,
            text_embedding: true,
            image_embedding: self.settings.image_embedding,
        }
    }

    fn generate(&self, req: &ChatRequest) -> Result<Completion, GatewayError> {
        let mut body = json!({
            "model": self.settings.model,
            "messages": [{"role": "user", "content": req.rendered()}],
            "max_tokens": req.max_tokens,
            "temperature": req.temperature,
        });
        if let Some(seed) = req.seed {
            body["seed"] = json!(seed);
        }
        let v = self.post("chat/completions", &body)?;
        let text = v
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| GatewayError::Protocol("missing choices[0].message.content".into()))?;
        let truncated = v
            .pointer("/choices/0/finish_reason")
            .and_then(Value::as_str)
            == Some("length");
        Ok(Completion {
            text: text.to_string(),
            truncated,
        })
    }

    fn load_image(&self, image: &ImageRef) -> Result<ImageFeatures, GatewayError> {
        Ok(ImageFeatures {
            image: image.clone(),
            payload: Some(image_url(image)?),
        })
    }

    fn score(
        &self,
        image: &ImageFeatures,
        prefix: &str,
        target: &str,
    ) -> Result<Vec<TokenLogprob>, GatewayError> {
        let mut body = json!({
            "model": self.settings.model,
            "messages": Self::scoring_messages(image, prefix, target),
            "max_tokens": 1,
            "temperature": 0.0,
            "add_generation_prompt": false,
            "continue_final_message": true,
        });
        let tokens = match self.settings.scoring_protocol {
            ScoringProtocol::PromptLogprobs => {
                body["prompt_logprobs"] = json!(0);
                parse_prompt_logprobs(&self.post("chat/completions", &body)?)?
            }
            ScoringProtocol::EchoLogprobs => {
                body["echo"] = json!(true);
                body["logprobs"] = json!(true);
                parse_echo_logprobs(&self.post("chat/completions", &body)?)?
            }
        };
        target_span(&tokens, target)
    }

    fn embed(&self, input: &EmbedInput) -> Result<Vec<f64>, GatewayError> {
        let body = match input {
            EmbedInput::Text(t) => json!({"model": self.settings.model, "input": t}),
            EmbedInput::Image(img) => json!({
                "model": self.settings.model,
                "messages": [{"role": "user", "content": [
                    {"type": "image_url", "image_url": {"url": image_url(img)?}}
                ]}],
            }),
        };
        let v = self.post("embeddings", &body)?;
        v.pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| GatewayError::Protocol("missing data[0].embedding".into()))?
            .iter()
            .map(|x| {
                x.as_f64()
                    .ok_or_else(|| GatewayError::Protocol("non-numeric embedding value".into()))
            })
            .collect()
    }
}
