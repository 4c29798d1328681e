//! Blocking HTTP JSON clients.
//!
//! Chat requests use the `/chat/completions` shape served by most open
//! inference servers (a `messages` array in, a `choices` array out).
//! Embedding endpoints take `{"input": <text>}` and answer with a bare float
//! array, `{"embedding": [...]}` or `{"data": [{"embedding": [...]}]}`.
//! Relation endpoints take `{"premise", "hypothesis", "image_ref"}` and
//! answer `{"label": <string>}`.

use std::thread;
use std::time::Duration;

use reqwest::blocking::Client;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    check_nonempty, BackendError, ChatBackend, ChatRequest, ChatResponse, EmbedBackend, RelationBackend,
    RelationLabel,
};
use crate::chaingen::VqaSample;
use crate::retrieval::Embedding;

const BODY_EXCERPT_CHARS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    /// Per-request deadline.
    pub timeout_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            initial_backoff_ms: 250,
            timeout_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    fn backoff(&self, retry: u32) -> Duration {
        Duration::from_millis(self.initial_backoff_ms.saturating_mul(1u64 << retry.min(16)))
    }
}

fn excerpt(body: &str) -> String {
    match body.char_indices().nth(BODY_EXCERPT_CHARS) {
        Some((i, _)) => format!("{}...", &body[..i]),
        None => body.to_string(),
    }
}

/// JSON POST with retries on transport failures, timeouts, 429 and 5xx.
#[derive(Debug, Clone)]
struct JsonClient {
    client: Client,
    api_key: Option<String>,
    retry: RetryPolicy,
}

impl JsonClient {
    fn new(api_key: Option<String>, retry: RetryPolicy) -> Result<Self, BackendError> {
        let client = Client::builder()
            .timeout(Duration::from_millis(retry.timeout_ms))
            .build()
            .map_err(|e| BackendError::Transport {
                attempts: 0,
                detail: format!("building HTTP client: {e}"),
            })?;
        Ok(Self { client, api_key, retry })
    }

    fn post(&self, url: &str, body: &Value) -> Result<Value, BackendError> {
        let attempts = self.retry.max_retries + 1;
        let mut last = None;
        for attempt in 1..=attempts {
            if attempt > 1 {
                thread::sleep(self.retry.backoff(attempt - 2));
            }
            let mut req = self.client.post(url).json(body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            let resp = match req.send() {
                Ok(r) => r,
                Err(e) => {
                    let detail = format!("{url}: {e}");
                    last = Some(if e.is_timeout() {
                        BackendError::Timeout { attempts: attempt, detail }
                    } else {
                        BackendError::Transport { attempts: attempt, detail }
                    });
                    continue;
                }
            };
            let status = resp.status();
            let text = match resp.text() {
                Ok(t) => t,
                Err(e) => {
                    let detail = format!("{url}: reading body: {e}");
                    last = Some(if e.is_timeout() {
                        BackendError::Timeout { attempts: attempt, detail }
                    } else {
                        BackendError::Transport { attempts: attempt, detail }
                    });
                    continue;
                }
            };
            if status.is_success() {
                return serde_json::from_str(&text)
                    .map_err(|e| BackendError::Malformed(format!("{e}; body: {}", excerpt(&text))));
            }
            let err = BackendError::Status {
                status: status.as_u16(),
                body: excerpt(&text),
            };
            if status.as_u16() == 429 || status.is_server_error() {
                last = Some(err);
                continue;
            }
            return Err(err);
        }
        Err(last.expect("at least one attempt"))
    }
}

fn join_url(base: &str, path: &str) -> String {
    format!("{}/{}", base.trim_end_matches('/'), path.trim_start_matches('/'))
}

#[derive(Debug, Clone)]
pub struct HttpChat {
    http: JsonClient,
    url: String,
    model: String,
    probe_decomposition: bool,
}

impl HttpChat {
    pub fn new(
        base_url: &str,
        model: impl Into<String>,
        api_key: Option<String>,
        retry: RetryPolicy,
    ) -> Result<Self, BackendError> {
        Ok(Self {
            http: JsonClient::new(api_key, retry)?,
            url: join_url(base_url, "chat/completions"),
            model: model.into(),
            probe_decomposition: false,
        })
    }

    /// Ask the model a yes/no question before decomposing and derive the
    /// decomposition probability from the first-token log-probabilities.
    pub fn with_decomposition_probe(mut self, enabled: bool) -> Self {
        self.probe_decomposition = enabled;
        self
    }

    fn body(&self, req: &ChatRequest) -> Value {
        let mut messages = Vec::new();
        if let Some(system) = &req.system {
            messages.push(json!({"role": "system", "content": system}));
        }
        let content = if req.image_refs.is_empty() {
            json!(req.user)
        } else {
            let mut parts = vec![json!({"type": "text", "text": req.user})];
            parts.extend(
                req.image_refs
                    .iter()
                    .map(|r| json!({"type": "image_url", "image_url": {"url": r}})),
            );
            Value::Array(parts)
        };
        messages.push(json!({"role": "user", "content": content}));
        let mut body = json!({
            "model": self.model,
            "messages": messages,
            "temperature": req.params.temperature,
            "max_tokens": req.params.max_tokens,
        });
        if let Some(seed) = req.params.seed {
            body["seed"] = json!(seed);
        }
        body
    }
}

fn parse_chat(value: &Value) -> Result<ChatResponse, BackendError> {
    let choice = value
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| BackendError::Malformed("response has no choices".into()))?;
    let text = match choice.pointer("/message/content") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Null) => String::new(),
        _ => {
            return Err(BackendError::Malformed(
                "first choice has no message content".into(),
            ))
        }
    };
    let aux_probability = value
        .get("aux_probability")
        .and_then(Value::as_f64)
        .filter(|p| *p > 0.0 && *p < 1.0);
    Ok(ChatResponse { text, aux_probability })
}

/// P(yes) / (P(yes) + P(no)) from the first token's top log-probabilities.
fn yes_probability(value: &Value) -> Option<f64> {
    let top = value
        .pointer("/choices/0/logprobs/content/0/top_logprobs")?
        .as_array()?;
    let (mut yes, mut no) = (0.0, 0.0);
    for cand in top {
        let token = cand.get("token")?.as_str()?.trim().to_ascii_lowercase();
        let p = cand.get("logprob")?.as_f64()?.exp();
        match token.as_str() {
            "yes" => yes += p,
            "no" => no += p,
            _ => {}
        }
    }
    if yes + no == 0.0 {
        return None;
    }
    Some((yes / (yes + no)).clamp(1e-6, 1.0 - 1e-6))
}

impl ChatBackend for HttpChat {
    fn chat_complete(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        check_nonempty("user message", &req.user)?;
        parse_chat(&self.http.post(&self.url, &self.body(req))?)
    }

    fn decomposition_probability(&self, sample: &VqaSample) -> Result<Option<f64>, BackendError> {
        if !self.probe_decomposition {
            return Ok(None);
        }
        let mut req = ChatRequest::new(format!(
            "Does answering this question about the image require breaking it into sub-questions? Reply yes or no.\nQuestion: {}",
            sample.question
        ))?
        .with_images([sample.image_ref.clone()]);
        req.system = Some("Reply with a single word: yes or no.".into());
        req.params.max_tokens = 1;
        let mut body = self.body(&req);
        body["logprobs"] = json!(true);
        body["top_logprobs"] = json!(5);
        let value = self.http.post(&self.url, &body)?;
        if let Some(p) = parse_chat(&value)?.aux_probability {
            return Ok(Some(p));
        }
        Ok(yes_probability(&value))
    }
}

#[derive(Debug, Clone)]
pub struct HttpEmbed {
    http: JsonClient,
    text_url: String,
    image_url: String,
    model: Option<String>,
    dim: usize,
}

impl HttpEmbed {
    pub fn new(
        text_url: impl Into<String>,
        image_url: impl Into<String>,
        model: Option<String>,
        dim: usize,
        api_key: Option<String>,
        retry: RetryPolicy,
    ) -> Result<Self, BackendError> {
        Ok(Self {
            http: JsonClient::new(api_key, retry)?,
            text_url: text_url.into(),
            image_url: image_url.into(),
            model,
            dim,
        })
    }

    fn embed(&self, url: &str, input: &str) -> Result<Embedding, BackendError> {
        let mut body = json!({ "input": input });
        if let Some(model) = &self.model {
            body["model"] = json!(model);
        }
        let value = self.http.post(url, &body)?;
        let arr = value
            .as_array()
            .or_else(|| value.get("embedding").and_then(Value::as_array))
            .or_else(|| value.pointer("/data/0/embedding").and_then(Value::as_array))
            .ok_or_else(|| BackendError::Malformed("no embedding array in response".into()))?;
        let values = arr
            .iter()
            .map(|v| v.as_f64().ok_or_else(|| BackendError::Malformed("non-numeric embedding value".into())))
            .collect::<Result<Vec<_>, _>>()?;
        if values.len() != self.dim {
            return Err(BackendError::Malformed(format!(
                "embedding has dimension {}, expected {}",
                values.len(),
                self.dim
            )));
        }
        Embedding::new(values).map_err(|e| BackendError::Malformed(e.to_string()))
    }
}

impl EmbedBackend for HttpEmbed {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<Embedding, BackendError> {
        check_nonempty("text", text)?;
        self.embed(&self.text_url, text)
    }

    fn embed_image(&self, image_ref: &str) -> Result<Embedding, BackendError> {
        check_nonempty("image locator", image_ref)?;
        self.embed(&self.image_url, image_ref)
    }
}

#[derive(Debug, Clone)]
pub struct HttpRelation {
    http: JsonClient,
    url: String,
}

impl HttpRelation {
    pub fn new(url: impl Into<String>, api_key: Option<String>, retry: RetryPolicy) -> Result<Self, BackendError> {
        Ok(Self {
            http: JsonClient::new(api_key, retry)?,
            url: url.into(),
        })
    }
}

impl RelationBackend for HttpRelation {
    fn classify(&self, q_i: &str, q_j: &str, image_ref: Option<&str>) -> Result<RelationLabel, BackendError> {
        let value = self.http.post(
            &self.url,
            &json!({"premise": q_i, "hypothesis": q_j, "image_ref": image_ref}),
        )?;
        let label = value
            .as_str()
            .or_else(|| value.get("label").and_then(Value::as_str))
            .ok_or_else(|| BackendError::Malformed("no label in relation response".into()))?;
        RelationLabel::parse(label)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles() {
        let p = RetryPolicy::default();
        assert_eq!(p.backoff(0), Duration::from_millis(250));
        assert_eq!(p.backoff(1), Duration::from_millis(500));
        assert_eq!(p.backoff(2), Duration::from_millis(1000));
    }

    #[test]
    fn chat_body_shapes() {
        let chat = HttpChat::new("http://h/v1/", "m", None, RetryPolicy::default()).unwrap();
        assert_eq!(chat.url, "http://h/v1/chat/completions");
        let plain = chat.body(&ChatRequest::new("hi").unwrap());
        assert_eq!(plain["messages"][0]["content"], "hi");
        assert!(plain.get("seed").is_none());
        let mut req = ChatRequest::new("hi").unwrap().with_images(["img://1".to_string()]);
        req.params.seed = Some(9);
        let body = chat.body(&req);
        assert_eq!(body["messages"][0]["content"][1]["image_url"]["url"], "img://1");
        assert_eq!(body["seed"], 9);
    }

    #[test]
    fn parses_choices_and_aux_probability() {
        let v = json!({"choices": [{"message": {"content": "gothic"}}], "aux_probability": 0.7});
        let r = parse_chat(&v).unwrap();
        assert_eq!(r.text, "gothic");
        assert_eq!(r.aux_probability, Some(0.7));
        assert!(matches!(parse_chat(&json!({"choices": []})), Err(BackendError::Malformed(_))));
        let refusal = json!({"choices": [{"message": {"content": null}}]});
        assert_eq!(parse_chat(&refusal).unwrap().text, "");
    }

    #[test]
    fn yes_probability_from_logprobs() {
        let v = json!({"choices": [{"logprobs": {"content": [{"top_logprobs": [
            {"token": "Yes", "logprob": (0.75f64).ln()},
            {"token": " no", "logprob": (0.25f64).ln()},
            {"token": "maybe", "logprob": -5.0}
        ]}]}}]});
        assert!((yes_probability(&v).unwrap() - 0.75).abs() < 1e-12);
        assert_eq!(yes_probability(&json!({})), None);
    }

    #[test]
    fn excerpt_truncates_on_char_boundary() {
        let long = "é".repeat(500);
        assert_eq!(excerpt(&long).chars().count(), BODY_EXCERPT_CHARS + 3);
    }
}
