//! Subject captioning with a vision-language model followed by a text-only
//! filtering pass, over a chat-completion wire protocol.
//!
//! Requests go through the [`ChatBackend`] trait. [`HttpBackend`] speaks the
//! common `POST /chat/completions` JSON protocol; [`MockBackend`] answers from
//! an in-memory fixture table and never touches the network.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::thread;
use std::time::Duration;

use base64::Engine;
use image::RgbImage;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::hex;

/// Whitespace-token budget for subject captions.
pub const SUBJECT_TOKEN_BUDGET: usize = 20;
/// Version tag of the bundled prompt templates.
pub const TEMPLATE_VERSION: &str = "v1";
/// Response of the mock backend for unknown keys.
pub const MOCK_FALLBACK: &str = "subject";

const SUBJECT_CAPTION: &str = include_str!("../assets/prompts/v1/subject_caption.txt");
const SUBJECT_DETAILED: &str = include_str!("../assets/prompts/v1/subject_detailed.txt");
const STYLE_CAPTION: &str = include_str!("../assets/prompts/v1/style_caption.txt");
const SUBJECT_FILTER: &str = include_str!("../assets/prompts/v1/subject_filter.txt");
const STYLE_FILTER: &str = include_str!("../assets/prompts/v1/style_filter.txt");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CaptionError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: usize, message: String },
    #[error("retryable failure: {0}")]
    Retryable(String),
    #[error("request rejected with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("caption input is empty")]
    EmptyInput,
    #[error("missing setting: {0}")]
    Config(String),
    #[error("image encoding: {0}")]
    Image(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionMode {
    #[default]
    Subject,
    SubjectDetailed,
    Style,
}

/// Prompt templates shipped with the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    SubjectCaption,
    SubjectDetailed,
    StyleCaption,
    SubjectFilter,
    StyleFilter,
}

impl TemplateId {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::SubjectCaption => "subject_caption",
            Self::SubjectDetailed => "subject_detailed",
            Self::StyleCaption => "style_caption",
            Self::SubjectFilter => "subject_filter",
            Self::StyleFilter => "style_filter",
        }
    }

    pub fn text(&self) -> &'static str {
        match self {
            Self::SubjectCaption => SUBJECT_CAPTION,
            Self::SubjectDetailed => SUBJECT_DETAILED,
            Self::StyleCaption => STYLE_CAPTION,
            Self::SubjectFilter => SUBJECT_FILTER,
            Self::StyleFilter => STYLE_FILTER,
        }
    }

    /// Templates authored for this project rather than taken from a published source.
    pub fn is_stand_in(&self) -> bool {
        matches!(self, Self::SubjectCaption | Self::SubjectFilter)
    }
}

impl CaptionMode {
    pub fn caption_template(&self) -> TemplateId {
        match self {
            Self::Subject => TemplateId::SubjectCaption,
            Self::SubjectDetailed => TemplateId::SubjectDetailed,
            Self::Style => TemplateId::StyleCaption,
        }
    }

    pub fn filter_template(&self) -> TemplateId {
        match self {
            Self::Subject | Self::SubjectDetailed => TemplateId::SubjectFilter,
            Self::Style => TemplateId::StyleFilter,
        }
    }

    fn max_tokens(&self) -> u32 {
        match self {
            Self::Subject => SUBJECT_TOKEN_BUDGET as u32,
            Self::SubjectDetailed => 1024,
            Self::Style => 64,
        }
    }
}

/// What the request is about: an image, or a previous caption.
#[derive(Debug, Clone, PartialEq)]
pub enum RequestInput {
    ImagePng(Vec<u8>),
    Text(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub template: TemplateId,
    /// Rendered instruction text.
    pub prompt: String,
    pub input: RequestInput,
    pub max_tokens: u32,
}

impl ChatRequest {
    /// Lookup key used by [`MockBackend`]: `<template id>:<sha256 of the PNG>`
    /// for images, `<template id>:<text>` for text inputs.
    pub fn fixture_key(&self) -> String {
        match &self.input {
            RequestInput::ImagePng(png) => format!("{}:{}", self.template.as_str(), hex(&Sha256::digest(png))),
            RequestInput::Text(t) => format!("{}:{}", self.template.as_str(), t),
        }
    }

    /// Chat-completion request body for `model`.
    pub fn to_json(&self, model: &str) -> Value {
        let mut parts = vec![json!({"type": "text", "text": self.prompt})];
        if let RequestInput::ImagePng(png) = &self.input {
            let b64 = base64::engine::general_purpose::STANDARD.encode(png);
            parts.push(json!({"type": "image_url", "image_url": {"url": format!("data:image/png;base64,{b64}")}}));
        }
        json!({
            "model": model,
            "messages": [{"role": "user", "content": parts}],
            "max_tokens": self.max_tokens,
        })
    }
}

/// A chat-completion endpoint.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, CaptionError>;

    fn describe(&self) -> String;
}

/// In-process fixture backend.
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    pub fixtures: BTreeMap<String, String>,
    /// Answer text requests with their input when no fixture matches.
    pub echo: bool,
}

pub fn mock_backend(fixtures: BTreeMap<String, String>) -> MockBackend {
    MockBackend { fixtures, echo: false }
}

impl MockBackend {
    pub fn echo() -> Self {
        Self { fixtures: BTreeMap::new(), echo: true }
    }
}

impl ChatBackend for MockBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, CaptionError> {
        if let Some(answer) = self.fixtures.get(&request.fixture_key()) {
            return Ok(answer.clone());
        }
        match (&request.input, self.echo) {
            (RequestInput::Text(t), true) => Ok(t.clone()),
            _ => Ok(MOCK_FALLBACK.to_string()),
        }
    }

    fn describe(&self) -> String {
        format!("mock({} fixtures{})", self.fixtures.len(), if self.echo { ", echo" } else { "" })
    }
}

/// Runs `attempt` until it succeeds, fails with a non-retryable error, or
/// `max_retries` retries are spent. Sleeps `backoff · 2^i` between attempts.
pub fn with_retries<R>(
    max_retries: usize,
    backoff: Duration,
    mut attempt: impl FnMut(usize) -> Result<R, CaptionError>,
) -> Result<R, CaptionError> {
    let mut last = String::new();
    for i in 0..=max_retries {
        if i > 0 && !backoff.is_zero() {
            thread::sleep(backoff * 2u32.saturating_pow(i as u32 - 1));
        }
        match attempt(i) {
            Ok(r) => return Ok(r),
            Err(CaptionError::Retryable(msg)) => last = msg,
            Err(e) => return Err(e),
        }
    }
    Err(CaptionError::Transport { attempts: max_retries + 1, message: last })
}

/// Chat-completion endpoint over HTTP.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    pub base_url: String,
    pub api_key: String,
    pub model_name: String,
    pub timeout: Duration,
    pub max_retries: usize,
    pub backoff: Duration,
}

impl HttpBackend {
    pub fn new(base_url: impl Into<String>, api_key: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: api_key.into(),
            model_name: model_name.into(),
            timeout: Duration::from_secs(60),
            max_retries: 3,
            backoff: Duration::from_millis(500),
        }
    }

    fn endpoint(&self) -> String {
        let base = self.base_url.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        }
    }

    fn send_once(&self, client: &reqwest::blocking::Client, body: &Value) -> Result<String, CaptionError> {
        let mut req = client.post(self.endpoint()).json(body);
        if !self.api_key.is_empty() {
            req = req.bearer_auth(&self.api_key);
        }
        let resp = req.send().map_err(|e| CaptionError::Retryable(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| CaptionError::Retryable(e.to_string()))?;
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(CaptionError::Retryable(format!("status {status}: {text}")));
        }
        if !status.is_success() {
            return Err(CaptionError::Rejected { status: status.as_u16(), body: text });
        }
        parse_completion(&text)
    }
}

/// Extracts `choices[0].message.content` from a chat-completion response.
pub fn parse_completion(body: &str) -> Result<String, CaptionError> {
    let v: Value = serde_json::from_str(body).map_err(|e| CaptionError::Malformed(e.to_string()))?;
    let content = &v["choices"][0]["message"]["content"];
    match content {
        Value::String(s) => Ok(s.clone()),
        Value::Array(parts) => {
            let text: Vec<&str> = parts.iter().filter_map(|p| p["text"].as_str()).collect();
            if text.is_empty() {
                Err(CaptionError::Malformed("no text parts in message content".into()))
            } else {
                Ok(text.join(""))
            }
        }
        _ => Err(CaptionError::Malformed("missing choices[0].message.content".into())),
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, CaptionError> {
        if self.timeout.is_zero() {
            return Err(CaptionError::Config("timeout must be positive".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(self.timeout)
            .build()
            .map_err(|e| CaptionError::Config(e.to_string()))?;
        let body = request.to_json(&self.model_name);
        with_retries(self.max_retries, self.backoff, |_| self.send_once(&client, &body))
    }

    fn describe(&self) -> String {
        format!("http({}, model={})", self.endpoint(), self.model_name)
    }
}

/// Vision-language and language-only endpoints used for one caption.
pub struct CaptionClients {
    pub vlm: Box<dyn ChatBackend>,
    pub llm: Box<dyn ChatBackend>,
}

impl CaptionClients {
    pub fn mock(backend: MockBackend) -> Self {
        Self { vlm: Box::new(backend.clone()), llm: Box::new(backend) }
    }

    /// Reads `CAPTION_BASE_URL`, `CAPTION_API_KEY`, `CAPTION_VLM_MODEL` and `CAPTION_LLM_MODEL`.
    pub fn from_env(timeout: Duration, max_retries: usize) -> Result<Self, CaptionError> {
        let var = |k: &str| std::env::var(k).map_err(|_| CaptionError::Config(format!("{k} is not set")));
        let base = var("CAPTION_BASE_URL")?;
        let key = std::env::var("CAPTION_API_KEY").unwrap_or_default();
        let make =
            |model: String| HttpBackend { timeout, max_retries, ..HttpBackend::new(base.clone(), key.clone(), model) };
        Ok(Self { vlm: Box::new(make(var("CAPTION_VLM_MODEL")?)), llm: Box::new(make(var("CAPTION_LLM_MODEL")?)) })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Mock,
    Http,
}

/// Caption settings carried in the generation config. Credentials and
/// endpoints of the HTTP backend come from the environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaptionSettings {
    pub backend: BackendKind,
    pub mode: CaptionMode,
    /// Fills the placeholder of the detailed template.
    pub subject_class: String,
    /// Mock fixtures, keyed as documented on [`ChatRequest::fixture_key`].
    pub fixtures: BTreeMap<String, String>,
    pub echo: bool,
    pub timeout_secs: f64,
    pub max_retries: usize,
}

impl Default for CaptionSettings {
    fn default() -> Self {
        Self {
            backend: BackendKind::Mock,
            mode: CaptionMode::Subject,
            subject_class: "subject".into(),
            fixtures: BTreeMap::new(),
            echo: false,
            timeout_secs: 60.0,
            max_retries: 3,
        }
    }
}

impl CaptionSettings {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(format!("caption.timeout_secs={} must be positive", self.timeout_secs));
        }
        Ok(())
    }

    pub fn clients(&self) -> Result<CaptionClients, CaptionError> {
        self.validate().map_err(CaptionError::Config)?;
        match self.backend {
            BackendKind::Mock => {
                Ok(CaptionClients::mock(MockBackend { fixtures: self.fixtures.clone(), echo: self.echo }))
            }
            BackendKind::Http => CaptionClients::from_env(Duration::from_secs_f64(self.timeout_secs), self.max_retries),
        }
    }
}

/// Keeps the first `budget` whitespace tokens. Returns the text and whether anything was cut.
pub fn truncate_tokens(text: &str, budget: usize) -> (String, bool) {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if tokens.len() <= budget {
        (tokens.join(" "), false)
    } else {
        (tokens[..budget].join(" "), true)
    }
}

pub fn token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

pub fn encode_png(image: &RgbImage) -> Result<Vec<u8>, CaptionError> {
    let mut buf = Cursor::new(Vec::new());
    image.write_to(&mut buf, image::ImageFormat::Png).map_err(|e| CaptionError::Image(e.to_string()))?;
    Ok(buf.into_inner())
}

/// Raw vision-language caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawCaption {
    pub text: String,
    pub truncated: bool,
}

/// Asks the vision-language model to describe `image`. `subject_class`
/// fills the placeholder of the detailed template.
pub fn caption_subject(
    image: &RgbImage,
    backend: &dyn ChatBackend,
    mode: CaptionMode,
    subject_class: &str,
) -> Result<RawCaption, CaptionError> {
    let template = mode.caption_template();
    let prompt = match mode {
        CaptionMode::SubjectDetailed => template.text().replacen("{}", subject_class, 1),
        _ => template.text().to_string(),
    };
    let request = ChatRequest {
        template,
        prompt,
        input: RequestInput::ImagePng(encode_png(image)?),
        max_tokens: mode.max_tokens(),
    };
    let text = backend.complete(&request)?;
    if mode == CaptionMode::Subject {
        let (text, truncated) = truncate_tokens(&text, SUBJECT_TOKEN_BUDGET);
        Ok(RawCaption { text, truncated })
    } else {
        Ok(RawCaption { text: text.trim().to_string(), truncated: false })
    }
}

/// Asks the language model to strip everything but the subject (or style) from `raw`.
pub fn filter_caption(raw: &str, backend: &dyn ChatBackend, mode: CaptionMode) -> Result<String, CaptionError> {
    if raw.trim().is_empty() {
        return Err(CaptionError::EmptyInput);
    }
    let template = mode.filter_template();
    let request = ChatRequest {
        template,
        prompt: template.text().replace("{raw}", raw),
        input: RequestInput::Text(raw.to_string()),
        max_tokens: mode.max_tokens().max(64),
    };
    Ok(backend.complete(&request)?.trim().to_string())
}

/// Both caption stages and their provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionBundle {
    pub raw: String,
    pub filtered: String,
    pub mode: CaptionMode,
    pub token_count: usize,
    pub raw_truncated: bool,
    pub filtered_truncated: bool,
    pub template_version: String,
    pub caption_template: TemplateId,
    pub filter_template: TemplateId,
    /// True when either template is a project-authored stand-in.
    pub template_stand_in: bool,
}

/// Caption then filter. Subject-mode output is held to [`SUBJECT_TOKEN_BUDGET`].
pub fn compensate(
    image: &RgbImage,
    clients: &CaptionClients,
    mode: CaptionMode,
    subject_class: &str,
) -> Result<CaptionBundle, CaptionError> {
    let raw = caption_subject(image, clients.vlm.as_ref(), mode, subject_class)?;
    let filtered = filter_caption(&raw.text, clients.llm.as_ref(), mode)?;
    let (filtered, filtered_truncated) =
        if mode == CaptionMode::Subject { truncate_tokens(&filtered, SUBJECT_TOKEN_BUDGET) } else { (filtered, false) };
    Ok(CaptionBundle {
        token_count: token_count(&filtered),
        raw: raw.text,
        filtered,
        mode,
        raw_truncated: raw.truncated,
        filtered_truncated,
        template_version: TEMPLATE_VERSION.into(),
        caption_template: mode.caption_template(),
        filter_template: mode.filter_template(),
        template_stand_in: mode.caption_template().is_stand_in() || mode.filter_template().is_stand_in(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    fn image() -> RgbImage {
        RgbImage::from_fn(4, 4, |x, y| image::Rgb([x as u8 * 40, y as u8 * 40, 9]))
    }

    fn image_key(template: TemplateId, img: &RgbImage) -> String {
        format!("{}:{}", template.as_str(), hex(&Sha256::digest(encode_png(img).unwrap())))
    }

    #[test]
    fn published_templates_are_verbatim() {
        assert!(STYLE_CAPTION.starts_with("Describe this style briefly and precisely in max 20 words"));
        assert!(STYLE_FILTER.starts_with("Please extract only the stylistic and artistic characteristics"));
        assert!(STYLE_FILTER.ends_with("The description is: { {raw} }"));
        assert!(SUBJECT_DETAILED.starts_with("[Task Description]\nAs an experienced image analyst"));
        assert!(SUBJECT_DETAILED.ends_with("Overall Composition: [Brief summary]"));
        assert!(TemplateId::SubjectCaption.is_stand_in());
        assert!(!TemplateId::StyleFilter.is_stand_in());
    }

    #[test]
    fn mock_contract() {
        let img = image();
        let mut fixtures = BTreeMap::new();
        fixtures.insert(image_key(TemplateId::SubjectCaption, &img), "a brown dog running in a park".to_string());
        fixtures.insert("subject_filter:a brown dog running in a park".to_string(), "a brown dog".to_string());
        let backend = mock_backend(fixtures);
        let raw = caption_subject(&img, &backend, CaptionMode::Subject, "dog").unwrap();
        assert_eq!(raw.text, "a brown dog running in a park");
        assert!(!raw.truncated);
        assert_eq!(filter_caption(&raw.text, &backend, CaptionMode::Subject).unwrap(), "a brown dog");
        let other = RgbImage::new(4, 4);
        assert_eq!(caption_subject(&other, &backend, CaptionMode::Subject, "").unwrap().text, MOCK_FALLBACK);
        let again = caption_subject(&other, &backend, CaptionMode::Subject, "").unwrap();
        assert_eq!(again.text, MOCK_FALLBACK);
    }

    #[test]
    fn echo_filter_is_identity() {
        let b = MockBackend::echo();
        assert_eq!(filter_caption("a red car", &b, CaptionMode::Subject).unwrap(), "a red car");
        assert_eq!(filter_caption("  ", &b, CaptionMode::Subject), Err(CaptionError::EmptyInput));
        assert_eq!(filter_caption("", &b, CaptionMode::Style), Err(CaptionError::EmptyInput));
    }

    #[test]
    fn subject_caption_truncated_to_budget() {
        let img = image();
        let long: String = (0..30).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let mut fixtures = BTreeMap::new();
        fixtures.insert(image_key(TemplateId::SubjectCaption, &img), long);
        let clients = CaptionClients::mock(MockBackend { fixtures, echo: true });
        let bundle = compensate(&img, &clients, CaptionMode::Subject, "").unwrap();
        assert!(bundle.raw_truncated);
        assert_eq!(bundle.token_count, 20);
        assert!(bundle.template_stand_in);
        assert_eq!(bundle.filtered.split_whitespace().last(), Some("w19"));
    }

    #[test]
    fn detailed_template_fills_class() {
        struct Capture(std::sync::Mutex<Vec<String>>);
        impl ChatBackend for Capture {
            fn complete(&self, r: &ChatRequest) -> Result<String, CaptionError> {
                self.0.lock().unwrap().push(r.prompt.clone());
                Ok("x".into())
            }
            fn describe(&self) -> String {
                "capture".into()
            }
        }
        let c = Capture(Default::default());
        caption_subject(&image(), &c, CaptionMode::SubjectDetailed, "cat").unwrap();
        filter_caption("a watercolor wash", &c, CaptionMode::Style).unwrap();
        let prompts = c.0.lock().unwrap();
        assert!(prompts[0].contains("of the given cat in this image"));
        assert!(prompts[1].ends_with("The description is: { a watercolor wash }"));
    }

    #[test]
    fn retries_then_success_or_transport_error() {
        for (failures, max_retries, ok) in [(3, 3, true), (4, 3, false), (0, 0, true), (1, 0, false)] {
            let calls = Cell::new(0);
            let res = with_retries(max_retries, Duration::ZERO, |_| {
                calls.set(calls.get() + 1);
                if calls.get() <= failures {
                    Err(CaptionError::Retryable("boom".into()))
                } else {
                    Ok("fine")
                }
            });
            assert_eq!(res.is_ok(), ok, "failures={failures} retries={max_retries}");
            if !ok {
                assert_eq!(res, Err(CaptionError::Transport { attempts: max_retries + 1, message: "boom".into() }));
            }
        }
        let calls = Cell::new(0);
        let res: Result<(), _> = with_retries(5, Duration::ZERO, |_| {
            calls.set(calls.get() + 1);
            Err(CaptionError::Malformed("x".into()))
        });
        assert!(res.is_err());
        assert_eq!(calls.get(), 1, "malformed responses are not retried");
    }

    #[test]
    fn completion_parsing() {
        let ok = r#"{"choices":[{"message":{"role":"assistant","content":" a cat "}}]}"#;
        assert_eq!(parse_completion(ok).unwrap(), " a cat ");
        let parts =
            r#"{"choices":[{"message":{"content":[{"type":"text","text":"a "},{"type":"text","text":"cat"}]}}]}"#;
        assert_eq!(parse_completion(parts).unwrap(), "a cat");
        assert!(matches!(parse_completion("{}"), Err(CaptionError::Malformed(_))));
        assert!(matches!(parse_completion("nope"), Err(CaptionError::Malformed(_))));
    }

    #[test]
    fn request_body_shape() {
        let r = ChatRequest {
            template: TemplateId::SubjectCaption,
            prompt: "describe".into(),
            input: RequestInput::ImagePng(vec![1, 2, 3]),
            max_tokens: 20,
        };
        let v = r.to_json("vlm");
        assert_eq!(v["model"], "vlm");
        assert_eq!(v["max_tokens"], 20);
        assert_eq!(v["messages"][0]["role"], "user");
        assert_eq!(v["messages"][0]["content"][0]["text"], "describe");
        assert_eq!(v["messages"][0]["content"][1]["image_url"]["url"], "data:image/png;base64,AQID");
    }
}
