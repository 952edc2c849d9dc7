//! Models that answer prompts.
//!
//! [`Simulator`] is a seeded stand-in for a downstream model whose behaviour
//! shifts when configured trigger phrases appear in the prompt.
//! [`RemoteBackend`] speaks the OpenAI-compatible chat-completions protocol.

mod remote;
mod simulator;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Cgp, Prediction, Query};
use crate::parsing::{parse_prediction, render_downstream_prompt, InstructionTemplate};

pub use remote::{RemoteBackend, RemoteConfig};
pub use simulator::{FeatureEffect, Simulator, SimulatorProfile};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("server returned HTTP {code}: {body}")]
    HttpStatus { code: u16, body: String },
    #[error("request timed out")]
    Timeout,
    #[error("backend rejected the request: {message}")]
    Rejection { message: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl BackendError {
    /// Outages worth retrying. Rejections and malformed payloads are not.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) | BackendError::Timeout => true,
            BackendError::HttpStatus { code, .. } => *code == 408 || *code == 429 || *code >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ParamsError {
    #[error("temperature must be finite and >= 0, got {0}")]
    Temperature(f64),
    #[error("top_k must be >= 1")]
    TopK,
}

/// Decoding parameters applied to every backend call.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationParams {
    pub temperature: f64,
    pub top_k: usize,
    pub max_new_tokens: usize,
    /// Only the simulator honours this.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            temperature: 0.6,
            top_k: 100,
            max_new_tokens: 256,
            seed: None,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<(), ParamsError> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(ParamsError::Temperature(self.temperature));
        }
        if self.top_k == 0 {
            return Err(ParamsError::TopK);
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }
}

/// A model that turns a prompt (and optional image reference) into text.
pub trait Backend: Send + Sync {
    fn generate(
        &self,
        prompt: &str,
        image_ref: Option<&str>,
        params: &GenerationParams,
    ) -> Result<String, BackendError>;

    /// Short human-readable description for report metadata.
    fn describe(&self) -> String {
        "backend".to_string()
    }
}

impl<B: Backend + ?Sized> Backend for &B {
    fn generate(&self, p: &str, i: Option<&str>, g: &GenerationParams) -> Result<String, BackendError> {
        (**self).generate(p, i, g)
    }
    fn describe(&self) -> String {
        (**self).describe()
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn generate(&self, p: &str, i: Option<&str>, g: &GenerationParams) -> Result<String, BackendError> {
        (**self).generate(p, i, g)
    }
    fn describe(&self) -> String {
        (**self).describe()
    }
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn generate(&self, p: &str, i: Option<&str>, g: &GenerationParams) -> Result<String, BackendError> {
        (**self).generate(p, i, g)
    }
    fn describe(&self) -> String {
        (**self).describe()
    }
}

/// Wraps a backend and counts calls. Optionally records prompts.
pub struct CountingBackend<B> {
    inner: B,
    calls: AtomicUsize,
    prompts: Mutex<Vec<String>>,
    record_prompts: bool,
}

impl<B: Backend> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        CountingBackend {
            inner,
            calls: AtomicUsize::new(0),
            prompts: Mutex::new(Vec::new()),
            record_prompts: false,
        }
    }

    pub fn recording(inner: B) -> Self {
        CountingBackend {
            record_prompts: true,
            ..Self::new(inner)
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().unwrap().clone()
    }
}

impl<B: Backend> Backend for CountingBackend<B> {
    fn generate(&self, prompt: &str, image_ref: Option<&str>, params: &GenerationParams) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if self.record_prompts {
            self.prompts.lock().unwrap().push(prompt.to_string());
        }
        self.inner.generate(prompt, image_ref, params)
    }

    fn describe(&self) -> String {
        self.inner.describe()
    }
}

/// Exponential backoff for retryable backend errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        RetryPolicy {
            max_retries: 0,
            ..Self::default()
        }
    }

    pub fn immediate(max_retries: u32) -> Self {
        RetryPolicy {
            max_retries,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    fn delay(&self, attempt: u32) -> Duration {
        let ms = self
            .base_delay_ms
            .saturating_mul(1u64 << attempt.min(20))
            .min(self.max_delay_ms);
        Duration::from_millis(ms)
    }

    /// Runs `op` until it succeeds, fails with a non-retryable error, or the
    /// retry budget is spent.
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T, BackendError>) -> Result<T, BackendError> {
        let mut attempt = 0;
        loop {
            match op() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < self.max_retries => {
                    log::warn!("backend call failed ({e}); retry {}/{}", attempt + 1, self.max_retries);
                    thread::sleep(self.delay(attempt));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// The downstream task model with its instruction template and retry policy.
#[derive(Clone, Copy)]
pub struct Downstream<'a> {
    pub backend: &'a dyn Backend,
    pub template: &'a InstructionTemplate,
    pub retry: RetryPolicy,
}

impl<'a> Downstream<'a> {
    pub fn new(backend: &'a dyn Backend, template: &'a InstructionTemplate, retry: RetryPolicy) -> Self {
        Downstream {
            backend,
            template,
            retry,
        }
    }

    pub fn generate(&self, prompt: &str, image_ref: Option<&str>, params: &GenerationParams) -> Result<String, BackendError> {
        if prompt.is_empty() {
            return Err(BackendError::InvalidRequest("empty prompt".into()));
        }
        self.retry.run(|| self.backend.generate(prompt, image_ref, params))
    }

    /// Render, generate, parse. Transport failures are retried; an
    /// unparseable answer is returned as an invalid prediction.
    pub fn answer_query(&self, query: &Query, cgp: Option<&Cgp>, params: &GenerationParams) -> Result<Prediction, BackendError> {
        self.answer_with_template(query, cgp, self.template, params)
    }

    pub fn answer_with_template(
        &self,
        query: &Query,
        cgp: Option<&Cgp>,
        template: &InstructionTemplate,
        params: &GenerationParams,
    ) -> Result<Prediction, BackendError> {
        let prompt = render_downstream_prompt(query, cgp, template);
        let raw = self.generate(&prompt, query.image_ref.as_deref(), params)?;
        Ok(parse_prediction(&raw, query.num_options()))
    }
}

/// Caps the number of concurrent calls through a shared backend.
pub(crate) struct InFlightLimit {
    max: usize,
    current: Mutex<usize>,
    cv: std::sync::Condvar,
}

impl InFlightLimit {
    pub(crate) fn new(max: usize) -> Self {
        InFlightLimit {
            max: max.max(1),
            current: Mutex::new(0),
            cv: std::sync::Condvar::new(),
        }
    }

    pub(crate) fn acquire(&self) -> InFlightGuard<'_> {
        let mut n = self.current.lock().unwrap();
        while *n >= self.max {
            n = self.cv.wait(n).unwrap();
        }
        *n += 1;
        InFlightGuard { limit: self }
    }
}

pub(crate) struct InFlightGuard<'a> {
    limit: &'a InFlightLimit,
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.limit.current.lock().unwrap() -= 1;
        self.limit.cv.notify_one();
    }
}
