//! The detection pipeline: speech gate, task-attribute gate, model escalation.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, LazyLock};
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use chrono::{DateTime, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::embedding::Providers;
use crate::error::{Error, Result};
use crate::http;
use crate::limit::InflightLimiter;
use crate::prompt::DetectionPrompt;
use crate::retrieval::{
    speech_score, task_attribute_score, FusionWeight, MultiModalBuffer, PromptStyle, RetrievalHit,
    SpeechBuffer,
};
use crate::types::{ConflictLabel, DetectionInput};

pub const DEFAULT_W: f64 = 0.87;
pub const DEFAULT_TAU_S: f64 = 0.88;
/// Task threshold tuned with the 3B backend; the 7B backend preferred 0.93.
pub const DEFAULT_TAU_T: f64 = 0.94;

/// Fusion weight and gate thresholds.
///
/// Thresholds must be finite and non-negative. Values above 1 are legal and mean the
/// gate can never pass (every task query escalates, or speech never triggers).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionConfig {
    pub w: FusionWeight,
    pub tau_s: f64,
    pub tau_t: f64,
    /// Upper bound on one model escalation, enforced by the pipeline.
    #[serde(default = "default_backend_timeout_ms")]
    pub backend_timeout_ms: u64,
}

fn default_backend_timeout_ms() -> u64 {
    30_000
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig {
            w: FusionWeight::new(DEFAULT_W).expect("valid default"),
            tau_s: DEFAULT_TAU_S,
            tau_t: DEFAULT_TAU_T,
            backend_timeout_ms: default_backend_timeout_ms(),
        }
    }
}

impl DetectionConfig {
    pub fn new(w: f64, tau_s: f64, tau_t: f64) -> Result<Self> {
        let config = DetectionConfig {
            w: FusionWeight::new(w)?,
            tau_s,
            tau_t,
            backend_timeout_ms: default_backend_timeout_ms(),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, tau) in [("tau_s", self.tau_s), ("tau_t", self.tau_t)] {
            if !tau.is_finite() || tau < 0.0 {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {tau}")));
            }
        }
        Ok(())
    }

    pub fn backend_timeout(&self) -> Duration {
        Duration::from_millis(self.backend_timeout_ms)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionMethod {
    SpeechRetrieval,
    TaskRetrieval,
    ModelInference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    SpeechEmbedding,
    SpeechRetrieval,
    TaskEmbedding,
    TaskRetrieval,
    ModelInference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: Stage,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub label: ConflictLabel,
    pub method: DetectionMethod,
    pub speech_score: Option<f64>,
    pub task_score: Option<f64>,
    pub matched_entry_id: Option<String>,
    /// Wall-clock duration of the whole call.
    pub latency_s: f64,
    pub stages: Vec<StageTiming>,
    pub timestamp: DateTime<Utc>,
}

impl DetectionResult {
    pub fn latency(&self) -> Duration {
        Duration::from_secs_f64(self.latency_s)
    }

    /// Checks the method against the recorded scores and thresholds.
    pub fn is_consistent_with(&self, config: &DetectionConfig) -> bool {
        match self.method {
            DetectionMethod::SpeechRetrieval => self.speech_score.is_some_and(|s| s > config.tau_s),
            DetectionMethod::TaskRetrieval => {
                self.task_score.is_some_and(|s| s >= config.tau_t)
                    && self.speech_score.is_none_or(|s| s <= config.tau_s)
            }
            DetectionMethod::ModelInference => {
                self.task_score.is_none_or(|s| s < config.tau_t)
                    && self.speech_score.is_none_or(|s| s <= config.tau_s)
            }
        }
    }
}

/// Everything a model backend receives for one escalation.
#[derive(Debug, Clone)]
pub struct EscalationRequest {
    pub system: String,
    pub user: String,
    pub input: DetectionInput,
}

/// A multi-modal model that classifies an observation into one conflict label.
///
/// Implementations return the raw model text; parsing happens in [`escalate`].
pub trait ModelBackend: Send + Sync {
    fn complete(&self, request: &EscalationRequest) -> Result<String>;
}

type Responder = dyn Fn(&DetectionInput) -> String + Send + Sync;

/// Scripted in-process backend.
pub struct MockModelBackend {
    responder: Box<Responder>,
    delay: Duration,
    unavailable: bool,
    calls: AtomicUsize,
}

impl MockModelBackend {
    /// Always answers `reply`.
    pub fn replying(reply: impl Into<String>) -> Self {
        let reply = reply.into();
        MockModelBackend::scripted(move |_| reply.clone())
    }

    pub fn scripted(responder: impl Fn(&DetectionInput) -> String + Send + Sync + 'static) -> Self {
        MockModelBackend {
            responder: Box::new(responder),
            delay: Duration::ZERO,
            unavailable: false,
            calls: AtomicUsize::new(0),
        }
    }

    /// A backend whose every call fails as if the service were down.
    pub fn unavailable() -> Self {
        let mut backend = MockModelBackend::replying("normal");
        backend.unavailable = true;
        backend
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ModelBackend for MockModelBackend {
    fn complete(&self, request: &EscalationRequest) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        if self.unavailable {
            return Err(Error::Remote {
                endpoint: "mock://model".into(),
                status: Some(503),
                message: "mock backend configured as unavailable".into(),
                retriable: true,
            });
        }
        Ok((self.responder)(&request.input))
    }
}

/// `POST {endpoint}` with `{"system", "user", "image_base64"}` → `{"output": "..."}`.
pub struct RemoteModelBackend {
    endpoint: String,
    client: reqwest::blocking::Client,
    limiter: InflightLimiter,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RemoteModelRequest {
    pub system: String,
    pub user: String,
    pub image_base64: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RemoteModelResponse {
    pub output: String,
}

impl RemoteModelBackend {
    pub fn new(endpoint: impl Into<String>, timeout: Duration, max_in_flight: usize) -> Result<Self> {
        Ok(RemoteModelBackend {
            endpoint: endpoint.into(),
            client: http::client(timeout)?,
            limiter: InflightLimiter::new(max_in_flight),
        })
    }
}

impl ModelBackend for RemoteModelBackend {
    fn complete(&self, request: &EscalationRequest) -> Result<String> {
        let image = request.input.image.load()?;
        let body = RemoteModelRequest {
            system: request.system.clone(),
            user: request.user.clone(),
            image_base64: BASE64.encode(&image),
        };
        let _slot = self.limiter.acquire();
        let response: RemoteModelResponse = http::post_json(&self.client, &self.endpoint, &body)?;
        Ok(response.output)
    }
}

static LABEL_TOKEN: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(goal_absence|human_interaction|human_occupancy|object_state|normal)\b")
        .expect("label regex is valid")
});

/// Extracts the single canonical label token from model output.
///
/// Matching is case-insensitive on whole tokens; the output must mention exactly one
/// distinct label.
pub fn parse_label(raw: &str) -> Result<ConflictLabel> {
    let found: BTreeSet<ConflictLabel> = LABEL_TOKEN
        .find_iter(raw)
        .map(|m| m.as_str().parse().expect("regex only matches labels"))
        .collect();
    match found.len() {
        1 => Ok(found.into_iter().next().expect("one element")),
        0 => Err(Error::UnparseableOutput {
            reason: "no label token".into(),
            raw: raw.to_string(),
        }),
        n => Err(Error::UnparseableOutput {
            reason: format!("{n} different label tokens"),
            raw: raw.to_string(),
        }),
    }
}

/// Renders the detection prompt for `input`, asks the backend, parses its answer.
pub fn escalate(
    input: &DetectionInput,
    backend: &dyn ModelBackend,
    prompt: &DetectionPrompt,
) -> Result<ConflictLabel> {
    let request = EscalationRequest {
        system: prompt.system().to_string(),
        user: prompt.render_user(input),
        input: input.clone(),
    };
    parse_label(&backend.complete(&request)?)
}

fn escalate_with_deadline(
    input: &DetectionInput,
    backend: &Arc<dyn ModelBackend>,
    prompt: &DetectionPrompt,
    timeout: Duration,
) -> Result<ConflictLabel> {
    let (tx, rx) = mpsc::channel();
    let backend = Arc::clone(backend);
    let prompt = prompt.clone();
    let input = input.clone();
    std::thread::Builder::new()
        .name("commet-escalation".into())
        .spawn(move || {
            let _ = tx.send(escalate(&input, backend.as_ref(), &prompt));
        })
        .map_err(|e| Error::Remote {
            endpoint: "model".into(),
            status: None,
            message: format!("could not start escalation worker: {e}"),
            retriable: true,
        })?;
    match rx.recv_timeout(timeout) {
        Ok(result) => result,
        Err(mpsc::RecvTimeoutError::Timeout) => Err(Error::Timeout(timeout)),
        Err(mpsc::RecvTimeoutError::Disconnected) => Err(Error::Remote {
            endpoint: "model".into(),
            status: None,
            message: "escalation worker exited without answering".into(),
            retriable: true,
        }),
    }
}

/// Anything that maps one observation to a detection result.
pub trait ConflictDetector: Send + Sync {
    fn detect(&self, input: &DetectionInput) -> Result<DetectionResult>;
}

/// Speech buffer, multi-modal buffer, providers and backend, ready to run.
///
/// Cheap to clone: all heavy state is shared.
#[derive(Clone)]
pub struct Detector {
    providers: Providers,
    speech: Arc<SpeechBuffer>,
    multimodal: Arc<MultiModalBuffer>,
    backend: Arc<dyn ModelBackend>,
    prompt: DetectionPrompt,
    config: DetectionConfig,
}

struct Timer {
    start: Instant,
    stages: Vec<StageTiming>,
}

impl Timer {
    fn time<T>(&mut self, stage: Stage, f: impl FnOnce() -> T) -> T {
        let t0 = Instant::now();
        let out = f();
        self.stages.push(StageTiming {
            stage,
            seconds: t0.elapsed().as_secs_f64(),
        });
        out
    }
}

impl Detector {
    pub fn new(
        providers: Providers,
        speech: Arc<SpeechBuffer>,
        multimodal: Arc<MultiModalBuffer>,
        backend: Arc<dyn ModelBackend>,
        config: DetectionConfig,
    ) -> Result<Self> {
        config.validate()?;
        if multimodal.prompt_style() != PromptStyle::Separate {
            return Err(Error::Config(
                "the detector needs a multi-modal buffer built with separate prompts".into(),
            ));
        }
        for (what, buffer_id, provider_id) in [
            ("speech", speech.provider_id(), providers.text.provider_id()),
            ("prompt", multimodal.prompt_provider_id(), providers.text.provider_id()),
            ("observation", multimodal.obs_provider_id(), providers.image.provider_id()),
        ] {
            let empty = match what {
                "speech" => speech.is_empty(),
                _ => multimodal.is_empty(),
            };
            if !empty && buffer_id != provider_id {
                return Err(Error::Config(format!(
                    "{what} buffer was built with {buffer_id:?} but the configured provider is {provider_id:?}"
                )));
            }
        }
        Ok(Detector {
            providers,
            speech,
            multimodal,
            backend,
            prompt: DetectionPrompt::default(),
            config,
        })
    }

    pub fn with_prompt(mut self, prompt: DetectionPrompt) -> Self {
        self.prompt = prompt;
        self
    }

    /// Same buffers and backend, different weight/thresholds.
    pub fn with_config(&self, config: DetectionConfig) -> Result<Self> {
        config.validate()?;
        let mut next = self.clone();
        next.config = config;
        Ok(next)
    }

    pub fn with_backend(&self, backend: Arc<dyn ModelBackend>) -> Self {
        let mut next = self.clone();
        next.backend = backend;
        next
    }

    pub fn config(&self) -> &DetectionConfig {
        &self.config
    }

    pub fn speech_buffer(&self) -> &SpeechBuffer {
        &self.speech
    }

    pub fn multimodal_buffer(&self) -> &MultiModalBuffer {
        &self.multimodal
    }

    pub fn providers(&self) -> &Providers {
        &self.providers
    }

    /// Speech gate, then task gate, then escalation.
    pub fn detect(&self, input: &DetectionInput) -> Result<DetectionResult> {
        let mut timer = Timer {
            start: Instant::now(),
            stages: Vec::with_capacity(4),
        };
        input.validate()?;

        let mut speech_hit: Option<RetrievalHit> = None;
        if let Some(speech) = input.speech().filter(|_| !self.speech.is_empty()) {
            let query = timer.time(Stage::SpeechEmbedding, || self.providers.text.embed_text(speech))?;
            let hit = timer.time(Stage::SpeechRetrieval, || speech_score(&query, &self.speech))?;
            if hit.score > self.config.tau_s {
                return Ok(self.finish(timer, hit.entry_label, DetectionMethod::SpeechRetrieval, Some(&hit), None, Some(hit.entry_id.clone())));
            }
            speech_hit = Some(hit);
        }

        let mut task_hit: Option<RetrievalHit> = None;
        if !self.multimodal.is_empty() {
            let (prompt_q, obs_q) = timer.time(Stage::TaskEmbedding, || {
                let prompt = PromptStyle::Separate.render(&input.task, &input.step, None);
                Ok::<_, Error>((
                    self.providers.text.embed_text(&prompt)?,
                    self.providers.image.embed_image(&input.image)?,
                ))
            })?;
            let hit = timer.time(Stage::TaskRetrieval, || {
                task_attribute_score(&prompt_q, &obs_q, &self.multimodal, self.config.w)
            })?;
            if hit.score >= self.config.tau_t {
                let id = hit.entry_id.clone();
                return Ok(self.finish(timer, hit.entry_label, DetectionMethod::TaskRetrieval, speech_hit.as_ref(), Some(&hit), Some(id)));
            }
            task_hit = Some(hit);
        }

        let label = timer
            .time(Stage::ModelInference, || {
                escalate_with_deadline(input, &self.backend, &self.prompt, self.config.backend_timeout())
            })
            .map_err(|source| Error::Escalation {
                speech_score: speech_hit.as_ref().map(|h| h.score),
                task_score: task_hit.as_ref().map(|h| h.score),
                source: Box::new(source),
            })?;
        Ok(self.finish(timer, label, DetectionMethod::ModelInference, speech_hit.as_ref(), task_hit.as_ref(), None))
    }

    fn finish(
        &self,
        timer: Timer,
        label: ConflictLabel,
        method: DetectionMethod,
        speech_hit: Option<&RetrievalHit>,
        task_hit: Option<&RetrievalHit>,
        matched_entry_id: Option<String>,
    ) -> DetectionResult {
        DetectionResult {
            label,
            method,
            speech_score: speech_hit.map(|h| h.score),
            task_score: task_hit.map(|h| h.score),
            matched_entry_id,
            latency_s: timer.start.elapsed().as_secs_f64(),
            stages: timer.stages,
            timestamp: Utc::now(),
        }
    }

    /// Runs `detect` frame by frame. A failing frame yields an error in its slot and
    /// does not stop later frames.
    pub fn detect_stream<'a, I>(&self, frames: I) -> Vec<Result<DetectionResult>>
    where
        I: IntoIterator<Item = &'a DetectionInput>,
    {
        frames.into_iter().map(|frame| self.detect(frame)).collect()
    }
}

impl ConflictDetector for Detector {
    fn detect(&self, input: &DetectionInput) -> Result<DetectionResult> {
        Detector::detect(self, input)
    }
}
