//! Engine configuration file (TOML).
//!
//! ```toml
//! [detection]
//! w = 0.87
//! tau_s = 0.88
//! tau_t = 0.94
//!
//! [providers.text]
//! kind = "mock"
//! seed = 7
//!
//! [providers.image]
//! kind = "mock"
//! seed = 7
//!
//! [backend]
//! kind = "remote"
//! endpoint = "http://localhost:9000/v1/classify"
//!
//! [buffers]
//! speech = "buffers/speech.json"
//! multimodal = "buffers/multimodal.json"
//! ```
//!
//! Relative paths are resolved against the directory holding the config file.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::detection::{DetectionConfig, Detector, MockModelBackend, ModelBackend, RemoteModelBackend};
use crate::embedding::{EmbeddingProviderConfig, Providers};
use crate::error::{Error, Result};
use crate::preference::{MockSummarizer, PreferenceEngine, PreferenceStore, RemoteSummarizer, Summarizer, DEFAULT_MAX_CASES};
use crate::prompt::{DetectionPrompt, PreferencePrompts};
use crate::retrieval::{MultiModalBuffer, SpeechBuffer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvidersConfig {
    pub text: EmbeddingProviderConfig,
    pub image: EmbeddingProviderConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Mock only: the fixed answer.
    #[serde(default = "default_reply")]
    pub reply: String,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default = "default_remote_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    /// Directory with `detect_system.txt` and `detect_user.txt`; built-ins otherwise.
    #[serde(default)]
    pub prompt_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummarizerConfig {
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default = "default_remote_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_max_cases")]
    pub max_cases: usize,
    /// Directory with `prefer_<type>.txt` templates; built-ins otherwise.
    #[serde(default)]
    pub prompt_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuffersConfig {
    pub speech: PathBuf,
    pub multimodal: PathBuf,
    /// Keep Normal-labeled noise utterances in the speech buffer.
    #[serde(default)]
    pub store_noise: bool,
    /// Speech-inclusive multi-modal buffer for the unified retrieval baseline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unified: Option<PathBuf>,
}

fn default_reply() -> String {
    "normal".into()
}

fn default_remote_timeout_ms() -> u64 {
    30_000
}

fn default_max_in_flight() -> usize {
    4
}

fn default_max_cases() -> usize {
    DEFAULT_MAX_CASES
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Mock,
            reply: default_reply(),
            endpoint: None,
            timeout_ms: default_remote_timeout_ms(),
            max_in_flight: default_max_in_flight(),
            prompt_dir: None,
        }
    }
}

impl Default for SummarizerConfig {
    fn default() -> Self {
        SummarizerConfig {
            kind: BackendKind::Mock,
            endpoint: None,
            timeout_ms: default_remote_timeout_ms(),
            max_in_flight: default_max_in_flight(),
            max_cases: default_max_cases(),
            prompt_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub detection: DetectionConfig,
    pub providers: ProvidersConfig,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub summarizer: SummarizerConfig,
    pub buffers: BuffersConfig,
}

fn require_endpoint(what: &str, endpoint: &Option<String>) -> Result<String> {
    endpoint
        .clone()
        .ok_or_else(|| Error::Config(format!("remote {what} requires an endpoint")))
}

impl EngineConfig {
    /// Mock providers and backend with the given buffer paths.
    pub fn mock(seed: u64, dimension: usize, speech: PathBuf, multimodal: PathBuf) -> Self {
        EngineConfig {
            detection: DetectionConfig::default(),
            providers: ProvidersConfig {
                text: EmbeddingProviderConfig::mock(seed, dimension),
                image: EmbeddingProviderConfig::mock(seed, dimension),
            },
            backend: BackendConfig::default(),
            summarizer: SummarizerConfig::default(),
            buffers: BuffersConfig {
                speech,
                multimodal,
                store_noise: false,
                unified: None,
            },
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut config: EngineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.resolve(base_dir);
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.buffers.speech);
        fix(&mut self.buffers.multimodal);
        if let Some(p) = self.buffers.unified.as_mut() {
            fix(p);
        }
        if let Some(p) = self.backend.prompt_dir.as_mut() {
            fix(p);
        }
        if let Some(p) = self.summarizer.prompt_dir.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.detection.validate()?;
        self.providers.text.validate()?;
        self.providers.image.validate()?;
        if self.backend.kind == BackendKind::Remote {
            require_endpoint("model backend", &self.backend.endpoint)?;
        }
        if self.summarizer.kind == BackendKind::Remote {
            require_endpoint("summarizer", &self.summarizer.endpoint)?;
        }
        Ok(())
    }

    pub fn build_providers(&self) -> Result<Providers> {
        let text = self.providers.text.build()?;
        let image = if self.providers.image == self.providers.text {
            text.clone()
        } else {
            self.providers.image.build()?
        };
        Ok(Providers::new(text, image))
    }

    pub fn build_backend(&self) -> Result<Arc<dyn ModelBackend>> {
        Ok(match self.backend.kind {
            BackendKind::Mock => Arc::new(MockModelBackend::replying(self.backend.reply.clone())),
            BackendKind::Remote => Arc::new(RemoteModelBackend::new(
                require_endpoint("model backend", &self.backend.endpoint)?,
                Duration::from_millis(self.backend.timeout_ms),
                self.backend.max_in_flight,
            )?),
        })
    }

    pub fn detection_prompt(&self) -> Result<DetectionPrompt> {
        match &self.backend.prompt_dir {
            Some(dir) => DetectionPrompt::load_dir(dir),
            None => Ok(DetectionPrompt::default()),
        }
    }

    /// Loads both buffers from their configured paths and assembles the detector.
    pub fn build_detector(&self, providers: Providers) -> Result<Detector> {
        let speech = SpeechBuffer::load(&self.buffers.speech)?;
        let multimodal = MultiModalBuffer::load(&self.buffers.multimodal)?;
        Ok(Detector::new(
            providers,
            Arc::new(speech),
            Arc::new(multimodal),
            self.build_backend()?,
            self.detection.clone(),
        )?
        .with_prompt(self.detection_prompt()?))
    }

    pub fn build_summarizer(&self) -> Result<Arc<dyn Summarizer>> {
        Ok(match self.summarizer.kind {
            BackendKind::Mock => Arc::new(MockSummarizer),
            BackendKind::Remote => Arc::new(RemoteSummarizer::new(
                require_endpoint("summarizer", &self.summarizer.endpoint)?,
                Duration::from_millis(self.summarizer.timeout_ms),
                self.summarizer.max_in_flight,
            )?),
        })
    }

    /// Opens (or creates) the journals under `store_dir`.
    pub fn build_preference_engine(&self, store_dir: &Path) -> Result<PreferenceEngine> {
        let store = Arc::new(PreferenceStore::open(store_dir)?);
        let prompts = match &self.summarizer.prompt_dir {
            Some(dir) => PreferencePrompts::load_dir(dir)?,
            None => PreferencePrompts::default(),
        };
        Ok(PreferenceEngine::new(store, self.build_summarizer()?)
            .with_prompts(prompts)
            .with_max_cases(self.summarizer.max_cases))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
[detection]
w = 0.87
tau_s = 0.88
tau_t = 0.93

[providers.text]
kind = "mock"
seed = 7

[providers.image]
kind = "mock"
seed = 7
dimension = 128

[backend]
kind = "mock"
reply = "goal_absence"

[buffers]
speech = "b/speech.json"
multimodal = "/abs/mm.json"
"#;

    #[test]
    fn parses_and_resolves_paths() {
        let config = EngineConfig::from_toml(SAMPLE, Path::new("/etc/commet")).unwrap();
        assert_eq!(config.detection.tau_t, 0.93);
        assert_eq!(config.buffers.speech, PathBuf::from("/etc/commet/b/speech.json"));
        assert_eq!(config.buffers.multimodal, PathBuf::from("/abs/mm.json"));
        assert_eq!(config.summarizer.max_cases, 20);
        let providers = config.build_providers().unwrap();
        assert_eq!(providers.image.dimension(), 128);
        assert_eq!(providers.text.dimension(), 256);
    }

    #[test]
    fn remote_without_endpoint_is_rejected() {
        let text = SAMPLE.replace("kind = \"mock\"\nreply", "kind = \"remote\"\nreply");
        assert!(matches!(EngineConfig::from_toml(&text, Path::new(".")), Err(Error::Config(_))));
    }

    #[test]
    fn missing_threshold_is_rejected() {
        let text = SAMPLE.replace("tau_s = 0.88\n", "");
        assert!(EngineConfig::from_toml(&text, Path::new(".")).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let config = EngineConfig::mock(1, 64, "s.json".into(), "m.json".into());
        let text = config.to_toml().unwrap();
        let back = EngineConfig::from_toml(&text, Path::new("")).unwrap();
        assert_eq!(back, config);
    }
}
