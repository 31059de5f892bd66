//! Text and image embedding providers.
//!
//! Every provider returns unit-norm vectors of a single, fixed dimension. Two
//! implementations exist: a deterministic hashing [`MockProvider`] for offline use and
//! a [`RemoteProvider`] speaking a small JSON protocol over HTTP.

mod mock;
mod remote;

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::ImageRef;

pub use mock::MockProvider;
pub use remote::{EmbedRequest, EmbedResponse, ProviderInfo, RemoteProvider};

/// Raw vectors with a norm below this are rejected instead of normalized.
pub const MIN_RAW_NORM: f64 = 1e-12;

pub const DEFAULT_MOCK_DIMENSION: usize = 256;

/// A unit-norm embedding tagged with the provider that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Arc<[f64]>,
    provider_id: Arc<str>,
}

impl EmbeddingVector {
    /// L2-normalizes `raw`. Fails on empty, non-finite or (near) zero vectors.
    pub fn normalized(raw: Vec<f64>, provider_id: impl Into<Arc<str>>) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::InvalidArgument("embedding has zero dimensions".into()));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("embedding contains non-finite values".into()));
        }
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < MIN_RAW_NORM {
            return Err(Error::InvalidArgument(format!(
                "embedding norm {norm:e} too small to normalize"
            )));
        }
        let values: Vec<f64> = raw.into_iter().map(|v| v / norm).collect();
        Ok(EmbeddingVector {
            values: values.into(),
            provider_id: provider_id.into(),
        })
    }

    /// Wraps values that are already unit-norm (within 1e-6), e.g. when loading a buffer.
    pub fn from_unit(values: Vec<f64>, provider_id: impl Into<Arc<str>>) -> Result<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if values.is_empty() || (norm - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "expected a unit-norm vector, got norm {norm}"
            )));
        }
        Ok(EmbeddingVector {
            values: values.into(),
            provider_id: provider_id.into(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn provider_id(&self) -> &str {
        &self.provider_id
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Computes embeddings for task prompts, speech and observation images.
pub trait EmbeddingProvider: Send + Sync {
    fn provider_id(&self) -> &str;
    fn dimension(&self) -> usize;
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector>;
    fn embed_image(&self, image: &ImageRef) -> Result<EmbeddingVector>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Mock,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingProviderConfig {
    pub kind: ProviderKind,
    /// Mock: output dimension (default 256). Remote: optional expected dimension,
    /// checked against the handshake.
    #[serde(default)]
    pub dimension: Option<usize>,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
}

fn default_timeout_ms() -> u64 {
    10_000
}

fn default_max_in_flight() -> usize {
    8
}

impl EmbeddingProviderConfig {
    pub fn mock(seed: u64, dimension: usize) -> Self {
        EmbeddingProviderConfig {
            kind: ProviderKind::Mock,
            dimension: Some(dimension),
            endpoint: None,
            timeout_ms: default_timeout_ms(),
            seed: Some(seed),
            max_in_flight: default_max_in_flight(),
        }
    }

    pub fn remote(endpoint: impl Into<String>) -> Self {
        EmbeddingProviderConfig {
            kind: ProviderKind::Remote,
            dimension: None,
            endpoint: Some(endpoint.into()),
            timeout_ms: default_timeout_ms(),
            seed: None,
            max_in_flight: default_max_in_flight(),
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dimension == Some(0) {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        match self.kind {
            ProviderKind::Mock if self.seed.is_none() => {
                Err(Error::Config("mock embedding provider requires a seed".into()))
            }
            ProviderKind::Remote if self.endpoint.is_none() => {
                Err(Error::Config("remote embedding provider requires an endpoint".into()))
            }
            _ => Ok(()),
        }
    }

    /// Instantiates the provider. Remote providers perform their handshake here.
    pub fn build(&self) -> Result<Arc<dyn EmbeddingProvider>> {
        self.validate()?;
        Ok(match self.kind {
            ProviderKind::Mock => Arc::new(MockProvider::new(
                self.seed.unwrap_or_default(),
                self.dimension.unwrap_or(DEFAULT_MOCK_DIMENSION),
            )?),
            ProviderKind::Remote => Arc::new(RemoteProvider::connect(self)?),
        })
    }
}

/// Text and image providers used together by the buffers and the detector.
///
/// The two modalities may have different dimensions; scores are fused, never vectors.
#[derive(Clone)]
pub struct Providers {
    pub text: Arc<dyn EmbeddingProvider>,
    pub image: Arc<dyn EmbeddingProvider>,
}

impl Providers {
    pub fn new(text: Arc<dyn EmbeddingProvider>, image: Arc<dyn EmbeddingProvider>) -> Self {
        Providers { text, image }
    }

    /// Mock providers for both modalities.
    pub fn mock(seed: u64, dimension: usize) -> Result<Self> {
        let provider: Arc<dyn EmbeddingProvider> = Arc::new(MockProvider::new(seed, dimension)?);
        Ok(Providers {
            text: provider.clone(),
            image: provider,
        })
    }
}

impl std::fmt::Debug for Providers {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Providers")
            .field("text", &self.text.provider_id())
            .field("image", &self.image.provider_id())
            .finish()
    }
}
