use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::{EmbeddingProvider, EmbeddingProviderConfig, EmbeddingVector};
use crate::error::{Error, Result};
use crate::http;
use crate::limit::InflightLimiter;
use crate::types::ImageRef;

/// Embedding service client.
///
/// Protocol:
/// * `GET {endpoint}/info` → `{"provider_id": "...", "dimension": n}` (handshake)
/// * `POST {endpoint}/embed` with `{"kind": "text"|"image", "payload": ...}` →
///   `{"vector": [...]}`. Image payloads are base64-encoded file bytes.
///
/// Vectors are L2-normalized locally regardless of what the server returns.
pub struct RemoteProvider {
    endpoint: String,
    provider_id: String,
    dimension: usize,
    client: reqwest::blocking::Client,
    limiter: InflightLimiter,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ProviderInfo {
    pub provider_id: String,
    pub dimension: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub kind: String,
    pub payload: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub vector: Vec<f64>,
}

impl RemoteProvider {
    pub fn connect(config: &EmbeddingProviderConfig) -> Result<Self> {
        let endpoint = config
            .endpoint
            .clone()
            .ok_or_else(|| Error::Config("remote embedding provider requires an endpoint".into()))?;
        let client = http::client(config.timeout())?;
        let info: ProviderInfo = http::get_json(&client, &http::join(&endpoint, "info"))?;
        if info.dimension == 0 {
            return Err(Error::Config(format!("{endpoint} reported dimension 0")));
        }
        if let Some(expected) = config.dimension.filter(|d| *d != info.dimension) {
            return Err(Error::Config(format!(
                "{endpoint} serves dimension {}, config expects {expected}",
                info.dimension
            )));
        }
        Ok(RemoteProvider {
            provider_id: info.provider_id,
            dimension: info.dimension,
            client,
            limiter: InflightLimiter::new(config.max_in_flight),
            endpoint,
        })
    }

    fn embed(&self, kind: &str, payload: String) -> Result<EmbeddingVector> {
        let url = http::join(&self.endpoint, "embed");
        let response: EmbedResponse = {
            let _slot = self.limiter.acquire();
            http::post_json(
                &self.client,
                &url,
                &EmbedRequest {
                    kind: kind.to_string(),
                    payload,
                },
            )?
        };
        if response.vector.len() != self.dimension {
            return Err(Error::Remote {
                endpoint: url,
                status: None,
                message: format!(
                    "returned dimension {} but handshake said {}",
                    response.vector.len(),
                    self.dimension
                ),
                retriable: false,
            });
        }
        EmbeddingVector::normalized(response.vector, self.provider_id.as_str())
    }
}

impl EmbeddingProvider for RemoteProvider {
    fn provider_id(&self) -> &str {
        &self.provider_id
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        if text.trim().is_empty() {
            return Err(Error::InvalidArgument("cannot embed empty text".into()));
        }
        self.embed("text", text.to_string())
    }

    fn embed_image(&self, image: &ImageRef) -> Result<EmbeddingVector> {
        let bytes = image.load()?;
        self.embed("image", BASE64.encode(&bytes))
    }
}
