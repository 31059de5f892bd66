//! Conflict detection and preference prediction for household robot tasks.
//!
//! Detection runs a speech retrieval gate, a fused prompt/observation retrieval gate
//! and, for low-confidence cases, a pluggable multi-modal model. Once a conflict is
//! known, stored user cases of the same type drive a summarizer that picks one of the
//! four canonical solutions for that type.

pub mod config;
pub mod dataset;
pub mod detection;
pub mod embedding;
pub mod error;
pub mod eval;
mod http;
pub mod limit;
pub mod preference;
pub mod prompt;
pub mod retrieval;
pub mod synth;
pub mod types;

pub use config::EngineConfig;
pub use dataset::Dataset;
pub use detection::{
    ConflictDetector, DetectionConfig, DetectionMethod, DetectionResult, Detector, MockModelBackend, ModelBackend,
};
pub use embedding::{EmbeddingProvider, EmbeddingVector, MockProvider, Providers};
pub use error::{Error, Result};
pub use preference::{PreferenceEngine, PreferencePrediction, PreferenceStore, Scenario, UserCase};
pub use retrieval::{FusionWeight, MultiModalBuffer, RetrievalHit, SpeechBuffer};
pub use types::{catalog_options, ConflictLabel, DatasetRecord, DetectionInput, EmergencyLevel, ImageRef, SolutionOption};
