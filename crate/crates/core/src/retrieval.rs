//! Speech and multi-modal retrieval buffers and their max-similarity scores.
//!
//! The speech score is the best cosine between the speech query and any stored
//! utterance. The task-attribute score fuses, per entry, prompt similarity and
//! observation similarity with a convex weight `w`, then takes the best entry.
//! Both are exact linear scans.

use std::cmp::Ordering;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingProvider, EmbeddingVector, Providers};
use crate::error::{Error, Result};
use crate::types::{ConflictLabel, DatasetRecord};

const BUFFER_FORMAT: &str = "commet-buffer";
const BUFFER_VERSION: u32 = 1;

/// Cosine of two unit vectors: their dot product, clamped to [-1, 1].
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dimension() != b.dimension() {
        return Err(Error::InvalidArgument(format!(
            "dimension mismatch: {} vs {}",
            a.dimension(),
            b.dimension()
        )));
    }
    Ok(dot(a.values(), b.values()).clamp(-1.0, 1.0))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Convex weight of prompt similarity against observation similarity.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct FusionWeight(f64);

impl FusionWeight {
    pub fn new(w: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&w) {
            Ok(FusionWeight(w))
        } else {
            Err(Error::InvalidArgument(format!("fusion weight {w} outside [0, 1]")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }

    pub fn fuse(self, prompt_cos: f64, obs_cos: f64) -> f64 {
        (self.0 * prompt_cos + (1.0 - self.0) * obs_cos).clamp(-1.0, 1.0)
    }
}

impl TryFrom<f64> for FusionWeight {
    type Error = Error;

    fn try_from(w: f64) -> Result<Self> {
        FusionWeight::new(w)
    }
}

impl From<FusionWeight> for f64 {
    fn from(w: FusionWeight) -> f64 {
        w.0
    }
}

/// Best-scoring buffer entry for a query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub score: f64,
    pub entry_label: ConflictLabel,
    pub entry_id: String,
}

/// Keeps the running best; equal scores resolve to the lexicographically smallest id.
struct Best<'a> {
    score: f64,
    label: ConflictLabel,
    id: &'a str,
}

impl<'a> Best<'a> {
    fn offer(slot: &mut Option<Best<'a>>, score: f64, label: ConflictLabel, id: &'a str) {
        let better = match slot {
            None => true,
            Some(best) => match score.partial_cmp(&best.score) {
                Some(Ordering::Greater) => true,
                Some(Ordering::Equal) => id < best.id,
                _ => false,
            },
        };
        if better {
            *slot = Some(Best { score, label, id });
        }
    }

    fn into_hit(self) -> RetrievalHit {
        RetrievalHit {
            score: self.score,
            entry_label: self.label,
            entry_id: self.id.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeechBufferEntry {
    pub source_record_id: String,
    pub label: ConflictLabel,
    pub embedding: EmbeddingVector,
}

/// Text-only store of utterances.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeechBuffer {
    provider_id: String,
    dimension: usize,
    entries: Vec<SpeechBufferEntry>,
}

impl SpeechBuffer {
    pub fn new(provider_id: impl Into<String>, dimension: usize) -> Self {
        SpeechBuffer {
            provider_id: provider_id.into(),
            dimension,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, entry: SpeechBufferEntry) -> Result<()> {
        check_vector(&entry.embedding, &self.provider_id, self.dimension, "speech")?;
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[SpeechBufferEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn provider_id(&self) -> &str {
        &self.provider_id
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalBufferEntry {
    pub source_record_id: String,
    pub label: ConflictLabel,
    pub prompt_embedding: EmbeddingVector,
    pub obs_embedding: EmbeddingVector,
}

/// How task attributes are turned into the prompt text that gets embedded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    /// Task and step only; speech goes through the speech buffer.
    #[default]
    Separate,
    /// Speech text appended to the prompt (joint retrieval baseline).
    Unified,
}

/// Task attributes rendered for embedding.
pub fn render_prompt(task: &str, step: &str) -> String {
    format!("Task: {task}\nStep: {step}")
}

/// Joint-retrieval prompt: [`render_prompt`] plus the speech line when speech exists.
pub fn render_unified_prompt(task: &str, step: &str, speech: Option<&str>) -> String {
    match speech.filter(|s| !s.trim().is_empty()) {
        Some(speech) => format!("{}\nSpeech: {speech}", render_prompt(task, step)),
        None => render_prompt(task, step),
    }
}

impl PromptStyle {
    pub fn render(self, task: &str, step: &str, speech: Option<&str>) -> String {
        match self {
            PromptStyle::Separate => render_prompt(task, step),
            PromptStyle::Unified => render_unified_prompt(task, step, speech),
        }
    }
}

/// Store of (prompt embedding, observation embedding, label) triples.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalBuffer {
    prompt_style: PromptStyle,
    prompt_provider_id: String,
    prompt_dimension: usize,
    obs_provider_id: String,
    obs_dimension: usize,
    entries: Vec<MultiModalBufferEntry>,
}

impl MultiModalBuffer {
    pub fn new(
        prompt_style: PromptStyle,
        prompt_provider_id: impl Into<String>,
        prompt_dimension: usize,
        obs_provider_id: impl Into<String>,
        obs_dimension: usize,
    ) -> Self {
        MultiModalBuffer {
            prompt_style,
            prompt_provider_id: prompt_provider_id.into(),
            prompt_dimension,
            obs_provider_id: obs_provider_id.into(),
            obs_dimension,
            entries: Vec::new(),
        }
    }

    pub fn for_providers(providers: &Providers, prompt_style: PromptStyle) -> Self {
        MultiModalBuffer::new(
            prompt_style,
            providers.text.provider_id(),
            providers.text.dimension(),
            providers.image.provider_id(),
            providers.image.dimension(),
        )
    }

    pub fn push(&mut self, entry: MultiModalBufferEntry) -> Result<()> {
        check_vector(
            &entry.prompt_embedding,
            &self.prompt_provider_id,
            self.prompt_dimension,
            "prompt",
        )?;
        check_vector(&entry.obs_embedding, &self.obs_provider_id, self.obs_dimension, "observation")?;
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[MultiModalBufferEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn prompt_style(&self) -> PromptStyle {
        self.prompt_style
    }

    pub fn prompt_provider_id(&self) -> &str {
        &self.prompt_provider_id
    }

    pub fn obs_provider_id(&self) -> &str {
        &self.obs_provider_id
    }
}

fn check_vector(v: &EmbeddingVector, provider_id: &str, dimension: usize, what: &str) -> Result<()> {
    if v.dimension() != dimension {
        return Err(Error::InvalidArgument(format!(
            "{what} embedding has dimension {}, buffer expects {dimension}",
            v.dimension()
        )));
    }
    if v.provider_id() != provider_id {
        return Err(Error::InvalidArgument(format!(
            "{what} embedding from provider {:?}, buffer built with {provider_id:?}",
            v.provider_id()
        )));
    }
    Ok(())
}

/// Best cosine between `query` and any stored utterance.
pub fn speech_score(query: &EmbeddingVector, buffer: &SpeechBuffer) -> Result<RetrievalHit> {
    if buffer.is_empty() {
        return Err(Error::EmptyBuffer("speech"));
    }
    check_vector(query, &buffer.provider_id, buffer.dimension, "speech query")?;
    let q = query.values();
    let mut best = None;
    for entry in &buffer.entries {
        let score = dot(q, entry.embedding.values()).clamp(-1.0, 1.0);
        Best::offer(&mut best, score, entry.label, &entry.source_record_id);
    }
    Ok(best.map(Best::into_hit).expect("non-empty buffer"))
}

/// Best fused score `w·cos(prompt) + (1−w)·cos(obs)` over the buffer.
pub fn task_attribute_score(
    prompt_query: &EmbeddingVector,
    obs_query: &EmbeddingVector,
    buffer: &MultiModalBuffer,
    weight: FusionWeight,
) -> Result<RetrievalHit> {
    if buffer.is_empty() {
        return Err(Error::EmptyBuffer("multi-modal"));
    }
    check_vector(
        prompt_query,
        &buffer.prompt_provider_id,
        buffer.prompt_dimension,
        "prompt query",
    )?;
    check_vector(obs_query, &buffer.obs_provider_id, buffer.obs_dimension, "observation query")?;
    let (p, o) = (prompt_query.values(), obs_query.values());
    let mut best = None;
    for entry in &buffer.entries {
        let prompt_cos = dot(p, entry.prompt_embedding.values()).clamp(-1.0, 1.0);
        let obs_cos = dot(o, entry.obs_embedding.values()).clamp(-1.0, 1.0);
        Best::offer(
            &mut best,
            weight.fuse(prompt_cos, obs_cos),
            entry.label,
            &entry.source_record_id,
        );
    }
    Ok(best.map(Best::into_hit).expect("non-empty buffer"))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeechBufferOptions {
    /// Also store speech from Normal-labeled (noise) records.
    #[serde(default)]
    pub store_noise: bool,
}

/// Embeds the speech of every interaction record (and, optionally, of noise records).
pub fn build_speech_buffer(
    records: &[DatasetRecord],
    provider: &dyn EmbeddingProvider,
    options: SpeechBufferOptions,
) -> Result<SpeechBuffer> {
    let mut buffer = SpeechBuffer::new(provider.provider_id(), provider.dimension());
    for record in records {
        let Some(speech) = record.speech.as_deref().filter(|s| !s.trim().is_empty()) else {
            continue;
        };
        let keep = match record.label {
            ConflictLabel::HumanInteraction => true,
            ConflictLabel::Normal => options.store_noise,
            _ => false,
        };
        if !keep {
            continue;
        }
        let embedding = provider
            .embed_text(speech)
            .map_err(|e| build_error(record, e))?;
        buffer
            .push(SpeechBufferEntry {
                source_record_id: record.id.clone(),
                label: record.label,
                embedding,
            })
            .map_err(|e| build_error(record, e))?;
    }
    Ok(buffer)
}

/// One entry per record: rendered prompt embedding, image embedding, record label.
pub fn build_multimodal_buffer(
    records: &[DatasetRecord],
    image_root: &Path,
    providers: &Providers,
    prompt_style: PromptStyle,
) -> Result<MultiModalBuffer> {
    let mut buffer = MultiModalBuffer::for_providers(providers, prompt_style);
    for record in records {
        let input = record.to_input(image_root);
        let prompt = prompt_style.render(&record.task, &record.step, input.speech());
        let entry = providers
            .text
            .embed_text(&prompt)
            .and_then(|prompt_embedding| {
                let obs_embedding = providers.image.embed_image(&input.image)?;
                Ok(MultiModalBufferEntry {
                    source_record_id: record.id.clone(),
                    label: record.label,
                    prompt_embedding,
                    obs_embedding,
                })
            })
            .map_err(|e| build_error(record, e))?;
        buffer.push(entry).map_err(|e| build_error(record, e))?;
    }
    Ok(buffer)
}

fn build_error(record: &DatasetRecord, source: Error) -> Error {
    Error::BufferBuild {
        record_id: record.id.clone(),
        source: Box::new(source),
    }
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

/// Vectors are stored as base64 of little-endian f64 so they reload bit-exactly.
fn encode_vector(v: &EmbeddingVector) -> String {
    let mut bytes = Vec::with_capacity(v.dimension() * 8);
    for x in v.values() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    BASE64.encode(bytes)
}

fn decode_vector(encoded: &str, provider_id: &str, dimension: usize) -> Result<EmbeddingVector> {
    let bytes = BASE64
        .decode(encoded.as_bytes())
        .map_err(|e| Error::InvalidArgument(format!("bad vector encoding: {e}")))?;
    if bytes.len() != dimension * 8 {
        return Err(Error::InvalidArgument(format!(
            "vector has {} bytes, expected {}",
            bytes.len(),
            dimension * 8
        )));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    EmbeddingVector::from_unit(values, provider_id)
}

#[derive(Serialize, Deserialize)]
struct StoredSpeechEntry {
    id: String,
    label: ConflictLabel,
    vector: String,
}

#[derive(Serialize, Deserialize)]
struct StoredMultiModalEntry {
    id: String,
    label: ConflictLabel,
    prompt: String,
    obs: String,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum StoredBuffer {
    Speech {
        provider_id: String,
        dimension: usize,
        entries: Vec<StoredSpeechEntry>,
    },
    MultiModal {
        prompt_style: PromptStyle,
        prompt_provider_id: String,
        prompt_dimension: usize,
        obs_provider_id: String,
        obs_dimension: usize,
        entries: Vec<StoredMultiModalEntry>,
    },
}

#[derive(Serialize, Deserialize)]
struct BufferFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    buffer: StoredBuffer,
}

fn write_buffer_file(path: &Path, buffer: StoredBuffer) -> Result<()> {
    let file = BufferFile {
        format: BUFFER_FORMAT.into(),
        version: BUFFER_VERSION,
        buffer,
    };
    let json = serde_json::to_vec(&file).map_err(|e| Error::json("buffer", e))?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

fn read_buffer_file(path: &Path) -> Result<StoredBuffer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let file: BufferFile =
        serde_json::from_slice(&bytes).map_err(|e| Error::json(path.display().to_string(), e))?;
    if file.format != BUFFER_FORMAT {
        return Err(Error::InvalidArgument(format!(
            "{}: not a buffer file (format {:?})",
            path.display(),
            file.format
        )));
    }
    if file.version != BUFFER_VERSION {
        return Err(Error::InvalidArgument(format!(
            "{}: unsupported buffer version {}",
            path.display(),
            file.version
        )));
    }
    Ok(file.buffer)
}

impl SpeechBuffer {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        serde_json::to_vec(&self.stored()).map_err(|e| Error::json("speech buffer", e))
    }

    fn stored(&self) -> StoredBuffer {
        StoredBuffer::Speech {
            provider_id: self.provider_id.clone(),
            dimension: self.dimension,
            entries: self
                .entries
                .iter()
                .map(|e| StoredSpeechEntry {
                    id: e.source_record_id.clone(),
                    label: e.label,
                    vector: encode_vector(&e.embedding),
                })
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_buffer_file(path, self.stored())
    }

    pub fn load(path: &Path) -> Result<Self> {
        match read_buffer_file(path)? {
            StoredBuffer::Speech {
                provider_id,
                dimension,
                entries,
            } => {
                let mut buffer = SpeechBuffer::new(provider_id, dimension);
                for e in entries {
                    let embedding = decode_vector(&e.vector, &buffer.provider_id, dimension)?;
                    buffer.push(SpeechBufferEntry {
                        source_record_id: e.id,
                        label: e.label,
                        embedding,
                    })?;
                }
                Ok(buffer)
            }
            StoredBuffer::MultiModal { .. } => Err(Error::InvalidArgument(format!(
                "{} holds a multi-modal buffer, expected speech",
                path.display()
            ))),
        }
    }
}

impl MultiModalBuffer {
    fn stored(&self) -> StoredBuffer {
        StoredBuffer::MultiModal {
            prompt_style: self.prompt_style,
            prompt_provider_id: self.prompt_provider_id.clone(),
            prompt_dimension: self.prompt_dimension,
            obs_provider_id: self.obs_provider_id.clone(),
            obs_dimension: self.obs_dimension,
            entries: self
                .entries
                .iter()
                .map(|e| StoredMultiModalEntry {
                    id: e.source_record_id.clone(),
                    label: e.label,
                    prompt: encode_vector(&e.prompt_embedding),
                    obs: encode_vector(&e.obs_embedding),
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        serde_json::to_vec(&self.stored()).map_err(|e| Error::json("multi-modal buffer", e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_buffer_file(path, self.stored())
    }

    pub fn load(path: &Path) -> Result<Self> {
        match read_buffer_file(path)? {
            StoredBuffer::MultiModal {
                prompt_style,
                prompt_provider_id,
                prompt_dimension,
                obs_provider_id,
                obs_dimension,
                entries,
            } => {
                let mut buffer = MultiModalBuffer::new(
                    prompt_style,
                    prompt_provider_id,
                    prompt_dimension,
                    obs_provider_id,
                    obs_dimension,
                );
                for e in entries {
                    let prompt_embedding =
                        decode_vector(&e.prompt, &buffer.prompt_provider_id, prompt_dimension)?;
                    let obs_embedding = decode_vector(&e.obs, &buffer.obs_provider_id, obs_dimension)?;
                    buffer.push(MultiModalBufferEntry {
                        source_record_id: e.id,
                        label: e.label,
                        prompt_embedding,
                        obs_embedding,
                    })?;
                }
                Ok(buffer)
            }
            StoredBuffer::Speech { .. } => Err(Error::InvalidArgument(format!(
                "{} holds a speech buffer, expected multi-modal",
                path.display()
            ))),
        }
    }
}
