//! Evaluation harness: split, metrics, sweeps, retrieval-only baselines and
//! fine-tune export.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use chrono::Utc;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::detection::{ConflictDetector, DetectionConfig, DetectionMethod, DetectionResult, Detector, StageTiming, Stage};
use crate::embedding::Providers;
use crate::error::{Error, Result};
use crate::prompt::DetectionPrompt;
use crate::retrieval::{
    speech_score, task_attribute_score, FusionWeight, MultiModalBuffer, PromptStyle, SpeechBuffer,
};
use crate::types::{ConflictLabel, DatasetRecord, DetectionInput};

/// Percentage rounded half-up to two decimals, computed in integers so that e.g.
/// 11/12 is exactly 91.67. `None` for an empty partition.
pub fn percent(correct: u64, total: u64) -> Option<f64> {
    if total == 0 {
        return None;
    }
    let hundredths = (20_000 * correct + total) / (2 * total);
    Some(hundredths as f64 / 100.0)
}

fn round4(x: f64) -> f64 {
    (x * 10_000.0).round() / 10_000.0
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub normal_total: u64,
    pub normal_correct: u64,
    pub anomaly_total: u64,
    pub anomaly_correct: u64,
}

impl Counts {
    pub fn add(&mut self, gold: ConflictLabel, correct: bool) {
        if gold.is_anomaly() {
            self.anomaly_total += 1;
            self.anomaly_correct += u64::from(correct);
        } else {
            self.normal_total += 1;
            self.normal_correct += u64::from(correct);
        }
    }

    pub fn total(&self) -> u64 {
        self.normal_total + self.anomaly_total
    }

    pub fn correct(&self) -> u64 {
        self.normal_correct + self.anomaly_correct
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodCounts {
    pub speech_retrieval: u64,
    pub task_retrieval: u64,
    pub model_inference: u64,
}

impl MethodCounts {
    pub fn add(&mut self, method: DetectionMethod) {
        match method {
            DetectionMethod::SpeechRetrieval => self.speech_retrieval += 1,
            DetectionMethod::TaskRetrieval => self.task_retrieval += 1,
            DetectionMethod::ModelInference => self.model_inference += 1,
        }
    }
}

/// Accuracy in percent (two decimals) and mean latency in seconds (four decimals).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub total_acc: Option<f64>,
    pub normal_acc: Option<f64>,
    pub anomaly_acc: Option<f64>,
    pub mean_latency_s: f64,
    pub counts: Counts,
    pub methods: MethodCounts,
    /// Records whose detection failed; they count as incorrect.
    pub errors: u64,
}

impl Metrics {
    pub fn from_counts(counts: Counts, mean_latency_s: f64) -> Self {
        Metrics {
            total_acc: percent(counts.correct(), counts.total()),
            normal_acc: percent(counts.normal_correct, counts.normal_total),
            anomaly_acc: percent(counts.anomaly_correct, counts.anomaly_total),
            mean_latency_s: round4(mean_latency_s),
            counts,
            methods: MethodCounts::default(),
            errors: 0,
        }
    }

    pub fn table(&self) -> String {
        let pct = |p: Option<f64>| p.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"));
        format!(
            "Total Acc.  Normal Acc.  Anomaly Acc.  Time (s)\n{:>10}  {:>11}  {:>12}  {:>8.4}\n",
            pct(self.total_acc),
            pct(self.normal_acc),
            pct(self.anomaly_acc),
            self.mean_latency_s
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordOutcome {
    pub record_id: String,
    pub gold: ConflictLabel,
    pub predicted: Option<ConflictLabel>,
    pub method: Option<DetectionMethod>,
    pub latency_s: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: Metrics,
    pub outcomes: Vec<RecordOutcome>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Worker threads. Ignored (forced to 1) when `measure_latency` is set.
    pub parallelism: usize,
    pub measure_latency: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            parallelism: 1,
            measure_latency: true,
        }
    }
}

fn run_one(detector: &dyn ConflictDetector, dataset: &Dataset, record: &DatasetRecord) -> RecordOutcome {
    let input = dataset.input(record);
    let t0 = Instant::now();
    let result = detector.detect(&input);
    let latency_s = t0.elapsed().as_secs_f64();
    match result {
        Ok(r) => RecordOutcome {
            record_id: record.id.clone(),
            gold: record.label,
            predicted: Some(r.label),
            method: Some(r.method),
            latency_s,
            error: None,
        },
        Err(e) => {
            log::warn!("detection failed on record {}: {e}", record.id);
            RecordOutcome {
                record_id: record.id.clone(),
                gold: record.label,
                predicted: None,
                method: None,
                latency_s,
                error: Some(e.to_string()),
            }
        }
    }
}

/// Runs the detector on every record and aggregates. Detector errors count as
/// incorrect predictions and do not stop the run.
pub fn evaluate(test: &Dataset, detector: &dyn ConflictDetector, options: &EvalOptions) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("test set is empty".into()));
    }
    let workers = if options.measure_latency { 1 } else { options.parallelism.max(1) };
    let outcomes: Vec<RecordOutcome> = if workers == 1 {
        test.records.iter().map(|r| run_one(detector, test, r)).collect()
    } else {
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<RecordOutcome>>> = Mutex::new(vec![None; test.len()]);
        std::thread::scope(|scope| {
            for _ in 0..workers.min(test.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(record) = test.records.get(i) else { break };
                    let outcome = run_one(detector, test, record);
                    slots.lock()[i] = Some(outcome);
                });
            }
        });
        slots.into_inner().into_iter().map(|o| o.expect("every slot filled")).collect()
    };
    Ok(EvalReport {
        metrics: aggregate(&outcomes),
        outcomes,
    })
}

pub fn aggregate(outcomes: &[RecordOutcome]) -> Metrics {
    let mut counts = Counts::default();
    let mut methods = MethodCounts::default();
    let mut errors = 0;
    for o in outcomes {
        counts.add(o.gold, o.predicted == Some(o.gold));
        match o.method {
            Some(m) => methods.add(m),
            None => errors += 1,
        }
    }
    let mean = if outcomes.is_empty() {
        0.0
    } else {
        outcomes.iter().map(|o| o.latency_s).sum::<f64>() / outcomes.len() as f64
    };
    let mut metrics = Metrics::from_counts(counts, mean);
    metrics.methods = methods;
    metrics.errors = errors;
    metrics
}

/// Which records are held out for testing.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub trajectories: Vec<String>,
    pub statics: Vec<String>,
}

impl SplitPlan {
    /// Every trajectory of the first `tasks` distinct tasks (alphabetically) plus the
    /// first `statics` static record ids (alphabetically).
    pub fn first(records: &[DatasetRecord], tasks: usize, statics: usize) -> Self {
        let chosen: BTreeSet<&str> = records
            .iter()
            .filter(|r| r.trajectory_id.is_some())
            .map(|r| r.task.as_str())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .take(tasks)
            .collect();
        let trajectories: BTreeSet<String> = records
            .iter()
            .filter(|r| chosen.contains(r.task.as_str()))
            .filter_map(|r| r.trajectory_id.clone())
            .collect();
        let static_ids: BTreeSet<String> = records.iter().filter(|r| r.is_static()).map(|r| r.id.clone()).collect();
        SplitPlan {
            trajectories: trajectories.into_iter().collect(),
            statics: static_ids.into_iter().take(statics).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub buffer_train: Vec<DatasetRecord>,
    pub test: Vec<DatasetRecord>,
}

/// Splits whole trajectories and listed statics into the test side; record order is
/// preserved on both sides.
pub fn split_dataset(records: &[DatasetRecord], plan: &SplitPlan) -> Result<DatasetSplit> {
    let trajectories: BTreeSet<&str> = plan.trajectories.iter().map(String::as_str).collect();
    let statics: BTreeSet<&str> = plan.statics.iter().map(String::as_str).collect();
    let known_traj: BTreeSet<&str> = records.iter().filter_map(|r| r.trajectory_id.as_deref()).collect();
    let known_static: BTreeSet<&str> = records.iter().filter(|r| r.is_static()).map(|r| r.id.as_str()).collect();
    let missing: Vec<&str> = trajectories
        .difference(&known_traj)
        .chain(statics.difference(&known_static))
        .copied()
        .collect();
    if !missing.is_empty() {
        return Err(Error::NotFound {
            what: "hold-out id",
            id: missing.join(", "),
        });
    }
    let (test, buffer_train): (Vec<_>, Vec<_>) = records.iter().cloned().partition(|r| match &r.trajectory_id {
        Some(t) => trajectories.contains(t.as_str()),
        None => statics.contains(r.id.as_str()),
    });
    Ok(DatasetSplit { buffer_train, test })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameter {
    W,
    TauS,
    TauT,
}

impl Parameter {
    pub fn as_str(self) -> &'static str {
        match self {
            Parameter::W => "w",
            Parameter::TauS => "tau_s",
            Parameter::TauT => "tau_t",
        }
    }

    /// 0.00-1.00 for `w`, 0.50-1.00 for the thresholds, step 0.01.
    pub fn default_grid(self) -> Vec<f64> {
        let start = if self == Parameter::W { 0 } else { 50 };
        (start..=100).map(|i| f64::from(i) / 100.0).collect()
    }

    pub fn apply(self, config: &DetectionConfig, value: f64) -> Result<DetectionConfig> {
        let mut next = config.clone();
        match self {
            Parameter::W => next.w = FusionWeight::new(value)?,
            Parameter::TauS => next.tau_s = value,
            Parameter::TauT => next.tau_t = value,
        }
        next.validate()?;
        Ok(next)
    }
}

impl std::str::FromStr for Parameter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "w" => Ok(Parameter::W),
            "tau_s" => Ok(Parameter::TauS),
            "tau_t" => Ok(Parameter::TauT),
            _ => Err(Error::InvalidArgument(format!("unknown parameter {s:?}; expected w, tau_s or tau_t"))),
        }
    }
}

/// Inclusive grid `start, start+step, ..., end`, computed by index to avoid drift.
pub fn grid(start: f64, end: f64, step: f64) -> Result<Vec<f64>> {
    if step.is_nan() || step <= 0.0 || !start.is_finite() || !end.is_finite() || end < start {
        return Err(Error::InvalidArgument(format!("bad grid {start}:{end}:{step}")));
    }
    let n = ((end - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9).collect())
}

/// A detector that can be re-parameterized for a sweep.
pub trait Tunable {
    fn with_parameter(&self, parameter: Parameter, value: f64) -> Result<Box<dyn ConflictDetector>>;
}

impl Tunable for Detector {
    fn with_parameter(&self, parameter: Parameter, value: f64) -> Result<Box<dyn ConflictDetector>> {
        Ok(Box::new(self.with_config(parameter.apply(self.config(), value)?)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub parameter: Parameter,
    pub grid: Vec<f64>,
    pub points: Vec<SweepPoint>,
    pub selected: f64,
}

impl SweepResult {
    /// `value,total_acc,normal_acc,anomaly_acc,mean_latency_s,model_inference`.
    pub fn to_csv(&self) -> String {
        let pct = |p: Option<f64>| p.map_or_else(String::new, |v| format!("{v:.2}"));
        let mut out = format!("{},total_acc,normal_acc,anomaly_acc,mean_latency_s,model_inference\n", self.parameter.as_str());
        for p in &self.points {
            let _ = writeln!(
                out,
                "{:.2},{},{},{},{:.4},{}",
                p.value,
                pct(p.metrics.total_acc),
                pct(p.metrics.normal_acc),
                pct(p.metrics.anomaly_acc),
                p.metrics.mean_latency_s,
                p.metrics.methods.model_inference
            );
        }
        out
    }
}

/// Picks the best point: highest total accuracy; among totals within `tolerance`
/// of the best, the highest anomaly accuracy; then the lowest mean latency; then the
/// smallest value.
pub fn select(points: &[SweepPoint], tolerance: f64) -> Option<f64> {
    let key = |p: Option<f64>| p.unwrap_or(f64::NEG_INFINITY);
    let best_total = points.iter().map(|p| key(p.metrics.total_acc)).fold(f64::NEG_INFINITY, f64::max);
    let close: Vec<&SweepPoint> = points
        .iter()
        .filter(|p| best_total - key(p.metrics.total_acc) <= tolerance + 1e-9)
        .collect();
    let best_anomaly = close.iter().map(|p| key(p.metrics.anomaly_acc)).fold(f64::NEG_INFINITY, f64::max);
    close
        .into_iter()
        .filter(|p| key(p.metrics.anomaly_acc) >= best_anomaly - 1e-9)
        .min_by(|a, b| {
            a.metrics
                .mean_latency_s
                .total_cmp(&b.metrics.mean_latency_s)
                .then(a.value.total_cmp(&b.value))
        })
        .map(|p| p.value)
}

/// Evaluates `target` at every grid value with the other parameters fixed.
pub fn sweep(
    parameter: Parameter,
    grid: &[f64],
    test: &Dataset,
    target: &dyn Tunable,
    options: &EvalOptions,
    tolerance: f64,
) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("sweep grid is empty".into()));
    }
    let mut points = Vec::with_capacity(grid.len());
    for &value in grid {
        let detector = target.with_parameter(parameter, value)?;
        let report = evaluate(test, detector.as_ref(), options)?;
        log::info!(
            "{}={value:.2}: total {:?} anomaly {:?}",
            parameter.as_str(),
            report.metrics.total_acc,
            report.metrics.anomaly_acc
        );
        points.push(SweepPoint {
            value,
            metrics: report.metrics,
        });
    }
    let selected = select(&points, tolerance).expect("grid is non-empty");
    Ok(SweepResult {
        parameter,
        grid: grid.to_vec(),
        points,
        selected,
    })
}

fn retrieval_result(
    start: Instant,
    stages: Vec<StageTiming>,
    label: ConflictLabel,
    method: DetectionMethod,
    speech: Option<f64>,
    task: Option<f64>,
    entry: String,
) -> DetectionResult {
    DetectionResult {
        label,
        method,
        speech_score: speech,
        task_score: task,
        matched_entry_id: Some(entry),
        latency_s: start.elapsed().as_secs_f64(),
        stages,
        timestamp: Utc::now(),
    }
}

fn timed<T>(stages: &mut Vec<StageTiming>, stage: Stage, f: impl FnOnce() -> T) -> T {
    let t0 = Instant::now();
    let out = f();
    stages.push(StageTiming {
        stage,
        seconds: t0.elapsed().as_secs_f64(),
    });
    out
}

/// Single retrieval over a buffer whose prompts include the speech text; the label
/// is always the best match, no threshold and no model.
#[derive(Clone)]
pub struct UnifiedRetrieval {
    providers: Providers,
    buffer: Arc<MultiModalBuffer>,
    w: FusionWeight,
}

impl UnifiedRetrieval {
    pub fn new(providers: Providers, buffer: Arc<MultiModalBuffer>, w: FusionWeight) -> Result<Self> {
        if buffer.prompt_style() != PromptStyle::Unified {
            return Err(Error::Config("unified retrieval needs a buffer built with unified prompts".into()));
        }
        if buffer.is_empty() {
            return Err(Error::EmptyBuffer("multi-modal"));
        }
        Ok(UnifiedRetrieval { providers, buffer, w })
    }
}

impl ConflictDetector for UnifiedRetrieval {
    fn detect(&self, input: &DetectionInput) -> Result<DetectionResult> {
        let start = Instant::now();
        input.validate()?;
        let mut stages = Vec::with_capacity(2);
        let (p, o) = timed(&mut stages, Stage::TaskEmbedding, || {
            let prompt = PromptStyle::Unified.render(&input.task, &input.step, input.speech());
            Ok::<_, Error>((self.providers.text.embed_text(&prompt)?, self.providers.image.embed_image(&input.image)?))
        })?;
        let hit = timed(&mut stages, Stage::TaskRetrieval, || task_attribute_score(&p, &o, &self.buffer, self.w))?;
        Ok(retrieval_result(start, stages, hit.entry_label, DetectionMethod::TaskRetrieval, None, Some(hit.score), hit.entry_id))
    }
}

impl Tunable for UnifiedRetrieval {
    fn with_parameter(&self, parameter: Parameter, value: f64) -> Result<Box<dyn ConflictDetector>> {
        if parameter != Parameter::W {
            return Err(Error::InvalidArgument(format!(
                "unified retrieval has no {} parameter",
                parameter.as_str()
            )));
        }
        let mut next = self.clone();
        next.w = FusionWeight::new(value)?;
        Ok(Box::new(next))
    }
}

/// Metrics of the unified-prompt variant on `test`.
pub fn unified_retrieval_baseline(test: &Dataset, detector: &UnifiedRetrieval, options: &EvalOptions) -> Result<Metrics> {
    Ok(evaluate(test, detector, options)?.metrics)
}

/// Speech gate followed by the best multi-modal match, without any model fallback.
#[derive(Clone)]
pub struct SeparateRetrieval {
    providers: Providers,
    speech: Arc<SpeechBuffer>,
    multimodal: Arc<MultiModalBuffer>,
    w: FusionWeight,
    tau_s: f64,
}

impl SeparateRetrieval {
    pub fn new(
        providers: Providers,
        speech: Arc<SpeechBuffer>,
        multimodal: Arc<MultiModalBuffer>,
        w: FusionWeight,
        tau_s: f64,
    ) -> Result<Self> {
        if multimodal.prompt_style() != PromptStyle::Separate {
            return Err(Error::Config("separate retrieval needs a buffer built with separate prompts".into()));
        }
        if multimodal.is_empty() {
            return Err(Error::EmptyBuffer("multi-modal"));
        }
        Ok(SeparateRetrieval {
            providers,
            speech,
            multimodal,
            w,
            tau_s,
        })
    }

    pub fn from_detector(detector: &Detector) -> Result<Self> {
        SeparateRetrieval::new(
            detector.providers().clone(),
            Arc::new(detector.speech_buffer().clone()),
            Arc::new(detector.multimodal_buffer().clone()),
            detector.config().w,
            detector.config().tau_s,
        )
    }
}

impl ConflictDetector for SeparateRetrieval {
    fn detect(&self, input: &DetectionInput) -> Result<DetectionResult> {
        let start = Instant::now();
        input.validate()?;
        let mut stages = Vec::with_capacity(4);
        let mut s_score = None;
        if let Some(speech) = input.speech().filter(|_| !self.speech.is_empty()) {
            let q = timed(&mut stages, Stage::SpeechEmbedding, || self.providers.text.embed_text(speech))?;
            let hit = timed(&mut stages, Stage::SpeechRetrieval, || speech_score(&q, &self.speech))?;
            if hit.score > self.tau_s {
                return Ok(retrieval_result(start, stages, hit.entry_label, DetectionMethod::SpeechRetrieval, Some(hit.score), None, hit.entry_id));
            }
            s_score = Some(hit.score);
        }
        let (p, o) = timed(&mut stages, Stage::TaskEmbedding, || {
            let prompt = PromptStyle::Separate.render(&input.task, &input.step, None);
            Ok::<_, Error>((self.providers.text.embed_text(&prompt)?, self.providers.image.embed_image(&input.image)?))
        })?;
        let hit = timed(&mut stages, Stage::TaskRetrieval, || task_attribute_score(&p, &o, &self.multimodal, self.w))?;
        Ok(retrieval_result(start, stages, hit.entry_label, DetectionMethod::TaskRetrieval, s_score, Some(hit.score), hit.entry_id))
    }
}

impl Tunable for SeparateRetrieval {
    fn with_parameter(&self, parameter: Parameter, value: f64) -> Result<Box<dyn ConflictDetector>> {
        let mut next = self.clone();
        match parameter {
            Parameter::W => next.w = FusionWeight::new(value)?,
            Parameter::TauS if value.is_finite() && value >= 0.0 => next.tau_s = value,
            Parameter::TauS => return Err(Error::Config(format!("tau_s must be a finite value >= 0, got {value}"))),
            Parameter::TauT => {
                return Err(Error::InvalidArgument("separate retrieval has no tau_t parameter".into()))
            }
        }
        Ok(Box::new(next))
    }
}

/// Writes one chat-format line per record: system instruction, user turn (image
/// reference plus task/step/speech text) and the canonical label as the answer.
pub fn export_finetune(dataset: &Dataset, records: &[DatasetRecord], prompt: &DetectionPrompt, out_path: &Path) -> Result<usize> {
    if let Some(parent) = out_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = std::fs::File::create(out_path).map_err(|e| Error::io(out_path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for record in records {
        let input = dataset.input(record);
        let line = serde_json::json!({
            "id": record.id,
            "messages": [
                { "role": "system", "content": prompt.system() },
                {
                    "role": "user",
                    "content": [
                        { "type": "image", "image": record.image_path(&dataset.root).to_string_lossy() },
                        { "type": "text", "text": prompt.render_user(&input) },
                    ],
                },
                { "role": "assistant", "content": record.label.as_str() },
            ]
        });
        serde_json::to_writer(&mut out, &line).map_err(|e| Error::json("fine-tune record", e))?;
        out.write_all(b"\n").map_err(|e| Error::io(out_path, e))?;
    }
    out.flush().map_err(|e| Error::io(out_path, e))?;
    Ok(records.len())
}

/// One published row of (total, normal, anomaly) accuracy percentages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PublishedAccuracy {
    pub total: f64,
    pub normal: f64,
    pub anomaly: f64,
}

fn matches(pct: f64, correct: u64, total: u64) -> bool {
    percent(correct, total).is_some_and(|p| (p - pct).abs() < 1e-6)
}

/// All (normal_total, anomaly_total) pairs up to `max_per_class` for which every row
/// can be reproduced by some integer counts at two-decimal rounding, ordered by
/// overall size then normal_total. The first entry is the minimal solution.
pub fn consistent_totals(rows: &[PublishedAccuracy], max_per_class: u64) -> Vec<(u64, u64)> {
    let candidates = |pct: f64, total: u64| -> Vec<u64> {
        let guess = (pct * total as f64 / 100.0).round() as i64;
        (guess - 1..=guess + 1)
            .filter(|c| *c >= 0 && *c as u64 <= total)
            .map(|c| c as u64)
            .filter(|c| matches(pct, *c, total))
            .collect()
    };
    let mut out = Vec::new();
    for nt in 1..=max_per_class {
        for at in 1..=max_per_class {
            let ok = rows.iter().all(|row| {
                candidates(row.normal, nt).into_iter().any(|nc| {
                    candidates(row.anomaly, at)
                        .into_iter()
                        .any(|ac| matches(row.total, nc + ac, nt + at))
                })
            });
            if ok {
                out.push((nt, at));
            }
        }
    }
    out.sort_by_key(|(n, a)| (n + a, *n));
    out
}
