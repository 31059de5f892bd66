use std::path::Path;
use std::sync::Arc;

use commet_core::eval::{
    aggregate, consistent_totals, evaluate, export_finetune, percent, split_dataset, sweep, unified_retrieval_baseline,
    Counts, EvalOptions, Parameter, PublishedAccuracy, RecordOutcome, SeparateRetrieval, SplitPlan, UnifiedRetrieval,
};
use commet_core::detection::DetectionMethod;
use commet_core::prompt::DetectionPrompt;
use commet_core::retrieval::{build_multimodal_buffer, build_speech_buffer, PromptStyle, SpeechBufferOptions};
use commet_core::synth::{write_corpus, SynthConfig};
use commet_core::{
    ConflictLabel, Dataset, DatasetRecord, DetectionConfig, Detector, FusionWeight, MockModelBackend, Providers,
};
use proptest::prelude::*;

/// Half-up rounding to hundredths of a percent, by long division.
fn oracle_percent(c: u64, t: u64) -> f64 {
    let scaled = 10_000 * c;
    let (q, r) = (scaled / t, scaled % t);
    let bp = if 2 * r >= t { q + 1 } else { q };
    bp as f64 / 100.0
}

fn outcomes(nt: u64, nc: u64, at: u64, ac: u64) -> Vec<RecordOutcome> {
    let mut out = Vec::new();
    let mut push = |gold: ConflictLabel, ok: bool| {
        let predicted = if ok {
            gold
        } else if gold == ConflictLabel::Normal {
            ConflictLabel::GoalAbsence
        } else {
            ConflictLabel::Normal
        };
        out.push(RecordOutcome {
            record_id: format!("r{}", out.len()),
            gold,
            predicted: Some(predicted),
            method: Some(DetectionMethod::TaskRetrieval),
            latency_s: 0.001,
            error: None,
        });
    };
    for i in 0..nt {
        push(ConflictLabel::Normal, i < nc);
    }
    for i in 0..at {
        push(ConflictLabel::CONFLICTS[(i % 4) as usize], i < ac);
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn metrics_match_counts((nt, nc, at, ac) in (0u64..300, 0u64..300).prop_flat_map(|(nt, at)| (Just(nt), 0..=nt, Just(at), 0..=at))) {
        prop_assume!(nt + at > 0);
        let m = aggregate(&outcomes(nt, nc, at, ac));
        prop_assert_eq!(m.counts, Counts { normal_total: nt, normal_correct: nc, anomaly_total: at, anomaly_correct: ac });
        prop_assert_eq!(m.counts.correct(), m.counts.normal_correct + m.counts.anomaly_correct);
        prop_assert_eq!(m.total_acc, Some(oracle_percent(nc + ac, nt + at)));
        prop_assert_eq!(m.normal_acc, (nt > 0).then(|| oracle_percent(nc, nt)));
        prop_assert_eq!(m.anomaly_acc, (at > 0).then(|| oracle_percent(ac, at)));
    }
}

#[test]
fn published_formatting() {
    assert_eq!(percent(11, 12), Some(91.67));
    let m = aggregate(&outcomes(12, 11, 0, 0));
    assert_eq!(m.normal_acc, Some(91.67));
    assert_eq!(m.anomaly_acc, None);
    let m = aggregate(&outcomes(4, 4, 4, 4));
    assert_eq!((m.total_acc, m.normal_acc, m.anomaly_acc), (Some(100.0), Some(100.0), Some(100.0)));
}

#[test]
fn published_rows_imply_120_normal_and_92_anomaly() {
    let rows = [
        (73.58, 91.67, 50.00),
        (65.57, 75.83, 52.17),
        (75.00, 90.00, 55.43),
        (83.96, 98.33, 65.22),
        (87.26, 95.00, 77.17),
        (84.43, 98.33, 66.30),
    ]
    .map(|(total, normal, anomaly)| PublishedAccuracy { total, normal, anomaly });
    let solutions = consistent_totals(&rows, 250);
    assert_eq!(solutions.first(), Some(&(120, 92)));
    assert!(!solutions.contains(&(132, 92)), "224 samples is not a consistent split");
    assert!(solutions.iter().all(|(n, a)| n + a != 224));
}

struct Corpus {
    _dir: tempfile::TempDir,
    dataset: Dataset,
}

fn full_corpus() -> Corpus {
    let dir = tempfile::tempdir().unwrap();
    let dataset = write_corpus(&SynthConfig::full(21), dir.path()).unwrap();
    Corpus { _dir: dir, dataset }
}

fn sub(dataset: &Dataset, records: Vec<DatasetRecord>) -> Dataset {
    Dataset::new(records, dataset.root.clone())
}

#[test]
fn full_split_export_and_planted_evaluation() {
    let corpus = full_corpus();
    let records = &corpus.dataset.records;
    assert_eq!(records.len(), 1759);
    let split = split_dataset(records, &SplitPlan::first(records, 2, 32)).unwrap();
    assert_eq!(split.test.len(), 224);
    assert_eq!(split.buffer_train.len(), 1535);

    let out = corpus.dataset.root.join("ft/train.jsonl");
    let n = export_finetune(&corpus.dataset, &split.buffer_train, &DetectionPrompt::default(), &out).unwrap();
    assert_eq!(n, 1535);
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 1535);
    for (line, record) in lines.iter().zip(&split.buffer_train) {
        let messages = line["messages"].as_array().unwrap();
        assert_eq!(messages[2]["content"], record.label.as_str());
        let text = messages[1]["content"][1]["text"].as_str().unwrap();
        if record.speech.is_none() {
            assert!(text.contains("Speech: none"), "{text}");
        }
    }

    let providers = Providers::mock(21, 256).unwrap();
    let speech = build_speech_buffer(&split.buffer_train, providers.text.as_ref(), SpeechBufferOptions::default()).unwrap();
    let mm = build_multimodal_buffer(&split.buffer_train, &corpus.dataset.root, &providers, PromptStyle::Separate).unwrap();
    assert_eq!(mm.len(), 1535);
    let backend = Arc::new(MockModelBackend::unavailable());
    let detector = Detector::new(providers, Arc::new(speech), Arc::new(mm), backend.clone(), DetectionConfig::default()).unwrap();
    let report = evaluate(&sub(&corpus.dataset, split.buffer_train.clone()), &detector, &EvalOptions::default()).unwrap();
    assert_eq!(report.metrics.total_acc, Some(100.0));
    assert_eq!(report.metrics.methods.model_inference, 0);
    assert_eq!(backend.calls(), 0);

    // held-out test: detector errors (dead backend) count as misses, the run completes
    let test = sub(&corpus.dataset, split.test.clone());
    let report = evaluate(&test, &detector, &EvalOptions { parallelism: 4, measure_latency: false }).unwrap();
    assert_eq!(report.outcomes.len(), 224);
    assert_eq!(report.metrics.counts.total(), 224);
    let m = &report.metrics;
    assert_eq!(m.methods.model_inference, 0);
    assert_eq!(m.methods.speech_retrieval + m.methods.task_retrieval + m.errors, 224);
    assert!(report.outcomes.iter().filter(|o| o.error.is_some()).all(|o| o.predicted.is_none()));

    assert!(evaluate(&sub(&corpus.dataset, vec![]), &detector, &EvalOptions::default()).is_err());
}

#[test]
fn tau_t_sweep_is_monotone_and_selection_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = write_corpus(&SynthConfig::small(5), dir.path()).unwrap();
    let split = split_dataset(&dataset.records, &SplitPlan::first(&dataset.records, 1, 8)).unwrap();
    let providers = Providers::mock(5, 256).unwrap();
    let speech = build_speech_buffer(&split.buffer_train, providers.text.as_ref(), SpeechBufferOptions::default()).unwrap();
    let mm = build_multimodal_buffer(&split.buffer_train, &dataset.root, &providers, PromptStyle::Separate).unwrap();
    let detector = Detector::new(
        providers,
        Arc::new(speech),
        Arc::new(mm),
        Arc::new(MockModelBackend::replying("normal")),
        DetectionConfig::default(),
    )
    .unwrap();
    let test = sub(&dataset, split.test);
    let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).chain([1.01]).collect();
    let options = EvalOptions { parallelism: 1, measure_latency: false };
    let result = sweep(Parameter::TauT, &grid, &test, &detector, &options, 0.0).unwrap();
    let escalations: Vec<u64> = result.points.iter().map(|p| p.metrics.methods.model_inference).collect();
    assert!(escalations.windows(2).all(|w| w[0] <= w[1]), "{escalations:?}");
    assert_eq!(escalations[0], 0);
    let last = &result.points.last().unwrap().metrics.methods;
    assert_eq!(last.task_retrieval, 0);
    assert!(result.grid.contains(&result.selected));
    assert!(result.to_csv().lines().count() == grid.len() + 1);

    let separate = SeparateRetrieval::from_detector(&detector).unwrap();
    let tau_s = sweep(Parameter::TauS, &[0.5, 0.88, 1.0], &test, &separate, &options, 0.0).unwrap();
    assert_eq!(tau_s.points.len(), 3);
}

fn png(path: &Path, rgb: [u8; 3]) {
    image::RgbImage::from_pixel(16, 16, image::Rgb(rgb)).save(path).unwrap();
}

fn rec(id: &str, image: &str, task: &str, step: &str, speech: Option<&str>, label: ConflictLabel) -> DatasetRecord {
    DatasetRecord {
        id: id.into(),
        image: image.into(),
        task: task.into(),
        step: step.into(),
        speech: speech.map(str::to_string),
        label,
        trajectory_id: None,
        frame_index: None,
    }
}

#[test]
fn unified_prompt_suffers_when_noise_resembles_a_request() {
    let dir = tempfile::tempdir().unwrap();
    png(&dir.path().join("a.png"), [200, 100, 50]);
    let task = "Put the bowl into the sink";
    let request = "robot please bring the blue umbrella and the spare keys from the hallway closet right now";
    let noise = "we should bring the blue umbrella and the spare keys when we visit grandma on friday evening";
    let train = vec![
        rec("a-normal", "a.png", task, "Walk to the kitchen", None, ConflictLabel::Normal),
        rec("b-request", "a.png", task, "Walk to the kitchen", Some(request), ConflictLabel::HumanInteraction),
    ];
    let test_records = vec![rec("t-noise", "a.png", task, "Walk to the kitchen", Some(noise), ConflictLabel::Normal)];
    let dataset = Dataset::new(train.clone(), dir.path());
    let test = Dataset::new(test_records, dir.path());
    let providers = Providers::mock(3, 256).unwrap();
    let w = FusionWeight::new(0.87).unwrap();

    let unified_buffer = build_multimodal_buffer(&dataset.records, dir.path(), &providers, PromptStyle::Unified).unwrap();
    let unified = UnifiedRetrieval::new(providers.clone(), Arc::new(unified_buffer), w).unwrap();
    let unified_m = unified_retrieval_baseline(&test, &unified, &EvalOptions::default()).unwrap();

    let speech = build_speech_buffer(&dataset.records, providers.text.as_ref(), SpeechBufferOptions::default()).unwrap();
    let mm = build_multimodal_buffer(&dataset.records, dir.path(), &providers, PromptStyle::Separate).unwrap();
    let separate = SeparateRetrieval::new(providers, Arc::new(speech), Arc::new(mm), w, 0.88).unwrap();
    let separate_m = evaluate(&test, &separate, &EvalOptions::default()).unwrap().metrics;

    assert!(unified_m.normal_acc <= separate_m.normal_acc);
    assert_eq!(separate_m.normal_acc, Some(100.0));
    assert_eq!(unified_m.normal_acc, Some(0.0));
}

#[test]
fn without_speech_unified_and_separate_agree() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = write_corpus(&SynthConfig::small(9), dir.path()).unwrap();
    let quiet: Vec<DatasetRecord> = dataset.records.iter().filter(|r| r.speech.is_none()).cloned().collect();
    let providers = Providers::mock(9, 256).unwrap();
    let w = FusionWeight::new(0.87).unwrap();
    let unified_buffer = build_multimodal_buffer(&quiet, &dataset.root, &providers, PromptStyle::Unified).unwrap();
    let separate_buffer = build_multimodal_buffer(&quiet, &dataset.root, &providers, PromptStyle::Separate).unwrap();
    let unified = UnifiedRetrieval::new(providers.clone(), Arc::new(unified_buffer), w).unwrap();
    let speech = commet_core::SpeechBuffer::new(providers.text.provider_id(), providers.text.dimension());
    let separate = SeparateRetrieval::new(providers, Arc::new(speech), Arc::new(separate_buffer), w, 0.88).unwrap();
    let test = sub(&dataset, quiet);
    for r in test.records.iter().take(40) {
        let input = test.input(r);
        use commet_core::ConflictDetector;
        let u = unified.detect(&input).unwrap();
        let s = separate.detect(&input).unwrap();
        assert_eq!(u.task_score, s.task_score);
        assert_eq!(u.label, s.label);
    }
    let m = evaluate(&test, &unified, &EvalOptions::default()).unwrap().metrics;
    assert_eq!(m.total_acc, Some(100.0));
}
