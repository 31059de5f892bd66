use commet_core::retrieval::{
    cosine, speech_score, task_attribute_score, FusionWeight, MultiModalBuffer, MultiModalBufferEntry, PromptStyle,
    SpeechBuffer, SpeechBufferEntry,
};
use commet_core::{ConflictLabel, EmbeddingVector};
use proptest::prelude::*;

const PID: &str = "prop";

fn unit(raw: Vec<f64>) -> EmbeddingVector {
    EmbeddingVector::normalized(raw, PID).unwrap()
}

/// Vectors with at least one clearly non-zero component.
fn raw_vec(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, d).prop_filter("non-zero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-6)
}

fn label(i: usize) -> ConflictLabel {
    ConflictLabel::ALL[i % 5]
}

// Independent oracle: plain loops, no shared helpers with the crate.
fn oracle_dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s.clamp(-1.0, 1.0)
}

fn oracle_max(scores: &[(String, f64)]) -> (f64, Vec<String>) {
    let mut best = f64::NEG_INFINITY;
    for (_, s) in scores {
        if *s > best {
            best = *s;
        }
    }
    let ids = scores
        .iter()
        .filter(|(_, s)| (best - s).abs() <= 1e-9)
        .map(|(id, _)| id.clone())
        .collect();
    (best, ids)
}

fn speech_buffer(vectors: &[Vec<f64>], d: usize) -> SpeechBuffer {
    let mut buffer = SpeechBuffer::new(PID, d);
    for (i, v) in vectors.iter().enumerate() {
        buffer
            .push(SpeechBufferEntry {
                source_record_id: format!("e{i:04}"),
                label: label(i),
                embedding: unit(v.clone()),
            })
            .unwrap();
    }
    buffer
}

fn mm_buffer(pairs: &[(Vec<f64>, Vec<f64>)], dp: usize, dobs: usize) -> MultiModalBuffer {
    let mut buffer = MultiModalBuffer::new(PromptStyle::Separate, PID, dp, PID, dobs);
    for (i, (p, o)) in pairs.iter().enumerate() {
        buffer
            .push(MultiModalBufferEntry {
                source_record_id: format!("e{i:04}"),
                label: label(i),
                prompt_embedding: unit(p.clone()),
                obs_embedding: unit(o.clone()),
            })
            .unwrap();
    }
    buffer
}

fn speech_case() -> impl Strategy<Value = (usize, Vec<Vec<f64>>, Vec<f64>)> {
    (1usize..=16).prop_flat_map(|d| (Just(d), prop::collection::vec(raw_vec(d), 1..60), raw_vec(d)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn speech_score_matches_exhaustive_oracle((d, vectors, q) in speech_case()) {
        let buffer = speech_buffer(&vectors, d);
        let query = unit(q);
        let hit = speech_score(&query, &buffer).unwrap();
        let scores: Vec<(String, f64)> = buffer
            .entries()
            .iter()
            .map(|e| (e.source_record_id.clone(), oracle_dot(query.values(), e.embedding.values())))
            .collect();
        let (best, maximizers) = oracle_max(&scores);
        prop_assert!((hit.score - best).abs() <= 1e-9);
        prop_assert!(maximizers.contains(&hit.entry_id));
        prop_assert!((-1.0..=1.0).contains(&hit.score));
    }

    #[test]
    fn task_score_matches_exhaustive_oracle(
        (dp, dobs, pairs, qp, qo, w) in (1usize..=12, 1usize..=12).prop_flat_map(|(dp, dobs)| (
            Just(dp),
            Just(dobs),
            prop::collection::vec((raw_vec(dp), raw_vec(dobs)), 1..60),
            raw_vec(dp),
            raw_vec(dobs),
            0.0f64..=1.0,
        ))
    ) {
        let buffer = mm_buffer(&pairs, dp, dobs);
        let (qp, qo) = (unit(qp), unit(qo));
        let hit = task_attribute_score(&qp, &qo, &buffer, FusionWeight::new(w).unwrap()).unwrap();
        let scores: Vec<(String, f64)> = buffer
            .entries()
            .iter()
            .map(|e| {
                let cp = oracle_dot(qp.values(), e.prompt_embedding.values());
                let co = oracle_dot(qo.values(), e.obs_embedding.values());
                (e.source_record_id.clone(), w * cp + (1.0 - w) * co)
            })
            .collect();
        let (best, maximizers) = oracle_max(&scores);
        prop_assert!((hit.score - best).abs() <= 1e-9);
        prop_assert!(maximizers.contains(&hit.entry_id));
        let label_of = buffer.entries().iter().find(|e| e.source_record_id == hit.entry_id).unwrap().label;
        prop_assert_eq!(hit.entry_label, label_of);
    }

    #[test]
    fn permutation_never_changes_the_result((d, vectors, q) in speech_case(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let buffer = speech_buffer(&vectors, d);
        let mut entries = buffer.entries().to_vec();
        entries.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let mut shuffled = SpeechBuffer::new(PID, d);
        for e in entries {
            shuffled.push(e).unwrap();
        }
        let query = unit(q);
        prop_assert_eq!(speech_score(&query, &buffer).unwrap(), speech_score(&query, &shuffled).unwrap());
    }

    #[test]
    fn fused_score_lies_between_components(
        (p, o, qp, qo) in (1usize..=8).prop_flat_map(|d| (raw_vec(d), raw_vec(d), raw_vec(d), raw_vec(d))),
        w in 0.0f64..=1.0,
    ) {
        let (p, o, qp, qo) = (unit(p), unit(o), unit(qp), unit(qo));
        let cp = cosine(&p, &qp).unwrap();
        let co = cosine(&o, &qo).unwrap();
        let fused = FusionWeight::new(w).unwrap().fuse(cp, co);
        prop_assert!(fused >= cp.min(co) - 1e-12 && fused <= cp.max(co) + 1e-12);
        prop_assert_eq!(FusionWeight::new(1.0).unwrap().fuse(cp, co), cp);
        prop_assert_eq!(FusionWeight::new(0.0).unwrap().fuse(cp, co), co);
    }
}

#[test]
fn duplicates_and_ties_resolve_to_smallest_id() {
    let v = vec![1.0, 0.0];
    let buffer = speech_buffer(&[vec![0.0, 1.0], v.clone(), v.clone()], 2);
    let hit = speech_score(&unit(v), &buffer).unwrap();
    assert_eq!(hit.entry_id, "e0001");
    assert_eq!(hit.score, 1.0);
}

#[test]
fn cosine_of_diagonal() {
    let a = EmbeddingVector::from_unit(vec![1.0, 0.0], PID).unwrap();
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let b = EmbeddingVector::from_unit(vec![h, h], PID).unwrap();
    approx::assert_abs_diff_eq!(cosine(&a, &b).unwrap(), 0.5f64.sqrt(), epsilon = 1e-12);
}

#[test]
fn empty_buffers_error() {
    let q = unit(vec![1.0]);
    assert!(speech_score(&q, &SpeechBuffer::new(PID, 1)).is_err());
    let mm = MultiModalBuffer::new(PromptStyle::Separate, PID, 1, PID, 1);
    assert!(task_attribute_score(&q, &q, &mm, FusionWeight::new(0.5).unwrap()).is_err());
}
