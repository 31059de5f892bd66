//! User preference cases and solution prediction.

mod store;
mod summarizer;

use std::sync::{Arc, LazyLock};

use chrono::{DateTime, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::{fill, PreferencePrompts, NO_SPEECH};
use crate::types::{catalog_options, ConflictLabel, DetectionInput, EmergencyLevel, SolutionOption};

pub use store::{PreferenceStore, RatingEntry};
pub use summarizer::{
    majority_option, MockSummarizer, RemoteSummarizer, RemoteSummaryRequest, RemoteSummaryResponse,
    Summarizer, SummaryRequest,
};

/// Marker the summary carries when a prediction was made without any user cases.
pub const NO_PREFERENCE_DATA: &str = "no-preference-data";

pub const DEFAULT_MAX_CASES: usize = 20;

/// A situation shown to the user or predicted for: observation plus its conflict type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario_id: Option<String>,
    pub input: DetectionInput,
    pub label: ConflictLabel,
}

impl Scenario {
    fn render(&self) -> String {
        format!(
            "Image: {}\nTask: {}\nStep: {}\nSpeech: {}\nConflict: {}",
            self.input.image.describe(),
            self.input.task,
            self.input.step,
            self.input.speech().unwrap_or(NO_SPEECH),
            self.label.display_name()
        )
    }
}

/// One annotated scenario: the option the user prefers and how urgent it felt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserCase {
    pub case_id: String,
    pub user_id: String,
    pub scenario: Scenario,
    pub chosen_option: SolutionOption,
    pub emergency: EmergencyLevel,
    pub created_at: DateTime<Utc>,
}

impl UserCase {
    pub fn validate(&self) -> Result<()> {
        if self.case_id.trim().is_empty() || self.user_id.trim().is_empty() {
            return Err(Error::Validation("case_id and user_id must not be empty".into()));
        }
        if !self.scenario.label.is_anomaly() {
            return Err(Error::Validation("preference cases need a conflict scenario, not normal".into()));
        }
        self.scenario.input.validate()?;
        if self.chosen_option.conflict_type != self.scenario.label {
            return Err(Error::Validation(format!(
                "option belongs to {} but the scenario is {}",
                self.chosen_option.conflict_type.display_name(),
                self.scenario.label.display_name()
            )));
        }
        if !self.chosen_option.is_canonical() {
            return Err(Error::Validation(format!(
                "{:?} is not catalog option {} for {}",
                self.chosen_option.text,
                self.chosen_option.ordinal,
                self.scenario.label.display_name()
            )));
        }
        Ok(())
    }

    /// Same annotation, ignoring when it was made.
    pub fn same_content(&self, other: &UserCase) -> bool {
        self.case_id == other.case_id
            && self.user_id == other.user_id
            && self.scenario == other.scenario
            && self.chosen_option == other.chosen_option
            && self.emergency == other.emergency
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePrediction {
    pub prediction_id: String,
    pub user_id: String,
    pub scenario: Scenario,
    pub used_case_ids: Vec<String>,
    pub preference_summary: String,
    pub predicted_option: SolutionOption,
    /// Set when no same-type cases existed for the user.
    #[serde(default)]
    pub no_preference_data: bool,
    pub created_at: DateTime<Utc>,
    #[serde(default)]
    pub rating: Option<u8>,
    #[serde(default)]
    pub rated_at: Option<DateTime<Utc>>,
}

fn render_cases(cases: &[UserCase]) -> String {
    if cases.is_empty() {
        return "(The user has not answered any scenario of this type yet.)".into();
    }
    cases
        .iter()
        .enumerate()
        .map(|(i, case)| {
            format!(
                "Case {}:\n{}\nChosen option: {}\nEmergency level: {} of 3",
                i + 1,
                case.scenario.render(),
                case.chosen_option.text,
                case.emergency.get()
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn render_options(options: &[SolutionOption]) -> String {
    options
        .iter()
        .map(|o| format!("{}. {}", o.ordinal, o.text))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Renders the type-specific summarizer instruction.
pub fn render_preference_prompt(
    prompts: &PreferencePrompts,
    scenario: &Scenario,
    options: &[SolutionOption],
    cases: &[UserCase],
) -> Result<String> {
    Ok(fill(
        prompts.template(scenario.label)?,
        &[
            ("cases", &render_cases(cases)),
            ("scenario", &scenario.render()),
            ("options", &render_options(options)),
        ],
    ))
}

#[derive(Deserialize)]
struct JsonAnswer {
    summary: String,
    option: serde_json::Value,
}

static LINE_ANSWER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?im)^\s*summary\s*:\s*(?P<summary>.+?)\s*$[\s\S]*?^\s*option\s*:\s*(?P<option>.+?)\s*$")
        .expect("answer regex is valid")
});

/// Splits summarizer output into (summary, option). Accepts a JSON object (possibly
/// wrapped in prose or a code fence) or `Summary:` / `Option:` lines. The option may be
/// given as its text or its 1-based number.
pub fn parse_summary_output(conflict_type: ConflictLabel, raw: &str) -> Result<(String, SolutionOption)> {
    let bad = |reason: String| Error::UnparseableOutput {
        reason,
        raw: raw.to_string(),
    };
    let (summary, option_value) = match (raw.find('{'), raw.rfind('}')) {
        (Some(start), Some(end)) if start < end => {
            let answer: JsonAnswer = serde_json::from_str(&raw[start..=end])
                .map_err(|e| bad(format!("malformed JSON answer: {e}")))?;
            (answer.summary, answer.option)
        }
        _ => {
            let caps = LINE_ANSWER
                .captures(raw)
                .ok_or_else(|| bad("no summary/option in output".into()))?;
            (
                caps["summary"].to_string(),
                serde_json::Value::String(caps["option"].to_string()),
            )
        }
    };
    let option = match &option_value {
        serde_json::Value::Number(n) => n
            .as_u64()
            .and_then(|n| u8::try_from(n).ok())
            .and_then(|n| SolutionOption::from_ordinal(conflict_type, n).ok()),
        serde_json::Value::String(s) => SolutionOption::from_text(conflict_type, s).ok().or_else(|| {
            s.trim()
                .parse::<u8>()
                .ok()
                .and_then(|n| SolutionOption::from_ordinal(conflict_type, n).ok())
        }),
        _ => None,
    }
    .ok_or_else(|| {
        bad(format!(
            "option {option_value} is not in the {} catalog",
            conflict_type.display_name()
        ))
    })?;
    if summary.trim().is_empty() {
        return Err(bad("empty preference summary".into()));
    }
    Ok((summary.trim().to_string(), option))
}

/// Asks `backend` for a preferred option given the user's same-type cases.
///
/// The returned prediction is not persisted.
pub fn predict_solution(
    user_id: &str,
    scenario: &Scenario,
    cases: &[UserCase],
    backend: &dyn Summarizer,
    prompts: &PreferencePrompts,
) -> Result<PreferencePrediction> {
    scenario.input.validate()?;
    let options = catalog_options(scenario.label)?;
    if let Some(stray) = cases.iter().find(|c| c.scenario.label != scenario.label) {
        return Err(Error::InvalidArgument(format!(
            "case {} is {} but the scenario is {}",
            stray.case_id,
            stray.scenario.label.display_name(),
            scenario.label.display_name()
        )));
    }
    let prompt = render_preference_prompt(prompts, scenario, &options, cases)?;
    let raw = backend.summarize(&SummaryRequest {
        conflict_type: scenario.label,
        scenario,
        options: &options,
        cases,
        prompt,
    })?;
    let (mut summary, predicted_option) = parse_summary_output(scenario.label, &raw)?;
    let no_preference_data = cases.is_empty();
    if no_preference_data {
        summary = format!("[{NO_PREFERENCE_DATA}] {summary}");
    }
    Ok(PreferencePrediction {
        prediction_id: uuid::Uuid::new_v4().to_string(),
        user_id: user_id.to_string(),
        scenario: scenario.clone(),
        used_case_ids: cases.iter().map(|c| c.case_id.clone()).collect(),
        preference_summary: summary,
        predicted_option,
        no_preference_data,
        created_at: Utc::now(),
        rating: None,
        rated_at: None,
    })
}

/// Case store, summarizer and prompts wired together.
#[derive(Clone)]
pub struct PreferenceEngine {
    store: Arc<PreferenceStore>,
    summarizer: Arc<dyn Summarizer>,
    prompts: PreferencePrompts,
    max_cases: usize,
}

impl PreferenceEngine {
    pub fn new(store: Arc<PreferenceStore>, summarizer: Arc<dyn Summarizer>) -> Self {
        PreferenceEngine {
            store,
            summarizer,
            prompts: PreferencePrompts::default(),
            max_cases: DEFAULT_MAX_CASES,
        }
    }

    pub fn with_prompts(mut self, prompts: PreferencePrompts) -> Self {
        self.prompts = prompts;
        self
    }

    /// Caps how many (newest) cases go into one prompt.
    pub fn with_max_cases(mut self, max_cases: usize) -> Self {
        self.max_cases = max_cases.max(1);
        self
    }

    pub fn store(&self) -> &Arc<PreferenceStore> {
        &self.store
    }

    /// Predicts from the user's newest same-type cases and persists the prediction.
    pub fn predict(&self, user_id: &str, scenario: &Scenario) -> Result<PreferencePrediction> {
        let mut cases = self.store.cases_for_type(user_id, scenario.label)?;
        cases.truncate(self.max_cases);
        let prediction = predict_solution(user_id, scenario, &cases, self.summarizer.as_ref(), &self.prompts)?;
        self.store.save_prediction(&prediction)?;
        Ok(prediction)
    }
}
