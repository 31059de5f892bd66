use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Scenario, UserCase};
use crate::error::Result;
use crate::http;
use crate::limit::InflightLimiter;
use crate::types::{ConflictLabel, SolutionOption};

/// What a summarizer gets for one prediction.
#[derive(Debug, Clone)]
pub struct SummaryRequest<'a> {
    pub conflict_type: ConflictLabel,
    pub scenario: &'a Scenario,
    pub options: &'a [SolutionOption],
    pub cases: &'a [UserCase],
    /// The type-specific instruction with scenario, options and cases filled in.
    pub prompt: String,
}

/// Reads a user's cases and proposes one option plus a preference summary.
///
/// Output is raw text, expected to be `{"summary": ..., "option": ...}` JSON.
pub trait Summarizer: Send + Sync {
    fn summarize(&self, request: &SummaryRequest<'_>) -> Result<String>;
}

/// Deterministic stand-in: majority vote over the chosen options.
///
/// Ties go to the option whose supporting cases include the highest emergency level;
/// if that still ties, to the option earliest in the catalog. With no cases it picks
/// "Inform the user and wait for instructions".
#[derive(Debug, Default, Clone, Copy)]
pub struct MockSummarizer;

/// The option the mock summarizer would choose, with its vote count.
pub fn majority_option(options: &[SolutionOption], cases: &[UserCase]) -> Option<(SolutionOption, usize)> {
    // option ordinal -> (votes, highest emergency)
    let mut tally: BTreeMap<u8, (usize, u8)> = BTreeMap::new();
    for case in cases {
        let slot = tally.entry(case.chosen_option.ordinal).or_insert((0, 0));
        slot.0 += 1;
        slot.1 = slot.1.max(case.emergency.get());
    }
    let (ordinal, (votes, _)) = tally
        .into_iter()
        // max by votes, then emergency, then the smaller ordinal
        .max_by(|(oa, a), (ob, b)| a.0.cmp(&b.0).then(a.1.cmp(&b.1)).then(ob.cmp(oa)))?;
    options
        .iter()
        .find(|o| o.ordinal == ordinal)
        .map(|o| (o.clone(), votes))
}

impl Summarizer for MockSummarizer {
    fn summarize(&self, request: &SummaryRequest<'_>) -> Result<String> {
        let (summary, option) = match majority_option(request.options, request.cases) {
            Some((option, votes)) => (
                format!(
                    "Over {} recorded {} cases the user most often chose \"{}\" ({} of {}).",
                    request.cases.len(),
                    request.conflict_type.display_name(),
                    option.text,
                    votes,
                    request.cases.len()
                ),
                option.text,
            ),
            None => (
                "No preference data is available for this conflict type; deferring to the user."
                    .to_string(),
                request
                    .options
                    .iter()
                    .find(|o| o.text == "Inform the user and wait for instructions")
                    .or(request.options.last())
                    .map(|o| o.text.clone())
                    .unwrap_or_default(),
            ),
        };
        Ok(serde_json::json!({ "summary": summary, "option": option }).to_string())
    }
}

/// `POST {endpoint}` with `{"prompt": ...}` → `{"output": ...}`.
pub struct RemoteSummarizer {
    endpoint: String,
    client: reqwest::blocking::Client,
    limiter: InflightLimiter,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RemoteSummaryRequest {
    pub prompt: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RemoteSummaryResponse {
    pub output: String,
}

impl RemoteSummarizer {
    pub fn new(endpoint: impl Into<String>, timeout: Duration, max_in_flight: usize) -> Result<Self> {
        Ok(RemoteSummarizer {
            endpoint: endpoint.into(),
            client: http::client(timeout)?,
            limiter: InflightLimiter::new(max_in_flight),
        })
    }
}

impl Summarizer for RemoteSummarizer {
    fn summarize(&self, request: &SummaryRequest<'_>) -> Result<String> {
        let _slot = self.limiter.acquire();
        let response: RemoteSummaryResponse = http::post_json(
            &self.client,
            &self.endpoint,
            &RemoteSummaryRequest {
                prompt: request.prompt.clone(),
            },
        )?;
        Ok(response.output)
    }
}
