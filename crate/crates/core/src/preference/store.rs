//! Journal-backed preference store.
//!
//! Three append-only JSON Lines files live in the store directory:
//! `cases.jsonl` (one [`UserCase`] per accepted write, last write per `case_id` wins),
//! `predictions.jsonl` and `ratings.jsonl`. Opening a store replays all three.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{PreferencePrediction, UserCase};
use crate::error::{Error, Result};
use crate::types::ConflictLabel;

const CASES_FILE: &str = "cases.jsonl";
const PREDICTIONS_FILE: &str = "predictions.jsonl";
const RATINGS_FILE: &str = "ratings.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingEntry {
    pub prediction_id: String,
    pub rating: u8,
    pub rated_at: DateTime<Utc>,
}

struct Journal {
    path: PathBuf,
    file: File,
}

impl Journal {
    fn open(path: PathBuf) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Journal { path, file })
    }

    fn append<T: Serialize>(&mut self, value: &T) -> Result<()> {
        let mut line = serde_json::to_vec(value).map_err(|e| Error::json("journal entry", e))?;
        line.push(b'\n');
        self.file.write_all(&line).map_err(|e| Error::io(&self.path, e))?;
        self.file.sync_data().map_err(|e| Error::io(&self.path, e))
    }
}

/// Makes sure the journal ends on a line boundary after a crash mid-append: a complete
/// trailing entry gets its newline back, a torn one is cut off.
fn repair_tail(path: &Path) -> Result<()> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(Error::io(path, e)),
    };
    if bytes.is_empty() || bytes.ends_with(b"\n") {
        return Ok(());
    }
    let keep = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
    let tail = &bytes[keep..];
    let file = OpenOptions::new().write(true).open(path).map_err(|e| Error::io(path, e))?;
    if serde_json::from_slice::<serde_json::Value>(tail).is_ok() {
        let mut file = file;
        std::io::Seek::seek(&mut file, std::io::SeekFrom::End(0)).map_err(|e| Error::io(path, e))?;
        file.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    } else {
        log::warn!("{}: dropping torn final entry ({} bytes)", path.display(), tail.len());
        file.set_len(keep as u64).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Reads every complete entry. A torn final line is skipped; a corrupt line anywhere
/// else is an error.
fn replay<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(entry) => entries.push(entry),
            Err(e) if i + 1 == lines.len() => {
                log::warn!("{}: dropping torn final entry: {e}", path.display());
            }
            Err(e) => return Err(Error::json(format!("{}:{}", path.display(), i + 1), e)),
        }
    }
    Ok(entries)
}

#[derive(Default)]
struct State {
    cases: BTreeMap<String, UserCase>,
    predictions: Vec<PreferencePrediction>,
    prediction_index: HashMap<String, usize>,
}

impl State {
    fn apply_rating(&mut self, entry: &RatingEntry) -> Option<&PreferencePrediction> {
        let idx = *self.prediction_index.get(&entry.prediction_id)?;
        let prediction = &mut self.predictions[idx];
        prediction.rating = Some(entry.rating);
        prediction.rated_at = Some(entry.rated_at);
        Some(prediction)
    }
}

struct Journals {
    cases: Journal,
    predictions: Journal,
    ratings: Journal,
}

/// User cases, predictions and ratings.
///
/// Reads take a snapshot under the lock; writes are serialized and hit the journal
/// (fsync'd) before memory is updated.
pub struct PreferenceStore {
    dir: PathBuf,
    state: Mutex<State>,
    journals: Mutex<Journals>,
}

impl PreferenceStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for name in [CASES_FILE, PREDICTIONS_FILE, RATINGS_FILE] {
            repair_tail(&dir.join(name))?;
        }
        let mut state = State::default();
        for case in replay::<UserCase>(&dir.join(CASES_FILE))? {
            state.cases.insert(case.case_id.clone(), case);
        }
        for prediction in replay::<PreferencePrediction>(&dir.join(PREDICTIONS_FILE))? {
            state
                .prediction_index
                .insert(prediction.prediction_id.clone(), state.predictions.len());
            state.predictions.push(prediction);
        }
        for rating in replay::<RatingEntry>(&dir.join(RATINGS_FILE))? {
            if state.apply_rating(&rating).is_none() {
                log::warn!("rating for unknown prediction {} ignored", rating.prediction_id);
            }
        }
        let journals = Journals {
            cases: Journal::open(dir.join(CASES_FILE))?,
            predictions: Journal::open(dir.join(PREDICTIONS_FILE))?,
            ratings: Journal::open(dir.join(RATINGS_FILE))?,
        };
        Ok(PreferenceStore {
            dir,
            state: Mutex::new(state),
            journals: Mutex::new(journals),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Stores a validated case. Re-submitting identical content under the same
    /// `case_id` is a no-op; different content replaces the earlier case.
    ///
    /// Returns the case id and whether anything was written.
    pub fn record_case(&self, case: &UserCase) -> Result<(String, bool)> {
        case.validate()?;
        let mut journals = self.journals.lock();
        if let Some(existing) = self.state.lock().cases.get(&case.case_id) {
            if existing.same_content(case) {
                return Ok((case.case_id.clone(), false));
            }
        }
        journals.cases.append(case)?;
        self.state.lock().cases.insert(case.case_id.clone(), case.clone());
        Ok((case.case_id.clone(), true))
    }

    pub fn get_case(&self, case_id: &str) -> Option<UserCase> {
        self.state.lock().cases.get(case_id).cloned()
    }

    /// All of a user's cases, newest first (ties by case id).
    pub fn cases_for_user(&self, user_id: &str) -> Vec<UserCase> {
        let mut cases: Vec<UserCase> = self
            .state
            .lock()
            .cases
            .values()
            .filter(|c| c.user_id == user_id)
            .cloned()
            .collect();
        cases.sort_by(|a, b| b.created_at.cmp(&a.created_at).then_with(|| a.case_id.cmp(&b.case_id)));
        cases
    }

    /// The user's cases of one conflict type, newest first.
    pub fn cases_for_type(&self, user_id: &str, conflict_type: ConflictLabel) -> Result<Vec<UserCase>> {
        if !conflict_type.is_anomaly() {
            return Err(Error::InvalidArgument("no preference cases exist for Normal".into()));
        }
        Ok(self
            .cases_for_user(user_id)
            .into_iter()
            .filter(|c| c.scenario.label == conflict_type)
            .collect())
    }

    pub fn save_prediction(&self, prediction: &PreferencePrediction) -> Result<()> {
        if !prediction.predicted_option.is_canonical()
            || prediction.predicted_option.conflict_type != prediction.scenario.label
        {
            return Err(Error::Validation(format!(
                "predicted option {:?} is not in the {} catalog",
                prediction.predicted_option.text,
                prediction.scenario.label.display_name()
            )));
        }
        let mut journals = self.journals.lock();
        if self.state.lock().prediction_index.contains_key(&prediction.prediction_id) {
            return Err(Error::Validation(format!(
                "prediction {} already exists",
                prediction.prediction_id
            )));
        }
        journals.predictions.append(prediction)?;
        let mut state = self.state.lock();
        let idx = state.predictions.len();
        state.prediction_index.insert(prediction.prediction_id.clone(), idx);
        state.predictions.push(prediction.clone());
        Ok(())
    }

    pub fn get_prediction(&self, prediction_id: &str) -> Option<PreferencePrediction> {
        let state = self.state.lock();
        state
            .prediction_index
            .get(prediction_id)
            .map(|idx| state.predictions[*idx].clone())
    }

    /// A user's predictions in creation order.
    pub fn predictions_for_user(&self, user_id: &str) -> Vec<PreferencePrediction> {
        self.state
            .lock()
            .predictions
            .iter()
            .filter(|p| p.user_id == user_id)
            .cloned()
            .collect()
    }

    pub fn all_predictions(&self) -> Vec<PreferencePrediction> {
        self.state.lock().predictions.clone()
    }

    /// Stores a 1–5 rating; a later rating overwrites an earlier one.
    pub fn record_rating(&self, prediction_id: &str, rating: u8) -> Result<PreferencePrediction> {
        if !(1..=5).contains(&rating) {
            return Err(Error::Validation(format!("rating {rating} outside 1..=5")));
        }
        let mut journals = self.journals.lock();
        if !self.state.lock().prediction_index.contains_key(prediction_id) {
            return Err(Error::NotFound {
                what: "prediction",
                id: prediction_id.to_string(),
            });
        }
        let entry = RatingEntry {
            prediction_id: prediction_id.to_string(),
            rating,
            rated_at: Utc::now(),
        };
        journals.ratings.append(&entry)?;
        let mut state = self.state.lock();
        Ok(state.apply_rating(&entry).expect("checked above").clone())
    }

    /// Every rating ever submitted, oldest first.
    pub fn rating_history(&self) -> Result<Vec<RatingEntry>> {
        let _journals = self.journals.lock();
        replay(&self.dir.join(RATINGS_FILE))
    }
}
