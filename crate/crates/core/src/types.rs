//! Conflict taxonomy, solution catalogs, emergency levels and the detection input shape.

use std::borrow::Cow;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Outcome class of one detection tick.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConflictLabel {
    /// The target of the current step is missing.
    GoalAbsence,
    /// Someone other than the user tries to command or engage the robot.
    HumanInteraction,
    /// A person's activity occupies the space or object the step needs.
    HumanOccupancy,
    /// An object's state (closed door, full container, ...) blocks the step.
    ObjectState,
    Normal,
}

impl ConflictLabel {
    pub const ALL: [ConflictLabel; 5] = [
        ConflictLabel::GoalAbsence,
        ConflictLabel::HumanInteraction,
        ConflictLabel::HumanOccupancy,
        ConflictLabel::ObjectState,
        ConflictLabel::Normal,
    ];

    pub const CONFLICTS: [ConflictLabel; 4] = [
        ConflictLabel::GoalAbsence,
        ConflictLabel::HumanInteraction,
        ConflictLabel::HumanOccupancy,
        ConflictLabel::ObjectState,
    ];

    /// Canonical wire token, also used when parsing model output.
    pub fn as_str(self) -> &'static str {
        match self {
            ConflictLabel::GoalAbsence => "goal_absence",
            ConflictLabel::HumanInteraction => "human_interaction",
            ConflictLabel::HumanOccupancy => "human_occupancy",
            ConflictLabel::ObjectState => "object_state",
            ConflictLabel::Normal => "normal",
        }
    }

    /// Human readable name, as shown in prompts and the UI.
    pub fn display_name(self) -> &'static str {
        match self {
            ConflictLabel::GoalAbsence => "Goal Absence Conflict",
            ConflictLabel::HumanInteraction => "Human Interaction Conflict",
            ConflictLabel::HumanOccupancy => "Human Occupancy Conflict",
            ConflictLabel::ObjectState => "Object State Conflict",
            ConflictLabel::Normal => "Normal",
        }
    }

    pub fn is_anomaly(self) -> bool {
        self != ConflictLabel::Normal
    }
}

impl fmt::Display for ConflictLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConflictLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lowered = s.trim().to_ascii_lowercase();
        ConflictLabel::ALL
            .into_iter()
            .find(|label| label.as_str() == lowered)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown conflict label {s:?}")))
    }
}

const GOAL_ABSENCE_OPTIONS: [&str; 4] = [
    "Ask people around for help",
    "Find another similar spot or object",
    "Re-calculate the path or make a new task plan",
    "Inform the user and wait for instructions",
];

const HUMAN_OCCUPANCY_OPTIONS: [&str; 4] = [
    "Stop execution and wait for the person",
    "Directly communicate with the person",
    "Find another similar spot or object",
    "Inform the user and wait for instructions",
];

// Same texts as goal absence; kept as its own catalog since cases are partitioned by type.
const OBJECT_STATE_OPTIONS: [&str; 4] = [
    "Ask people around for help",
    "Find another similar spot or object",
    "Re-calculate the path or make a new task plan",
    "Inform the user and wait for instructions",
];

const HUMAN_INTERACTION_OPTIONS: [&str; 4] = [
    "Ignore and keep original steps",
    "Pause current actions and interact with person (chat)",
    "Switch to new user or task",
    "Inform the user and wait for instructions",
];

/// One of the four canonical ways to resolve a conflict of a given type.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SolutionOption {
    pub conflict_type: ConflictLabel,
    pub text: String,
    /// 1-based position in the catalog.
    pub ordinal: u8,
}

fn catalog_texts(conflict_type: ConflictLabel) -> Option<&'static [&'static str; 4]> {
    match conflict_type {
        ConflictLabel::GoalAbsence => Some(&GOAL_ABSENCE_OPTIONS),
        ConflictLabel::HumanInteraction => Some(&HUMAN_INTERACTION_OPTIONS),
        ConflictLabel::HumanOccupancy => Some(&HUMAN_OCCUPANCY_OPTIONS),
        ConflictLabel::ObjectState => Some(&OBJECT_STATE_OPTIONS),
        ConflictLabel::Normal => None,
    }
}

/// The solution catalog for a conflict type, in table order.
pub fn catalog_options(conflict_type: ConflictLabel) -> Result<Vec<SolutionOption>> {
    let texts = catalog_texts(conflict_type)
        .ok_or_else(|| Error::InvalidArgument("no solution catalog for Normal".into()))?;
    Ok(texts
        .iter()
        .enumerate()
        .map(|(i, text)| SolutionOption {
            conflict_type,
            text: (*text).to_string(),
            ordinal: (i + 1) as u8,
        })
        .collect())
}

impl SolutionOption {
    /// Looks up an option by its text, ignoring case, surrounding whitespace, quotes
    /// and a trailing period.
    pub fn from_text(conflict_type: ConflictLabel, text: &str) -> Result<SolutionOption> {
        let wanted = normalize_option_text(text);
        catalog_options(conflict_type)?
            .into_iter()
            .find(|opt| normalize_option_text(&opt.text) == wanted)
            .ok_or_else(|| {
                Error::Validation(format!(
                    "{text:?} is not an option for {}",
                    conflict_type.display_name()
                ))
            })
    }

    pub fn from_ordinal(conflict_type: ConflictLabel, ordinal: u8) -> Result<SolutionOption> {
        catalog_options(conflict_type)?
            .into_iter()
            .find(|opt| opt.ordinal == ordinal)
            .ok_or_else(|| Error::Validation(format!("option ordinal {ordinal} out of range 1..=4")))
    }

    /// True when this exact option is part of its type's catalog.
    pub fn is_canonical(&self) -> bool {
        catalog_options(self.conflict_type)
            .map(|catalog| catalog.contains(self))
            .unwrap_or(false)
    }
}

fn normalize_option_text(text: &str) -> String {
    text.trim()
        .trim_matches(|c| c == '"' || c == '\'' || c == '`')
        .trim_end_matches('.')
        .trim()
        .to_lowercase()
}

/// User-assigned concern level: 1 (lowest) to 3 (most urgent).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct EmergencyLevel(u8);

impl EmergencyLevel {
    pub const LOW: EmergencyLevel = EmergencyLevel(1);
    pub const MEDIUM: EmergencyLevel = EmergencyLevel(2);
    pub const HIGH: EmergencyLevel = EmergencyLevel(3);

    pub fn new(level: u8) -> Result<Self> {
        if (1..=3).contains(&level) {
            Ok(EmergencyLevel(level))
        } else {
            Err(Error::Validation(format!("emergency level {level} outside 1..=3")))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }
}

impl TryFrom<u8> for EmergencyLevel {
    type Error = Error;

    fn try_from(value: u8) -> Result<Self> {
        EmergencyLevel::new(value)
    }
}

impl From<EmergencyLevel> for u8 {
    fn from(level: EmergencyLevel) -> u8 {
        level.0
    }
}

/// Where an observation image comes from.
///
/// Serialized as a plain path string, or as `{"base64": "..."}` for inline bytes.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ImageRef {
    Path(PathBuf),
    Bytes(Vec<u8>),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ImageRefRepr {
    Path(String),
    Inline { base64: String },
}

impl Serialize for ImageRef {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ImageRef::Path(path) => {
                ImageRefRepr::Path(path.to_string_lossy().into_owned()).serialize(serializer)
            }
            ImageRef::Bytes(bytes) => ImageRefRepr::Inline {
                base64: BASE64.encode(bytes),
            }
            .serialize(serializer),
        }
    }
}

impl<'de> Deserialize<'de> for ImageRef {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        match ImageRefRepr::deserialize(deserializer)? {
            ImageRefRepr::Path(path) if path.is_empty() => {
                Err(serde::de::Error::custom("image path must not be empty"))
            }
            ImageRefRepr::Path(path) => Ok(ImageRef::Path(PathBuf::from(path))),
            ImageRefRepr::Inline { base64 } => BASE64
                .decode(base64.as_bytes())
                .map(ImageRef::Bytes)
                .map_err(serde::de::Error::custom),
        }
    }
}

impl ImageRef {
    pub fn load(&self) -> Result<Cow<'_, [u8]>> {
        match self {
            ImageRef::Path(path) => std::fs::read(path)
                .map(Cow::Owned)
                .map_err(|e| Error::io(path, e)),
            ImageRef::Bytes(bytes) => Ok(Cow::Borrowed(bytes)),
        }
    }

    /// Short human readable description, used in prompts.
    pub fn describe(&self) -> String {
        match self {
            ImageRef::Path(path) => path.display().to_string(),
            ImageRef::Bytes(bytes) => format!("<inline image, {} bytes>", bytes.len()),
        }
    }
}

/// Deserializes an optional string, mapping `""` (and whitespace-only) to `None`.
pub(crate) fn empty_as_none<'de, D>(deserializer: D) -> std::result::Result<Option<String>, D::Error>
where
    D: Deserializer<'de>,
{
    let value = Option::<String>::deserialize(deserializer)?;
    Ok(value.filter(|s| !s.trim().is_empty()))
}

/// One detection tick.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionInput {
    pub image: ImageRef,
    /// The user's final task.
    pub task: String,
    /// The step currently being executed.
    pub step: String,
    /// Transcribed background speech, if any was heard.
    #[serde(default, deserialize_with = "empty_as_none")]
    pub speech: Option<String>,
}

impl DetectionInput {
    pub fn new(
        image: ImageRef,
        task: impl Into<String>,
        step: impl Into<String>,
        speech: Option<String>,
    ) -> Self {
        DetectionInput {
            image,
            task: task.into(),
            step: step.into(),
            speech: speech.filter(|s| !s.trim().is_empty()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.task.trim().is_empty() {
            return Err(Error::Validation("task must not be empty".into()));
        }
        if self.step.trim().is_empty() {
            return Err(Error::Validation("step must not be empty".into()));
        }
        Ok(())
    }

    pub fn speech(&self) -> Option<&str> {
        self.speech.as_deref().filter(|s| !s.trim().is_empty())
    }
}

/// One labeled sample of the dataset (a static scenario or a trajectory frame).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    /// Image file, relative to the dataset file's directory unless absolute.
    pub image: String,
    pub task: String,
    pub step: String,
    #[serde(default, deserialize_with = "empty_as_none")]
    pub speech: Option<String>,
    pub label: ConflictLabel,
    #[serde(default)]
    pub trajectory_id: Option<String>,
    /// Frame position within the trajectory; frames are 0.5 s apart.
    #[serde(default)]
    pub frame_index: Option<u32>,
}

/// Seconds between consecutive trajectory frames.
pub const FRAME_INTERVAL_SECS: f64 = 0.5;

impl DatasetRecord {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Validation("record id must not be empty".into()));
        }
        if self.task.trim().is_empty() || self.step.trim().is_empty() {
            return Err(Error::Validation(format!(
                "record {}: task and step must not be empty",
                self.id
            )));
        }
        if self.trajectory_id.is_some() != self.frame_index.is_some() {
            return Err(Error::Validation(format!(
                "record {}: frame_index must be present exactly when trajectory_id is",
                self.id
            )));
        }
        Ok(())
    }

    pub fn is_static(&self) -> bool {
        self.trajectory_id.is_none()
    }

    /// Offset of this frame from the start of its trajectory.
    pub fn frame_time_secs(&self) -> Option<f64> {
        self.frame_index.map(|i| f64::from(i) * FRAME_INTERVAL_SECS)
    }

    pub fn image_path(&self, root: &Path) -> PathBuf {
        let path = Path::new(&self.image);
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            root.join(path)
        }
    }

    /// The detection input this record represents, with its image resolved against `root`.
    pub fn to_input(&self, root: &Path) -> DetectionInput {
        DetectionInput {
            image: ImageRef::Path(self.image_path(root)),
            task: self.task.clone(),
            step: self.step.clone(),
            speech: self.speech.clone(),
        }
    }
}
