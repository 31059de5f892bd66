//! Prompt template assets for the detection model and the preference summarizer.
//!
//! Templates are plain text with `{name}` placeholders. Built-in defaults ship in
//! `assets/prompts/`; a directory with files of the same names overrides them.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::{ConflictLabel, DetectionInput};

const DETECT_SYSTEM: &str = include_str!("../assets/prompts/detect_system.txt");
const DETECT_USER: &str = include_str!("../assets/prompts/detect_user.txt");
const PREFER_GOAL_ABSENCE: &str = include_str!("../assets/prompts/prefer_goal_absence.txt");
const PREFER_HUMAN_INTERACTION: &str = include_str!("../assets/prompts/prefer_human_interaction.txt");
const PREFER_HUMAN_OCCUPANCY: &str = include_str!("../assets/prompts/prefer_human_occupancy.txt");
const PREFER_OBJECT_STATE: &str = include_str!("../assets/prompts/prefer_object_state.txt");

/// Rendering of absent speech in prompts and exports.
pub const NO_SPEECH: &str = "none";

/// Replaces every `{key}` in `template`. Unknown braces are left untouched.
pub fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (key, value) in values {
        out = out.replace(&format!("{{{key}}}"), value);
    }
    out
}

fn require_placeholders(name: &str, template: &str, keys: &[&str]) -> Result<()> {
    for key in keys {
        if !template.contains(&format!("{{{key}}}")) {
            return Err(Error::Config(format!("template {name} lacks placeholder {{{key}}}")));
        }
    }
    Ok(())
}

fn read_template(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// System instruction plus per-observation user message for the detection model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectionPrompt {
    system: String,
    user: String,
}

impl Default for DetectionPrompt {
    fn default() -> Self {
        DetectionPrompt {
            system: DETECT_SYSTEM.to_string(),
            user: DETECT_USER.to_string(),
        }
    }
}

impl DetectionPrompt {
    pub fn new(system: impl Into<String>, user: impl Into<String>) -> Result<Self> {
        let prompt = DetectionPrompt {
            system: system.into(),
            user: user.into(),
        };
        require_placeholders("detect_user", &prompt.user, &["task", "step", "speech"])?;
        Ok(prompt)
    }

    /// Loads `detect_system.txt` / `detect_user.txt` from `dir`, falling back to the
    /// built-in text for any file that is missing.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let system = dir.join("detect_system.txt");
        let user = dir.join("detect_user.txt");
        DetectionPrompt::new(
            if system.exists() { read_template(&system)? } else { DETECT_SYSTEM.to_string() },
            if user.exists() { read_template(&user)? } else { DETECT_USER.to_string() },
        )
    }

    pub fn system(&self) -> &str {
        &self.system
    }

    pub fn render_user(&self, input: &DetectionInput) -> String {
        fill(
            &self.user,
            &[
                ("task", &input.task),
                ("step", &input.step),
                ("speech", input.speech().unwrap_or(NO_SPEECH)),
            ],
        )
    }
}

/// One summarizer instruction per conflict type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreferencePrompts {
    templates: BTreeMap<ConflictLabel, String>,
}

const PREFERENCE_PLACEHOLDERS: [&str; 3] = ["cases", "scenario", "options"];

fn template_file(label: ConflictLabel) -> String {
    format!("prefer_{}.txt", label.as_str())
}

impl Default for PreferencePrompts {
    fn default() -> Self {
        let templates = [
            (ConflictLabel::GoalAbsence, PREFER_GOAL_ABSENCE),
            (ConflictLabel::HumanInteraction, PREFER_HUMAN_INTERACTION),
            (ConflictLabel::HumanOccupancy, PREFER_HUMAN_OCCUPANCY),
            (ConflictLabel::ObjectState, PREFER_OBJECT_STATE),
        ]
        .into_iter()
        .map(|(label, text)| (label, text.to_string()))
        .collect();
        PreferencePrompts { templates }
    }
}

impl PreferencePrompts {
    pub fn new(templates: BTreeMap<ConflictLabel, String>) -> Result<Self> {
        for label in ConflictLabel::CONFLICTS {
            let template = templates.get(&label).ok_or_else(|| {
                Error::Config(format!("no preference template for {}", label.as_str()))
            })?;
            require_placeholders(&template_file(label), template, &PREFERENCE_PLACEHOLDERS)?;
        }
        Ok(PreferencePrompts { templates })
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut templates = PreferencePrompts::default().templates;
        for label in ConflictLabel::CONFLICTS {
            let path = dir.join(template_file(label));
            if path.exists() {
                templates.insert(label, read_template(&path)?);
            }
        }
        PreferencePrompts::new(templates)
    }

    pub fn template(&self, label: ConflictLabel) -> Result<&str> {
        self.templates
            .get(&label)
            .map(String::as_str)
            .ok_or_else(|| Error::InvalidArgument(format!("no preference template for {label}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ImageRef;

    #[test]
    fn defaults_are_complete() {
        assert!(PreferencePrompts::new(PreferencePrompts::default().templates).is_ok());
        assert!(DetectionPrompt::new(DETECT_SYSTEM, DETECT_USER).is_ok());
        for label in ConflictLabel::CONFLICTS {
            assert!(PreferencePrompts::default().template(label).is_ok());
        }
        assert!(PreferencePrompts::default().template(ConflictLabel::Normal).is_err());
    }

    #[test]
    fn system_prompt_names_every_label() {
        for label in ConflictLabel::ALL {
            assert!(DETECT_SYSTEM.contains(label.as_str()), "{label}");
        }
    }

    #[test]
    fn user_turn_renders_none_for_missing_speech() {
        let input = DetectionInput::new(ImageRef::Path("x.png".into()), "Make tea", "Boil water", None);
        let text = DetectionPrompt::default().render_user(&input);
        assert_eq!(text, "Task: Make tea\nStep: Boil water\nSpeech: none\n");
    }

    #[test]
    fn missing_placeholder_is_rejected() {
        assert!(DetectionPrompt::new("sys", "Task: {task}").is_err());
        let mut templates = PreferencePrompts::default().templates;
        templates.insert(ConflictLabel::ObjectState, "no placeholders".into());
        assert!(PreferencePrompts::new(templates.clone()).is_err());
        templates.remove(&ConflictLabel::ObjectState);
        assert!(PreferencePrompts::new(templates).is_err());
    }

    #[test]
    fn directory_overrides_single_files() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("detect_user.txt"), "{task}|{step}|{speech}").unwrap();
        let prompt = DetectionPrompt::load_dir(dir.path()).unwrap();
        assert_eq!(prompt.system(), DETECT_SYSTEM);
        let input = DetectionInput::new(ImageRef::Path("x.png".into()), "a", "b", Some("c".into()));
        assert_eq!(prompt.render_user(&input), "a|b|c");
    }
}
