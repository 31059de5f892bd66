use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use commet_core::synth::{default_scenarios, ScenarioEntry, ScenarioPurpose};
use commet_core::{Error, Result, Scenario};

pub const SCENARIO_FILE: &str = "scenarios.jsonl";
const SEED: u64 = 20250101;

/// Scenarios shown to annotators, in file order, indexed by id.
#[derive(Debug, Clone)]
pub struct ScenarioSet {
    entries: Vec<ScenarioEntry>,
    by_id: BTreeMap<String, usize>,
}

impl ScenarioSet {
    pub fn new(entries: Vec<ScenarioEntry>) -> Result<Self> {
        let mut by_id = BTreeMap::new();
        for (i, entry) in entries.iter().enumerate() {
            let id = entry
                .scenario
                .scenario_id
                .clone()
                .ok_or_else(|| Error::Validation(format!("scenario #{i} has no scenario_id")))?;
            entry.scenario.input.validate()?;
            if !entry.scenario.label.is_anomaly() {
                return Err(Error::Validation(format!("scenario {id} is labeled normal")));
            }
            if by_id.insert(id.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate scenario id {id}")));
            }
        }
        Ok(ScenarioSet { entries, by_id })
    }

    /// Reads `<data>/scenarios.jsonl`, writing the default set first if it is absent.
    pub fn load_or_seed(data_dir: &Path) -> Result<Self> {
        let path = data_dir.join(SCENARIO_FILE);
        if !path.exists() {
            let entries = default_scenarios(SEED, &data_dir.join("scenario_images"))?;
            let tmp = path.with_extension("jsonl.tmp");
            let mut file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            for entry in &entries {
                let line = serde_json::to_string(entry).map_err(|e| Error::json(tmp.display().to_string(), e))?;
                writeln!(file, "{line}").map_err(|e| Error::io(&tmp, e))?;
            }
            file.sync_all().map_err(|e| Error::io(&tmp, e))?;
            std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
            log::info!("seeded {} scenarios into {}", entries.len(), path.display());
        }
        let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut entries = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScenarioEntry = serde_json::from_str(&line)
                .map_err(|e| Error::Validation(format!("{}:{}: {e}", path.display(), n + 1)))?;
            entries.push(entry);
        }
        ScenarioSet::new(entries)
    }

    pub fn get(&self, id: &str) -> Option<&ScenarioEntry> {
        self.by_id.get(id).map(|&i| &self.entries[i])
    }

    pub fn scenario(&self, id: &str) -> Result<&Scenario> {
        self.get(id).map(|e| &e.scenario).ok_or_else(|| Error::NotFound {
            what: "scenario",
            id: id.to_string(),
        })
    }

    pub fn iter(&self, purpose: Option<ScenarioPurpose>) -> impl Iterator<Item = &ScenarioEntry> {
        self.entries.iter().filter(move |e| purpose.is_none_or(|p| e.purpose == p))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
