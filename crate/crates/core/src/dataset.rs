//! JSON Lines dataset files.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::types::{DatasetRecord, DetectionInput};

/// Records plus the directory their relative image paths resolve against.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<DatasetRecord>,
    pub root: PathBuf,
}

impl Dataset {
    pub fn new(records: Vec<DatasetRecord>, root: impl Into<PathBuf>) -> Self {
        Dataset {
            records,
            root: root.into(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let records = read_records(path)?;
        validate_records(&records)?;
        let root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(Dataset { records, root })
    }

    pub fn input(&self, record: &DatasetRecord) -> DetectionInput {
        record.to_input(&self.root)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

pub fn read_records(path: &Path) -> Result<Vec<DatasetRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord = serde_json::from_str(&line)
            .map_err(|e| Error::json(format!("{}:{}", path.display(), lineno + 1), e))?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_records(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(record).map_err(|e| Error::json("record", e))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Checks per-record invariants, id uniqueness and that each trajectory's frames run
/// 0, 1, 2, ... without gaps.
pub fn validate_records(records: &[DatasetRecord]) -> Result<()> {
    let mut ids = HashSet::with_capacity(records.len());
    let mut frames: BTreeMap<&str, Vec<u32>> = BTreeMap::new();
    for record in records {
        record.validate()?;
        if !ids.insert(record.id.as_str()) {
            return Err(Error::Validation(format!("duplicate record id {}", record.id)));
        }
        if let (Some(traj), Some(frame)) = (&record.trajectory_id, record.frame_index) {
            frames.entry(traj).or_default().push(frame);
        }
    }
    for (traj, mut indices) in frames {
        indices.sort_unstable();
        if let Some((pos, _)) = indices
            .iter()
            .enumerate()
            .find(|(pos, idx)| **idx as usize != *pos)
        {
            return Err(Error::Validation(format!(
                "trajectory {traj}: frame indices not consecutive from 0 (gap at position {pos})"
            )));
        }
    }
    Ok(())
}
