//! JSON-lines readers and writers for features and interaction logs.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ItemFeatures;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user_id: String,
    pub items: Vec<String>,
}

/// Chronological per-user interaction sequences.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InteractionDataset {
    pub sequences: Vec<UserSequence>,
}

impl InteractionDataset {
    /// Checks sequence lengths and that every item is known.
    pub fn validate(&self, known: impl Fn(&str) -> bool) -> Result<()> {
        for seq in &self.sequences {
            if seq.items.len() < 3 {
                return Err(Error::ShortSequence {
                    user: seq.user_id.clone(),
                    len: seq.items.len(),
                });
            }
            if let Some(item) = seq.items.iter().find(|i| !known(i)) {
                return Err(Error::UnknownInteractionItem {
                    user: seq.user_id.clone(),
                    item: item.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

fn parse_lines<T: for<'de> Deserialize<'de>>(path: &Path, text: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(line).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            line: idx + 1,
            reason: e.to_string(),
        })?;
        out.push(record);
    }
    if out.is_empty() {
        return Err(Error::NoRecords(path.to_path_buf()));
    }
    Ok(out)
}

pub fn parse_features(path: &Path, text: &str) -> Result<Vec<ItemFeatures>> {
    let features: Vec<ItemFeatures> = parse_lines(path, text)?;
    let dim = features[0].vector.len();
    for (idx, f) in features.iter().enumerate() {
        if f.vector.len() != dim || dim == 0 {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                line: idx + 1,
                reason: format!("vector of length {} (expected {dim} >= 1)", f.vector.len()),
            });
        }
        if f.vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(f.item_id.clone()));
        }
    }
    Ok(features)
}

pub fn load_features(path: &Path) -> Result<Vec<ItemFeatures>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_features(path, &text)
}

pub fn parse_interactions(
    path: &Path,
    text: &str,
    known: impl Fn(&str) -> bool,
) -> Result<InteractionDataset> {
    let sequences: Vec<UserSequence> = parse_lines(path, text)?;
    let dataset = InteractionDataset { sequences };
    dataset.validate(known)?;
    Ok(dataset)
}

/// Reads an interaction log, rejecting items for which `known` is false.
pub fn load_interactions(path: &Path, known: impl Fn(&str) -> bool) -> Result<InteractionDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(path, &text, known)
}

fn write_lines<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, &r)?;
        buf.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn write_features(path: &Path, features: &[ItemFeatures]) -> Result<()> {
    write_lines(path, features)
}

pub fn write_interactions(path: &Path, dataset: &InteractionDataset) -> Result<()> {
    write_lines(path, &dataset.sequences)
}
