//! Tabular study output: one CSV and one JSON summary per study run.

use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub key: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

impl Group {
    pub fn from_values(key: impl Into<String>, values: &[f64]) -> Group {
        let n = values.len();
        let mean = if n == 0 { 0.0 } else { super::stats::mean(values) };
        Group {
            key: key.into(),
            n,
            mean,
            std: super::stats::std_dev(values),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StudyReport {
    pub study: String,
    pub seed: u64,
    pub config: IndexMap<String, serde_json::Value>,
    pub groups: Vec<Group>,
    pub scalars: IndexMap<String, f64>,
    /// Detail table for the CSV; the group table is used when empty.
    #[serde(skip)]
    pub columns: Vec<String>,
    #[serde(skip)]
    pub rows: Vec<Vec<String>>,
}

impl StudyReport {
    pub fn new(study: &str, seed: u64) -> Self {
        StudyReport {
            study: study.to_string(),
            seed,
            ..Default::default()
        }
    }

    pub fn config(mut self, key: &str, value: impl Serialize) -> Self {
        self.config
            .insert(key.to_string(), serde_json::to_value(value).expect("serializable config"));
        self
    }

    pub fn scalar(&mut self, key: &str, value: f64) {
        self.scalars.insert(key.to_string(), value);
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.scalars.get(key).copied()
    }

    pub fn group(&self, key: &str) -> Option<&Group> {
        self.groups.iter().find(|g| g.key == key)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        if self.columns.is_empty() {
            out.push_str("key,n,mean,std\n");
            for g in &self.groups {
                out.push_str(&format!("{},{},{},{}\n", g.key, g.n, g.mean, g.std));
            }
        } else {
            out.push_str(&self.columns.join(","));
            out.push('\n');
            for r in &self.rows {
                out.push_str(&r.join(","));
                out.push('\n');
            }
        }
        out
    }

    pub fn file_stem(&self) -> String {
        format!("{}_{}", self.study, self.seed)
    }

    /// Writes `<study>_<seed>.csv` and `<study>_<seed>.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join(format!("{}.csv", self.file_stem()));
        let json = dir.join(format!("{}.json", self.file_stem()));
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        std::fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))?;
        Ok((csv, json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_shape_and_files() {
        let mut r = StudyReport::new("demo", 3).config("users", 10);
        r.groups.push(Group::from_values("2", &[1.0, 3.0]));
        r.scalar("tau", -0.5);
        let v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        let keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys, ["study", "seed", "config", "groups", "scalars"]);
        assert_eq!(v["groups"][0]["mean"], 2.0);
        assert_eq!(r.to_csv(), format!("key,n,mean,std\n2,2,2,{}\n", 2f64.sqrt()));
        let dir = tempfile::tempdir().unwrap();
        let (csv, json) = r.write(dir.path()).unwrap();
        assert!(csv.ends_with("demo_3.csv") && json.ends_with("demo_3.json"));
    }
}
