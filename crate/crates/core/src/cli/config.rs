use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use indexmap::IndexMap;
use serde::Serialize;

use crate::analysis::ProbSource;
use crate::error::{Error, Result};
use crate::model::{Aggregation, ScorerConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum WorldKind {
    Benchmark,
    Reversal,
    Intransitive,
    Modality,
}

fn parse_agg(s: &str) -> std::result::Result<Aggregation, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_source(s: &str) -> std::result::Result<ProbSource, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Every tunable of a run. Field names double as flag names (`--batch-size`
/// or `--batch_size`) and config-file keys.
#[derive(Debug, Clone, Args, Serialize)]
#[command(args_override_self = true)]
pub struct RunConfig {
    /// Flat `key = value` file of defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for every stochastic step; required by stochastic subcommands.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Root directory holding run directories.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Run directory name; defaults to `<world>_<seed>`.
    #[arg(long, alias = "run_id")]
    pub run_id: Option<String>,

    #[arg(long, value_enum, default_value = "benchmark")]
    pub world: WorldKind,
    /// Per-modality weights for the modality world.
    #[arg(long, default_value = "3,0.5,0.5")]
    pub predictiveness: String,

    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub interactions: Option<PathBuf>,
    #[arg(long)]
    pub placement: Option<PathBuf>,
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    #[arg(long)]
    pub params: Option<PathBuf>,

    /// SID length.
    #[arg(long, default_value_t = 3)]
    pub m: usize,
    /// Codebook size per level.
    #[arg(long, alias = "M", default_value_t = 8)]
    pub vocab: usize,
    #[arg(long, alias = "kmeans_iters", default_value_t = 50)]
    pub kmeans_iters: usize,

    /// Latent vocabulary size (0 = base model).
    #[arg(long, default_value_t = 0)]
    pub latent: usize,
    #[arg(long, value_parser = parse_agg, default_value = "sum")]
    #[serde(serialize_with = "display")]
    pub agg: Aggregation,
    /// Bind each latent token to one SID permutation (requires latent = m!).
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    pub bind: bool,

    #[arg(long, default_value_t = 32)]
    pub d: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 0.8)]
    pub gamma: f64,

    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, alias = "batch_size", default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,

    #[arg(long, alias = "beam_size", default_value_t = crate::beam::DEFAULT_BEAM_SIZE)]
    pub beam_size: usize,
    /// Score every item instead of beam search during eval.
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    pub exhaustive: bool,
    /// Comma-separated cutoffs.
    #[arg(long, default_value = "5,10,20")]
    pub ks: String,

    /// Comma-separated study names for analyze.
    #[arg(long)]
    pub study: Option<String>,
    /// Users sampled for studies.
    #[arg(long, default_value_t = 200)]
    pub users: usize,
    /// Pairs sampled per distance stratum.
    #[arg(long, default_value_t = 256)]
    pub pairs: usize,
    /// Comma-separated tree distances; defaults to 2, 4, .., 2m.
    #[arg(long)]
    pub distances: Option<String>,
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
    #[arg(long, default_value_t = 2)]
    pub delta: usize,
    #[arg(long, alias = "prob_source", value_parser = parse_source, default_value = "prob")]
    pub prob_source: ProbSource,
    /// Paths per user counted by the generated-usage study.
    #[arg(long, alias = "top_k", default_value_t = 10)]
    pub top_k: usize,
    /// Comma-separated item ids for pair/triple studies; defaults to the
    /// planted items of the reversal and intransitive worlds.
    #[arg(long)]
    pub items: Option<String>,
    /// Comma-separated run ids compared by report; defaults to this run.
    #[arg(long)]
    pub compare: Option<String>,
}

fn display<S: serde::Serializer, T: std::fmt::Display>(v: &T, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_str(v)
}

fn list<T: std::str::FromStr>(key: &str, text: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse().map_err(|_| Error::Config {
                key: key.into(),
                reason: format!("cannot parse {s:?}"),
            })
        })
        .collect()
}

impl RunConfig {
    pub fn seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| Error::Config {
            key: "seed".into(),
            reason: "a seed is required for this subcommand".into(),
        })
    }

    pub fn run_id(&self) -> String {
        self.run_id.clone().unwrap_or_else(|| {
            let w = format!("{:?}", self.world).to_lowercase();
            match self.seed {
                Some(s) => format!("{w}_{s}"),
                None => w,
            }
        })
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out.join(self.run_id())
    }

    fn or_run(&self, p: &Option<PathBuf>, rel: &str) -> PathBuf {
        p.clone().unwrap_or_else(|| self.run_dir().join(rel))
    }

    pub fn features_path(&self) -> PathBuf {
        self.or_run(&self.features, "world/features.jsonl")
    }

    pub fn interactions_path(&self) -> PathBuf {
        self.or_run(&self.interactions, "world/interactions.jsonl")
    }

    pub fn placement_path(&self) -> PathBuf {
        self.or_run(&self.placement, "world/placement.json")
    }

    pub fn catalog_path(&self) -> PathBuf {
        self.or_run(&self.catalog, "catalog.json")
    }

    pub fn params_path(&self) -> PathBuf {
        self.or_run(&self.params, "params.json")
    }

    pub fn predictiveness(&self) -> Result<Vec<f64>> {
        list("predictiveness", &self.predictiveness)
    }

    pub fn ks(&self) -> Result<Vec<usize>> {
        let ks: Vec<usize> = list("ks", &self.ks)?;
        if ks.is_empty() || ks.contains(&0) {
            return Err(Error::Config {
                key: "ks".into(),
                reason: "need cutoffs of at least 1".into(),
            });
        }
        Ok(ks)
    }

    pub fn distances(&self) -> Result<Vec<usize>> {
        match &self.distances {
            Some(t) => {
                let ds: Vec<usize> = list("distances", t)?;
                if let Some(d) = ds.iter().find(|&&d| d % 2 == 1 || d > 2 * self.m) {
                    return Err(Error::Config {
                        key: "distances".into(),
                        reason: format!("{d} is not an even distance in [0, {}]", 2 * self.m),
                    });
                }
                Ok(ds)
            }
            None => Ok((1..=self.m).map(|k| 2 * k).collect()),
        }
    }

    pub fn items(&self) -> Option<Vec<String>> {
        let planted = match self.world {
            WorldKind::Reversal => Some(vec![crate::synth::item_id(0), crate::synth::item_id(1)]),
            WorldKind::Intransitive => Some((0..3).map(crate::synth::item_id).collect()),
            _ => None,
        };
        self.items
            .as_ref()
            .map(|t| t.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
            .or(planted)
    }

    pub fn scorer(&self) -> Result<ScorerConfig> {
        let cfg = ScorerConfig {
            d: self.d,
            hidden: self.hidden,
            m: self.m,
            vocab: self.vocab,
            latent: self.latent,
            gamma: self.gamma,
            seed: self.seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config {
                key: "lr".into(),
                reason: "must be a finite non-negative rate".into(),
            });
        }
        Ok(TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            seed: self.seed()?,
            patience: self.patience,
        })
    }

    pub fn model_tag(&self) -> String {
        match (self.latent, self.bind) {
            (0, _) => "base".into(),
            (l, false) => format!("latte{l}"),
            (l, true) => format!("latte{l}_perm"),
        }
    }

    /// Resolved values keyed by config-file name, without the run-local paths
    /// that only name where this config was read from.
    pub fn resolved(&self) -> IndexMap<String, serde_json::Value> {
        let v = serde_json::to_value(self).expect("config serializes");
        let mut out = IndexMap::new();
        if let serde_json::Value::Object(map) = v {
            for (k, val) in map {
                if k != "config" {
                    out.insert(k, val);
                }
            }
        }
        out.insert("run_id".into(), serde_json::Value::String(self.run_id()));
        out
    }

    pub fn resolved_text(&self, command: &str) -> String {
        let mut s = format!("# latte {command}\n");
        for (k, v) in self.resolved() {
            let shown = match v {
                serde_json::Value::Null => "-".to_string(),
                serde_json::Value::String(t) => t,
                other => other.to_string(),
            };
            let _ = writeln!(s, "{k} = {shown}");
        }
        s
    }
}

/// Reads a flat `key = value` file into `--key value` arguments. Blank lines
/// and `#` comments are ignored; values may be quoted.
pub fn load_config_args(path: &Path) -> Result<Vec<std::ffi::OsString>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split_once('#').map_or(raw, |(a, _)| a).trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Malformed {
            path: path.to_path_buf(),
            line: n + 1,
            reason: "expected key = value".into(),
        })?;
        let (k, v) = (k.trim(), v.trim().trim_matches('"'));
        if k.is_empty() || k == "config" {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                line: n + 1,
                reason: format!("invalid key {k:?}"),
            });
        }
        out.push(format!("--{}", k.replace('_', "-")).into());
        out.push(v.into());
    }
    Ok(out)
}
