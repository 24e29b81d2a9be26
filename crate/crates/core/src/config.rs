//! Flat `key = value` run configuration.
//!
//! Keys mirror [`TrainingConfig`] field names plus the dataset selection.
//! Blank lines and `#` comments are ignored. Unknown keys are errors.
//!
//! ```text
//! mode = mp
//! dataset = synthetic
//! samples = 1024
//! features = 4096
//! workers = 4
//! learning_rate = 0.0009765625
//! drop_prob = 0.1
//! seed = 1
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::LossKind;
use crate::ingest::{load_libsvm, normalize_quantize, synthetic_blobs, Dataset};
use crate::trainer::{Schedule, TrainingConfig};
use crate::wire::Q16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parallelism {
    Mp,
    Dp,
}

impl std::str::FromStr for Parallelism {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mp" => Ok(Parallelism::Mp),
            "dp" => Ok(Parallelism::Dp),
            other => Err(Error::Config(format!("mode must be mp or dp, got '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSource {
    /// Two Gaussian classes, see [`synthetic_blobs`].
    Synthetic { samples: usize, features: usize, margin: f64, seed: u64 },
    Libsvm(PathBuf),
}

impl DatasetSource {
    pub fn load(&self, kind: LossKind) -> Result<Dataset> {
        match self {
            DatasetSource::Synthetic { samples, features, margin, seed } => {
                normalize_quantize(&synthetic_blobs(*samples, *features, *margin, *seed), kind)
            }
            DatasetSource::Libsvm(path) => {
                if !path.exists() {
                    return Err(Error::Config(format!("dataset not found: {}", path.display())));
                }
                load_libsvm(path, kind)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Parallelism,
    pub dataset: DatasetSource,
    pub training: TrainingConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Parallelism::Mp,
            dataset: DatasetSource::Synthetic { samples: 1024, features: 4096, margin: 10.0, seed: 7 },
            training: TrainingConfig::default(),
        }
    }
}

/// Splits config text into ordered `(key, value)` pairs.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (k, v) = body
            .split_once('=')
            .ok_or_else(|| Error::Parse { line: i + 1, msg: format!("expected key = value, got '{body}'") })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn opt<T: std::str::FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v == "none" {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

fn show<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in parse_pairs(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    /// Reads a flat config file, or the `config` map of a `run.json`.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            #[derive(Deserialize)]
            struct Sidecar {
                config: BTreeMap<String, String>,
            }
            let sidecar: Sidecar =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let mut cfg = RunConfig::default();
            for (k, v) in &sidecar.config {
                cfg.set(k, v)?;
            }
            return Ok(cfg);
        }
        Self::from_text(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.training;
        match key {
            "mode" => self.mode = v.parse()?,
            "dataset" => {
                self.dataset = if v == "synthetic" {
                    match self.dataset {
                        DatasetSource::Synthetic { .. } => self.dataset.clone(),
                        DatasetSource::Libsvm(_) => RunConfig::default().dataset,
                    }
                } else {
                    DatasetSource::Libsvm(PathBuf::from(v))
                }
            }
            "samples" | "features" | "margin" | "data_seed" => {
                let DatasetSource::Synthetic { samples, features, margin, seed } = &mut self.dataset else {
                    return Err(Error::Config(format!("{key} only applies to the synthetic dataset")));
                };
                match key {
                    "samples" => *samples = num(key, v)?,
                    "features" => *features = num(key, v)?,
                    "margin" => *margin = num(key, v)?,
                    _ => *seed = num(key, v)?,
                }
            }
            "schedule" => {
                t.schedule = match v {
                    "pipelined" => Schedule::Pipelined,
                    "vanilla" => Schedule::Vanilla,
                    other => return Err(Error::Config(format!("schedule must be pipelined or vanilla, got '{other}'"))),
                }
            }
            "workers" => t.workers = num(key, v)?,
            "engines" => t.engines = num(key, v)?,
            "banks" => t.banks = num(key, v)?,
            "batch" => t.batch = num(key, v)?,
            "micro_batch" => t.micro_batch = num(key, v)?,
            "precision" => t.precision = num(key, v)?,
            "learning_rate" => t.learning_rate = Q16::from_real(num(key, v)?)?,
            "epochs" => t.epochs = num(key, v)?,
            "loss" => t.loss = v.parse()?,
            "slots" => t.slots = num(key, v)?,
            "drop_prob" => t.fault.drop_prob = num(key, v)?,
            "dup_prob" => t.fault.dup_prob = num(key, v)?,
            "latency_ns" => t.fault.latency_ns = num(key, v)?,
            "jitter_ns" => t.fault.jitter_ns = num(key, v)?,
            "seed" => t.fault.seed = num(key, v)?,
            "switch_proc_ns" => t.switch_proc_ns = num(key, v)?,
            "link_gbps" => t.link_gbps = opt(key, v)?,
            "cycle_ns" => t.cycle_ns = num(key, v)?,
            "forward_ns" => t.forward_ns = opt(key, v)?,
            "backward_ns" => t.backward_ns = opt(key, v)?,
            "horizon_ns" => t.horizon_ns = num(key, v)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Every key with its resolved value; feeding these back through
    /// [`RunConfig::set`] reproduces `self`.
    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let t = &self.training;
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("mode", if self.mode == Parallelism::Mp { "mp" } else { "dp" }.into());
        match &self.dataset {
            DatasetSource::Synthetic { samples, features, margin, seed } => {
                put("dataset", "synthetic".into());
                put("samples", samples.to_string());
                put("features", features.to_string());
                put("margin", margin.to_string());
                put("data_seed", seed.to_string());
            }
            DatasetSource::Libsvm(p) => put("dataset", p.display().to_string()),
        }
        put("schedule", if t.schedule == Schedule::Pipelined { "pipelined" } else { "vanilla" }.into());
        put("workers", t.workers.to_string());
        put("engines", t.engines.to_string());
        put("banks", t.banks.to_string());
        put("batch", t.batch.to_string());
        put("micro_batch", t.micro_batch.to_string());
        put("precision", t.precision.to_string());
        put("learning_rate", t.learning_rate.to_real().to_string());
        put("epochs", t.epochs.to_string());
        put("loss", t.loss.to_string());
        put("slots", t.slots.to_string());
        put("drop_prob", t.fault.drop_prob.to_string());
        put("dup_prob", t.fault.dup_prob.to_string());
        put("latency_ns", t.fault.latency_ns.to_string());
        put("jitter_ns", t.fault.jitter_ns.to_string());
        put("seed", t.fault.seed.to_string());
        put("switch_proc_ns", t.switch_proc_ns.to_string());
        put("link_gbps", show(&t.link_gbps));
        put("cycle_ns", t.cycle_ns.to_string());
        put("forward_ns", show(&t.forward_ns));
        put("backward_ns", show(&t.backward_ns));
        put("horizon_ns", t.horizon_ns.to_string());
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let cfg = RunConfig::from_text("# demo\nworkers = 4  # four\n\nlearning_rate = 0.0009765625\nlink_gbps = 100\n").unwrap();
        assert_eq!(cfg.training.workers, 4);
        assert_eq!(cfg.training.learning_rate, Q16(64));
        assert_eq!(cfg.training.link_gbps, Some(100.0));
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(matches!(RunConfig::from_text("workers 4"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(RunConfig::from_text("colour = red"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_text("workers = four"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_text("dataset = a.svm\nsamples = 3"), Err(Error::Config(_))));
    }

    #[test]
    fn pairs_round_trip() {
        let mut cfg = RunConfig::from_text("mode = dp\nworkers = 2\nforward_ns = 77\nschedule = vanilla\nmargin = 2.5").unwrap();
        cfg.training.learning_rate = Q16(3);
        let mut back = RunConfig::default();
        for (k, v) in cfg.to_pairs() {
            back.set(&k, &v).unwrap();
        }
        assert_eq!(back, cfg);
    }

    #[test]
    fn missing_dataset_is_reported() {
        let src = DatasetSource::Libsvm(PathBuf::from("/nonexistent/data.svm"));
        let err = src.load(LossKind::Squared).unwrap_err();
        assert!(err.to_string().contains("dataset not found"));
    }
}
