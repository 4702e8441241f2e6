//! Run configuration: defaults, overlaid by an optional JSON file, overlaid
//! by command-line flags.

use std::path::{Path, PathBuf};

use instructasr::pipeline::ExperimentConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    pub corpus: PathBuf,
    /// Instruction bank; the bundled bank when absent.
    pub bank: Option<PathBuf>,
    pub vocab: PathBuf,
    pub checkpoint: PathBuf,
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: "run/corpus".into(),
            bank: None,
            vocab: "run/vocab.txt".into(),
            checkpoint: "run/model.ckpt".into(),
            out: "run".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub paths: Paths,
    #[serde(flatten)]
    pub experiment: ExperimentConfig,
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Defaults overlaid with the (possibly partial) JSON document at `path`.
    pub fn load(path: Option<&Path>) -> Result<Self, String> {
        let mut value = serde_json::to_value(RunConfig::default()).map_err(|e| e.to_string())?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            let file: Value = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))?;
            merge(&mut value, file);
        }
        serde_json::from_value(value).map_err(|e| format!("invalid config: {e}"))
    }

    pub fn validate(&self) -> Result<(), String> {
        let e = &self.experiment;
        e.model.validate().map_err(|x| x.to_string())?;
        e.sampler.validate().map_err(|x| x.to_string())?;
        if e.decode.beam == 0 {
            return Err("beam must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&e.suite.delta) {
            return Err("delta must lie in [0, 1]".into());
        }
        if e.train.batch_size == 0 {
            return Err("batch_size must be positive".into());
        }
        if e.corpus.min_words == 0 || e.corpus.min_words > e.corpus.max_words {
            return Err("corpus word range is empty".into());
        }
        Ok(())
    }

    /// Writes the effective configuration next to a subcommand's outputs.
    pub fn persist(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(self).expect("config serialises");
        std::fs::write(dir.join("config.json"), text + "\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_files_keep_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"train": {"steps": 7}, "paths": {"out": "x"}}"#).unwrap();
        let c = RunConfig::load(Some(&p)).unwrap();
        assert_eq!(c.experiment.train.steps, 7);
        assert_eq!(c.experiment.train.batch_size, RunConfig::default().experiment.train.batch_size);
        assert_eq!(c.paths.out, PathBuf::from("x"));
        std::fs::write(&p, r#"{"train": {"steps": "many"}}"#).unwrap();
        assert!(RunConfig::load(Some(&p)).is_err());
    }

    #[test]
    fn persisted_config_reloads_identically() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = RunConfig::default();
        c.experiment.sampler.alpha = 9.0;
        c.persist(dir.path()).unwrap();
        assert_eq!(RunConfig::load(Some(&dir.path().join("config.json"))).unwrap(), c);
    }
}
