//! Run configuration: every tunable in one tree, loaded from a JSON file of
//! flat dotted keys (`{"train.lr": 0.001, "model.prefix_len": 4}`) and then
//! overridden by command-line flags.

use std::path::{Path, PathBuf};

use mpath_core::model::{ModelConfig, PretrainConfig};
use mpath_core::reports::CorpusConfig;
use mpath_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub taxonomy: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// `trigram` or `model` (token embeddings from `paths.checkpoint`).
    pub emb_backend: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            emb_backend: "trigram".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Share of the corpus held out for early stopping in `train`.
    pub val_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { val_fraction: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Master seed; the corpus, initialization, pretraining and training
    /// seeds all derive from it.
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub corpus: CorpusConfig,
    pub paths: Paths,
    pub eval: EvalConfig,
    pub split: SplitConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            pretrain: PretrainConfig::default(),
            corpus: CorpusConfig::default(),
            paths: Paths::default(),
            eval: EvalConfig::default(),
            split: SplitConfig::default(),
        }
    }
}

/// Keys that are derived from `seed` and cannot be set directly.
const DERIVED_KEYS: [&str; 3] = ["corpus.seed", "train.seed", "pretrain.seed"];

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let value: Value =
            serde_json::from_str(&text).map_err(|e| format!("config {} is not valid JSON: {e}", path.display()))?;
        let Value::Object(flat) = value else {
            return Err(format!("config {} must be a JSON object of dotted keys", path.display()));
        };
        let mut cfg = RunConfig::default();
        cfg.apply_flat(&flat)?;
        Ok(cfg)
    }

    /// Sets each dotted key in `flat`. Unknown keys and type mismatches are
    /// errors.
    pub fn apply_flat(&mut self, flat: &Map<String, Value>) -> Result<(), String> {
        let mut tree = serde_json::to_value(&*self).map_err(|e| e.to_string())?;
        for (key, value) in flat {
            if DERIVED_KEYS.contains(&key.as_str()) {
                return Err(format!("`{key}` is derived from `seed`; set `seed` instead"));
            }
            set_path(&mut tree, key, value.clone())?;
        }
        let taxonomy = self.corpus.taxonomy.clone();
        *self = serde_json::from_value(tree).map_err(|e| format!("config: {e}"))?;
        self.corpus.taxonomy = taxonomy;
        Ok(())
    }

    /// Copies `seed` into every derived seed.
    pub fn propagate_seed(&mut self) {
        self.corpus.seed = self.seed;
        self.train.seed = self.seed;
        self.pretrain.seed = self.seed;
    }

    /// All keys with their current values, flattened.
    pub fn flatten(&self) -> Map<String, Value> {
        let mut out = Map::new();
        flatten_into(
            "",
            &serde_json::to_value(self).expect("config serializes"),
            &mut out,
        );
        for k in DERIVED_KEYS {
            out.remove(k);
        }
        out
    }
}

fn set_path(tree: &mut Value, key: &str, value: Value) -> Result<(), String> {
    let unknown = || format!("unknown config key `{key}`");
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = tree;
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(unknown)?;
        if i + 1 == parts.len() {
            let slot = obj.get_mut(*part).ok_or_else(unknown)?;
            if slot.is_object() {
                return Err(format!("`{key}` is a section; set its keys individually"));
            }
            *slot = value;
            return Ok(());
        }
        node = obj.get_mut(*part).ok_or_else(unknown)?;
    }
    Err(unknown())
}

fn flatten_into(prefix: &str, v: &Value, out: &mut Map<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, child, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn flat(v: Value) -> Map<String, Value> {
        v.as_object().unwrap().clone()
    }

    #[test]
    fn dotted_keys_apply() {
        let mut c = RunConfig::default();
        c.apply_flat(&flat(json!({
            "train.lr": 0.001,
            "model.prefix_len": 4,
            "model.aux_weights.organ": 0.5,
            "paths.out_dir": "out",
            "seed": 3
        })))
        .unwrap();
        assert_eq!(c.train.lr, 0.001);
        assert_eq!(c.model.prefix_len, 4);
        assert_eq!(c.model.aux_weights.organ, 0.5);
        assert_eq!(c.paths.out_dir.as_deref(), Some(Path::new("out")));
        assert_eq!(c.seed, 3);
        c.propagate_seed();
        assert_eq!((c.corpus.seed, c.train.seed, c.pretrain.seed), (3, 3, 3));
    }

    #[test]
    fn bad_keys_are_rejected() {
        let mut c = RunConfig::default();
        assert!(c.apply_flat(&flat(json!({"train.lrr": 1}))).unwrap_err().contains("train.lrr"));
        assert!(c.apply_flat(&flat(json!({"model": 1}))).is_err());
        assert!(c.apply_flat(&flat(json!({"train.seed": 1}))).unwrap_err().contains("seed"));
        assert!(c.apply_flat(&flat(json!({"train.lr": "fast"}))).is_err());
        assert!(c.apply_flat(&flat(json!({"train.lr.x": 1}))).is_err());
    }

    #[test]
    fn flatten_round_trips() {
        let c = RunConfig::default();
        let f = c.flatten();
        assert_eq!(f["train.lr"], json!(1e-4));
        assert!(!f.contains_key("train.seed"));
        let mut d = RunConfig::default();
        d.apply_flat(&f).unwrap();
        assert_eq!(c, d);
    }
}
