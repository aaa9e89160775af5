use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::Value;
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::model::HyperParams;

/// Everything a run needs: hyperparameters, data paths, and schedule.
///
/// Loaded from a flat JSON object; every key can be overridden with
/// `--key=value`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub hp: HyperParams,
    pub train_path: Option<PathBuf>,
    pub val_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    /// Fraction of each user's train pairs held out when no validation file is given.
    pub val_fraction: f64,
    pub eval_every: usize,
    pub eval_ks: Vec<usize>,
    /// Evaluations without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
    pub svd_oversample: usize,
    pub svd_power_iters: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            hp: HyperParams::default(),
            train_path: None,
            val_path: None,
            test_path: None,
            val_fraction: 0.1,
            eval_every: 1,
            eval_ks: vec![20],
            patience: 20,
            checkpoint_dir: None,
            log_path: None,
            svd_oversample: 8,
            svd_power_iters: 4,
        }
    }
}

const KEYS: &[&str] = &[
    "embed_dim",
    "layers",
    "svd_rank",
    "dropout",
    "temperature",
    "lambda1",
    "lambda2",
    "learning_rate",
    "batch_size",
    "epochs",
    "seed",
    "cl_scope",
    "train",
    "val",
    "test",
    "val_fraction",
    "eval_every",
    "eval_ks",
    "patience",
    "checkpoint_dir",
    "log_path",
    "svd_oversample",
    "svd_power_iters",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, HarnessError> {
    value.trim().parse().map_err(|_| HarnessError::Config(format!("invalid value {value:?} for {key}")))
}

fn opt_path(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        let key = key.replace('-', "_");
        let hp = &mut self.hp;
        match key.as_str() {
            "embed_dim" => hp.embed_dim = parse(&key, value)?,
            "layers" => hp.layers = parse(&key, value)?,
            "svd_rank" => hp.svd_rank = parse(&key, value)?,
            "dropout" => hp.dropout = parse(&key, value)?,
            "temperature" => hp.temperature = parse(&key, value)?,
            "lambda1" => hp.lambda1 = parse(&key, value)?,
            "lambda2" => hp.lambda2 = parse(&key, value)?,
            "learning_rate" | "lr" => hp.learning_rate = parse(&key, value)?,
            "batch_size" => hp.batch_size = parse(&key, value)?,
            "epochs" => hp.epochs = parse(&key, value)?,
            "seed" => hp.seed = parse(&key, value)?,
            "cl_scope" => hp.cl_scope = value.trim().parse().map_err(HarnessError::Config)?,
            "train" => self.train_path = opt_path(value),
            "val" => self.val_path = opt_path(value),
            "test" => self.test_path = opt_path(value),
            "val_fraction" => self.val_fraction = parse(&key, value)?,
            "eval_every" => self.eval_every = parse(&key, value)?,
            "eval_ks" => {
                self.eval_ks = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse(&key, s))
                    .collect::<Result<_, _>>()?
            }
            "patience" => self.patience = parse(&key, value)?,
            "checkpoint_dir" => self.checkpoint_dir = opt_path(value),
            "log_path" => self.log_path = opt_path(value),
            "svd_oversample" => self.svd_oversample = parse(&key, value)?,
            "svd_power_iters" => self.svd_power_iters = parse(&key, value)?,
            other => {
                return Err(HarnessError::Config(format!(
                    "unknown config key {other:?}; known keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies a one-level JSON object on top of the current values.
    pub fn merge_json(&mut self, text: &str) -> Result<(), HarnessError> {
        let root: Value =
            serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("config is not valid JSON: {e}")))?;
        let Value::Object(map) = root else {
            return Err(HarnessError::Config("config must be a JSON object".into()));
        };
        for (key, value) in map {
            let text = match value {
                Value::Null => String::new(),
                Value::String(s) => s,
                Value::Bool(b) => b.to_string(),
                Value::Number(n) => n.to_string(),
                Value::Array(items) => items
                    .iter()
                    .map(|v| match v {
                        Value::Number(n) => Ok(n.to_string()),
                        Value::String(s) => Ok(s.clone()),
                        _ => Err(HarnessError::Config(format!("unsupported list element in {key}"))),
                    })
                    .collect::<Result<Vec<_>, _>>()?
                    .join(","),
                Value::Object(_) => return Err(HarnessError::Config(format!("nested object for {key} not allowed"))),
            };
            self.set(&key, &text)?;
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })?;
        let mut cfg = Self::default();
        cfg.merge_json(&text)?;
        Ok(cfg)
    }

    /// Applies `--key=value` (or `key=value`) arguments in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, args: &[S]) -> Result<(), HarnessError> {
        for arg in args {
            let arg = arg.as_ref();
            let body = arg.strip_prefix("--").unwrap_or(arg);
            let Some((key, value)) = body.split_once('=') else {
                return Err(HarnessError::Config(format!("expected --key=value, got {arg:?}")));
            };
            self.set(key, value)?;
        }
        Ok(())
    }

    /// Canonical `key=value` listing; the basis of [`RunConfig::digest`].
    pub fn canonical(&self) -> String {
        let hp = &self.hp;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = String::new();
        let _ = writeln!(s, "embed_dim={}", hp.embed_dim);
        let _ = writeln!(s, "layers={}", hp.layers);
        let _ = writeln!(s, "svd_rank={}", hp.svd_rank);
        let _ = writeln!(s, "dropout={:?}", hp.dropout);
        let _ = writeln!(s, "temperature={:?}", hp.temperature);
        let _ = writeln!(s, "lambda1={:?}", hp.lambda1);
        let _ = writeln!(s, "lambda2={:?}", hp.lambda2);
        let _ = writeln!(s, "learning_rate={:?}", hp.learning_rate);
        let _ = writeln!(s, "batch_size={}", hp.batch_size);
        let _ = writeln!(s, "epochs={}", hp.epochs);
        let _ = writeln!(s, "seed={}", hp.seed);
        let _ = writeln!(s, "cl_scope={}", hp.cl_scope);
        let _ = writeln!(s, "train={}", path(&self.train_path));
        let _ = writeln!(s, "val={}", path(&self.val_path));
        let _ = writeln!(s, "test={}", path(&self.test_path));
        let _ = writeln!(s, "val_fraction={:?}", self.val_fraction);
        let _ = writeln!(s, "eval_every={}", self.eval_every);
        let ks: Vec<String> = self.eval_ks.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "eval_ks={}", ks.join(","));
        let _ = writeln!(s, "patience={}", self.patience);
        let _ = writeln!(s, "svd_oversample={}", self.svd_oversample);
        let _ = writeln!(s, "svd_power_iters={}", self.svd_power_iters);
        s
    }

    /// SHA-256 of the canonical listing, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    /// Checks values and that the data files exist.
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.hp.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.eval_every == 0 {
            return Err(HarnessError::Config("eval_every must be >= 1".into()));
        }
        if self.eval_ks.is_empty() || self.eval_ks.contains(&0) {
            return Err(HarnessError::Config("eval_ks must list cutoffs >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(HarnessError::Config("val_fraction must be in [0, 1)".into()));
        }
        for (name, p) in [("train", &self.train_path), ("test", &self.test_path)] {
            match p {
                None => return Err(HarnessError::Config(format!("missing `{name}` path"))),
                Some(p) if !p.exists() => {
                    return Err(HarnessError::Config(format!("{name} file {} does not exist", p.display())))
                }
                _ => {}
            }
        }
        if let Some(p) = &self.val_path {
            if !p.exists() {
                return Err(HarnessError::Config(format!("val file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// K used for model selection: 20 when evaluated, else the first cutoff.
    pub fn selection_k(&self) -> usize {
        if self.eval_ks.contains(&20) {
            20
        } else {
            self.eval_ks[0]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::ClScope;

    #[test]
    fn json_then_cli_overrides() {
        let mut c = RunConfig::default();
        c.merge_json(r#"{"embed_dim": 16, "lambda1": 0.5, "eval_ks": [5, 20], "cl_scope": "full-population", "val": null}"#)
            .unwrap();
        assert_eq!(c.hp.embed_dim, 16);
        assert_eq!(c.eval_ks, vec![5, 20]);
        assert_eq!(c.hp.cl_scope, ClScope::FullPopulation);
        c.apply_overrides(&["--embed-dim=8", "--lambda1=0"]).unwrap();
        assert_eq!(c.hp.embed_dim, 8);
        assert_eq!(c.hp.lambda1, 0.0);
    }

    #[test]
    fn bad_input_is_config_error() {
        let mut c = RunConfig::default();
        assert!(matches!(c.set("nope", "1"), Err(HarnessError::Config(_))));
        assert!(matches!(c.set("epochs", "many"), Err(HarnessError::Config(_))));
        assert!(c.merge_json(r#"{"a": {"b": 1}}"#).is_err());
        assert!(c.merge_json("[1]").is_err());
        assert!(c.apply_overrides(&["--epochs"]).is_err());
    }

    #[test]
    fn digest_tracks_values() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.hp.seed += 1;
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
    }

    #[test]
    fn validation_requires_paths() {
        let c = RunConfig::default();
        assert!(matches!(c.validate(), Err(HarnessError::Config(_))));
    }
}
