//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! optional; unknown or repeated keys are errors. Keys:
//!
//! | key | meaning | default |
//! |---|---|---|
//! | `seed` | global seed; every random stream is derived from it | 7 |
//! | `out_dir` | root for datasets, checkpoints and reports | `runs` |
//! | `dataset` | training JSONL (relative to `out_dir`) | `data/train.jsonl` |
//! | `eval_set` | held-out prompt JSONL (relative to `out_dir`) | `data/eval.jsonl` |
//! | `per_task` | training samples per task | 25000 |
//! | `eval_prompts` | held-out prompts (split evenly over tasks) | 20 |
//! | `min_response`, `max_response` | response length range incl. EOS | 5, 200 |
//! | `vocab_size`, `d_model`, `n_layers`, `n_heads`, `d_ff`, `max_seq`, `rope_base` | model shape | see [`RunConfig::default`] |
//! | `mode` | `ldpe`, `orpe`, `none`, `prompted` or `mntpp` | `ldpe` |
//! | `lr0`, `beta1`, `beta2`, `eps`, `weight_decay` | AdamW | 5e-4, 0.9, 0.99, 1e-8, 0.01 |
//! | `epochs`, `grad_accum`, `checkpoint_every` | loop | 4, 5, 0 |
//! | `sigma0`, `sigma_max`, `max_shift` | shift curriculum (mntpp) | 0.1, 256, 256 |
//! | `grid` | target grid `start:stop:step` | `10:200:10` |
//! | `limit_grid` | token-limit grid for mntpp | `10:200:10` |
//! | `hard_cap_factor` | hard cap as a multiple of the target | 1.5 |
//! | `scale_policy` | `frozen`, `per-step` or `consistent` | `consistent` |

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::{derive_seed, LengthRange, TaskSpace};
use crate::eval::parse_grid;
use crate::inference::ScalePolicy;
use crate::model::ModelConfig;
use crate::training::{AdamWHyper, TrainMode, TrainRun};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected 'key = value'")]
    Syntax { line: usize },
    #[error("line {line}: unknown key '{key}'")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key '{key}'")]
    Duplicate { line: usize, key: String },
    #[error("{key}: invalid value '{value}': {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: PathBuf,
    pub eval_set: PathBuf,
    pub per_task: usize,
    pub eval_prompts: usize,
    pub min_response: usize,
    pub max_response: usize,
    pub model: ModelConfig,
    pub mode: TrainMode,
    pub hyper: AdamWHyper,
    pub epochs: usize,
    pub grad_accum: usize,
    pub checkpoint_every: usize,
    pub sigma0: f64,
    pub sigma_max: f64,
    pub max_shift: usize,
    pub grid: String,
    pub limit_grid: String,
    pub hard_cap_factor: f64,
    pub scale_policy: ScalePolicy,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            out_dir: PathBuf::from("runs"),
            dataset: PathBuf::from("data/train.jsonl"),
            eval_set: PathBuf::from("data/eval.jsonl"),
            per_task: 25_000,
            eval_prompts: 20,
            min_response: 5,
            max_response: 200,
            model: ModelConfig {
                vocab_size: 64,
                d_model: 64,
                n_layers: 2,
                n_heads: 4,
                d_ff: 256,
                max_seq: 320,
                rope_base: 10_000.0,
            },
            mode: TrainMode::Ldpe,
            hyper: AdamWHyper { lr0: 5e-4, ..AdamWHyper::default() },
            epochs: 4,
            grad_accum: 5,
            checkpoint_every: 0,
            sigma0: 0.1,
            sigma_max: 256.0,
            max_shift: 256,
            grid: "10:200:10".into(),
            limit_grid: "10:200:10".into(),
            hard_cap_factor: 1.5,
            scale_policy: ScalePolicy::Consistent,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1 });
            }
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Duplicate {
                    line: i + 1,
                    key: key.into(),
                });
            }
            cfg.set(key, value).map_err(|e| match e {
                ConfigError::UnknownKey { key, .. } => ConfigError::UnknownKey { line: i + 1, key },
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "seed" => self.seed = parse_value(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "dataset" => self.dataset = PathBuf::from(value),
            "eval_set" => self.eval_set = PathBuf::from(value),
            "per_task" => self.per_task = parse_value(key, value)?,
            "eval_prompts" => self.eval_prompts = parse_value(key, value)?,
            "min_response" => self.min_response = parse_value(key, value)?,
            "max_response" => self.max_response = parse_value(key, value)?,
            "vocab_size" => self.model.vocab_size = parse_value(key, value)?,
            "d_model" => self.model.d_model = parse_value(key, value)?,
            "n_layers" => self.model.n_layers = parse_value(key, value)?,
            "n_heads" => self.model.n_heads = parse_value(key, value)?,
            "d_ff" => self.model.d_ff = parse_value(key, value)?,
            "max_seq" => self.model.max_seq = parse_value(key, value)?,
            "rope_base" => self.model.rope_base = parse_value(key, value)?,
            "mode" => self.mode = parse_value(key, value)?,
            "lr0" => self.hyper.lr0 = parse_value(key, value)?,
            "beta1" => self.hyper.beta1 = parse_value(key, value)?,
            "beta2" => self.hyper.beta2 = parse_value(key, value)?,
            "eps" => self.hyper.eps = parse_value(key, value)?,
            "weight_decay" => self.hyper.weight_decay = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "grad_accum" => self.grad_accum = parse_value(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, value)?,
            "sigma0" => self.sigma0 = parse_value(key, value)?,
            "sigma_max" => self.sigma_max = parse_value(key, value)?,
            "max_shift" => self.max_shift = parse_value(key, value)?,
            "grid" => self.grid = value.into(),
            "limit_grid" => self.limit_grid = value.into(),
            "hard_cap_factor" => self.hard_cap_factor = parse_value(key, value)?,
            "scale_policy" => {
                self.scale_policy = match value {
                    "frozen" => ScalePolicy::Frozen,
                    "per-step" => ScalePolicy::PerStep,
                    "consistent" => ScalePolicy::Consistent,
                    _ => {
                        return Err(ConfigError::Value {
                            key: key.into(),
                            value: value.into(),
                            reason: "expected frozen, per-step or consistent".into(),
                        })
                    }
                }
            }
            _ => {
                return Err(ConfigError::UnknownKey {
                    line: 0,
                    key: key.into(),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, value: String, reason: String| {
            Err(ConfigError::Value {
                key: key.into(),
                value,
                reason,
            })
        };
        if let Err(e) = self.model.validate() {
            return bad("model", format!("{:?}", self.model), e.to_string());
        }
        if self.min_response < 2 || self.max_response < self.min_response {
            return bad(
                "min_response",
                format!("{}..{}", self.min_response, self.max_response),
                "need 2 <= min_response <= max_response".into(),
            );
        }
        if let Err(e) = self.train_run().validate() {
            return bad("mode", self.mode.to_string(), e.to_string());
        }
        for (key, grid) in [("grid", &self.grid), ("limit_grid", &self.limit_grid)] {
            if let Err(e) = parse_grid(grid) {
                return bad(key, grid.clone(), e.to_string());
            }
        }
        if !(self.hard_cap_factor >= 1.0) {
            return bad(
                "hard_cap_factor",
                self.hard_cap_factor.to_string(),
                "must be at least 1".into(),
            );
        }
        Ok(())
    }

    pub fn train_run(&self) -> TrainRun {
        TrainRun {
            hyper: self.hyper,
            epochs: self.epochs,
            grad_accum: self.grad_accum,
            mode: self.mode,
            sigma0: self.sigma0,
            sigma_max: self.sigma_max,
            max_shift: self.max_shift,
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
        }
    }

    pub fn space(&self) -> TaskSpace {
        TaskSpace {
            vocab_size: self.model.vocab_size,
            max_seq: self.model.max_seq,
        }
    }

    /// Content-token range (EOS excluded).
    pub fn content_range(&self) -> LengthRange {
        LengthRange::new(self.min_response - 1, self.max_response - 1)
    }

    pub fn corpus_seed(&self) -> u64 {
        derive_seed(self.seed, 101)
    }

    pub fn eval_seed(&self) -> u64 {
        derive_seed(self.seed, 202)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out_dir.join(p)
        }
    }

    /// Serializes every key in the documented format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let m = &self.model;
        let h = &self.hyper;
        let policy = match self.scale_policy {
            ScalePolicy::Frozen => "frozen",
            ScalePolicy::PerStep => "per-step",
            ScalePolicy::Consistent => "consistent",
        };
        let rows: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("dataset", self.dataset.display().to_string()),
            ("eval_set", self.eval_set.display().to_string()),
            ("per_task", self.per_task.to_string()),
            ("eval_prompts", self.eval_prompts.to_string()),
            ("min_response", self.min_response.to_string()),
            ("max_response", self.max_response.to_string()),
            ("vocab_size", m.vocab_size.to_string()),
            ("d_model", m.d_model.to_string()),
            ("n_layers", m.n_layers.to_string()),
            ("n_heads", m.n_heads.to_string()),
            ("d_ff", m.d_ff.to_string()),
            ("max_seq", m.max_seq.to_string()),
            ("rope_base", m.rope_base.to_string()),
            ("mode", self.mode.to_string()),
            ("lr0", h.lr0.to_string()),
            ("beta1", h.beta1.to_string()),
            ("beta2", h.beta2.to_string()),
            ("eps", h.eps.to_string()),
            ("weight_decay", h.weight_decay.to_string()),
            ("epochs", self.epochs.to_string()),
            ("grad_accum", self.grad_accum.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("sigma0", self.sigma0.to_string()),
            ("sigma_max", self.sigma_max.to_string()),
            ("max_shift", self.max_shift.to_string()),
            ("grid", self.grid.clone()),
            ("limit_grid", self.limit_grid.clone()),
            ("hard_cap_factor", self.hard_cap_factor.to_string()),
            ("scale_policy", policy.into()),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.mode = TrainMode::Mntpp;
        cfg.hyper.lr0 = 1.5e-3;
        cfg.scale_policy = ScalePolicy::PerStep;
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn comments_and_overrides() {
        let cfg = RunConfig::parse("# run\n\nseed = 9\nmode=orpe\n  d_model = 32 \n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.mode, TrainMode::Orpe);
        assert_eq!(cfg.model.d_model, 32);
    }

    #[test]
    fn malformed_inputs() {
        assert!(matches!(RunConfig::parse("seed"), Err(ConfigError::Syntax { line: 1 })));
        assert!(matches!(
            RunConfig::parse("x = 1"),
            Err(ConfigError::UnknownKey { line: 1, .. })
        ));
        assert!(matches!(
            RunConfig::parse("seed = 1\nseed = 2"),
            Err(ConfigError::Duplicate { line: 2, .. })
        ));
        assert!(matches!(RunConfig::parse("seed = abc"), Err(ConfigError::Value { .. })));
        assert!(RunConfig::parse("grid = 10:5:1").is_err());
        assert!(RunConfig::parse("d_model = 30").is_err());
    }
}
