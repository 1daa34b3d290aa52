//! Run configuration: flat dotted-key JSON, overridden by command-line flags.

use std::path::{Path, PathBuf};

use serde_json::Value;
use sketchhash_core::hash::Activation;
use sketchhash_core::{OptimizerConfig, SgdConfig, SyntheticSpec};

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub k: usize,
    pub radius: u32,
    pub map_cutoff: Option<usize>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            k: 200,
            radius: 2,
            map_cutoff: None,
        }
    }
}

/// Everything a command may need. One `seed` drives every random consumer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub sgd: SgdConfig,
    pub hidden: usize,
    pub activation: Activation,
    pub synthetic: SyntheticSpec,
    /// Held-out query sketches written by `generate`.
    pub holdout: usize,
    pub embedding_dim: usize,
    pub embedding_path: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub eval: EvalSettings,
    pub threads: usize,
    pub out_dir: Option<PathBuf>,
    synthetic_keys: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            optimizer: OptimizerConfig::default(),
            sgd: SgdConfig::default(),
            hidden: 64,
            activation: Activation::Tanh,
            synthetic: SyntheticSpec::default(),
            holdout: 50,
            embedding_dim: 32,
            embedding_path: None,
            data_dir: None,
            eval: EvalSettings::default(),
            threads: default_threads(),
            out_dir: None,
            synthetic_keys: false,
        }
    }
}

pub fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Command-line flags that override config values.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub bits: Option<usize>,
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
    pub epochs: Option<usize>,
    pub k: Option<usize>,
    pub radius: Option<u32>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub embedding: Option<PathBuf>,
}

fn bad(key: &str, want: &str) -> CliError {
    CliError::Validation(format!("config key {key}: expected {want}"))
}

fn as_u64(key: &str, v: &Value) -> Result<u64, CliError> {
    v.as_u64().ok_or_else(|| bad(key, "a non-negative integer"))
}

fn as_usize(key: &str, v: &Value) -> Result<usize, CliError> {
    as_u64(key, v).map(|x| x as usize)
}

fn as_f64(key: &str, v: &Value) -> Result<f64, CliError> {
    v.as_f64().ok_or_else(|| bad(key, "a number"))
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str, CliError> {
    v.as_str().ok_or_else(|| bad(key, "a string"))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config { reason, .. } => CliError::Config {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }

    /// Parses a JSON object with flat dotted keys; unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let value: Value = serde_json::from_str(text).map_err(|e| CliError::Config {
            path: PathBuf::new(),
            reason: e.to_string(),
        })?;
        let Value::Object(map) = value else {
            return Err(CliError::Config {
                path: PathBuf::new(),
                reason: "top level must be a JSON object".into(),
            });
        };
        let mut cfg = Self::default();
        for (key, v) in &map {
            cfg.set(key, v)?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &Value) -> Result<(), CliError> {
        if key.starts_with("synthetic.") {
            self.synthetic_keys = true;
        }
        match key {
            "seed" => self.seed = as_u64(key, v)?,
            "threads" => self.threads = as_usize(key, v)?,
            "output.dir" => self.out_dir = Some(as_str(key, v)?.into()),
            "data.dir" => self.data_dir = Some(as_str(key, v)?.into()),

            "optimizer.bits" => self.optimizer.bits = as_usize(key, v)?,
            "optimizer.lambda" => self.optimizer.lambda = as_f64(key, v)?,
            "optimizer.gamma" => self.optimizer.gamma = as_f64(key, v)?,
            "optimizer.epochs" => self.optimizer.epochs = as_usize(key, v)?,
            "optimizer.dcc_sweeps" => self.optimizer.dcc_sweeps = as_usize(key, v)?,
            "optimizer.convergence_tol" => self.optimizer.convergence_tol = as_f64(key, v)?,
            "optimizer.train_hash" => {
                self.optimizer.train_hash = v.as_bool().ok_or_else(|| bad(key, "a boolean"))?
            }

            "sgd.learning_rate" => self.sgd.learning_rate = as_f64(key, v)?,
            "sgd.momentum" => self.sgd.momentum = as_f64(key, v)?,
            "sgd.batch_size" => self.sgd.batch_size = as_usize(key, v)?,
            "sgd.lr_decay" => self.sgd.lr_decay = as_f64(key, v)?,

            "model.hidden" => self.hidden = as_usize(key, v)?,
            "model.activation" => {
                self.activation = match as_str(key, v)? {
                    "tanh" => Activation::Tanh,
                    "identity" => Activation::Identity,
                    _ => return Err(bad(key, "\"tanh\" or \"identity\"")),
                }
            }

            "synthetic.classes" => self.synthetic.classes = as_usize(key, v)?,
            "synthetic.n_images" => self.synthetic.n_images = as_usize(key, v)?,
            "synthetic.n_sketches" => self.synthetic.n_sketches = as_usize(key, v)?,
            "synthetic.image_dim" => self.synthetic.image_dim = as_usize(key, v)?,
            "synthetic.sketch_dim" => self.synthetic.sketch_dim = as_usize(key, v)?,
            "synthetic.cluster_sep" => self.synthetic.cluster_sep = as_f64(key, v)?,
            "synthetic.noise_sigma" => self.synthetic.noise_sigma = as_f64(key, v)?,
            "synthetic.holdout" => self.holdout = as_usize(key, v)?,

            "embedding.dim" => self.embedding_dim = as_usize(key, v)?,
            "embedding.path" => self.embedding_path = Some(as_str(key, v)?.into()),

            "eval.k" => self.eval.k = as_usize(key, v)?,
            "eval.radius" => self.eval.radius = as_u64(key, v)? as u32,
            "eval.map_cutoff" => {
                self.eval.map_cutoff = if v.is_null() {
                    None
                } else {
                    Some(as_usize(key, v)?)
                }
            }
            _ => return Err(CliError::Validation(format!("unknown config key {key}"))),
        }
        Ok(())
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(b) = o.bits {
            self.optimizer.bits = b;
        }
        if let Some(l) = o.lambda {
            self.optimizer.lambda = l;
        }
        if let Some(g) = o.gamma {
            self.optimizer.gamma = g;
        }
        if let Some(e) = o.epochs {
            self.optimizer.epochs = e;
        }
        if let Some(k) = o.k {
            self.eval.k = k;
        }
        if let Some(r) = o.radius {
            self.eval.radius = r;
        }
        if let Some(t) = o.threads {
            self.threads = t;
        }
        if let Some(out) = &o.out {
            self.out_dir = Some(out.clone());
        }
        if let Some(d) = &o.data {
            self.data_dir = Some(d.clone());
        }
        if let Some(e) = &o.embedding {
            self.embedding_path = Some(e.clone());
        }
    }

    /// Pushes the run seed into every sub-config and checks invariants.
    pub fn finalize(mut self) -> Result<Self, CliError> {
        self.optimizer.seed = self.seed;
        self.sgd.seed = self.seed;
        self.synthetic.seed = self.seed;
        if self.data_dir.is_some() && self.synthetic_keys {
            return Err(CliError::Validation(
                "config sets both a dataset directory and synthetic.* keys; use exactly one".into(),
            ));
        }
        self.optimizer.validate()?;
        self.sgd.validate()?;
        if self.hidden == 0 || self.embedding_dim == 0 {
            return Err(CliError::Validation(
                "model.hidden and embedding.dim must be >= 1".into(),
            ));
        }
        if self.eval.k == 0 {
            return Err(CliError::Validation("k must be >= 1".into()));
        }
        if self.threads == 0 {
            return Err(CliError::Validation("threads must be >= 1".into()));
        }
        Ok(self)
    }

    pub fn out_dir(&self) -> Result<&Path, CliError> {
        self.out_dir
            .as_deref()
            .ok_or_else(|| CliError::Validation("--out DIR is required".into()))
    }
}
