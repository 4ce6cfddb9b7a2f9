//! Line-oriented `key=value` experiment configuration.
//!
//! One file covers data, model, training and perturbation settings. `#`
//! starts a comment. `data_seed` and `model_seed` default to `seed`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{Activation, FinetuneMode, ModelConfig};
use crate::optim::OptimizerKind;
use crate::synthcir::{self, Dataset, DatasetConfig};
use crate::trainer::{Schedule, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Fraction of training triplets kept (nested across fractions).
    pub fraction: f64,
    pub seed: u64,
    pub data_seed: Option<u64>,
    pub model_seed: Option<u64>,
    pub output_dir: PathBuf,
    pub run_name: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            fraction: 1.0,
            seed: 0,
            data_seed: None,
            model_seed: None,
            output_dir: PathBuf::from("runs"),
            run_name: "run".into(),
        }
    }
}

fn parse_num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_num(key, s.trim()))
        .collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key=value, got `{raw}`", i + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::config(format!("expected key=value, got `{pair}`")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "data_seed" => self.data_seed = Some(parse_num(key, value)?),
            "model_seed" => self.model_seed = Some(parse_num(key, value)?),
            "output_dir" => self.output_dir = PathBuf::from(value),
            "run_name" => self.run_name = value.to_string(),
            "fraction" => self.fraction = parse_num(key, value)?,
            "d_ref" => {
                self.data.d_ref = parse_num(key, value)?;
                self.model.d_ref = self.data.d_ref;
            }
            "d_mod" => {
                self.data.d_mod = parse_num(key, value)?;
                self.model.d_mod = self.data.d_mod;
            }
            "n_mods" => self.data.n_mods = parse_num(key, value)?,
            "n_train" => self.data.n_train = parse_num(key, value)?,
            "n_val" => self.data.n_val = parse_num(key, value)?,
            "gallery_size" => self.data.gallery_size = parse_num(key, value)?,
            "noise_sigma" => self.data.noise_sigma = parse_num(key, value)?,
            "subset_size" => self.data.subset_size = parse_num(key, value)?,
            "hidden" => self.model.hidden = parse_list(key, value)?,
            "d_out" => self.model.d_out = parse_num(key, value)?,
            "activation" => self.model.activation = Activation::parse(value)?,
            "init_scale" => self.model.init_scale = parse_num(key, value)?,
            "gamma" => t.gamma = parse_num(key, value)?,
            "rho" => t.rho = parse_num(key, value)?,
            "eta0" => t.eta0 = parse_num(key, value)?,
            "schedule" => t.schedule = Schedule::parse(value)?,
            "total_epochs" => t.total_epochs = parse_num(key, value)?,
            "warmup_epochs" => t.warmup_epochs = parse_num(key, value)?,
            "batch_size" => t.batch_size = parse_num(key, value)?,
            "tau" => t.tau = parse_num(key, value)?,
            "eval_every" => t.eval_every = parse_num(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse_num(key, value)?,
            "log_seconds" => t.log_seconds = parse_num(key, value)?,
            "rmean_ks" => t.recall.rmean_ks = parse_list(key, value)?,
            "optimizer" => {
                t.optimizer = match value {
                    "sgd" => OptimizerKind::Sgd,
                    "adamw" => match t.optimizer {
                        k @ OptimizerKind::AdamW { .. } => k,
                        OptimizerKind::Sgd => OptimizerKind::adamw_default(),
                    },
                    _ => return Err(Error::config(format!("unknown optimizer `{value}`"))),
                }
            }
            "beta1" | "beta2" | "eps" | "weight_decay" => {
                let v: f64 = parse_num(key, value)?;
                let OptimizerKind::AdamW {
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                } = &mut t.optimizer
                else {
                    return Err(Error::config(format!("`{key}` needs optimizer=adamw set first")));
                };
                *match key {
                    "beta1" => beta1,
                    "beta2" => beta2,
                    "eps" => eps,
                    _ => weight_decay,
                } = v;
            }
            "finetune_mode" => {
                t.finetune_mode = match value {
                    "full" => FinetuneMode::Full,
                    "lora" => FinetuneMode::Lora {
                        rank: match t.finetune_mode {
                            FinetuneMode::Lora { rank } => rank,
                            FinetuneMode::Full => 4,
                        },
                    },
                    _ => return Err(Error::config(format!("unknown finetune_mode `{value}`"))),
                }
            }
            "lora_rank" => {
                let rank = parse_num(key, value)?;
                t.finetune_mode = if rank == 0 {
                    FinetuneMode::Full
                } else {
                    FinetuneMode::Lora { rank }
                };
            }
            _ => return Err(Error::config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Component configs with seeds resolved.
    pub fn resolve(&self) -> Result<(DatasetConfig, ModelConfig, TrainConfig)> {
        let mut data = self.data.clone();
        data.seed = self.data_seed.unwrap_or(self.seed);
        let mut model = self.model.clone();
        model.seed = self.model_seed.unwrap_or(self.seed);
        let mut train = self.train.clone();
        train.seed = self.seed;
        data.validate()?;
        model.validate()?;
        train.validate()?;
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::config(format!("fraction must lie in (0, 1], got {}", self.fraction)));
        }
        Ok((data, model, train))
    }

    /// Generated dataset with the training split reduced to `fraction`.
    pub fn dataset(&self) -> Result<Dataset> {
        let (data, _, _) = self.resolve()?;
        let full = synthcir::generate(&data)?;
        if self.fraction < 1.0 {
            full.with_train_fraction(self.fraction, data.seed)
        } else {
            Ok(full)
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_name)
    }

    /// Every resolved setting as `key=value` lines; parsing it reproduces the run.
    pub fn echo(&self) -> String {
        let d = &self.data;
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("run_name", self.run_name.clone());
        kv("output_dir", self.output_dir.display().to_string());
        kv("seed", self.seed.to_string());
        kv("data_seed", self.data_seed.unwrap_or(self.seed).to_string());
        kv("model_seed", self.model_seed.unwrap_or(self.seed).to_string());
        kv("d_ref", d.d_ref.to_string());
        kv("d_mod", d.d_mod.to_string());
        kv("n_mods", d.n_mods.to_string());
        kv("n_train", d.n_train.to_string());
        kv("n_val", d.n_val.to_string());
        kv("gallery_size", d.gallery_size.to_string());
        kv("noise_sigma", d.noise_sigma.to_string());
        kv("subset_size", d.subset_size.to_string());
        kv("fraction", self.fraction.to_string());
        kv("hidden", join(&m.hidden));
        kv("d_out", m.d_out.to_string());
        kv("activation", m.activation.name().to_string());
        kv("init_scale", m.init_scale.to_string());
        kv("gamma", t.gamma.to_string());
        kv("rho", t.rho.to_string());
        kv("eta0", t.eta0.to_string());
        kv("schedule", t.schedule.name().to_string());
        kv("total_epochs", t.total_epochs.to_string());
        kv("warmup_epochs", t.warmup_epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        match t.optimizer {
            OptimizerKind::Sgd => kv("optimizer", "sgd".into()),
            OptimizerKind::AdamW {
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                kv("optimizer", "adamw".into());
                kv("beta1", beta1.to_string());
                kv("beta2", beta2.to_string());
                kv("eps", eps.to_string());
                kv("weight_decay", weight_decay.to_string());
            }
        }
        kv("tau", t.tau.to_string());
        kv("eval_every", t.eval_every.to_string());
        match t.finetune_mode {
            FinetuneMode::Full => kv("finetune_mode", "full".into()),
            FinetuneMode::Lora { rank } => {
                kv("finetune_mode", "lora".into());
                kv("lora_rank", rank.to_string());
            }
        }
        kv("rmean_ks", join(&t.recall.rmean_ks));
        kv("checkpoint_every", t.checkpoint_every.to_string());
        kv("log_seconds", t.log_seconds.to_string());
        s
    }
}
