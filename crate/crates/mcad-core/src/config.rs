//! Run configuration: a flat `key = value` text format with `[section]`
//! headers. Every key has a default; unknown keys or malformed values are
//! hard errors so typos cannot silently corrupt an experiment. The canonical
//! serialization round-trips losslessly.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::AnomalyKind;
use crate::loss::LossWeights;
use crate::model::ModelConfig;
use crate::optim::LrSchedule;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key [{section}] {key}")]
    UnknownKey { section: String, key: String },
    #[error("unknown config section [{0}]")]
    UnknownSection(String),
    #[error("bad value for [{section}] {key}: {value:?} ({reason})")]
    BadValue {
        section: String,
        key: String,
        value: String,
        reason: String,
    },
    #[error("malformed line {lineno}: {line:?}")]
    MalformedLine { lineno: usize, line: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("override must look like section.key=value, got {0:?}")]
    BadOverride(String),
}

/// Numeric precision of a run: f32 for training speed, f64 for oracle and
/// gradient-check fidelity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

/// Full description of a training/evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // [run]
    pub seed: u64,
    pub precision: Precision,
    pub out_dir: String,
    pub run_id: String,
    // [data]
    pub num_classes: usize,
    pub channels: usize,
    pub grid: usize,
    pub n_train_normal: usize,
    pub n_eval_normal: usize,
    pub n_eval_anomalous: usize,
    pub noise_std: f64,
    pub shift_mult: f64,
    pub anomaly_kind: AnomalyKind,
    // [model]
    pub width: usize,
    pub token_dim: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub inr_layers: usize,
    pub classifier_hidden: usize,
    pub dropout: f64,
    pub jitter_scale: f64,
    pub use_query: bool,
    pub use_prior: bool,
    pub use_ce: bool,
    pub adapter_trainable: bool,
    // [loss]
    pub lambda_ce: f64,
    pub lambda_prior: f64,
    // [optim]
    pub optimizer: String,
    pub lr: f64,
    pub weight_decay: f64,
    // [schedule]
    pub total_epochs: usize,
    pub decay_epoch: usize,
    pub decay_factor: f64,
    // [train]
    pub batch_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            precision: Precision::F32,
            out_dir: "runs/out".into(),
            run_id: "run".into(),
            num_classes: 3,
            channels: 8,
            grid: 14,
            n_train_normal: 64,
            n_eval_normal: 16,
            n_eval_anomalous: 16,
            noise_std: 0.2,
            shift_mult: 5.0,
            anomaly_kind: AnomalyKind::Shift,
            width: 64,
            token_dim: 32,
            heads: 4,
            enc_layers: 4,
            dec_layers: 4,
            inr_layers: 5,
            classifier_hidden: 64,
            dropout: 0.1,
            jitter_scale: 0.2,
            use_query: true,
            use_prior: true,
            use_ce: true,
            adapter_trainable: true,
            lambda_ce: 1.0,
            lambda_prior: 0.1,
            optimizer: "adamw".into(),
            lr: 1e-4,
            weight_decay: 1e-4,
            total_epochs: 200,
            decay_epoch: 160,
            decay_factor: 0.1,
            batch_size: 32,
        }
    }
}

fn anomaly_kind_str(k: AnomalyKind) -> &'static str {
    match k {
        AnomalyKind::Shift => "shift",
        AnomalyKind::Confusion => "confusion",
        AnomalyKind::Mixed => "mixed",
    }
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            c_in: self.channels,
            width: self.width,
            token_dim: self.token_dim,
            n_categories: self.num_classes,
            grid_h: self.grid,
            grid_w: self.grid,
            heads: self.heads,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            inr_layers: self.inr_layers,
            classifier_hidden: self.classifier_hidden,
            dropout: self.dropout,
            jitter_scale: self.jitter_scale,
            weights: LossWeights {
                ce: self.lambda_ce,
                prior: self.lambda_prior,
            },
            use_query: self.use_query,
            use_prior: self.use_prior,
            use_ce: self.use_ce,
            adapter_trainable: self.adapter_trainable,
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            total_epochs: self.total_epochs,
            decay_epoch: self.decay_epoch,
            decay_factor: self.decay_factor,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: String| Err(ConfigError::Invalid(m));
        if self.lr <= 0.0 {
            return fail(format!("lr must be > 0, got {}", self.lr));
        }
        if self.decay_epoch > self.total_epochs {
            return fail(format!(
                "decay_epoch {} > total_epochs {}",
                self.decay_epoch, self.total_epochs
            ));
        }
        if self.width % self.heads != 0 {
            return fail(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            ));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if self.optimizer != "adamw" {
            return fail(format!("unsupported optimizer {:?}", self.optimizer));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.jitter_scale < 0.0 || self.lambda_ce < 0.0 || self.lambda_prior < 0.0 {
            return fail("jitter scale and loss weights must be nonnegative".into());
        }
        Ok(())
    }

    /// Canonical text form; `from_text(to_text())` is the identity.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[run]");
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "precision = {}", self.precision.as_str());
        let _ = writeln!(s, "out_dir = {}", self.out_dir);
        let _ = writeln!(s, "run_id = {}", self.run_id);
        let _ = writeln!(s, "\n[data]");
        let _ = writeln!(s, "num_classes = {}", self.num_classes);
        let _ = writeln!(s, "channels = {}", self.channels);
        let _ = writeln!(s, "grid = {}", self.grid);
        let _ = writeln!(s, "n_train_normal = {}", self.n_train_normal);
        let _ = writeln!(s, "n_eval_normal = {}", self.n_eval_normal);
        let _ = writeln!(s, "n_eval_anomalous = {}", self.n_eval_anomalous);
        let _ = writeln!(s, "noise_std = {}", self.noise_std);
        let _ = writeln!(s, "shift_mult = {}", self.shift_mult);
        let _ = writeln!(s, "anomaly_kind = {}", anomaly_kind_str(self.anomaly_kind));
        let _ = writeln!(s, "\n[model]");
        let _ = writeln!(s, "width = {}", self.width);
        let _ = writeln!(s, "token_dim = {}", self.token_dim);
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "enc_layers = {}", self.enc_layers);
        let _ = writeln!(s, "dec_layers = {}", self.dec_layers);
        let _ = writeln!(s, "inr_layers = {}", self.inr_layers);
        let _ = writeln!(s, "classifier_hidden = {}", self.classifier_hidden);
        let _ = writeln!(s, "dropout = {}", self.dropout);
        let _ = writeln!(s, "jitter_scale = {}", self.jitter_scale);
        let _ = writeln!(s, "use_query = {}", self.use_query);
        let _ = writeln!(s, "use_prior = {}", self.use_prior);
        let _ = writeln!(s, "use_ce = {}", self.use_ce);
        let _ = writeln!(s, "adapter_trainable = {}", self.adapter_trainable);
        let _ = writeln!(s, "\n[loss]");
        let _ = writeln!(s, "lambda_ce = {}", self.lambda_ce);
        let _ = writeln!(s, "lambda_prior = {}", self.lambda_prior);
        let _ = writeln!(s, "\n[optim]");
        let _ = writeln!(s, "optimizer = {}", self.optimizer);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "\n[schedule]");
        let _ = writeln!(s, "total_epochs = {}", self.total_epochs);
        let _ = writeln!(s, "decay_epoch = {}", self.decay_epoch);
        let _ = writeln!(s, "decay_factor = {}", self.decay_factor);
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        s
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                if !matches!(
                    section.as_str(),
                    "run" | "data" | "model" | "loss" | "optim" | "schedule" | "train"
                ) {
                    return Err(ConfigError::UnknownSection(section));
                }
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::MalformedLine {
                    lineno: lineno + 1,
                    line: raw.to_string(),
                });
            };
            cfg.apply(&section, key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Apply a `section.key=value` command-line override.
    pub fn apply_override(&mut self, spec: &str) -> Result<(), ConfigError> {
        let Some((path, value)) = spec.split_once('=') else {
            return Err(ConfigError::BadOverride(spec.to_string()));
        };
        let Some((section, key)) = path.trim().split_once('.') else {
            return Err(ConfigError::BadOverride(spec.to_string()));
        };
        self.apply(section.trim(), key.trim(), value.trim())
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<(), ConfigError> {
        macro_rules! parse {
            ($t:ty) => {
                value
                    .parse::<$t>()
                    .map_err(|e| ConfigError::BadValue {
                        section: section.to_string(),
                        key: key.to_string(),
                        value: value.to_string(),
                        reason: e.to_string(),
                    })?
            };
        }
        match (section, key) {
            ("run", "seed") => self.seed = parse!(u64),
            ("run", "precision") => {
                self.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => {
                        return Err(ConfigError::BadValue {
                            section: section.into(),
                            key: key.into(),
                            value: value.into(),
                            reason: "expected f32 or f64".into(),
                        })
                    }
                }
            }
            ("run", "out_dir") => self.out_dir = value.to_string(),
            ("run", "run_id") => self.run_id = value.to_string(),
            ("data", "num_classes") => self.num_classes = parse!(usize),
            ("data", "channels") => self.channels = parse!(usize),
            ("data", "grid") => self.grid = parse!(usize),
            ("data", "n_train_normal") => self.n_train_normal = parse!(usize),
            ("data", "n_eval_normal") => self.n_eval_normal = parse!(usize),
            ("data", "n_eval_anomalous") => self.n_eval_anomalous = parse!(usize),
            ("data", "noise_std") => self.noise_std = parse!(f64),
            ("data", "shift_mult") => self.shift_mult = parse!(f64),
            ("data", "anomaly_kind") => {
                self.anomaly_kind = match value {
                    "shift" => AnomalyKind::Shift,
                    "confusion" => AnomalyKind::Confusion,
                    "mixed" => AnomalyKind::Mixed,
                    _ => {
                        return Err(ConfigError::BadValue {
                            section: section.into(),
                            key: key.into(),
                            value: value.into(),
                            reason: "expected shift, confusion, or mixed".into(),
                        })
                    }
                }
            }
            ("model", "width") => self.width = parse!(usize),
            ("model", "token_dim") => self.token_dim = parse!(usize),
            ("model", "heads") => self.heads = parse!(usize),
            ("model", "enc_layers") => self.enc_layers = parse!(usize),
            ("model", "dec_layers") => self.dec_layers = parse!(usize),
            ("model", "inr_layers") => self.inr_layers = parse!(usize),
            ("model", "classifier_hidden") => self.classifier_hidden = parse!(usize),
            ("model", "dropout") => self.dropout = parse!(f64),
            ("model", "jitter_scale") => self.jitter_scale = parse!(f64),
            ("model", "use_query") => self.use_query = parse!(bool),
            ("model", "use_prior") => self.use_prior = parse!(bool),
            ("model", "use_ce") => self.use_ce = parse!(bool),
            ("model", "adapter_trainable") => self.adapter_trainable = parse!(bool),
            ("loss", "lambda_ce") => self.lambda_ce = parse!(f64),
            ("loss", "lambda_prior") => self.lambda_prior = parse!(f64),
            ("optim", "optimizer") => self.optimizer = value.to_string(),
            ("optim", "lr") => self.lr = parse!(f64),
            ("optim", "weight_decay") => self.weight_decay = parse!(f64),
            ("schedule", "total_epochs") => self.total_epochs = parse!(usize),
            ("schedule", "decay_epoch") => self.decay_epoch = parse!(usize),
            ("schedule", "decay_factor") => self.decay_factor = parse!(f64),
            ("train", "batch_size") => self.batch_size = parse!(usize),
            _ => {
                return Err(ConfigError::UnknownKey {
                    section: section.to_string(),
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }
}
