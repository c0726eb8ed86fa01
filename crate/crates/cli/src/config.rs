//! Experiment configuration: a JSON document with named sections.
//!
//! Unknown keys anywhere are rejected and the error names the full path of
//! the offending key. `--set section.key=value` overrides are applied to the
//! parsed document before it is checked against the schema.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use inrank_core::glrl::GlrlConfig;
use inrank_core::init::InitScheme;
use inrank_core::inrank::InRankConfig;
use inrank_core::net::{Activation, LossKind};
use inrank_core::optim::{Algorithm, Hyper};
use inrank_core::theory::Integrator;
use inrank_core::train::TrainConfig;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub task: Option<TaskConfig>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub inrank: InRankConfig,
    #[serde(default)]
    pub logging: LoggingConfig,
    #[serde(default)]
    pub theory: TheoryConfig,
    #[serde(default)]
    pub glrl: GlrlConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TaskConfig {
    /// Orthogonal-input regression with a chosen correlation spectrum,
    /// either listed or as `s_i = a·i` for `i = 1..=modes`.
    Planted {
        nx: usize,
        ny: usize,
        #[serde(default)]
        spectrum: Option<Vec<f64>>,
        #[serde(default)]
        a: Option<f64>,
        #[serde(default)]
        modes: Option<usize>,
    },
    TeacherStudent {
        nx: usize,
        ny: usize,
        rank: usize,
        samples: usize,
        #[serde(default)]
        noise: f64,
    },
    Blobs {
        classes: usize,
        dim: usize,
        per_class: usize,
        separation: f64,
        #[serde(default = "default_spread")]
        spread: f64,
    },
    Csv {
        path: PathBuf,
        #[serde(default)]
        classes: Option<usize>,
    },
}

fn default_spread() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of weight layers; must equal `widths.len() + 1` when given.
    pub depth: Option<usize>,
    /// Hidden widths.
    pub widths: Vec<usize>,
    pub activation: String,
    pub layer_mode: LayerMode,
    pub init: String,
    /// Defaults to cross-entropy for labelled data, squared otherwise.
    pub loss: Option<String>,
    /// Layers to factorize in factorized mode; all when absent.
    pub factorized_layers: Option<Vec<usize>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: None,
            widths: Vec::new(),
            activation: "relu".into(),
            layer_mode: LayerMode::Dense,
            init: "kaiming-uniform".into(),
            loss: None,
            factorized_layers: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerMode {
    Dense,
    Factorized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub algorithm: String,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub warmup_steps: u64,
    pub epochs: usize,
    /// 0 means full batch.
    pub batch_size: usize,
    pub shuffle: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let h = Hyper::new(Algorithm::Sgd, 0.01);
        Self {
            algorithm: "sgd".into(),
            learning_rate: h.lr,
            beta1: h.beta1,
            beta2: h.beta2,
            eps: h.eps,
            weight_decay: h.weight_decay,
            momentum: h.momentum,
            warmup_steps: h.warmup_steps,
            epochs: 10,
            batch_size: 0,
            shuffle: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoggingConfig {
    pub metrics_every: u64,
    /// 0 disables spectrum recording (spectrum-trace forces 1).
    pub spectrum_every: u64,
}

impl Default for LoggingConfig {
    fn default() -> Self {
        Self {
            metrics_every: 1,
            spectrum_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoryConfig {
    /// Planted spectrum `s_i = a·i`.
    pub a: f64,
    pub modes: usize,
    /// `u₀ = max(|N(0, u0_scale²)|, 1e-6)`.
    pub u0_scale: f64,
    /// Use the same `u₀` for every mode instead of sampling.
    pub u0_fixed: Option<f64>,
    /// Step of the discrete SGD run; time is `iteration·eta`.
    pub eta: f64,
    pub integrator: Integrator,
    /// Flow step; `0.01/max s` when absent.
    pub flow_dt: Option<f64>,
    /// Continuous-time horizon; derived from the modes when absent.
    pub horizon: Option<f64>,
    /// Snapshots per run.
    pub samples: usize,
    pub flow_tolerance: f64,
    pub sgd_tolerance: f64,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            a: 0.5,
            modes: 10,
            u0_scale: 0.05,
            u0_fixed: None,
            eta: 1e-3,
            integrator: Integrator::Rk4,
            flow_dt: None,
            horizon: None,
            samples: 400,
            flow_tolerance: 0.02,
            sgd_tolerance: 0.05,
        }
    }
}

impl ExperimentConfig {
    pub fn activation(&self) -> Result<Activation, CliError> {
        self.model
            .activation
            .parse()
            .map_err(|e| CliError::Config(format!("model.activation: {e}")))
    }

    pub fn init_scheme(&self) -> Result<InitScheme, CliError> {
        self.model
            .init
            .parse()
            .map_err(|e| CliError::Config(format!("model.init: {e}")))
    }

    pub fn loss(&self, labelled: bool) -> Result<LossKind, CliError> {
        match &self.model.loss {
            Some(l) => l
                .parse()
                .map_err(|e| CliError::Config(format!("model.loss: {e}"))),
            None if labelled => Ok(LossKind::CrossEntropy),
            None => Ok(LossKind::Squared),
        }
    }

    pub fn hyper(&self) -> Result<Hyper, CliError> {
        let o = &self.optim;
        let algorithm: Algorithm = o
            .algorithm
            .parse()
            .map_err(|e| CliError::Config(format!("optim.algorithm: {e}")))?;
        let h = Hyper {
            algorithm,
            lr: o.learning_rate,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
            momentum: o.momentum,
            warmup_steps: o.warmup_steps,
        };
        h.validate()
            .map_err(|e| CliError::Config(format!("optim: {e}")))?;
        Ok(h)
    }

    pub fn train_config(&self, force_spectrum: bool) -> TrainConfig {
        let spectrum_every = match self.logging.spectrum_every {
            0 if force_spectrum => 1,
            n => n,
        };
        TrainConfig {
            epochs: self.optim.epochs,
            batch_size: self.optim.batch_size,
            metrics_every: self.logging.metrics_every,
            spectrum_every,
            shuffle: self.optim.shuffle,
        }
    }

    /// Range checks that the schema alone cannot express.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |key: &str, msg: String| Err(CliError::Config(format!("{key}: {msg}")));
        if let Some(d) = self.model.depth {
            if d != self.model.widths.len() + 1 {
                return bad(
                    "model.depth",
                    format!(
                        "{d} does not match {} hidden widths",
                        self.model.widths.len()
                    ),
                );
            }
        }
        if self.model.widths.contains(&0) {
            return bad("model.widths", "widths must be positive".into());
        }
        self.activation()?;
        self.init_scheme()?;
        if let Some(l) = &self.model.loss {
            l.parse::<LossKind>()
                .map_err(|e| CliError::Config(format!("model.loss: {e}")))?;
        }
        self.hyper()?;
        if self.optim.epochs == 0 {
            return bad("optim.epochs", "must be >= 1".into());
        }
        if self.logging.metrics_every == 0 {
            return bad("logging.metrics_every", "must be >= 1".into());
        }
        self.inrank
            .validate()
            .map_err(|e| CliError::Config(format!("inrank: {e}")))?;
        self.glrl
            .validate()
            .map_err(|e| CliError::Config(format!("glrl: {e}")))?;
        let t = &self.theory;
        if !(t.a > 0.0 && t.a.is_finite()) {
            return bad("theory.a", format!("must be > 0, got {}", t.a));
        }
        if t.modes == 0 {
            return bad("theory.modes", "must be >= 1".into());
        }
        if !(t.u0_scale > 0.0) {
            return bad("theory.u0_scale", "must be > 0".into());
        }
        if let Some(u) = t.u0_fixed {
            if !(u > 0.0) {
                return bad("theory.u0_fixed", "must be > 0".into());
            }
        }
        if !(t.eta > 0.0) {
            return bad("theory.eta", "must be > 0".into());
        }
        if t.samples == 0 {
            return bad("theory.samples", "must be >= 1".into());
        }
        if let Some(TaskConfig::Planted { spectrum, a, modes, .. }) = &self.task {
            match (spectrum, a, modes) {
                (Some(_), None, None) | (None, Some(_), Some(_)) => {}
                _ => {
                    return bad(
                        "task",
                        "planted task needs either `spectrum` or both `a` and `modes`".into(),
                    )
                }
            }
        }
        Ok(())
    }
}

/// Parses `bytes` as JSON, applies `overrides` and checks the schema.
pub fn load(bytes: &[u8], overrides: &[String]) -> Result<ExperimentConfig, CliError> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| CliError::Config(format!("config is not UTF-8: {e}")))?;
    let mut doc: Value = if text.trim().is_empty() {
        Value::Object(Default::default())
    } else {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))?
    };
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            CliError::Config(e.into_inner().to_string())
        } else {
            CliError::Config(format!("{path}: {}", e.into_inner()))
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// `section.key=value`; the value is read as JSON, falling back to a string.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<(), CliError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override '{spec}' is not key=value")))?;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!("override key '{path}' is malformed")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    for (i, key) in keys.iter().enumerate() {
        let Value::Object(map) = node else {
            return Err(CliError::Config(format!(
                "override '{path}': '{}' is not a section",
                keys[..i].join(".")
            )));
        };
        if i + 1 == keys.len() {
            map.insert((*key).to_string(), value);
            return Ok(());
        }
        node = map
            .entry((*key).to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("keys is non-empty")
}
