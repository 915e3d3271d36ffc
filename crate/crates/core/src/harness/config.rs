use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::baselines::TOP_P_TRAIN;
use crate::elastic::ElasticConfig;
use crate::losses::{DEFAULT_LAMBDA, DEFAULT_LB_COEFF};
use crate::moe::{ModelShape, RouteMode};
use crate::tasks::TaskConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Topk,
    Emoe,
    Topp,
    Adamoe,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Topk => "topk",
            Mode::Emoe => "emoe",
            Mode::Topp => "topp",
            Mode::Adamoe => "adamoe",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "topk" => Ok(Mode::Topk),
            "emoe" => Ok(Mode::Emoe),
            "topp" => Ok(Mode::Topp),
            "adamoe" => Ok(Mode::Adamoe),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub d_h: usize,
    pub n_layers: usize,
    pub n_experts: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 16,
            d_h: 32,
            n_layers: 2,
            n_experts: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda: f64,
    pub lb_coeff: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            lb_coeff: DEFAULT_LB_COEFF,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    /// Top-p threshold used during training.
    pub top_p: f64,
    /// Null-expert routing: selections per token over real and null experts.
    pub k_nominal: usize,
    /// Null experts per block; 0 means twice the real expert count.
    pub n_null: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            top_p: TOP_P_TRAIN,
            k_nominal: 3,
            n_null: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate: 0.05,
            batch_size: 128,
            epochs: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub init: u64,
    pub data: u64,
    pub sampling: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Self {
            init: seed,
            data: seed,
            sampling: seed,
        }
    }
}

impl Default for Seeds {
    fn default() -> Self {
        Self::all(1)
    }
}

/// Everything a training run needs. Serialized as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_elastic")]
    pub elastic: ElasticConfig,
    #[serde(default)]
    pub losses: LossConfig,
    #[serde(default)]
    pub baselines: BaselineConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub task: TaskConfig,
}

fn default_elastic() -> ElasticConfig {
    ElasticConfig::new(2, 8)
}

impl RunConfig {
    /// Default desk-scale configuration for `mode`.
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            output_dir: None,
            model: ModelConfig::default(),
            elastic: default_elastic(),
            losses: LossConfig::default(),
            baselines: BaselineConfig::default(),
            optimizer: OptimizerConfig::default(),
            seeds: Seeds::default(),
            task: TaskConfig::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.d == 0 || m.d_h == 0 || m.n_layers == 0 || m.n_experts < 2 {
            return Err(Error::Config(format!("invalid model section {m:?}")));
        }
        self.elastic.validate(m.n_experts)?;
        let l = &self.losses;
        if !l.lambda.is_finite() || !(l.lb_coeff >= 0.0 && l.lb_coeff.is_finite()) {
            return Err(Error::Config(format!("invalid loss section {l:?}")));
        }
        let b = &self.baselines;
        if !(b.top_p > 0.0 && b.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p {} outside (0, 1]", b.top_p)));
        }
        if b.k_nominal == 0 || b.k_nominal > m.n_experts + self.n_null() {
            return Err(Error::Config(format!("k_nominal {} out of range", b.k_nominal)));
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) || o.batch_size == 0 || o.epochs == 0 {
            return Err(Error::Config(format!("invalid optimizer section {o:?}")));
        }
        let t = &self.task;
        if t.n_clusters == 0 || t.d == 0 || t.n_classes < 2 || t.m_per_cluster == 0 {
            return Err(Error::Config(format!("invalid task section {t:?}")));
        }
        if !(t.noise >= 0.0) || !(t.train_fraction > 0.0 && t.train_fraction < 1.0) {
            return Err(Error::Config(format!("invalid task section {t:?}")));
        }
        Ok(())
    }

    pub fn n_null(&self) -> usize {
        match (self.mode, self.baselines.n_null) {
            (Mode::Adamoe, 0) => 2 * self.model.n_experts,
            (Mode::Adamoe, n) => n,
            _ => 0,
        }
    }

    pub fn model_shape(&self) -> ModelShape {
        ModelShape {
            d_in: self.task.d,
            d: self.model.d,
            d_h: self.model.d_h,
            n_layers: self.model.n_layers,
            n_experts: self.model.n_experts,
            n_classes: self.task.n_classes,
            n_null: self.n_null(),
        }
    }

    /// Hierarchical-loss weight actually applied; only elastic runs use it.
    pub fn effective_lambda(&self) -> f64 {
        match self.mode {
            Mode::Emoe => self.losses.lambda,
            _ => 0.0,
        }
    }

    /// Routing rule for training step `step`.
    pub fn train_route(&self, step: u64) -> RouteMode {
        match self.mode {
            Mode::Topk => RouteMode::TopK(self.elastic.k_train),
            Mode::Emoe => RouteMode::Emoe {
                cfg: self.elastic,
                seed: self.seeds.sampling,
                step,
            },
            Mode::Topp => RouteMode::TopP(self.baselines.top_p),
            Mode::Adamoe => RouteMode::AdaMoe {
                k_nominal: self.baselines.k_nominal,
            },
        }
    }

    /// Training-time routing replayed on held-out data; defines the
    /// co-occurrence reference `M^(k_train)`. Sampling streams use a step key
    /// no training step reaches. For Top-k runs this is plain Top-k_train.
    pub fn reference_route(&self) -> RouteMode {
        self.train_route(u64::MAX)
    }
}
