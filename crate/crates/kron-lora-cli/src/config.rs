//! TOML run configurations for the `train` and `sequential` subcommands.
//!
//! Unknown fields are rejected and validation errors name the offending
//! field (`adapter.rank`, `arms[1]`, ...), so a typo fails loudly instead
//! of silently training something else.

use kron_lora::{
    plan_kron_lora, plan_krona, plan_lora, AdapterKind, AdapterPlan, ClusterClassification,
    Error, LayerSpec, Result, SequentialMode, SlicePolicy, TeacherRegression, ToyTask,
    TrainConfig,
};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::str::FromStr;

fn default_true() -> bool {
    true
}

fn default_rank() -> usize {
    8
}

fn default_teacher_scale() -> f64 {
    0.02
}

fn default_examples() -> usize {
    512
}

fn default_eval_examples() -> usize {
    128
}

fn default_spread() -> f64 {
    3.0
}

fn default_noise() -> f64 {
    0.5
}

fn default_epochs() -> usize {
    1
}

fn default_lr() -> f64 {
    kron_lora::DEFAULT_LR
}

fn default_weight_decay() -> f64 {
    kron_lora::DEFAULT_WEIGHT_DECAY
}

fn default_batch_size() -> usize {
    kron_lora::DEFAULT_BATCH_SIZE
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub d_in: usize,
    pub d_out: usize,
    /// Vocabulary-projection layers get the flat input factorization.
    #[serde(default)]
    pub vocab: bool,
    #[serde(default = "default_true")]
    pub bias: bool,
}

impl LayerConfig {
    pub fn spec(&self) -> Result<LayerSpec> {
        if self.vocab {
            LayerSpec::vocab(self.d_in, self.d_out)
        } else {
            LayerSpec::new(self.d_in, self.d_out)
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    /// Required for `train`; forbidden for `sequential`, where `arms`
    /// names the kinds instead.
    #[serde(default)]
    pub kind: Option<String>,
    #[serde(default = "default_rank")]
    pub rank: usize,
    /// Pin `d_a2` exactly (must divide `d_out`). Mutually exclusive with
    /// `target_slice`.
    #[serde(default)]
    pub slice: Option<usize>,
    /// Pick the divisor of `d_out` giving a slice height closest to this.
    #[serde(default)]
    pub target_slice: Option<usize>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub dropout: Option<f64>,
}

impl AdapterConfig {
    fn policy(&self) -> Result<SlicePolicy> {
        match (self.slice, self.target_slice) {
            (Some(_), Some(_)) => Err(Error::Config(
                "adapter.slice and adapter.target_slice are mutually exclusive".into(),
            )),
            (Some(a2), None) => Ok(SlicePolicy::FixedA2(a2)),
            (None, Some(t)) => Ok(SlicePolicy::TargetSlice(t)),
            (None, None) => Ok(SlicePolicy::default()),
        }
    }

    /// Resolve a plan for `kind` on `layer`, applying the optional
    /// alpha/dropout overrides.
    pub fn plan_for(&self, kind: AdapterKind, layer: &LayerConfig) -> Result<AdapterPlan> {
        let spec = layer.spec()?;
        let mut plan = match kind {
            AdapterKind::KronLora => plan_kron_lora(&spec, self.rank, self.policy()?)?,
            AdapterKind::Lora => plan_lora(&spec, self.rank)?,
            AdapterKind::KronA => {
                if self.slice.is_some() || self.target_slice.is_some() {
                    return Err(Error::Config(
                        "adapter.slice/target_slice do not apply to krona, which \
                         factors both dimensions around their square roots"
                            .into(),
                    ));
                }
                plan_krona(&spec)
            }
        };
        if let Some(alpha) = self.alpha {
            plan = plan.with_alpha(alpha);
        }
        if let Some(p) = self.dropout {
            plan = plan.with_dropout(p);
        }
        plan.validate()?;
        Ok(plan)
    }

    /// The kind the `train` command should use.
    pub fn required_kind(&self) -> Result<AdapterKind> {
        match &self.kind {
            Some(k) => AdapterKind::from_str(k)
                .map_err(|e| Error::Config(format!("adapter.kind: {e}"))),
            None => Err(Error::Config(
                "adapter.kind is required (lora, krona or kronlora)".into(),
            )),
        }
    }
}

/// Task description. The teacher-regression variant omits the adapter plan
/// on purpose: the teacher always lives in the same family and shape the
/// run is training, which the `[layer]`/`[adapter]` sections define.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskConfig {
    TeacherRegression {
        seed: u64,
        #[serde(default = "default_teacher_scale")]
        teacher_scale: f64,
        #[serde(default = "default_examples")]
        train_examples: usize,
        #[serde(default = "default_eval_examples")]
        val_examples: usize,
        #[serde(default = "default_eval_examples")]
        test_examples: usize,
    },
    ClusterClassification {
        seed: u64,
        n_classes: usize,
        #[serde(default = "default_spread")]
        spread: f64,
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default = "default_examples")]
        train_examples: usize,
        #[serde(default = "default_eval_examples")]
        val_examples: usize,
        #[serde(default = "default_eval_examples")]
        test_examples: usize,
    },
}

impl TaskConfig {
    pub fn to_task(&self, plan: &AdapterPlan, field: &str) -> Result<ToyTask> {
        match *self {
            TaskConfig::TeacherRegression {
                seed,
                teacher_scale,
                train_examples,
                val_examples,
                test_examples,
            } => {
                if !(teacher_scale.is_finite() && teacher_scale > 0.0) {
                    return Err(Error::Config(format!(
                        "{field}.teacher_scale must be positive, got {teacher_scale}"
                    )));
                }
                Ok(ToyTask::TeacherRegression(TeacherRegression {
                    seed,
                    plan: plan.clone(),
                    teacher_scale,
                    train_examples,
                    val_examples,
                    test_examples,
                }))
            }
            TaskConfig::ClusterClassification {
                seed,
                n_classes,
                spread,
                noise,
                train_examples,
                val_examples,
                test_examples,
            } => {
                if n_classes < 2 {
                    return Err(Error::Config(format!(
                        "{field}.n_classes must be at least 2, got {n_classes}"
                    )));
                }
                Ok(ToyTask::ClusterClassification(ClusterClassification {
                    seed,
                    d_in: plan.d_in,
                    n_classes,
                    spread,
                    noise,
                    train_examples,
                    val_examples,
                    test_examples,
                }))
            }
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, TaskConfig::ClusterClassification { .. })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Apply the plan's dropout during training. Off by default: the toy
    /// tasks are small enough that dropout only adds noise.
    #[serde(default)]
    pub dropout_active: bool,
    /// Stream for batch order and dropout masks; defaults to the root
    /// `--seed`.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl TrainSection {
    pub fn to_train_config(&self, root_seed: u64) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed.unwrap_or(root_seed),
            dropout_active: self.dropout_active,
        };
        cfg.validate()
            .map_err(|e| Error::Config(format!("train: {e}")))?;
        Ok(cfg)
    }
}

/// Phase-2 overrides for sequential runs; anything unset inherits from
/// `[train]`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverride {
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub dropout_active: Option<bool>,
    pub seed: Option<u64>,
}

impl TrainOverride {
    pub fn apply(&self, base: &TrainConfig) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            lr: self.lr.unwrap_or(base.lr),
            weight_decay: self.weight_decay.unwrap_or(base.weight_decay),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            epochs: self.epochs.unwrap_or(base.epochs),
            seed: self.seed.unwrap_or(base.seed),
            dropout_active: self.dropout_active.unwrap_or(base.dropout_active),
        };
        cfg.validate()
            .map_err(|e| Error::Config(format!("train2: {e}")))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFileConfig {
    pub layer: LayerConfig,
    pub adapter: AdapterConfig,
    pub task: TaskConfig,
    pub train: TrainSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequentialFileConfig {
    #[serde(default = "SequentialFileConfig::default_mode")]
    pub mode: SequentialMode,
    /// Adapter kinds to run under identical seeds and data, e.g.
    /// `["kronlora", "lora"]`.
    pub arms: Vec<String>,
    pub layer: LayerConfig,
    pub adapter: AdapterConfig,
    pub task1: TaskConfig,
    pub task2: TaskConfig,
    pub train: TrainSection,
    /// Optional phase-2 overrides (e.g. a different weight decay).
    #[serde(default)]
    pub train2: Option<TrainOverride>,
}

impl SequentialFileConfig {
    fn default_mode() -> SequentialMode {
        SequentialMode::Continued
    }

    pub fn arm_kinds(&self) -> Result<Vec<AdapterKind>> {
        if self.arms.is_empty() {
            return Err(Error::Config("arms must name at least one adapter kind".into()));
        }
        let mut kinds = Vec::new();
        for (i, arm) in self.arms.iter().enumerate() {
            let kind = AdapterKind::from_str(arm)
                .map_err(|e| Error::Config(format!("arms[{i}]: {e}")))?;
            if kinds.contains(&kind) {
                return Err(Error::Config(format!("arms[{i}]: duplicate kind {kind}")));
            }
            kinds.push(kind);
        }
        Ok(kinds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.adapter.kind.is_some() {
            return Err(Error::Config(
                "adapter.kind is not used by sequential runs; list kinds in `arms`".into(),
            ));
        }
        if !self.task1.is_classification() || !self.task2.is_classification() {
            return Err(Error::Config(
                "task1/task2: sequential runs are defined over cluster_classification tasks"
                    .into(),
            ));
        }
        self.arm_kinds()?;
        Ok(())
    }
}

/// Read and deserialize a TOML config, keeping toml's field-level error
/// messages (they include the line and the field path).
pub fn load<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}
