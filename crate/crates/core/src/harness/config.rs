use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cells::{Architecture, CellSpec};
use crate::error::{Error, Result};
use crate::gradients::{Estimator, GradConfig};
use crate::optimizers::{AdamConfig, LrPolicy};
use crate::solvers::{SolverConfig, SolverMethod};
use crate::tasks::{Task, INVERSION_OOD_KAPPA, INVERSION_TRAIN_KAPPA, PREFIX_EVAL_COUNT};

/// Version written into and required from every config file.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
#[derive(Default)]
pub enum Intervention {
    #[default]
    None,
    /// Zero init on a Bernoulli(0.5) half of each batch, Gaussian on the rest.
    MixedInit,
    /// Training depth drawn uniformly from `min..=max` every step.
    RandomizedDepth { min: usize, max: usize },
    /// Penalizes alignment between fixed points from `k` Gaussian inits.
    AlignmentPenalty {
        #[serde(default = "default_k")]
        k: usize,
        #[serde(default = "default_weight")]
        weight: f64,
    },
}

fn default_k() -> usize {
    3
}
fn default_weight() -> f64 {
    0.1
}


impl Intervention {
    pub fn name(&self) -> &'static str {
        match self {
            Intervention::None => "none",
            Intervention::MixedInit => "mixed_init",
            Intervention::RandomizedDepth { .. } => "randomized_depth",
            Intervention::AlignmentPenalty { .. } => "alignment_penalty",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub adam: AdamConfig,
    #[serde(default)]
    pub schedule: LrPolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Size of the fixed training set.
    #[serde(default = "default_train_count")]
    pub train_count: usize,
    /// Training string length (prefix sum).
    #[serde(default = "default_train_length")]
    pub train_length: usize,
    /// Matrix side (inversion).
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// Input noise scale (inversion), fresh every step.
    #[serde(default = "default_noise")]
    pub noise_scale: f64,
    #[serde(default = "default_eval_count")]
    pub eval_count: usize,
}

fn default_train_count() -> usize {
    10_000
}
fn default_train_length() -> usize {
    32
}
fn default_dim() -> usize {
    10
}
fn default_noise() -> f64 {
    0.01
}
fn default_eval_count() -> usize {
    PREFIX_EVAL_COUNT
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_count: default_train_count(),
            train_length: default_train_length(),
            dim: default_dim(),
            noise_scale: default_noise(),
            eval_count: default_eval_count(),
        }
    }
}

/// Evaluation grid: every split at every budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalGrid {
    /// Prefix sum: string lengths. Inversion: `in` or `ood`.
    pub splits: Vec<String>,
    pub budgets: Vec<usize>,
    #[serde(default = "default_eval_method")]
    pub method: SolverMethod,
    /// Residual threshold for early stopping during evaluation.
    #[serde(default)]
    pub tol: f64,
    #[serde(default = "yes")]
    pub aa: bool,
    #[serde(default = "one")]
    pub aa_repeats: usize,
}

fn default_eval_method() -> SolverMethod {
    SolverMethod::Anderson
}
fn yes() -> bool {
    true
}
fn one() -> usize {
    1
}

impl EvalGrid {
    pub fn solver(&self, budget: usize) -> SolverConfig {
        SolverConfig::new(self.method, budget).with_tol(self.tol)
    }
}

/// One evaluation split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Split {
    Length(usize),
    Kappa(f64, f64),
}

impl Split {
    pub fn parse(task: Task, s: &str) -> Result<Self> {
        match task {
            Task::PrefixSum => s
                .parse::<usize>()
                .ok()
                .filter(|l| *l > 0)
                .map(Split::Length)
                .ok_or_else(|| Error::Config(format!("prefix-sum split {s:?} is not a length"))),
            Task::MatrixInversion => match s {
                "in" => Ok(Split::Kappa(INVERSION_TRAIN_KAPPA.0, INVERSION_TRAIN_KAPPA.1)),
                "ood" => Ok(Split::Kappa(INVERSION_OOD_KAPPA.0, INVERSION_OOD_KAPPA.1)),
                other => Err(Error::Config(format!(
                    "inversion split {other:?} must be \"in\" or \"ood\""
                ))),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub task: Task,
    pub cell: CellSpec,
    /// Forward pass during training; `max_iters` is the training depth.
    pub train_solver: SolverConfig,
    pub grad: GradConfig,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub intervention: Intervention,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default)]
    pub data: DataConfig,
    pub eval: EvalGrid,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_precision")]
    pub precision: Precision,
    /// Extra checkpoints every this many steps; the final one is always kept.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

fn default_steps() -> usize {
    30_000
}
fn default_batch() -> usize {
    150
}
fn default_precision() -> Precision {
    Precision::F64
}
fn default_log_every() -> usize {
    100
}

impl ExperimentConfig {
    /// The prefix-sum recipe: depth-32 conv net trained on 32-bit strings.
    pub fn prefix_sum_default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            task: Task::PrefixSum,
            cell: CellSpec::prefix_sum(64),
            train_solver: SolverConfig::naive(32),
            grad: GradConfig::new(Estimator::TruncatedBp),
            optimizer: OptimizerConfig {
                adam: AdamConfig::new(1e-4),
                schedule: LrPolicy::PrefixSumHalves,
            },
            intervention: Intervention::None,
            steps: default_steps(),
            batch: default_batch(),
            data: DataConfig::default(),
            eval: EvalGrid {
                splits: ["16", "32", "64", "128", "256"].map(String::from).to_vec(),
                budgets: vec![32, 512],
                method: SolverMethod::Anderson,
                tol: 0.0,
                aa: true,
                aa_repeats: 1,
            },
            seed: 0,
            precision: Precision::F64,
            checkpoint_every: None,
            log_every: default_log_every(),
        }
    }

    /// Matrix inversion with an fc cell and implicit gradients.
    pub fn matrix_inversion_default() -> Self {
        let data = DataConfig::default();
        Self {
            task: Task::MatrixInversion,
            cell: CellSpec::matrix_inversion(data.dim, 256),
            train_solver: SolverConfig::anderson(30).with_tol(1e-4),
            grad: GradConfig::new(Estimator::Ift),
            optimizer: OptimizerConfig {
                adam: AdamConfig::new(1e-4),
                schedule: LrPolicy::Constant,
            },
            eval: EvalGrid {
                splits: vec!["in".into(), "ood".into()],
                budgets: vec![30, 512],
                method: SolverMethod::Anderson,
                tol: 0.0,
                aa: true,
                aa_repeats: 1,
            },
            data,
            ..Self::prefix_sum_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.cell.validate()?;
        self.train_solver.validate()?;
        self.grad.validate()?;
        self.optimizer.adam.validate()?;
        match (self.task, self.cell.architecture) {
            (Task::PrefixSum, Architecture::Conv1dResnet) => {
                if self.cell.input_dim != 1 || self.cell.classes != 2 {
                    return Err(Error::Config(
                        "prefix sum needs input_dim 1 and 2 classes".into(),
                    ));
                }
                if self.data.train_length == 0 || self.data.train_length > 63 {
                    return Err(Error::Config("train_length must lie in 1..=63".into()));
                }
                if (self.data.train_count as u128) > (1u128 << self.data.train_length) {
                    return Err(Error::Config(format!(
                        "cannot draw {} unique strings of length {}",
                        self.data.train_count, self.data.train_length
                    )));
                }
            }
            (Task::MatrixInversion, Architecture::FcResnet) => {
                if self.cell.input_dim != self.data.dim {
                    return Err(Error::Config(format!(
                        "cell input_dim {} must equal data dim {}",
                        self.cell.input_dim, self.data.dim
                    )));
                }
                if !(self.data.noise_scale >= 0.0 && self.data.noise_scale.is_finite()) {
                    return Err(Error::Config("noise_scale must be nonnegative".into()));
                }
            }
            (task, arch) => {
                return Err(Error::Config(format!("task {task} cannot use a {arch} cell")))
            }
        }
        if self.steps == 0 || self.batch == 0 || self.data.train_count == 0 {
            return Err(Error::Config("steps, batch and train_count must be positive".into()));
        }
        if self.batch > self.data.train_count {
            return Err(Error::Config(format!(
                "batch {} exceeds the training set of {}",
                self.batch, self.data.train_count
            )));
        }
        if self.data.eval_count < 2 {
            return Err(Error::Config("eval_count must be at least 2".into()));
        }
        match self.intervention {
            Intervention::RandomizedDepth { min, max } if min == 0 || min > max => {
                return Err(Error::Config(format!(
                    "randomized depth range [{min}, {max}] needs 1 <= min <= max"
                )))
            }
            Intervention::AlignmentPenalty { k, weight } if k < 2 || !(weight >= 0.0) => {
                return Err(Error::Config(format!(
                    "alignment penalty needs k >= 2 and weight >= 0, got {k}, {weight}"
                )))
            }
            _ => {}
        }
        if self.log_every == 0 || self.checkpoint_every == Some(0) {
            return Err(Error::Config("log_every and checkpoint_every must be positive".into()));
        }
        if self.eval.splits.is_empty() || self.eval.budgets.is_empty() {
            return Err(Error::Config("eval grid needs splits and budgets".into()));
        }
        if self.eval.budgets.contains(&0) || self.eval.aa_repeats == 0 {
            return Err(Error::Config("eval budgets and aa_repeats must be positive".into()));
        }
        for s in &self.eval.splits {
            Split::parse(self.task, s)?;
        }
        Ok(())
    }

    /// Parses and validates a JSON config. Unknown fields are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Config(format!(
                    "schema_version {v} is not supported (expected {SCHEMA_VERSION})"
                )))
            }
            None => return Err(Error::Config("config has no integer schema_version".into())),
        }
        let cfg: Self = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Pretty JSON with every default filled in.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the compact resolved JSON.
    pub fn sha256(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(bytes))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
