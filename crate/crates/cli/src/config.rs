//! Experiment configuration: a schema-versioned JSON document, validated
//! fully (unknown keys rejected) before any compute starts. Parsed configs
//! carry every default materialized, so a config echo in a report is
//! self-describing.

use serde::{Deserialize, Serialize};
use std::path::Path;

use hessfine_core::data::{gaussian_blobs, split, two_spirals, BlobsParams, Dataset};
use hessfine_core::error::{Error, Result};
use hessfine_core::net::{ActivationKind, LossBound, LossKind, LossSpec};
use hessfine_core::train::{AlphaScheme, ArchSpec, Optimizer, ProjectionFrequency, TrainConfig};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum TaskSpec {
    Blobs {
        k: usize,
        dim: usize,
        n_train: usize,
        n_val: usize,
        n_test: usize,
        spread: f64,
        center_scale: f64,
        seed: u64,
    },
    Spirals {
        n_train: usize,
        n_val: usize,
        n_test: usize,
        turns: f64,
        noise: f64,
        seed: u64,
    },
    Csv {
        path: String,
        label_column: String,
        fractions: [f64; 3],
        seed: u64,
    },
}

impl TaskSpec {
    /// Materialize (train, val, test) deterministically from the task seed.
    pub fn build(&self) -> Result<(Dataset, Dataset, Dataset)> {
        match self {
            TaskSpec::Blobs { k, dim, n_train, n_val, n_test, spread, center_scale, seed } => {
                let n = n_train + n_val + n_test;
                let full = gaussian_blobs(&BlobsParams {
                    k: *k,
                    dim: *dim,
                    n,
                    spread: *spread,
                    center_scale: *center_scale,
                    seed: *seed,
                })?;
                let nf = n as f64;
                split(
                    &full,
                    (*n_train as f64 / nf, *n_val as f64 / nf, *n_test as f64 / nf),
                    *seed,
                )
            }
            TaskSpec::Spirals { n_train, n_val, n_test, turns, noise, seed } => {
                let n = n_train + n_val + n_test;
                let full = two_spirals(n, *turns, *noise, *seed)?;
                let nf = n as f64;
                split(
                    &full,
                    (*n_train as f64 / nf, *n_val as f64 / nf, *n_test as f64 / nf),
                    *seed,
                )
            }
            TaskSpec::Csv { path, label_column, fractions, seed } => {
                let full = hessfine_core::data::load_csv(Path::new(path), label_column)?;
                split(&full, (fractions[0], fractions[1], fractions[2]), *seed)
            }
        }
    }

    pub fn blobs_params(&self) -> Option<BlobsParams> {
        match self {
            TaskSpec::Blobs { k, dim, n_train, n_val, n_test, spread, center_scale, seed } => {
                Some(BlobsParams {
                    k: *k,
                    dim: *dim,
                    n: n_train + n_val + n_test,
                    spread: *spread,
                    center_scale: *center_scale,
                    seed: *seed,
                })
            }
            _ => None,
        }
    }
}

fn default_activation() -> String {
    "tanh".into()
}
fn default_output_activation() -> String {
    "identity".into()
}
fn default_loss() -> String {
    "softmax_cross_entropy".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: String,
    #[serde(default = "default_output_activation")]
    pub output_activation: String,
    #[serde(default = "default_loss")]
    pub loss: String,
}

impl Default for ArchitectureSpec {
    fn default() -> Self {
        ArchitectureSpec {
            hidden: vec![32, 32],
            activation: default_activation(),
            output_activation: default_output_activation(),
            loss: default_loss(),
        }
    }
}

pub fn parse_activation(name: &str) -> Result<ActivationKind> {
    match name {
        "tanh" => Ok(ActivationKind::Tanh),
        "sigmoid" => Ok(ActivationKind::Sigmoid),
        "gelu" => Ok(ActivationKind::Gelu),
        "softplus" => Ok(ActivationKind::Softplus),
        "identity" => Ok(ActivationKind::Identity),
        other => Err(Error::invalid_parameter("activation", format!("unknown kind `{other}`"))),
    }
}

pub fn parse_loss(name: &str) -> Result<LossSpec> {
    match name {
        "softmax_cross_entropy" => Ok(LossSpec::cross_entropy()),
        "squared_error_on_probabilities" => Ok(LossSpec::squared_error()),
        other => Err(Error::invalid_parameter("loss", format!("unknown kind `{other}`"))),
    }
}

impl ArchitectureSpec {
    pub fn to_arch(&self) -> Result<ArchSpec> {
        Ok(ArchSpec {
            hidden: self.hidden.clone(),
            activation: parse_activation(&self.activation)?,
            output_activation: parse_activation(&self.output_activation)?,
            loss: parse_loss(&self.loss)?,
        })
    }
}

fn default_pretrain_epochs() -> usize {
    60
}
fn default_pretrain_lr() -> f64 {
    0.01
}
fn default_batch() -> usize {
    32
}
fn default_perturbation() -> f64 {
    0.5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSpec {
    /// Center jitter between the source and target task (blobs only).
    #[serde(default = "default_perturbation")]
    pub perturbation: f64,
    /// Seed for the source task and the pretraining run.
    pub seed: u64,
    #[serde(default = "default_pretrain_epochs")]
    pub epochs: usize,
    #[serde(default = "default_pretrain_lr")]
    pub lr: f64,
    #[serde(default = "Optimizer::adam")]
    pub optimizer: Optimizer,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

impl Default for PretrainSpec {
    fn default() -> Self {
        PretrainSpec {
            perturbation: default_perturbation(),
            seed: 1,
            epochs: default_pretrain_epochs(),
            lr: default_pretrain_lr(),
            optimizer: Optimizer::adam(),
            batch_size: default_batch(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum NoiseSpec {
    #[default]
    None,
    /// Uniform label flips at rate `rho` with the true confusion known.
    Uniform { rho: f64 },
    /// Confusion matrix loaded from CSV (k rows of k reals).
    MatrixCsv { path: String },
    /// Uniform flips at rate `rho`, but Algorithm 1 receives a confusion
    /// matrix estimated from paired clean/noisy training labels instead of
    /// the ground truth.
    Estimate { rho: f64 },
}

fn default_epochs() -> usize {
    60
}
fn default_lr() -> f64 {
    0.005
}
fn default_method() -> String {
    "vanilla".into()
}
fn default_alpha_scheme() -> AlphaScheme {
    AlphaScheme::Geometric { d: 0.5, gamma: 1.0 }
}
fn default_projection() -> ProjectionFrequency {
    ProjectionFrequency::PerStep
}
fn default_l2sp_lambda() -> f64 {
    0.01
}
fn default_label_smooth() -> f64 {
    0.2
}
fn default_mixup() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerSpec {
    #[serde(default = "default_method")]
    pub method: String,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "Optimizer::adam")]
    pub optimizer: Optimizer,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Projection radii (used by alg1 and project-only).
    #[serde(default = "default_alpha_scheme")]
    pub alpha: AlphaScheme,
    #[serde(default = "default_projection")]
    pub projection: ProjectionFrequency,
    #[serde(default)]
    pub early_stop_patience: Option<usize>,
    #[serde(default)]
    pub val_fraction: f64,
    #[serde(default = "default_l2sp_lambda")]
    pub l2sp_lambda: f64,
    #[serde(default = "default_label_smooth")]
    pub label_smooth_alpha: f64,
    #[serde(default = "default_mixup")]
    pub mixup_alpha: f64,
}

impl Default for TrainerSpec {
    fn default() -> Self {
        TrainerSpec {
            method: default_method(),
            epochs: default_epochs(),
            lr: default_lr(),
            optimizer: Optimizer::adam(),
            batch_size: default_batch(),
            alpha: default_alpha_scheme(),
            projection: default_projection(),
            early_stop_patience: None,
            val_fraction: 0.0,
            l2sp_lambda: default_l2sp_lambda(),
            label_smooth_alpha: default_label_smooth(),
            mixup_alpha: default_mixup(),
        }
    }
}

pub const KNOWN_METHODS: [&str; 8] = [
    "vanilla",
    "alg1",
    "alg1-noproj",
    "reweight-only",
    "project-only",
    "l2sp",
    "labelsmooth",
    "mixup",
];

impl TrainerSpec {
    pub fn validate_method(method: &str) -> Result<()> {
        if KNOWN_METHODS.contains(&method) {
            Ok(())
        } else {
            Err(Error::invalid_parameter(
                "trainer.method",
                format!("unknown method `{method}`; known: {KNOWN_METHODS:?}"),
            ))
        }
    }

    pub fn to_train_config(&self, seed: u64, project: bool) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            optimizer: self.optimizer,
            batch_size: self.batch_size,
            alphas: if project { self.alpha.clone() } else { AlphaScheme::None },
            projection: self.projection,
            seed,
            early_stop_patience: self.early_stop_patience,
            val_fraction: self.val_fraction,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, untagged)]
pub enum SigmaGridSpec {
    Range { start: f64, stop: f64, count: usize },
    Values { values: Vec<f64> },
}

impl Default for SigmaGridSpec {
    fn default() -> Self {
        SigmaGridSpec::Range { start: 0.010, stop: 0.020, count: 11 }
    }
}

impl SigmaGridSpec {
    pub fn resolve(&self) -> Result<Vec<f64>> {
        match self {
            SigmaGridSpec::Range { start, stop, count } => {
                if *count == 0 || stop < start || *start <= 0.0 {
                    return Err(Error::invalid_parameter("sigma_grid", "bad range"));
                }
                if *count == 1 {
                    return Ok(vec![*start]);
                }
                let step = (stop - start) / (*count as f64 - 1.0);
                Ok((0..*count).map(|i| start + step * i as f64).collect())
            }
            SigmaGridSpec::Values { values } => {
                if values.is_empty() || values.iter().any(|&s| s <= 0.0) {
                    return Err(Error::invalid_parameter("sigma_grid", "need positive values"));
                }
                Ok(values.clone())
            }
        }
    }
}

fn default_eval_cap() -> usize {
    256
}
fn default_stability_eval_cap() -> usize {
    128
}
fn default_n_draws() -> usize {
    500
}
fn default_true() -> bool {
    true
}
fn default_heatmap_tau() -> f64 {
    1e-4
}
fn default_heatmap_per_class() -> usize {
    200
}
fn default_margin_grid() -> Vec<f64> {
    vec![0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0]
}
fn default_delta() -> f64 {
    0.01
}
fn default_kl_sigma() -> f64 {
    1.0
}
fn default_bound_loss() -> String {
    "squared_error_on_probabilities".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "mode", rename_all = "snake_case")]
pub enum CSpec {
    Fixed { value: f64 },
    Empirical,
}

impl Default for CSpec {
    fn default() -> Self {
        CSpec::Fixed { value: 2.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureSpec {
    #[serde(default = "default_eval_cap")]
    pub eval_cap: usize,
    #[serde(default)]
    pub c: CSpec,
    /// Loss under which Hessians and C are evaluated; `"training"` keeps the
    /// model's own loss.
    #[serde(default = "default_bound_loss")]
    pub bound_loss: String,
    #[serde(default)]
    pub sigma_grid: SigmaGridSpec,
    #[serde(default = "default_n_draws")]
    pub n_draws: usize,
    /// Use the symmetric second-order convention `½σ²tr(H)` for the
    /// stability approximation.
    #[serde(default = "default_true")]
    pub half_factor: bool,
    #[serde(default = "default_stability_eval_cap")]
    pub stability_eval_cap: usize,
    #[serde(default = "default_heatmap_tau")]
    pub heatmap_tau: f64,
    #[serde(default = "default_heatmap_per_class")]
    pub heatmap_per_class: usize,
    #[serde(default = "default_margin_grid")]
    pub margin_grid: Vec<f64>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_kl_sigma")]
    pub kl_sigma: f64,
    /// Attach a bound report to every fine-tuned model.
    #[serde(default = "default_true")]
    pub with_bounds: bool,
    /// Attach stability curves/heatmaps to fine-tune runs.
    #[serde(default)]
    pub with_stability: bool,
}

impl Default for MeasureSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults parse")
    }
}

impl MeasureSpec {
    pub fn bound_loss_spec(&self, training: LossSpec) -> Result<LossSpec> {
        if self.bound_loss == "training" {
            return Ok(training)
        }
        parse_loss(&self.bound_loss)
    }

    pub fn c_fixed(&self, loss: LossSpec) -> Option<f64> {
        match self.c {
            CSpec::Fixed { value } => Some(value),
            CSpec::Empirical => match loss.bound_c {
                LossBound::Fixed(v) if loss.kind == LossKind::SquaredErrorOnProbabilities => {
                    Some(v)
                }
                _ => None,
            },
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default)]
    pub rates: Vec<f64>,
    #[serde(default)]
    pub methods: Vec<String>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_output_dir() -> String {
    "out".into()
}

/// Top-level experiment configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub task: TaskSpec,
    #[serde(default)]
    pub architecture: ArchitectureSpec,
    #[serde(default)]
    pub pretrain: PretrainSpec,
    /// Pretrained checkpoint consumed by finetune/measure/stability.
    #[serde(default)]
    pub init_checkpoint: Option<String>,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub trainer: TrainerSpec,
    #[serde(default)]
    pub measure: MeasureSpec,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| {
            Error::invalid_parameter("config", format!("{e}"))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::invalid_parameter(
                "schema_version",
                format!("expected {CONFIG_SCHEMA_VERSION}, found {}", self.schema_version),
            ));
        }
        TrainerSpec::validate_method(&self.trainer.method)?;
        for m in &self.sweep.methods {
            TrainerSpec::validate_method(m)?;
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid_parameter("seeds", "need at least one seed"));
        }
        self.architecture.to_arch()?;
        self.measure.sigma_grid.resolve()?;
        if let NoiseSpec::Uniform { rho } | NoiseSpec::Estimate { rho } = self.noise {
            if !(0.0..=1.0).contains(&rho) {
                return Err(Error::invalid_parameter("noise.rho", "must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}
