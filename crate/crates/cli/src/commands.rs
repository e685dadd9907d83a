//! Command implementations: pretrain, finetune, measure, stability, sweep.
//!
//! Every command is a deterministic function of (config, seeds, --jobs):
//! outputs are written with stable field ordering and stable float
//! formatting, and all parallel reductions collect in index order. Timing
//! goes to the log, never into artifacts.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use hessfine_core::data::{accuracy, Dataset};
use hessfine_core::error::{Error, Result};
use hessfine_core::measures::{compute_bound_report, BoundOptions, BoundReport};
use hessfine_core::net::{
    load_checkpoint, save_checkpoint, Network, Provenance,
};
use hessfine_core::noise::{apply_noise, estimate_confusion, uniform_confusion, ConfusionMatrix};
use hessfine_core::stability::{relative_rss, stability_curve, trace_heatmap};
use hessfine_core::train::{
    algorithm1, finetune_l2sp, finetune_labelsmooth, finetune_mixup, finetune_vanilla, pretrain,
    AlphaScheme, TrainConfig, TrainTrace,
};
use rayon::prelude::*;

use crate::config::{ExperimentConfig, NoiseSpec, TaskSpec, CONFIG_SCHEMA_VERSION};

/// Distinct noise stream for validation labels.
const VAL_NOISE_SALT: u64 = 0x564c_4142;

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

/// Pretrain on the source task and write the initialization checkpoint.
///
/// The source task is the target's blobs distribution with jittered centers;
/// for spirals a fresh draw under the pretrain seed; for CSV tasks the train
/// split itself.
pub fn cmd_pretrain(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    let arch = cfg.architecture.to_arch()?;
    let source = match &cfg.task {
        TaskSpec::Blobs { .. } => {
            let params = cfg.task.blobs_params().unwrap();
            hessfine_core::data::related_task(
                &params,
                cfg.pretrain.perturbation,
                cfg.pretrain.seed,
            )?
        }
        TaskSpec::Spirals { n_train, n_val, n_test, turns, noise, .. } => {
            hessfine_core::data::two_spirals(
                n_train + n_val + n_test,
                *turns,
                *noise,
                cfg.pretrain.seed,
            )?
        }
        TaskSpec::Csv { .. } => cfg.task.build()?.0,
    };
    let train_cfg = TrainConfig {
        epochs: cfg.pretrain.epochs,
        lr: cfg.pretrain.lr,
        optimizer: cfg.pretrain.optimizer,
        batch_size: cfg.pretrain.batch_size,
        alphas: AlphaScheme::None,
        seed: cfg.pretrain.seed,
        ..TrainConfig::default()
    };
    let (net, trace) = pretrain(&source, &arch, &train_cfg)?;
    let source_accuracy = accuracy(&net, &source)?;
    log::info!("pretrain: source accuracy {source_accuracy:.4}");

    let ckpt_path = out.join("pretrained.json");
    save_checkpoint(
        &net,
        &ckpt_path,
        Provenance { seed: Some(cfg.pretrain.seed), created_by: "hessfine pretrain".into() },
    )?;
    write_text(&out.join("pretrain_trace.csv"), &trace.to_csv())?;

    #[derive(Serialize)]
    struct PretrainManifest<'a> {
        schema_version: u32,
        config: &'a ExperimentConfig,
        source_provenance: &'a str,
        source_accuracy: f64,
    }
    write_json(
        &out.join("pretrain_manifest.json"),
        &PretrainManifest {
            schema_version: CONFIG_SCHEMA_VERSION,
            config: cfg,
            source_provenance: &source.provenance,
            source_accuracy,
        },
    )?;
    Ok(ckpt_path)
}

/// Confusion matrices in play for one fine-tuning run.
struct ResolvedNoise {
    /// Ground truth used to generate noisy labels (None = clean labels).
    generator: Option<ConfusionMatrix>,
    /// Matrix handed to Algorithm 1 (estimated when so configured).
    for_algorithm: Option<ConfusionMatrix>,
    estimated: bool,
}

fn resolve_noise(
    spec: &NoiseSpec,
    k: usize,
    clean_train_labels: &[usize],
    seed: u64,
) -> Result<(ResolvedNoise, Option<Vec<usize>>)> {
    match spec {
        NoiseSpec::None => Ok((
            ResolvedNoise { generator: None, for_algorithm: None, estimated: false },
            None,
        )),
        NoiseSpec::Uniform { rho } => {
            let f = uniform_confusion(k, *rho)?;
            let noisy = apply_noise(clean_train_labels, &f, seed)?;
            Ok((
                ResolvedNoise {
                    generator: Some(f.clone()),
                    for_algorithm: Some(f),
                    estimated: false,
                },
                Some(noisy),
            ))
        }
        NoiseSpec::MatrixCsv { path } => {
            let f = ConfusionMatrix::from_csv(Path::new(path))?;
            if f.k() != k {
                return Err(Error::invalid_parameter(
                    "noise.path",
                    format!("confusion is {}x{} but the task has {k} classes", f.k(), f.k()),
                ));
            }
            let noisy = apply_noise(clean_train_labels, &f, seed)?;
            Ok((
                ResolvedNoise {
                    generator: Some(f.clone()),
                    for_algorithm: Some(f),
                    estimated: false,
                },
                Some(noisy),
            ))
        }
        NoiseSpec::Estimate { rho } => {
            let f = uniform_confusion(k, *rho)?;
            let noisy = apply_noise(clean_train_labels, &f, seed)?;
            let pairs: Vec<(usize, usize)> =
                clean_train_labels.iter().cloned().zip(noisy.iter().cloned()).collect();
            let estimated = estimate_confusion(&pairs, k)?;
            Ok((
                ResolvedNoise {
                    generator: Some(f),
                    for_algorithm: Some(estimated),
                    estimated: true,
                },
                Some(noisy),
            ))
        }
    }
}

/// One fine-tuned model with its evaluation numbers.
struct FitOutcome {
    net: Network,
    trace: TrainTrace,
    train_accuracy: f64,
    val_accuracy: Option<f64>,
    test_accuracy: f64,
    confusion_used: Option<ConfusionMatrix>,
    confusion_estimated: bool,
}

#[allow(clippy::too_many_arguments)]
fn fit_one_seed(
    cfg: &ExperimentConfig,
    method: &str,
    noise: &NoiseSpec,
    init: &Network,
    train: &Dataset,
    val: &Dataset,
    test: &Dataset,
    seed: u64,
) -> Result<FitOutcome> {
    let (resolved, noisy_train_labels) = resolve_noise(noise, train.k, &train.labels, seed)?;
    let train_noisy = match noisy_train_labels {
        Some(labels) => train.with_labels(labels)?,
        None => train.clone(),
    };
    let val_noisy = match &resolved.generator {
        Some(f) if !val.is_empty() => {
            Some(val.with_labels(apply_noise(&val.labels, f, seed ^ VAL_NOISE_SALT)?)?)
        }
        _ if !val.is_empty() => Some(val.clone()),
        _ => None,
    };

    let spec = &cfg.trainer;
    let val_ref = val_noisy.as_ref();
    let test_ref = Some(test);
    let identity;
    let confusion_for_alg = match &resolved.for_algorithm {
        Some(f) => f,
        None => {
            identity = ConfusionMatrix::identity(train.k);
            &identity
        }
    };
    let (net, trace) = match method {
        "vanilla" => {
            finetune_vanilla(init, &train_noisy, val_ref, test_ref, &spec.to_train_config(seed, false))
        }
        "alg1" => algorithm1(
            init,
            &train_noisy,
            val_ref,
            test_ref,
            confusion_for_alg,
            &spec.to_train_config(seed, true),
        ),
        "alg1-noproj" | "reweight-only" => algorithm1(
            init,
            &train_noisy,
            val_ref,
            test_ref,
            confusion_for_alg,
            &spec.to_train_config(seed, false),
        ),
        "project-only" => {
            finetune_vanilla(init, &train_noisy, val_ref, test_ref, &spec.to_train_config(seed, true))
        }
        "l2sp" => finetune_l2sp(
            init,
            &train_noisy,
            val_ref,
            test_ref,
            &spec.to_train_config(seed, false),
            spec.l2sp_lambda,
        ),
        "labelsmooth" => finetune_labelsmooth(
            init,
            &train_noisy,
            val_ref,
            test_ref,
            &spec.to_train_config(seed, false),
            spec.label_smooth_alpha,
        ),
        "mixup" => finetune_mixup(
            init,
            &train_noisy,
            val_ref,
            test_ref,
            &spec.to_train_config(seed, false),
            spec.mixup_alpha,
        ),
        other => {
            return Err(Error::invalid_parameter(
                "trainer.method",
                format!("unknown method `{other}`"),
            ))
        }
    }?;

    let train_accuracy = accuracy(&net, &train_noisy)?;
    let val_accuracy = match &val_noisy {
        Some(v) => Some(accuracy(&net, v)?),
        None => None,
    };
    let test_accuracy = accuracy(&net, test)?;
    Ok(FitOutcome {
        net,
        trace,
        train_accuracy,
        val_accuracy,
        test_accuracy,
        confusion_used: resolved.generator,
        confusion_estimated: resolved.estimated,
    })
}

fn bound_report_for_model(
    cfg: &ExperimentConfig,
    net: &Network,
    init: &Network,
    train: &Dataset,
    test: &Dataset,
    confusion: Option<&ConfusionMatrix>,
    projected: bool,
) -> Result<BoundReport> {
    let bound_loss = cfg.measure.bound_loss_spec(net.loss_spec())?;
    let bnet = net.with_loss(bound_loss);
    let binit = init.with_loss(bound_loss);
    let alphas = if projected {
        cfg.trainer.alpha.resolve(net.num_layers())?.unwrap_or_default()
    } else {
        Vec::new()
    };
    let opts = BoundOptions {
        c_fixed: cfg.measure.c_fixed(bound_loss),
        n: train.len(),
        eval_cap: cfg.measure.eval_cap,
        alphas,
        margin_grid: cfg.measure.margin_grid.clone(),
        delta: cfg.measure.delta,
        kl_sigma: cfg.measure.kl_sigma,
    };
    compute_bound_report(&bnet, &binit, train, Some(test), confusion, &opts)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    pub test_accuracy: f64,
    pub best_epoch: Option<usize>,
    pub final_distances: Vec<f64>,
    /// `Σ_i sqrt(H_i)` for the fine-tuned model, when bounds were computed.
    pub hessian_sqrt_sum: Option<f64>,
    pub confusion_estimated: bool,
    pub bound: Option<BoundReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub command: String,
    pub method: String,
    pub config: ExperimentConfig,
    pub per_seed: Vec<SeedResult>,
    pub mean_test_accuracy: f64,
    pub std_test_accuracy: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

fn load_init(cfg: &ExperimentConfig, init_flag: Option<&Path>) -> Result<Network> {
    let path = match init_flag {
        Some(p) => p.to_path_buf(),
        None => PathBuf::from(cfg.init_checkpoint.as_ref().ok_or_else(|| {
            Error::invalid_parameter(
                "init_checkpoint",
                "no pretrained checkpoint given (config field or --init)",
            )
        })?),
    };
    let (net, _) = load_checkpoint(&path)?;
    // Fine-tuning always uses the configured training loss.
    let loss = crate::config::parse_loss(&cfg.architecture.loss)?;
    Ok(net.with_loss(loss))
}

/// Run the configured method over every seed and aggregate.
pub fn run_finetune(
    cfg: &ExperimentConfig,
    method: &str,
    noise: &NoiseSpec,
    init: &Network,
    with_bounds: bool,
) -> Result<Vec<(SeedResult, Network, TrainTrace)>> {
    let (train, val, test) = cfg.task.build()?;
    if init.input_dim() != train.dim() || init.classes() != train.k {
        return Err(Error::invalid_parameter(
            "init_checkpoint",
            format!(
                "checkpoint is {}->{} but the task is {}->{}",
                init.input_dim(),
                init.classes(),
                train.dim(),
                train.k
            ),
        ));
    }
    let projected = matches!(method, "alg1" | "project-only");
    cfg.seeds
        .par_iter()
        .map(|&seed| -> Result<(SeedResult, Network, TrainTrace)> {
            let fit = fit_one_seed(cfg, method, noise, init, &train, &val, &test, seed)?;
            let bound = if with_bounds {
                // Bound evaluation uses the labels the model was trained on.
                let noisy_train = match &fit.confusion_used {
                    Some(f) => train.with_labels(apply_noise(&train.labels, f, seed)?)?,
                    None => train.clone(),
                };
                Some(bound_report_for_model(
                    cfg,
                    &fit.net,
                    init,
                    &noisy_train,
                    &test,
                    fit.confusion_used.as_ref(),
                    projected,
                )?)
            } else {
                None
            };
            let hessian_sqrt_sum = bound
                .as_ref()
                .map(|b| b.hessian_per_layer.iter().map(|h| h.sqrt()).sum());
            let final_distances = fit
                .trace
                .epochs
                .last()
                .map(|r| r.layer_distances.clone())
                .unwrap_or_default();
            Ok((
                SeedResult {
                    seed,
                    train_accuracy: fit.train_accuracy,
                    val_accuracy: fit.val_accuracy,
                    test_accuracy: fit.test_accuracy,
                    best_epoch: fit.trace.best_epoch,
                    final_distances,
                    hessian_sqrt_sum,
                    confusion_estimated: fit.confusion_estimated,
                    bound,
                },
                fit.net,
                fit.trace,
            ))
        })
        .collect()
}

/// Fine-tune per seed, write per-seed artifacts, and aggregate a RunReport.
pub fn cmd_finetune(
    cfg: &ExperimentConfig,
    init_flag: Option<&Path>,
    out: &Path,
) -> Result<RunReport> {
    let init = load_init(cfg, init_flag)?;
    let results = run_finetune(
        cfg,
        &cfg.trainer.method,
        &cfg.noise,
        &init,
        cfg.measure.with_bounds,
    )?;

    let mut per_seed = Vec::with_capacity(results.len());
    for (seed_result, net, trace) in &results {
        let dir = out.join(format!("seed_{}", seed_result.seed));
        save_checkpoint(
            net,
            &dir.join("model.json"),
            Provenance {
                seed: Some(seed_result.seed),
                created_by: format!("hessfine finetune ({})", cfg.trainer.method),
            },
        )?;
        write_text(&dir.join("trace.csv"), &trace.to_csv())?;
        if let Some(bound) = &seed_result.bound {
            write_json(&dir.join("bound.json"), bound)?;
            write_text(&dir.join("bound.csv"), &bound.to_csv())?;
        }
        per_seed.push(seed_result.clone());
    }

    let accs: Vec<f64> = per_seed.iter().map(|r| r.test_accuracy).collect();
    let (mean, std) = mean_std(&accs);
    let report = RunReport {
        schema_version: CONFIG_SCHEMA_VERSION,
        command: "finetune".into(),
        method: cfg.trainer.method.clone(),
        config: cfg.clone(),
        per_seed,
        mean_test_accuracy: mean,
        std_test_accuracy: std,
    };
    write_json(&out.join("report.json"), &report)?;

    let mut csv = String::from("seed,train_accuracy,val_accuracy,test_accuracy\n");
    for r in &report.per_seed {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            r.seed,
            r.train_accuracy,
            r.val_accuracy.map(|v| v.to_string()).unwrap_or_default(),
            r.test_accuracy
        ));
    }
    write_text(&out.join("report.csv"), &csv)?;
    log::info!(
        "finetune[{}]: test accuracy {:.4} ± {:.4} over {} seeds",
        cfg.trainer.method,
        report.mean_test_accuracy,
        report.std_test_accuracy,
        report.per_seed.len()
    );
    Ok(report)
}

#[derive(Debug, Serialize)]
pub struct MeasureArtifact<'a> {
    pub schema_version: u32,
    pub command: String,
    pub config: &'a ExperimentConfig,
    pub report: BoundReport,
}

/// Measure a checkpoint against its initialization.
pub fn cmd_measure(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    init_flag: Option<&Path>,
    out: &Path,
) -> Result<BoundReport> {
    let (model, _) = load_checkpoint(checkpoint)?;
    let init = load_init(cfg, init_flag)?;
    if model.dims() != init.dims() {
        return Err(Error::invalid_parameter(
            "checkpoint",
            format!("model dims {:?} differ from init dims {:?}", model.dims(), init.dims()),
        ));
    }
    let (train, _, test) = cfg.task.build()?;
    let confusion = match &cfg.noise {
        NoiseSpec::None => None,
        NoiseSpec::Uniform { rho } | NoiseSpec::Estimate { rho } => {
            Some(uniform_confusion(train.k, *rho)?)
        }
        NoiseSpec::MatrixCsv { path } => Some(ConfusionMatrix::from_csv(Path::new(path))?),
    };
    let report = bound_report_for_model(
        cfg,
        &model,
        &init,
        &train,
        &test,
        confusion.as_ref(),
        matches!(cfg.trainer.method.as_str(), "alg1" | "project-only"),
    )?;
    write_json(
        &out.join("bound_report.json"),
        &MeasureArtifact {
            schema_version: CONFIG_SCHEMA_VERSION,
            command: "measure".into(),
            config: cfg,
            report: report.clone(),
        },
    )?;
    write_text(&out.join("bound_report.csv"), &report.to_csv())?;
    log::info!(
        "measure: hessian distance {:.6e}, prior bounds {:?}",
        report.hessian_distance_total,
        report.prior.values()
    );
    Ok(report)
}

#[derive(Debug, Serialize)]
pub struct StabilitySummary<'a> {
    pub schema_version: u32,
    pub command: String,
    pub config: &'a ExperimentConfig,
    pub relative_rss: f64,
    pub half_factor: bool,
    pub n_draws: usize,
    pub seed: u64,
    pub nonfinite_draws: usize,
    pub heatmap_selection: String,
    pub heatmap_diagonal_minima: usize,
}

/// Stability curve + heatmap for a checkpoint.
pub fn cmd_stability(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    out: &Path,
) -> Result<f64> {
    let (model, _) = load_checkpoint(checkpoint)?;
    let bound_loss = cfg.measure.bound_loss_spec(model.loss_spec())?;
    let net = model.with_loss(bound_loss);
    let (train, _, _) = cfg.task.build()?;
    let eval = train.subsample_even(cfg.measure.stability_eval_cap);
    let grid = cfg.measure.sigma_grid.resolve()?;
    let seed = cfg.seeds[0];
    let curve = stability_curve(
        &net,
        &eval,
        &grid,
        cfg.measure.n_draws,
        seed,
        cfg.measure.half_factor,
    )?;
    let rss = relative_rss(&curve)?;
    let heatmap = trace_heatmap(
        &net,
        &train,
        cfg.measure.heatmap_tau,
        cfg.measure.heatmap_per_class,
    )?;
    write_text(&out.join("stability_curve.csv"), &curve.to_csv())?;
    write_text(&out.join("heatmap.csv"), &heatmap.to_csv())?;
    write_json(
        &out.join("stability_summary.json"),
        &StabilitySummary {
            schema_version: CONFIG_SCHEMA_VERSION,
            command: "stability".into(),
            config: cfg,
            relative_rss: rss,
            half_factor: cfg.measure.half_factor,
            n_draws: cfg.measure.n_draws,
            seed,
            nonfinite_draws: curve.nonfinite_draws,
            heatmap_selection: heatmap.selection.clone(),
            heatmap_diagonal_minima: heatmap.diagonal_minimum_count(),
        },
    )?;
    log::info!("stability: relative RSS {rss:.4} (half_factor = {})", cfg.measure.half_factor);
    Ok(rss)
}

#[derive(Debug, Serialize)]
struct SweepCell {
    method: String,
    rho: f64,
    seed: u64,
    accuracy: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct SweepSummary<'a> {
    schema_version: u32,
    command: String,
    config: &'a ExperimentConfig,
    cells: Vec<SweepCell>,
    failures: Vec<String>,
}

/// Repeat the fine-tune protocol per (noise rate, method); failures are
/// recorded and the sweep continues.
pub fn cmd_sweep(
    cfg: &ExperimentConfig,
    init_flag: Option<&Path>,
    out: &Path,
) -> Result<usize> {
    let init = load_init(cfg, init_flag)?;
    let methods: Vec<String> = if cfg.sweep.methods.is_empty() {
        vec![cfg.trainer.method.clone()]
    } else {
        cfg.sweep.methods.clone()
    };
    let mut cells = Vec::new();
    let mut failures = Vec::new();
    for &rho in &cfg.sweep.rates {
        let noise = match &cfg.noise {
            NoiseSpec::Estimate { .. } => NoiseSpec::Estimate { rho },
            NoiseSpec::MatrixCsv { .. } => {
                return Err(Error::invalid_parameter(
                    "sweep",
                    "rate sweeps need a uniform or estimated noise model",
                ))
            }
            _ => NoiseSpec::Uniform { rho },
        };
        for method in &methods {
            match run_finetune(cfg, method, &noise, &init, false) {
                Ok(results) => {
                    for (r, _, _) in results {
                        cells.push(SweepCell {
                            method: method.clone(),
                            rho,
                            seed: r.seed,
                            accuracy: Some(r.test_accuracy),
                        });
                    }
                }
                Err(e) => {
                    let msg = format!("method {method} at rho {rho}: {e}");
                    log::warn!("sweep cell failed: {msg}");
                    for &seed in &cfg.seeds {
                        cells.push(SweepCell {
                            method: method.clone(),
                            rho,
                            seed,
                            accuracy: None,
                        });
                    }
                    failures.push(msg);
                }
            }
        }
    }

    let mut csv = String::from("method,rho,seed,accuracy\n");
    for c in &cells {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            c.method,
            c.rho,
            c.seed,
            c.accuracy.map(|a| a.to_string()).unwrap_or_else(|| "nan".into())
        ));
    }
    write_text(&out.join("sweep.csv"), &csv)?;
    let n_cells = cells.len();
    write_json(
        &out.join("sweep.json"),
        &SweepSummary {
            schema_version: CONFIG_SCHEMA_VERSION,
            command: "sweep".into(),
            config: cfg,
            cells,
            failures,
        },
    )?;
    Ok(n_cells)
}
