//! Generalization-measure computations: the Hessian-distance measure, its
//! trace relaxation, the noisy-label variant, the PAC-Bayes KL term, margin
//! selection, and classical norm/margin bounds for comparison.
//!
//! Per-sample layer Hessian quantities are evaluated through the exact
//! factored form (see [`crate::hessian::layer_curvatures`]); tests pin its
//! agreement with the dense HVP route.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::hessian::{hessian_lipschitz_g, layer_curvatures};
use crate::linalg;
use crate::net::Network;
use crate::noise::{invert_confusion, ConfusionMatrix};

/// `‖X‖₁,∞`: the maximum absolute column sum.
pub fn norm_1inf(x: &Array2<f64>) -> f64 {
    linalg::norm_one(x)
}

/// Per-layer distances from initialization: `ΔW_i = W_i - Ŵ_i⁽ˢ⁾` and their
/// Frobenius norms (equal to the Euclidean norms of the flattened vectors).
#[derive(Debug, Clone)]
pub struct LayerDistances {
    pub deltas: Vec<Array2<f64>>,
    pub norms: Vec<f64>,
}

pub fn distance_vectors(net: &Network, init: &Network) -> Result<LayerDistances> {
    if net.dims() != init.dims() {
        return Err(Error::invalid_parameter(
            "init",
            format!("architecture mismatch: {:?} vs {:?}", net.dims(), init.dims()),
        ));
    }
    let mut deltas = Vec::with_capacity(net.num_layers());
    let mut norms = Vec::with_capacity(net.num_layers());
    for (a, b) in net.layers().iter().zip(init.layers().iter()) {
        let d = &a.weight - &b.weight;
        norms.push(linalg::frobenius(&d));
        deltas.push(d);
    }
    Ok(LayerDistances { deltas, norms })
}

fn require_nonempty(eval: &Dataset) -> Result<()> {
    if eval.is_empty() {
        return Err(Error::EmptyInput { what: "evaluation set".into() });
    }
    Ok(())
}

/// Per-layer measure values and the combined bound term.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeasureValue {
    /// Per-layer maxima (`H_i`, traces, ...) in layer order.
    pub per_layer: Vec<f64>,
    /// Combined dominant term.
    pub total: f64,
}

/// `Σ_i sqrt(C · h_i / n)`.
fn combine_sqrt(values: &[f64], c: f64, n: usize) -> f64 {
    values.iter().map(|&h| (c * h / n as f64).sqrt()).sum()
}

/// The Hessian distance measure: per layer
/// `H_i = max_{(x,y) ∈ eval} v_iᵀ H_i⁺[ℓ(f(x), y)] v_i`, combined as
/// `Σ_i sqrt(C·H_i/n)` (dominant term only; the Taylor error term and the
/// `(1+ε)` factor are excluded by convention).
pub fn hessian_distance_measure(
    net: &Network,
    init: &Network,
    eval: &Dataset,
    c: f64,
    n: usize,
) -> Result<MeasureValue> {
    require_nonempty(eval)?;
    let dist = distance_vectors(net, init)?;
    let layers = net.num_layers();
    let per_sample: Vec<Vec<f64>> = (0..eval.len())
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>> {
            let (x, y) = eval.sample(i);
            let curv = layer_curvatures(net, x, y)?;
            (0..layers)
                .map(|l| curv[l].positive_quadratic_form(&dist.deltas[l]))
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut per_layer = vec![0.0f64; layers];
    for row in &per_sample {
        for (l, &q) in row.iter().enumerate() {
            per_layer[l] = per_layer[l].max(q);
        }
    }
    let total = combine_sqrt(&per_layer, c, n);
    Ok(MeasureValue { per_layer, total })
}

/// Trace relaxation for distance-based regularization: per layer
/// `α_i² · max_{eval} tr(H_i⁺)`, combined as `Σ_i sqrt(C·α_i²·max tr/n)`.
/// Warns (does not fail) when some `α_i` is below the realized distance.
pub fn trace_distance_measure(
    net: &Network,
    init: &Network,
    eval: &Dataset,
    alphas: &[f64],
    c: f64,
    n: usize,
) -> Result<MeasureValue> {
    require_nonempty(eval)?;
    let dist = distance_vectors(net, init)?;
    check_alphas(alphas, &dist.norms, net.num_layers())?;
    let traces = max_positive_traces(net, eval)?;
    let per_layer: Vec<f64> =
        traces.iter().zip(alphas.iter()).map(|(&t, &a)| a * a * t).collect();
    let total = combine_sqrt(&per_layer, c, n);
    Ok(MeasureValue { per_layer, total })
}

fn check_alphas(alphas: &[f64], norms: &[f64], layers: usize) -> Result<()> {
    if alphas.len() != layers {
        return Err(Error::invalid_parameter(
            "alphas",
            format!("{} radii for {layers} layers", alphas.len()),
        ));
    }
    for (i, (&a, &nv)) in alphas.iter().zip(norms.iter()).enumerate() {
        if a < 0.0 {
            return Err(Error::invalid_parameter("alphas", format!("alpha[{i}] = {a} < 0")));
        }
        if a + 1e-12 < nv {
            log::warn!("alpha[{i}] = {a} below realized layer distance {nv}");
        }
    }
    Ok(())
}

/// `max_{eval} tr(H_i⁺)` per layer.
fn max_positive_traces(net: &Network, eval: &Dataset) -> Result<Vec<f64>> {
    let layers = net.num_layers();
    let per_sample: Vec<Vec<f64>> = (0..eval.len())
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>> {
            let (x, y) = eval.sample(i);
            let curv = layer_curvatures(net, x, y)?;
            (0..layers).map(|l| curv[l].positive_trace()).collect()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = vec![0.0f64; layers];
    for row in &per_sample {
        for (l, &t) in row.iter().enumerate() {
            out[l] = out[l].max(t);
        }
    }
    Ok(out)
}

/// `max over eval inputs × all k labels of |tr H_i|` per layer.
fn max_abs_traces_all_labels(net: &Network, eval: &Dataset) -> Result<Vec<f64>> {
    let layers = net.num_layers();
    let k = net.classes();
    let per_sample: Vec<Vec<f64>> = (0..eval.len())
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>> {
            let (x, _) = eval.sample(i);
            let mut best = vec![0.0f64; layers];
            for label in 0..k {
                let curv = layer_curvatures(net, x, label)?;
                for l in 0..layers {
                    best[l] = best[l].max(curv[l].trace().abs());
                }
            }
            Ok(best)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = vec![0.0f64; layers];
    for row in &per_sample {
        for (l, &t) in row.iter().enumerate() {
            out[l] = out[l].max(t);
        }
    }
    Ok(out)
}

/// Result of [`noisy_measure`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoisyMeasure {
    /// `‖(F⁻¹)ᵀ‖₁,∞`.
    pub reweight_norm: f64,
    /// Per-layer `max |tr H_i|` over eval inputs × all labels.
    pub per_layer: Vec<f64>,
    pub total: f64,
}

/// Noisy-label measure:
/// `sqrt(C·‖(F⁻¹)ᵀ‖₁,∞) · Σ_i sqrt(α_i² · max_{x,y} |tr H_i|) / sqrt(n)`.
///
/// Uses the signed-trace absolute value (not the truncated Hessian); the max
/// ranges over eval inputs crossed with every class label.
pub fn noisy_measure(
    net: &Network,
    init: &Network,
    eval: &Dataset,
    alphas: &[f64],
    confusion: &ConfusionMatrix,
    c: f64,
    n: usize,
) -> Result<NoisyMeasure> {
    require_nonempty(eval)?;
    let dist = distance_vectors(net, init)?;
    check_alphas(alphas, &dist.norms, net.num_layers())?;
    let lambda = invert_confusion(confusion)?;
    let reweight_norm = norm_1inf(&lambda.lambda.t().to_owned());
    let traces = max_abs_traces_all_labels(net, eval)?;
    let total = noisy_total(c, reweight_norm, alphas, &traces, n);
    Ok(NoisyMeasure { reweight_norm, per_layer: traces, total })
}

fn noisy_total(c: f64, reweight_norm: f64, alphas: &[f64], traces: &[f64], n: usize) -> f64 {
    let factor = (c * reweight_norm).sqrt();
    let sum: f64 =
        alphas.iter().zip(traces.iter()).map(|(&a, &t)| (a * a * t).sqrt()).sum();
    factor * sum / (n as f64).sqrt()
}

/// Isotropic Gaussian PAC-Bayes KL divergence:
/// `Σ_i ‖W_i - Ŵ_i⁽ˢ⁾‖_F² / (2σ_i²)`.
pub fn kl_divergence(net: &Network, init: &Network, sigmas: &[f64]) -> Result<f64> {
    let dist = distance_vectors(net, init)?;
    if sigmas.len() != dist.norms.len() {
        return Err(Error::invalid_parameter(
            "sigmas",
            format!("{} sigmas for {} layers", sigmas.len(), dist.norms.len()),
        ));
    }
    if let Some(&bad) = sigmas.iter().find(|&&s| s <= 0.0) {
        return Err(Error::invalid_parameter("sigmas", format!("sigma {bad} must be positive")));
    }
    Ok(dist
        .norms
        .iter()
        .zip(sigmas.iter())
        .map(|(&d, &s)| d * d / (2.0 * s * s))
        .sum())
}

/// Largest margin on the grid whose margin loss exceeds the zero-one loss by
/// less than 1% (both counted with the `margin ≤ threshold` convention).
/// Falls back to the smallest grid value when no point qualifies.
pub fn margin_selection(margins: &[f64], grid: &[f64]) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::EmptyInput { what: "margin grid".into() });
    }
    if margins.is_empty() {
        return Err(Error::EmptyInput { what: "margins".into() });
    }
    let n = margins.len() as f64;
    let zero_one = margins.iter().filter(|&&m| m <= 0.0).count() as f64 / n;
    let mut best: Option<f64> = None;
    for &gamma in grid {
        let margin_loss = margins.iter().filter(|&&m| m <= gamma).count() as f64 / n;
        if margin_loss - zero_one < 0.01 {
            best = Some(best.map_or(gamma, |b: f64| b.max(gamma)));
        }
    }
    Ok(best.unwrap_or_else(|| grid.iter().cloned().fold(f64::INFINITY, f64::min)))
}

/// Norms consumed by the prior bounds, reported alongside them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriorBoundInputs {
    pub spectral: Vec<f64>,
    pub init_spectral: Vec<f64>,
    pub frobenius: Vec<f64>,
    pub dist_frobenius: Vec<f64>,
    pub dist_spectral: Vec<f64>,
    pub row_sum: Vec<f64>,
    pub dist_row_sum: Vec<f64>,
    pub gamma: f64,
    pub li_epsilon: f64,
    pub n: usize,
    pub num_params: usize,
}

/// The five comparison bounds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriorBounds {
    pub gouk: f64,
    pub li: f64,
    pub long: f64,
    pub neyshabur: f64,
    pub pitas: f64,
    pub inputs: PriorBoundInputs,
}

impl PriorBounds {
    pub fn values(&self) -> [(&'static str, f64); 5] {
        [
            ("gouk", self.gouk),
            ("li", self.li),
            ("long", self.long),
            ("neyshabur", self.neyshabur),
            ("pitas", self.pitas),
        ]
    }
}

/// Evaluate the five comparison bounds on `(net, init, train)` at margin
/// `gamma`. `avg_train_loss` feeds Li's `ε = 0.1 ×` average training loss.
pub fn prior_bounds(
    net: &Network,
    init: &Network,
    train: &Dataset,
    gamma: f64,
    avg_train_loss: f64,
) -> Result<PriorBounds> {
    if gamma <= 0.0 {
        return Err(Error::invalid_parameter("gamma", "margin must be positive"));
    }
    require_nonempty(train)?;
    let dist = distance_vectors(net, init)?;
    let n = train.len();
    let nf = n as f64;

    let spectral: Vec<f64> =
        net.layers().iter().map(|l| linalg::spectral_norm(&l.weight)).collect();
    let init_spectral: Vec<f64> =
        init.layers().iter().map(|l| linalg::spectral_norm(&l.weight)).collect();
    let frobenius: Vec<f64> = net.layers().iter().map(|l| linalg::frobenius(&l.weight)).collect();
    let dist_frobenius = dist.norms.clone();
    let dist_spectral: Vec<f64> = dist.deltas.iter().map(linalg::spectral_norm).collect();
    let row_sum: Vec<f64> = net.layers().iter().map(|l| linalg::norm_inf(&l.weight)).collect();
    let dist_row_sum: Vec<f64> = dist.deltas.iter().map(linalg::norm_inf).collect();

    if spectral.contains(&0.0) || row_sum.contains(&0.0) {
        return Err(Error::SingularMatrix {
            context: "prior bounds: a layer has zero norm".into(),
            cond: f64::INFINITY,
        });
    }

    let li_epsilon = 0.1 * avg_train_loss;
    if li_epsilon <= 0.0 {
        return Err(Error::invalid_parameter(
            "avg_train_loss",
            "must be positive for Li's epsilon",
        ));
    }

    // Gouk: (1/sqrt(n)) Π(2‖W_i‖_inf) Σ(‖W_i - W_i^s‖_inf / ‖W_i‖_inf).
    let gouk = row_sum.iter().map(|&r| 2.0 * r).product::<f64>()
        * dist_row_sum
            .iter()
            .zip(row_sum.iter())
            .map(|(&d, &r)| d / r)
            .sum::<f64>()
        / nf.sqrt();

    // Li: sqrt( (Σ_i Π_j(B_j+D_j)/(B_i+D_i))² Σ_i D_i² / (ε² n) ).
    let bd: Vec<f64> =
        init_spectral.iter().zip(dist_frobenius.iter()).map(|(&b, &d)| b + d).collect();
    let bd_product: f64 = bd.iter().product();
    let ratio_sum: f64 = bd.iter().map(|&v| bd_product / v).sum();
    let d_sq_sum: f64 = dist_frobenius.iter().map(|&d| d * d).sum();
    let li = (ratio_sum * ratio_sum * d_sq_sum / (li_epsilon * li_epsilon * nf)).sqrt();

    // Long: sqrt( (M/n) Π‖W_i‖₂² Σ‖W_i - W_i^s‖₂ ).
    let m = net.num_params() as f64;
    let spec_sq_product: f64 = spectral.iter().map(|&s| s * s).product();
    let long =
        (m / nf * spec_sq_product * dist_spectral.iter().sum::<f64>()).sqrt();

    // Neyshabur: sqrt( (1/γ²n) Π‖W_i‖₂² Σ ‖W_i‖_F²/‖W_i‖₂² ).
    let ney_sum: f64 =
        frobenius.iter().zip(spectral.iter()).map(|(&f, &s)| f * f / (s * s)).sum();
    let neyshabur = (spec_sq_product * ney_sum / (gamma * gamma * nf)).sqrt();

    // Pitas: sqrt( (1/γ²n) Π‖W_i‖₂² Σ ‖W_i - W_i^s‖_F²/‖W_i‖₂² ).
    let pitas_sum: f64 = dist_frobenius
        .iter()
        .zip(spectral.iter())
        .map(|(&d, &s)| d * d / (s * s))
        .sum();
    let pitas = (spec_sq_product * pitas_sum / (gamma * gamma * nf)).sqrt();

    Ok(PriorBounds {
        gouk,
        li,
        long,
        neyshabur,
        pitas,
        inputs: PriorBoundInputs {
            spectral,
            init_spectral,
            frobenius,
            dist_frobenius,
            dist_spectral,
            row_sum,
            dist_row_sum,
            gamma,
            li_epsilon,
            n,
            num_params: net.num_params(),
        },
    })
}

/// Empirical loss bound: max loss over eval inputs crossed with every label.
pub fn empirical_loss_bound(net: &Network, eval: &Dataset) -> Result<f64> {
    require_nonempty(eval)?;
    let k = net.classes();
    let mut best = 0.0f64;
    for i in 0..eval.len() {
        let (x, _) = eval.sample(i);
        let out = net.output(x)?;
        for c in 0..k {
            best = best.max(net.loss_spec().kind.value(out.view(), c)?);
        }
    }
    Ok(best)
}

/// Everything [`compute_bound_report`] needs beyond the data itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundOptions {
    /// Loss bound C; `None` means use the empirical maximum.
    pub c_fixed: Option<f64>,
    /// Training-set size entering the denominators.
    pub n: usize,
    /// Evaluation subsample cap (0 = no cap).
    pub eval_cap: usize,
    /// Projection radii for the trace/noisy measures; defaults to the
    /// realized per-layer distances when empty.
    pub alphas: Vec<f64>,
    /// Margin grid for the margin-based bounds.
    pub margin_grid: Vec<f64>,
    /// Confidence parameter recorded with the report.
    pub delta: f64,
    /// Per-layer σ for the KL term (single value broadcast to all layers).
    pub kl_sigma: f64,
}

impl Default for BoundOptions {
    fn default() -> Self {
        BoundOptions {
            c_fixed: None,
            n: 0,
            eval_cap: 256,
            alphas: Vec::new(),
            margin_grid: vec![0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0],
            delta: 0.01,
            kl_sigma: 1.0,
        }
    }
}

/// Metadata echoed into every bound report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundMetadata {
    pub c: f64,
    pub c_source: String,
    pub n: usize,
    pub eval_count: usize,
    pub eval_cap: usize,
    pub gamma: f64,
    pub delta: f64,
    pub kl_sigma: f64,
    pub alphas: Vec<f64>,
    pub loss: String,
    /// Convention: dominant term only, ε = 0, Taylor error term omitted.
    pub epsilon_convention: String,
}

/// All generalization-measure values for one trained model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundReport {
    pub hessian_per_layer: Vec<f64>,
    pub hessian_distance_total: f64,
    pub trace_measure_total: f64,
    pub noisy_measure_total: Option<f64>,
    pub reweight_norm: Option<f64>,
    pub kl: f64,
    pub prior: PriorBounds,
    pub g_diagnostic: f64,
    pub metadata: BoundMetadata,
}

impl BoundReport {
    /// One `(bound, value)` row per measured quantity.
    pub fn csv_rows(&self) -> Vec<(String, f64)> {
        let mut rows = vec![
            ("hessian_distance".to_string(), self.hessian_distance_total),
            ("trace_measure".to_string(), self.trace_measure_total),
        ];
        if let Some(nm) = self.noisy_measure_total {
            rows.push(("noisy_measure".to_string(), nm));
        }
        rows.push(("kl".to_string(), self.kl));
        for (name, value) in self.prior.values() {
            rows.push((name.to_string(), value));
        }
        rows.push(("g_diagnostic".to_string(), self.g_diagnostic));
        for (i, h) in self.hessian_per_layer.iter().enumerate() {
            rows.push((format!("hessian_layer_{i}"), *h));
        }
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bound,value\n");
        for (name, value) in self.csv_rows() {
            out.push_str(&format!("{name},{value}\n"));
        }
        out
    }
}

/// Compute every measure for `(net, init)` with the evaluation max taken over
/// `train ∪ test` (optionally subsampled), margins and Li's ε on the training
/// set, and the Hessians evaluated under `net`'s own loss spec.
pub fn compute_bound_report(
    net: &Network,
    init: &Network,
    train: &Dataset,
    test: Option<&Dataset>,
    confusion: Option<&ConfusionMatrix>,
    opts: &BoundOptions,
) -> Result<BoundReport> {
    let eval_full = match test {
        Some(t) => Dataset::concat(train, t)?,
        None => train.clone(),
    };
    let eval =
        if opts.eval_cap > 0 { eval_full.subsample_even(opts.eval_cap) } else { eval_full };
    let n = if opts.n > 0 { opts.n } else { train.len() };

    let (c, c_source) = match opts.c_fixed {
        Some(c) => (c, "fixed".to_string()),
        None => match net.loss_spec().kind.theoretical_bound() {
            Some(c) => (c, "structural".to_string()),
            None => (empirical_loss_bound(net, &eval)?, "empirical".to_string()),
        },
    };

    let dist = distance_vectors(net, init)?;
    let alphas = if opts.alphas.is_empty() { dist.norms.clone() } else { opts.alphas.clone() };

    let hessian = hessian_distance_measure(net, init, &eval, c, n)?;
    let trace = trace_distance_measure(net, init, &eval, &alphas, c, n)?;
    let noisy = match confusion {
        Some(f) => Some(noisy_measure(net, init, &eval, &alphas, f, c, n)?),
        None => None,
    };

    let sigmas = vec![opts.kl_sigma; net.num_layers()];
    let kl = kl_divergence(net, init, &sigmas)?;

    let train_margins = crate::data::margins(net, train)?;
    let gamma = margin_selection(&train_margins, &opts.margin_grid)?;
    let avg_train_loss = crate::data::mean_loss(net, train)?;
    let prior = prior_bounds(net, init, train, gamma, avg_train_loss)?;

    let g_diagnostic = hessian_lipschitz_g(net, eval.max_feature_norm())?;

    Ok(BoundReport {
        hessian_per_layer: hessian.per_layer,
        hessian_distance_total: hessian.total,
        trace_measure_total: trace.total,
        noisy_measure_total: noisy.as_ref().map(|nm| nm.total),
        reweight_norm: noisy.as_ref().map(|nm| nm.reweight_norm),
        kl,
        prior,
        g_diagnostic,
        metadata: BoundMetadata {
            c,
            c_source,
            n,
            eval_count: eval.len(),
            eval_cap: opts.eval_cap,
            gamma,
            delta: opts.delta,
            kl_sigma: opts.kl_sigma,
            alphas,
            loss: format!("{:?}", net.loss_spec().kind),
            epsilon_convention: "dominant term only: epsilon = 0, xi omitted".to_string(),
        },
    })
}
