//! Noise-stability laboratory: Monte-Carlo perturbed-loss estimation, the
//! layerwise Hessian (trace) approximation, the relative-RSS fidelity metric,
//! and the label-trace heatmap.

use ndarray::Array2;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::hessian::layer_curvatures;
use crate::net::Network;

/// Monte-Carlo estimate of the expected loss increase under weight noise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerturbedLoss {
    pub mean: f64,
    pub stderr: f64,
    /// Draws discarded for producing a non-finite loss.
    pub nonfinite_draws: usize,
}

/// Monte-Carlo perturbation core over an arbitrary loss of the weights.
///
/// Draw `d` perturbs every weight entry with N(0, σ²) noise from a generator
/// stream derived from `(seed, d)`, so results are independent of evaluation
/// order. The run fails if more than 1% of draws give a non-finite loss.
pub fn perturbed_loss_estimate_with<F>(
    weights: &[Array2<f64>],
    loss: F,
    sigma: f64,
    n_draws: usize,
    seed: u64,
) -> Result<PerturbedLoss>
where
    F: Fn(&[Array2<f64>]) -> Result<f64> + Sync,
{
    if sigma <= 0.0 {
        return Err(Error::invalid_parameter("sigma", "must be positive"));
    }
    if n_draws < 2 {
        return Err(Error::invalid_parameter("n_draws", "need at least 2 draws"));
    }
    let base = loss(weights)?;
    let deltas: Vec<f64> = (0..n_draws)
        .into_par_iter()
        .map(|draw| -> Result<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(draw as u64);
            let perturbed: Vec<Array2<f64>> = weights
                .iter()
                .map(|w| {
                    w.mapv(|v| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        v + sigma * z
                    })
                })
                .collect();
            Ok(loss(&perturbed)? - base)
        })
        .collect::<Result<Vec<_>>>()?;

    let finite: Vec<f64> = deltas.iter().cloned().filter(|d| d.is_finite()).collect();
    let nonfinite = deltas.len() - finite.len();
    if nonfinite * 100 > n_draws {
        return Err(Error::NonFinite {
            context: format!("{nonfinite}/{n_draws} perturbation draws"),
        });
    }
    let m = finite.len() as f64;
    let mean = finite.iter().sum::<f64>() / m;
    let var = finite.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (m - 1.0);
    Ok(PerturbedLoss { mean, stderr: (var / m).sqrt(), nonfinite_draws: nonfinite })
}

/// Mean loss increase over `eval` under isotropic N(0, σ²) weight noise.
pub fn perturbed_loss_estimate(
    net: &Network,
    eval: &Dataset,
    sigma: f64,
    n_draws: usize,
    seed: u64,
) -> Result<PerturbedLoss> {
    if eval.is_empty() {
        return Err(Error::EmptyInput { what: "evaluation set".into() });
    }
    let weights: Vec<Array2<f64>> = net.layers().iter().map(|l| l.weight.clone()).collect();
    let template = net.clone();
    perturbed_loss_estimate_with(
        &weights,
        move |ws: &[Array2<f64>]| -> Result<f64> {
            let mut candidate = template.clone();
            for (layer, w) in candidate.layers_mut().iter_mut().zip(ws.iter()) {
                layer.weight = w.clone();
            }
            let mut total = 0.0;
            for i in 0..eval.len() {
                let (x, y) = eval.sample(i);
                total += candidate.loss_on(x, y)?;
            }
            Ok(total / eval.len() as f64)
        },
        sigma,
        n_draws,
        seed,
    )
}

/// Layerwise Hessian approximation of the noise stability:
/// mean over `eval` of `Σ_i σ² tr(H_i)`, exactly as the Taylor form reads
/// (`half_factor` switches to the symmetric second-order convention `½σ²tr`).
pub fn hessian_approximation(
    net: &Network,
    eval: &Dataset,
    sigma: f64,
    half_factor: bool,
) -> Result<f64> {
    if eval.is_empty() {
        return Err(Error::EmptyInput { what: "evaluation set".into() });
    }
    let traces: Vec<f64> = (0..eval.len())
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let (x, y) = eval.sample(i);
            let curv = layer_curvatures(net, x, y)?;
            Ok(curv.iter().map(|c| c.trace()).sum())
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_trace = traces.iter().sum::<f64>() / traces.len() as f64;
    let factor = if half_factor { 0.5 } else { 1.0 };
    Ok(factor * sigma * sigma * mean_trace)
}

/// Monte-Carlo stability curve with its Hessian approximation, per σ.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilityCurve {
    pub sigmas: Vec<f64>,
    pub mc_mean: Vec<f64>,
    pub mc_stderr: Vec<f64>,
    pub hessian_approx: Vec<f64>,
    pub n_draws: usize,
    pub seed: u64,
    pub half_factor: bool,
    pub nonfinite_draws: usize,
}

impl StabilityCurve {
    /// CSV: `sigma,mc_mean,mc_stderr,hessian_approx`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sigma,mc_mean,mc_stderr,hessian_approx\n");
        for i in 0..self.sigmas.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.sigmas[i], self.mc_mean[i], self.mc_stderr[i], self.hessian_approx[i]
            ));
        }
        out
    }
}

/// Default σ grid: 0.010, 0.011, ..., 0.020.
pub fn default_sigma_grid() -> Vec<f64> {
    (0..=10).map(|i| 0.010 + 0.001 * i as f64).collect()
}

/// Build the full stability curve over a σ grid. Hessian traces are computed
/// once and rescaled by σ².
pub fn stability_curve(
    net: &Network,
    eval: &Dataset,
    sigmas: &[f64],
    n_draws: usize,
    seed: u64,
    half_factor: bool,
) -> Result<StabilityCurve> {
    if sigmas.is_empty() {
        return Err(Error::EmptyInput { what: "sigma grid".into() });
    }
    let unit_trace = hessian_approximation(net, eval, 1.0, half_factor)?;
    let mut mc_mean = Vec::with_capacity(sigmas.len());
    let mut mc_stderr = Vec::with_capacity(sigmas.len());
    let mut hessian_approx = Vec::with_capacity(sigmas.len());
    let mut nonfinite = 0usize;
    for (gi, &sigma) in sigmas.iter().enumerate() {
        let est = perturbed_loss_estimate(net, eval, sigma, n_draws, seed ^ (gi as u64) << 32)?;
        mc_mean.push(est.mean);
        mc_stderr.push(est.stderr);
        nonfinite += est.nonfinite_draws;
        hessian_approx.push(unit_trace * sigma * sigma);
    }
    Ok(StabilityCurve {
        sigmas: sigmas.to_vec(),
        mc_mean,
        mc_stderr,
        hessian_approx,
        n_draws,
        seed,
        half_factor,
        nonfinite_draws: nonfinite,
    })
}

/// Relative residual sum of squares between the Monte-Carlo curve and its
/// Hessian approximation: `Σ(Δ_MC - Δ_H)² / Σ Δ_MC²`.
pub fn relative_rss(curve: &StabilityCurve) -> Result<f64> {
    let num: f64 = curve
        .mc_mean
        .iter()
        .zip(curve.hessian_approx.iter())
        .map(|(&m, &h)| (m - h) * (m - h))
        .sum();
    let den: f64 = curve.mc_mean.iter().map(|&m| m * m).sum();
    if den == 0.0 {
        return Err(Error::invalid_parameter(
            "curve",
            "all-zero Monte-Carlo curve; relative RSS undefined",
        ));
    }
    Ok(num / den)
}

/// k×k matrix of mean total layerwise traces under hypothesized labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceHeatmap {
    /// Entry `(i, j)`: mean over selected true-class-`i` samples of
    /// `Σ_l tr(H_l[ℓ(f(x), j)])`.
    pub matrix: Vec<Vec<f64>>,
    /// Samples selected per true class.
    pub counts: Vec<usize>,
    /// Selection rule actually applied, for the record.
    pub selection: String,
}

impl TraceHeatmap {
    pub fn k(&self) -> usize {
        self.matrix.len()
    }

    /// CSV: `true_class,hypothesized_class,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("true_class,hypothesized_class,value\n");
        for (i, row) in self.matrix.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                out.push_str(&format!("{i},{j},{v}\n"));
            }
        }
        out
    }

    /// Classes whose diagonal entry is the strict row minimum.
    pub fn diagonal_minimum_count(&self) -> usize {
        self.matrix
            .iter()
            .enumerate()
            .filter(|(i, row)| row.iter().enumerate().all(|(j, v)| j == *i || *v > row[*i]))
            .count()
    }
}

/// Build the label-trace heatmap from well-fit samples: per true class, up to
/// `per_class` samples whose loss under the true label is below `tau` (in
/// dataset order). Classes with no qualifying sample fall back to their
/// lowest-loss samples, with a warning; a class absent from the dataset is an
/// error.
pub fn trace_heatmap(
    net: &Network,
    eval: &Dataset,
    tau: f64,
    per_class: usize,
) -> Result<TraceHeatmap> {
    if eval.is_empty() {
        return Err(Error::EmptyInput { what: "evaluation set".into() });
    }
    let k = net.classes();
    let mut selected: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut losses: Vec<Vec<(f64, usize)>> = vec![Vec::new(); k];
    for i in 0..eval.len() {
        let (x, y) = eval.sample(i);
        let loss = net.loss_on(x, y)?;
        losses[y].push((loss, i));
        if loss < tau && selected[y].len() < per_class {
            selected[y].push(i);
        }
    }
    let mut relaxed = Vec::new();
    for class in 0..k {
        if losses[class].is_empty() {
            return Err(Error::MissingClass { class });
        }
        if selected[class].is_empty() {
            // Relax the threshold: take the lowest-loss samples instead.
            let mut by_loss = losses[class].clone();
            by_loss.sort_by(|a, b| a.partial_cmp(b).unwrap());
            selected[class] = by_loss.iter().take(per_class).map(|&(_, i)| i).collect();
            relaxed.push(class);
            log::warn!(
                "trace_heatmap: no sample of class {class} below tau = {tau}; \
                 using its {} lowest-loss samples",
                selected[class].len()
            );
        }
    }

    let matrix: Vec<Vec<f64>> = (0..k)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&i| -> Result<Vec<f64>> {
            let mut row = vec![0.0f64; k];
            for &idx in &selected[i] {
                let (x, _) = eval.sample(idx);
                for (j, slot) in row.iter_mut().enumerate() {
                    let curv = layer_curvatures(net, x, j)?;
                    *slot += curv.iter().map(|c| c.trace()).sum::<f64>();
                }
            }
            for slot in row.iter_mut() {
                *slot /= selected[i].len() as f64;
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;

    let selection = if relaxed.is_empty() {
        format!("loss under true label < {tau}, first {per_class} per class in dataset order")
    } else {
        format!(
            "loss under true label < {tau}, first {per_class} per class in dataset order; \
             threshold relaxed to lowest-loss samples for classes {relaxed:?}"
        )
    };
    Ok(TraceHeatmap {
        matrix,
        counts: selected.iter().map(|s| s.len()).collect(),
        selection,
    })
}
