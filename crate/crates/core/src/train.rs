//! Optimizers and fine-tuning procedures: vanilla fine-tuning with optional
//! early stopping, consistent loss reweighting with layerwise projection,
//! ℓ²-SP, label smoothing, mixup, and pretraining.
//!
//! Every trainer runs through one shared engine so that the degenerate
//! configurations (identity confusion + infinite radii, zero smoothing, zero
//! penalty) follow literally the same code path as vanilla fine-tuning and
//! reproduce its trajectory bit for bit.

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{accuracy, mean_loss, Dataset};
use crate::error::{Error, Result};
use crate::linalg;
use crate::net::{softmax, ActivationKind, ForwardCache, Layer, LossKind, LossSpec, Network};
use crate::noise::{invert_confusion, ConfusionMatrix, ReweightMatrix};

/// Optimizer selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Optimizer {
    Sgd,
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn sgd_momentum() -> Self {
        Optimizer::SgdMomentum { momentum: 0.9 }
    }

    pub fn adam() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-layer projection radii.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "scheme")]
pub enum AlphaScheme {
    /// No projection.
    None,
    /// The same radius for every layer.
    Constant { value: f64 },
    /// `α_i = γ^i · d` for layer index `i` (0-based; layer 0 gets `d`).
    Geometric { d: f64, gamma: f64 },
    PerLayer { values: Vec<f64> },
}

impl AlphaScheme {
    pub fn resolve(&self, layers: usize) -> Result<Option<Vec<f64>>> {
        let alphas = match self {
            AlphaScheme::None => return Ok(None),
            AlphaScheme::Constant { value } => vec![*value; layers],
            AlphaScheme::Geometric { d, gamma } => {
                (0..layers).map(|i| d * gamma.powi(i as i32)).collect()
            }
            AlphaScheme::PerLayer { values } => {
                if values.len() != layers {
                    return Err(Error::invalid_parameter(
                        "alpha",
                        format!("{} radii for {layers} layers", values.len()),
                    ));
                }
                values.clone()
            }
        };
        if alphas.iter().any(|&a| a < 0.0 || a.is_nan()) {
            return Err(Error::invalid_parameter("alpha", "radii must be nonnegative"));
        }
        Ok(Some(alphas))
    }
}

/// When the projection runs relative to optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionFrequency {
    PerStep,
    PerEpoch,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub batch_size: usize,
    pub alphas: AlphaScheme,
    pub projection: ProjectionFrequency,
    pub seed: u64,
    /// Early stopping on best validation accuracy; `None` disables it.
    pub early_stop_patience: Option<usize>,
    /// Fraction of the training set carved off as validation when no explicit
    /// validation set is supplied.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            lr: 1e-3,
            optimizer: Optimizer::adam(),
            batch_size: 32,
            alphas: AlphaScheme::None,
            projection: ProjectionFrequency::PerStep,
            seed: 0,
            early_stop_patience: None,
            val_fraction: 0.0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::invalid_parameter("lr", "learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid_parameter("batch_size", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::invalid_parameter("val_fraction", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean plain loss on the training labels.
    pub train_loss_raw: f64,
    /// Mean of the objective actually minimized (weighted, smoothed, ...).
    pub objective_loss: f64,
    pub val_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    /// `‖W_i - W_i⁽⁰⁾‖_F` per layer after the epoch.
    pub layer_distances: Vec<f64>,
    /// Number of projections that actually rescaled a layer this epoch.
    pub projection_hits: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were returned (early stopping), if any.
    pub best_epoch: Option<usize>,
}

impl TrainTrace {
    /// Long-format CSV: `epoch,split,metric,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,split,metric,value\n");
        for r in &self.epochs {
            out.push_str(&format!("{},train,loss_raw,{}\n", r.epoch, r.train_loss_raw));
            out.push_str(&format!("{},train,loss_objective,{}\n", r.epoch, r.objective_loss));
            if let Some(v) = r.val_accuracy {
                out.push_str(&format!("{},val,accuracy,{v}\n", r.epoch));
            }
            if let Some(v) = r.test_accuracy {
                out.push_str(&format!("{},test,accuracy,{v}\n", r.epoch));
            }
            for (i, d) in r.layer_distances.iter().enumerate() {
                out.push_str(&format!("{},train,distance_layer_{i},{d}\n", r.epoch));
            }
            out.push_str(&format!("{},train,projection_hits,{}\n", r.epoch, r.projection_hits));
        }
        out
    }
}

/// Project `w` onto the Frobenius ball of radius `alpha` around `w0`:
/// `min(1, α/‖w - w0‖_F)·(w - w0) + w0`. Inside the ball (including `Δ = 0`)
/// the matrix is returned unchanged.
pub fn project_layer(w: &Array2<f64>, w0: &Array2<f64>, alpha: f64) -> Array2<f64> {
    let mut out = w.clone();
    project_in_place(&mut out, w0, alpha);
    out
}

/// In-place projection; returns whether the layer was actually rescaled.
fn project_in_place(w: &mut Array2<f64>, w0: &Array2<f64>, alpha: f64) -> bool {
    let mut dist_sq = 0.0;
    for (a, b) in w.iter().zip(w0.iter()) {
        let d = a - b;
        dist_sq += d * d;
    }
    let dist = dist_sq.sqrt();
    if dist <= alpha || dist == 0.0 {
        return false;
    }
    if alpha == 0.0 {
        w.assign(w0);
        return true;
    }
    let scale = alpha / dist;
    for (a, b) in w.iter_mut().zip(w0.iter()) {
        *a = b + scale * (*a - b);
    }
    true
}

/// What gradient the engine minimizes.
enum Objective<'a> {
    Plain,
    Weighted(&'a ReweightMatrix),
    L2sp { lambda: f64 },
    LabelSmooth { alpha: f64 },
    Mixup { alpha: f64 },
}

impl Objective<'_> {
    fn is_mixup(&self) -> bool {
        matches!(self, Objective::Mixup { .. })
    }
}

/// Loss of a soft (probability-vector) target. Zero-weight terms are skipped
/// so a one-hot target reproduces the plain loss exactly.
fn soft_target_loss(kind: LossKind, out: ArrayView1<f64>, target: &Array1<f64>) -> f64 {
    match kind {
        LossKind::SoftmaxCrossEntropy => {
            let m = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + out.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            let mut total = 0.0;
            for (c, &t) in target.iter().enumerate() {
                if t != 0.0 {
                    total += t * (lse - out[c]);
                }
            }
            total
        }
        LossKind::SquaredErrorOnProbabilities => {
            let p = softmax(out);
            let mut s = 0.0;
            for (c, &t) in target.iter().enumerate() {
                let d = p[c] - t;
                s += d * d;
            }
            s
        }
    }
}

/// Gradient of [`soft_target_loss`] with respect to the output.
fn soft_target_grad(kind: LossKind, out: ArrayView1<f64>, target: &Array1<f64>) -> Array1<f64> {
    let p = softmax(out);
    match kind {
        // Targets sum to one, so the gradient is p - t.
        LossKind::SoftmaxCrossEntropy => &p - target,
        LossKind::SquaredErrorOnProbabilities => {
            let r = &p - target;
            let s = p.dot(&r);
            2.0 * (&p * &r - &p * s)
        }
    }
}

/// Reverse-mode backprop of a given output-space gradient through the cached
/// forward pass. Returns per-layer gradient matrices.
fn backprop_from_output(net: &Network, cache: &ForwardCache, g_out: Array1<f64>) -> Vec<Array2<f64>> {
    let layers = net.num_layers();
    let mut grads: Vec<Array2<f64>> = Vec::with_capacity(layers);
    let mut u = g_out;
    for j in (0..layers).rev() {
        let layer = &net.layers()[j];
        let d1 = cache.pre[j].mapv(|v| layer.activation.eval(v).1);
        let delta = &d1 * &u;
        let z = cache.layer_input(j);
        let g = Array2::from_shape_fn((delta.len(), z.len()), |(r, c)| delta[r] * z[c]);
        grads.push(g);
        if j > 0 {
            u = layer.weight.t().dot(&delta);
        }
    }
    grads.reverse();
    grads
}

/// Per-sample output-space gradient for non-mixup objectives.
fn output_gradient(
    kind: LossKind,
    out: ArrayView1<f64>,
    y: usize,
    objective: &Objective<'_>,
    k: usize,
) -> Result<Array1<f64>> {
    match objective {
        Objective::Plain | Objective::L2sp { .. } => kind.grad(out, y),
        Objective::Weighted(lambda) => {
            let row = lambda.row(y);
            // Identity rows reduce exactly to the plain gradient.
            let is_identity_row =
                row[y] == 1.0 && row.iter().enumerate().all(|(c, &v)| c == y || v == 0.0);
            if is_identity_row {
                return kind.grad(out, y);
            }
            let mut g = Array1::<f64>::zeros(out.len());
            for (c, &w) in row.iter().enumerate() {
                if w != 0.0 {
                    g = g + w * &kind.grad(out, c)?;
                }
            }
            Ok(g)
        }
        Objective::LabelSmooth { alpha } => {
            if *alpha == 0.0 {
                return kind.grad(out, y);
            }
            let mut target = Array1::<f64>::from_elem(k, alpha / k as f64);
            target[y] += 1.0 - alpha;
            Ok(soft_target_grad(kind, out, &target))
        }
        Objective::Mixup { .. } => unreachable!("mixup gradients are built per batch"),
    }
}

/// Per-sample objective value (for divergence detection and the trace).
fn objective_value(
    kind: LossKind,
    out: ArrayView1<f64>,
    y: usize,
    objective: &Objective<'_>,
    k: usize,
) -> Result<f64> {
    match objective {
        Objective::Plain | Objective::L2sp { .. } | Objective::Mixup { .. } => kind.value(out, y),
        Objective::Weighted(lambda) => {
            let mut v = 0.0;
            for (c, &w) in lambda.row(y).iter().enumerate() {
                if w != 0.0 {
                    v += w * kind.value(out, c)?;
                }
            }
            Ok(v)
        }
        Objective::LabelSmooth { alpha } => {
            if *alpha == 0.0 {
                return kind.value(out, y);
            }
            let mut target = Array1::<f64>::from_elem(k, alpha / k as f64);
            target[y] += 1.0 - alpha;
            Ok(soft_target_loss(kind, out, &target))
        }
    }
}

struct OptimizerState {
    momentum: Vec<Array2<f64>>,
    adam_m: Vec<Array2<f64>>,
    adam_v: Vec<Array2<f64>>,
    step: usize,
}

impl OptimizerState {
    fn new(net: &Network) -> Self {
        let zeros: Vec<Array2<f64>> =
            net.layers().iter().map(|l| Array2::zeros(l.weight.raw_dim())).collect();
        OptimizerState {
            momentum: zeros.clone(),
            adam_m: zeros.clone(),
            adam_v: zeros,
            step: 0,
        }
    }

    fn apply(&mut self, opt: &Optimizer, lr: f64, net: &mut Network, grads: &[Array2<f64>]) {
        self.step += 1;
        match *opt {
            Optimizer::Sgd => {
                for (layer, g) in net.layers_mut().iter_mut().zip(grads.iter()) {
                    layer.weight.scaled_add(-lr, g);
                }
            }
            Optimizer::SgdMomentum { momentum } => {
                for ((layer, g), m) in
                    net.layers_mut().iter_mut().zip(grads.iter()).zip(self.momentum.iter_mut())
                {
                    m.mapv_inplace(|v| momentum * v);
                    *m += g;
                    layer.weight.scaled_add(-lr, m);
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                for (((layer, g), m), v) in net
                    .layers_mut()
                    .iter_mut()
                    .zip(grads.iter())
                    .zip(self.adam_m.iter_mut())
                    .zip(self.adam_v.iter_mut())
                {
                    azip_adam(layer, g, m, v, beta1, beta2, eps, lr, bc1, bc2);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn azip_adam(
    layer: &mut Layer,
    g: &Array2<f64>,
    m: &mut Array2<f64>,
    v: &mut Array2<f64>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    lr: f64,
    bc1: f64,
    bc2: f64,
) {
    for ((w, &gi), (mi, vi)) in layer
        .weight
        .iter_mut()
        .zip(g.iter())
        .zip(m.iter_mut().zip(v.iter_mut()))
    {
        *mi = beta1 * *mi + (1.0 - beta1) * gi;
        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
        let mhat = *mi / bc1;
        let vhat = *vi / bc2;
        *w -= lr * mhat / (vhat.sqrt() + eps);
    }
}

fn check_architecture(init: &Network, train: &Dataset) -> Result<()> {
    if init.input_dim() != train.dim() {
        return Err(Error::DimensionMismatch {
            layer: 0,
            expected: init.input_dim(),
            got: train.dim(),
        });
    }
    if init.classes() != train.k {
        return Err(Error::invalid_parameter(
            "dataset",
            format!("{} classes for a {}-output network", train.k, init.classes()),
        ));
    }
    Ok(())
}

/// The shared minibatch training loop.
fn run_training(
    init: &Network,
    train: &Dataset,
    val: Option<&Dataset>,
    test: Option<&Dataset>,
    objective: Objective<'_>,
    cfg: &TrainConfig,
) -> Result<(Network, TrainTrace)> {
    cfg.validate()?;
    check_architecture(init, train)?;

    // Carve a validation split from the training set when requested and no
    // explicit one was given.
    let carved;
    let (train, val) = if val.is_none() && cfg.val_fraction > 0.0 {
        let (t, v, _) =
            crate::data::split(train, (1.0 - cfg.val_fraction, cfg.val_fraction, 0.0), cfg.seed)?;
        carved = (t, v);
        (&carved.0, Some(&carved.1))
    } else {
        (train, val)
    };

    if cfg.early_stop_patience.is_some() && val.is_none() {
        return Err(Error::invalid_parameter(
            "early_stop_patience",
            "early stopping needs a validation set (explicit or via val_fraction)",
        ));
    }

    let mut net = init.clone();
    let init_weights: Vec<Array2<f64>> =
        init.layers().iter().map(|l| l.weight.clone()).collect();
    let alphas = cfg.alphas.resolve(net.num_layers())?;
    let kind = net.loss_spec().kind;
    let k = net.classes();

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Mixup draws come from a separate stream so that non-mixup objectives
    // consume the shuffle stream identically.
    let mut mixup_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    mixup_rng.set_stream(1);

    let mut state = OptimizerState::new(&net);
    let mut trace = TrainTrace::default();
    let mut best: Option<(f64, usize, Vec<Array2<f64>>)> = None;

    let mut indices: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        indices.shuffle(&mut shuffle_rng);
        let mut projection_hits = 0usize;
        for batch in indices.chunks(cfg.batch_size) {
            let grads = if objective.is_mixup() {
                mixup_batch_gradient(&net, train, batch, &objective, &mut mixup_rng)?
            } else {
                batch_gradient(&net, train, batch, &objective)?
            };
            let grads = match &objective {
                Objective::L2sp { lambda } if *lambda != 0.0 => {
                    add_l2sp(grads, net.layers(), &init_weights, *lambda)
                }
                _ => grads,
            };
            state.apply(&cfg.optimizer, cfg.lr, &mut net, &grads);
            if let (Some(alphas), ProjectionFrequency::PerStep) = (&alphas, cfg.projection) {
                for (l, layer) in net.layers_mut().iter_mut().enumerate() {
                    if project_in_place(&mut layer.weight, &init_weights[l], alphas[l]) {
                        projection_hits += 1;
                    }
                }
            }
        }
        if let (Some(alphas), ProjectionFrequency::PerEpoch) = (&alphas, cfg.projection) {
            for (l, layer) in net.layers_mut().iter_mut().enumerate() {
                if project_in_place(&mut layer.weight, &init_weights[l], alphas[l]) {
                    projection_hits += 1;
                }
            }
        }

        let train_loss_raw = mean_loss(&net, train)?;
        let objective_loss = mean_objective(&net, train, &objective, kind, k)?;
        if !objective_loss.is_finite() || !train_loss_raw.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        let val_accuracy = match val {
            Some(v) => Some(accuracy(&net, v)?),
            None => None,
        };
        let test_accuracy = match test {
            Some(t) => Some(accuracy(&net, t)?),
            None => None,
        };
        let layer_distances: Vec<f64> = net
            .layers()
            .iter()
            .zip(init_weights.iter())
            .map(|(l, w0)| linalg::frobenius(&(&l.weight - w0)))
            .collect();
        trace.epochs.push(EpochRecord {
            epoch,
            train_loss_raw,
            objective_loss,
            val_accuracy,
            test_accuracy,
            layer_distances,
            projection_hits,
        });

        if let (Some(patience), Some(va)) = (cfg.early_stop_patience, val_accuracy) {
            let improved = best.as_ref().is_none_or(|(b, _, _)| va > *b);
            if improved {
                best = Some((va, epoch, net.layers().iter().map(|l| l.weight.clone()).collect()));
            } else if let Some((_, best_epoch, _)) = &best {
                if epoch - best_epoch >= patience {
                    break;
                }
            }
        }
    }

    if let Some((_, best_epoch, weights)) = best {
        trace.best_epoch = Some(best_epoch);
        for (layer, w) in net.layers_mut().iter_mut().zip(weights) {
            layer.weight = w;
        }
    }
    Ok((net, trace))
}

fn batch_gradient(
    net: &Network,
    train: &Dataset,
    batch: &[usize],
    objective: &Objective<'_>,
) -> Result<Vec<Array2<f64>>> {
    let kind = net.loss_spec().kind;
    let k = net.classes();
    let mut acc: Vec<Array2<f64>> =
        net.layers().iter().map(|l| Array2::zeros(l.weight.raw_dim())).collect();
    for &i in batch {
        let (x, y) = train.sample(i);
        let (out, cache) = net.forward(x)?;
        let g_out = output_gradient(kind, out.view(), y, objective, k)?;
        let grads = backprop_from_output(net, &cache, g_out);
        for (a, g) in acc.iter_mut().zip(grads.iter()) {
            *a += g;
        }
    }
    let scale = 1.0 / batch.len() as f64;
    for a in acc.iter_mut() {
        a.mapv_inplace(|v| v * scale);
    }
    Ok(acc)
}

fn mixup_batch_gradient(
    net: &Network,
    train: &Dataset,
    batch: &[usize],
    objective: &Objective<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Array2<f64>>> {
    let alpha = match objective {
        Objective::Mixup { alpha } => *alpha,
        _ => unreachable!(),
    };
    let kind = net.loss_spec().kind;
    let k = net.classes();
    let beta = Beta::new(alpha, alpha)
        .map_err(|_| Error::invalid_parameter("mixup_alpha", "must be positive"))?;
    let lam: f64 = beta.sample(rng);
    let mut acc: Vec<Array2<f64>> =
        net.layers().iter().map(|l| Array2::zeros(l.weight.raw_dim())).collect();
    for (pos, &i) in batch.iter().enumerate() {
        let j = batch[batch.len() - 1 - pos];
        let (xi, yi) = train.sample(i);
        let (xj, yj) = train.sample(j);
        let x: Array1<f64> = lam * &xi.to_owned() + (1.0 - lam) * &xj.to_owned();
        let mut target = Array1::<f64>::zeros(k);
        target[yi] += lam;
        target[yj] += 1.0 - lam;
        let (out, cache) = net.forward(x.view())?;
        let g_out = soft_target_grad(kind, out.view(), &target);
        let grads = backprop_from_output(net, &cache, g_out);
        for (a, g) in acc.iter_mut().zip(grads.iter()) {
            *a += g;
        }
    }
    let scale = 1.0 / batch.len() as f64;
    for a in acc.iter_mut() {
        a.mapv_inplace(|v| v * scale);
    }
    Ok(acc)
}

fn add_l2sp(
    mut grads: Vec<Array2<f64>>,
    layers: &[Layer],
    init: &[Array2<f64>],
    lambda: f64,
) -> Vec<Array2<f64>> {
    for ((g, l), w0) in grads.iter_mut().zip(layers.iter()).zip(init.iter()) {
        g.scaled_add(2.0 * lambda, &(&l.weight - w0));
    }
    grads
}

fn mean_objective(
    net: &Network,
    train: &Dataset,
    objective: &Objective<'_>,
    kind: LossKind,
    k: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..train.len() {
        let (x, y) = train.sample(i);
        let out = net.output(x)?;
        total += objective_value(kind, out.view(), y, objective, k)?;
    }
    Ok(total / train.len() as f64)
}

/// Vanilla minibatch fine-tuning on the unweighted loss. Early stopping (when
/// configured) returns the weights with the best validation accuracy.
pub fn finetune_vanilla(
    init: &Network,
    train: &Dataset,
    val: Option<&Dataset>,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(Network, TrainTrace)> {
    run_training(init, train, val, test, Objective::Plain, cfg)
}

/// Consistent loss reweighting with layerwise projection: `Λ = F⁻¹`, minibatch
/// steps on the weighted loss, every layer projected onto its distance ball.
pub fn algorithm1(
    init: &Network,
    train: &Dataset,
    val: Option<&Dataset>,
    test: Option<&Dataset>,
    confusion: &ConfusionMatrix,
    cfg: &TrainConfig,
) -> Result<(Network, TrainTrace)> {
    let lambda = invert_confusion(confusion)?;
    run_training(init, train, val, test, Objective::Weighted(&lambda), cfg)
}

/// Fine-tuning with the ℓ²-SP penalty `λ Σ_i ‖W_i - W_i⁽ˢ⁾‖_F²`.
pub fn finetune_l2sp(
    init: &Network,
    train: &Dataset,
    val: Option<&Dataset>,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    lambda: f64,
) -> Result<(Network, TrainTrace)> {
    if lambda < 0.0 {
        return Err(Error::invalid_parameter("lambda", "penalty must be nonnegative"));
    }
    run_training(init, train, val, test, Objective::L2sp { lambda }, cfg)
}

/// Fine-tuning on smoothed targets `(1-α)·e_y + α/k`.
pub fn finetune_labelsmooth(
    init: &Network,
    train: &Dataset,
    val: Option<&Dataset>,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    alpha: f64,
) -> Result<(Network, TrainTrace)> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::invalid_parameter("label_smooth_alpha", "must lie in [0, 1)"));
    }
    run_training(init, train, val, test, Objective::LabelSmooth { alpha }, cfg)
}

/// Mixup fine-tuning: one Beta(α, α) weight per batch, samples paired with
/// the reversed batch order.
pub fn finetune_mixup(
    init: &Network,
    train: &Dataset,
    val: Option<&Dataset>,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    alpha: f64,
) -> Result<(Network, TrainTrace)> {
    if alpha <= 0.0 {
        return Err(Error::invalid_parameter("mixup_alpha", "must be positive"));
    }
    run_training(init, train, val, test, Objective::Mixup { alpha }, cfg)
}

/// Architecture of a freshly initialized network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchSpec {
    pub hidden: Vec<usize>,
    pub activation: ActivationKind,
    pub output_activation: ActivationKind,
    pub loss: LossSpec,
}

impl ArchSpec {
    pub fn reference(loss: LossSpec) -> Self {
        ArchSpec {
            hidden: vec![32, 32],
            activation: ActivationKind::Tanh,
            output_activation: ActivationKind::Identity,
            loss,
        }
    }
}

/// Seeded random init with entries ~ N(0, 2/(d_in + d_out)).
pub fn init_network(arch: &ArchSpec, input_dim: usize, classes: usize, seed: u64) -> Result<Network> {
    let mut dims = vec![input_dim];
    dims.extend(&arch.hidden);
    dims.push(classes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for (i, w) in dims.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        let weight = Array2::from_shape_fn((fan_out, fan_in), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            std * z
        });
        let activation =
            if i + 2 == dims.len() { arch.output_activation } else { arch.activation };
        layers.push(Layer { weight, activation });
    }
    Network::new(layers, arch.loss)
}

/// Train a fresh network on a source task; the result serves as the
/// pretrained initialization `Ŵ⁽ˢ⁾` for fine-tuning.
pub fn pretrain(
    source: &Dataset,
    arch: &ArchSpec,
    cfg: &TrainConfig,
) -> Result<(Network, TrainTrace)> {
    let net = init_network(arch, source.dim(), source.k, cfg.seed)?;
    finetune_vanilla(&net, source, None, None, cfg)
}
