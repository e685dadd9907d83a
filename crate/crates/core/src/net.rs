//! Feedforward network definition: smooth activations with analytic first and
//! second derivatives, loss functions on the network output, forward
//! evaluation with a differentiation cache, and checkpoint I/O.
//!
//! Layer indices and class labels are 0-based throughout the crate; file
//! formats that carry labels normalize at the boundary (see `data`).

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::{flatten_row_major, unflatten_row_major};

const FRAC_1_SQRT_2PI: f64 = 0.3989422804014327;

/// Twice-differentiable activation functions.
///
/// ReLU is deliberately absent: every kind here has analytic first and second
/// derivatives on all of ℝ, which the second-order machinery depends on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Tanh,
    Sigmoid,
    Gelu,
    Softplus,
    Identity,
}

impl ActivationKind {
    /// Evaluate `(φ(z), φ'(z), φ''(z))` analytically.
    pub fn eval(self, z: f64) -> (f64, f64, f64) {
        match self {
            ActivationKind::Tanh => {
                let t = z.tanh();
                let d1 = 1.0 - t * t;
                (t, d1, -2.0 * t * d1)
            }
            ActivationKind::Sigmoid => {
                let s = stable_sigmoid(z);
                let d1 = s * (1.0 - s);
                (s, d1, d1 * (1.0 - 2.0 * s))
            }
            ActivationKind::Gelu => {
                // Exact (erf-based) GELU: z·Φ(z) with Φ the standard normal CDF.
                let cdf = 0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2));
                let pdf = FRAC_1_SQRT_2PI * (-0.5 * z * z).exp();
                (z * cdf, cdf + z * pdf, pdf * (2.0 - z * z))
            }
            ActivationKind::Softplus => {
                let s = stable_sigmoid(z);
                // ln(1 + e^z) without overflow for large |z|.
                let v = z.max(0.0) + (-z.abs()).exp().ln_1p();
                (v, s, s * (1.0 - s))
            }
            ActivationKind::Identity => (z, 1.0, 0.0),
        }
    }

    /// Declared Lipschitz constants `(κ0, κ1, κ2)` of `φ`, `φ'` and `φ''`.
    ///
    /// Each value upper-bounds the numerically sampled supremum of |φ'|,
    /// |φ''|, |φ'''| on [-20, 20] (certified by a test). For tanh the third
    /// derivative reaches 2 at the origin, so κ2 = 2 rather than the commonly
    /// quoted 1.
    pub fn lipschitz_constants(self) -> (f64, f64, f64) {
        match self {
            ActivationKind::Tanh => (1.0, 1.0, 2.0),
            ActivationKind::Sigmoid => (0.25, 0.25, 0.25),
            // 1 + e^{-1/2}/sqrt(2π)
            ActivationKind::Gelu => (1.242, 1.242, 1.242),
            ActivationKind::Softplus => (1.0, 0.25, 0.25),
            ActivationKind::Identity => (1.0, 0.0, 0.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Tanh => "tanh",
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::Gelu => "gelu",
            ActivationKind::Softplus => "softplus",
            ActivationKind::Identity => "identity",
        }
    }
}

fn stable_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax.
pub fn softmax(o: ArrayView1<f64>) -> Array1<f64> {
    let m = o.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e = o.mapv(|x| (x - m).exp());
    let s = e.sum();
    e / s
}

/// Loss functions on the raw network output (logits).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `-log softmax(o)_y`. Smooth but unbounded.
    SoftmaxCrossEntropy,
    /// `||softmax(o) - e_y||^2`. Globally bounded by 2.
    SquaredErrorOnProbabilities,
}

/// Bound `C` used when the loss enters a generalization measure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossBound {
    Fixed(f64),
    /// Use the empirical maximum over the evaluation set.
    Empirical,
}

/// A loss kind together with the bound convention used for measures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub bound_c: LossBound,
}

impl LossSpec {
    pub fn cross_entropy() -> Self {
        LossSpec {
            kind: LossKind::SoftmaxCrossEntropy,
            bound_c: LossBound::Empirical,
        }
    }

    pub fn squared_error() -> Self {
        LossSpec {
            kind: LossKind::SquaredErrorOnProbabilities,
            bound_c: LossBound::Fixed(2.0),
        }
    }
}

impl LossKind {
    /// Structural bound on the loss, when one exists.
    pub fn theoretical_bound(self) -> Option<f64> {
        match self {
            LossKind::SoftmaxCrossEntropy => None,
            LossKind::SquaredErrorOnProbabilities => Some(2.0),
        }
    }

    fn check_label(self, y: usize, k: usize) -> Result<()> {
        if y >= k {
            Err(Error::LabelOutOfRange { label: y, classes: k })
        } else {
            Ok(())
        }
    }

    /// Loss value at output `o` for class `y` (0-based).
    pub fn value(self, o: ArrayView1<f64>, y: usize) -> Result<f64> {
        self.check_label(y, o.len())?;
        match self {
            LossKind::SoftmaxCrossEntropy => {
                let m = o.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + o.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                Ok(lse - o[y])
            }
            LossKind::SquaredErrorOnProbabilities => {
                let p = softmax(o);
                let mut s = 0.0;
                for (j, pj) in p.iter().enumerate() {
                    let t = if j == y { pj - 1.0 } else { *pj };
                    s += t * t;
                }
                Ok(s)
            }
        }
    }

    /// Gradient of the loss with respect to the output.
    pub fn grad(self, o: ArrayView1<f64>, y: usize) -> Result<Array1<f64>> {
        self.check_label(y, o.len())?;
        let p = softmax(o);
        match self {
            LossKind::SoftmaxCrossEntropy => {
                let mut g = p;
                g[y] -= 1.0;
                Ok(g)
            }
            LossKind::SquaredErrorOnProbabilities => {
                let mut r = p.clone();
                r[y] -= 1.0;
                let s = p.dot(&r);
                Ok(2.0 * (&p * &r - &p * s))
            }
        }
    }

    /// Hessian of the loss (w.r.t. the output) applied to `t`.
    pub fn hess_vec(self, o: ArrayView1<f64>, y: usize, t: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_label(y, o.len())?;
        let p = softmax(o);
        let pt = p.dot(&t);
        // Directional derivative of the softmax: ṗ = p⊙t - (pᵀt)·p.
        let pdot = &p * &t - &p * pt;
        match self {
            LossKind::SoftmaxCrossEntropy => Ok(pdot),
            LossKind::SquaredErrorOnProbabilities => {
                let mut r = p.clone();
                r[y] -= 1.0;
                let s = p.dot(&r);
                let sdot = pdot.dot(&(&r + &p));
                Ok(2.0 * (&pdot * &r + &p * &pdot - &p * sdot - &pdot * s))
            }
        }
    }

    /// Dense k×k Hessian of the loss with respect to the output.
    pub fn hess(self, o: ArrayView1<f64>, y: usize) -> Result<Array2<f64>> {
        let k = o.len();
        let mut h = Array2::<f64>::zeros((k, k));
        for j in 0..k {
            let mut e = Array1::<f64>::zeros(k);
            e[j] = 1.0;
            let col = self.hess_vec(o, y, e.view())?;
            for i in 0..k {
                h[[i, j]] = col[i];
            }
        }
        Ok(h)
    }

    /// Conservative Lipschitz constants `(κ0, κ1, κ2)` of the loss and its
    /// first two derivatives with respect to the output, uniform over `y`.
    /// Certified by sampling in tests; used only by the `G` diagnostic.
    pub fn lipschitz_constants(self) -> (f64, f64, f64) {
        match self {
            LossKind::SoftmaxCrossEntropy => (std::f64::consts::SQRT_2, 1.0, 2.0),
            LossKind::SquaredErrorOnProbabilities => (2.0, 3.0, 8.0),
        }
    }
}

/// One layer: a weight matrix and the activation applied to its output.
#[derive(Debug, Clone)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub activation: ActivationKind,
}

/// Intermediate values from a forward pass, retained for differentiation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: Array1<f64>,
    /// Pre-activations `a_i = W_i z_{i-1}` per layer.
    pub pre: Vec<Array1<f64>>,
    /// Post-activations `z_i = φ_i(a_i)` per layer.
    pub post: Vec<Array1<f64>>,
}

impl ForwardCache {
    /// Input to layer `i`, i.e. `z_{i-1}` (the network input for `i = 0`).
    pub fn layer_input(&self, i: usize) -> &Array1<f64> {
        if i == 0 {
            &self.input
        } else {
            &self.post[i - 1]
        }
    }
}

/// An `L`-layer feedforward network with a loss specification.
///
/// Immutable in ordinary use; the trainers own their network exclusively and
/// mutate weights through [`Network::layers_mut`].
#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
    loss: LossSpec,
}

impl Network {
    pub fn new(layers: Vec<Layer>, loss: LossSpec) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid_parameter("layers", "network needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            let (out_prev, in_next) = (pair[0].weight.nrows(), pair[1].weight.ncols());
            if out_prev != in_next {
                return Err(Error::DimensionMismatch {
                    layer: i + 1,
                    expected: out_prev,
                    got: in_next,
                });
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if !l.weight.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite { context: format!("weights of layer {i}") });
            }
        }
        Ok(Network { layers, loss })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable access for the trainers. Callers must preserve shapes.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn loss_spec(&self) -> LossSpec {
        self.loss
    }

    /// Same weights, different loss (used to compute measures under a bounded
    /// loss regardless of the training loss).
    pub fn with_loss(&self, loss: LossSpec) -> Network {
        Network { layers: self.layers.clone(), loss }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    /// Output dimension `d_L`, i.e. the number of classes.
    pub fn classes(&self) -> usize {
        self.layers.last().unwrap().weight.nrows()
    }

    /// Dimensions `d_0 ..= d_L`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.weight.nrows()));
        d
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len()).sum()
    }

    /// Forward pass retaining every intermediate for differentiation.
    pub fn forward(&self, x: ArrayView1<f64>) -> Result<(Array1<f64>, ForwardCache)> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                layer: 0,
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let input = x.to_owned();
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len());
        let mut z = input.clone();
        for layer in &self.layers {
            let a = layer.weight.dot(&z);
            z = a.mapv(|v| layer.activation.eval(v).0);
            pre.push(a);
            post.push(z.clone());
        }
        let out = post.last().unwrap().clone();
        Ok((out, ForwardCache { input, pre, post }))
    }

    /// Forward pass without the cache.
    pub fn output(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        Ok(self.forward(x)?.0)
    }

    pub fn loss_on(&self, x: ArrayView1<f64>, y: usize) -> Result<f64> {
        let out = self.output(x)?;
        self.loss.kind.value(out.view(), y)
    }

    /// Loss under every hypothesized class: `ℓ(f(x), c)` for `c = 0..k`.
    pub fn loss_vector(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        let out = self.output(x)?;
        let k = self.classes();
        let mut v = Array1::<f64>::zeros(k);
        for c in 0..k {
            v[c] = self.loss.kind.value(out.view(), c)?;
        }
        Ok(v)
    }

    pub fn predict(&self, x: ArrayView1<f64>) -> Result<usize> {
        let out = self.output(x)?;
        Ok(argmax(out.view()))
    }

    /// Classification margin: correct-class output minus the best other.
    pub fn margin(&self, x: ArrayView1<f64>, y: usize) -> Result<f64> {
        let out = self.output(x)?;
        self.loss.kind.check_label(y, out.len())?;
        let mut best_other = f64::NEG_INFINITY;
        for (j, v) in out.iter().enumerate() {
            if j != y {
                best_other = best_other.max(*v);
            }
        }
        if best_other == f64::NEG_INFINITY {
            // Degenerate single-class network.
            return Ok(f64::INFINITY);
        }
        Ok(out[y] - best_other)
    }
}

pub fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (j, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = j;
        }
    }
    best
}

/// Current checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Provenance recorded with a checkpoint.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub created_by: String,
}

/// Serialized network: architecture metadata plus row-major weight payloads.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    /// Dimensions `d_0 ..= d_L`.
    pub dims: Vec<usize>,
    pub activations: Vec<ActivationKind>,
    pub loss: LossSpec,
    /// Row-major weight payload per layer.
    pub layers: Vec<Vec<f64>>,
    #[serde(default)]
    pub provenance: Provenance,
}

impl Checkpoint {
    pub fn from_network(net: &Network, provenance: Provenance) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            dims: net.dims(),
            activations: net.layers().iter().map(|l| l.activation).collect(),
            loss: net.loss_spec(),
            layers: net
                .layers()
                .iter()
                .map(|l| flatten_row_major(&l.weight).to_vec())
                .collect(),
            provenance,
        }
    }

    pub fn to_network(&self) -> Result<Network> {
        self.validate()?;
        let mut layers = Vec::with_capacity(self.activations.len());
        for (i, payload) in self.layers.iter().enumerate() {
            let (rows, cols) = (self.dims[i + 1], self.dims[i]);
            let v = Array1::from(payload.clone());
            layers.push(Layer {
                weight: unflatten_row_major(&v, rows, cols),
                activation: self.activations[i],
            });
        }
        Network::new(layers, self.loss)
    }

    fn validate(&self) -> Result<()> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: self.format_version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if self.dims.len() != self.activations.len() + 1 || self.dims.len() < 2 {
            return Err(Error::CorruptCheckpoint(format!(
                "dims has {} entries for {} layers",
                self.dims.len(),
                self.activations.len()
            )));
        }
        if self.layers.len() != self.activations.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "{} weight payloads for {} layers",
                self.layers.len(),
                self.activations.len()
            )));
        }
        for (i, payload) in self.layers.iter().enumerate() {
            let expect = self.dims[i + 1] * self.dims[i];
            if payload.len() != expect {
                return Err(Error::CorruptCheckpoint(format!(
                    "layer {i} payload has {} values, dims say {expect}",
                    payload.len()
                )));
            }
            if !payload.iter().all(|x| x.is_finite()) {
                return Err(Error::CorruptCheckpoint(format!(
                    "layer {i} payload contains non-finite values"
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        ckpt.validate()?;
        Ok(ckpt)
    }
}

/// Save a network to `path` as a versioned checkpoint.
pub fn save_checkpoint(net: &Network, path: &Path, provenance: Provenance) -> Result<()> {
    Checkpoint::from_network(net, provenance).save(path)
}

/// Load a checkpoint and rebuild the network.
pub fn load_checkpoint(path: &Path) -> Result<(Network, Checkpoint)> {
    let ckpt = Checkpoint::load(path)?;
    let net = ckpt.to_network()?;
    Ok((net, ckpt))
}
