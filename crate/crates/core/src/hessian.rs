//! Second-order machinery: per-layer gradients, Hessian-vector products via
//! forward-over-reverse differentiation, dense per-layer Hessians, PSD
//! truncation, traces, quadratic forms, and the Hessian-Lipschitz diagnostic.
//!
//! Two routes to the same per-layer Hessian exist and are cross-checked in
//! tests:
//!
//! * the dense route assembles `H_i` column by column from exact HVPs and
//!   eigendecomposes it with the Jacobi solver (this is the reference
//!   contract, capped at [`DENSE_CAP`] parameters per layer);
//! * the factored route ([`layer_curvatures`]) exploits that layer `i`'s
//!   weights enter the loss only through the linear map `W_i z_{i-1}`, so
//!   `H_i = M_i ⊗ z_{i-1} z_{i-1}ᵀ` with `M_i` the d_i×d_i pre-activation
//!   Hessian. Spectral quantities of `H_i` then come from `M_i` alone, which
//!   is what makes per-sample measures affordable.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, flatten_row_major, symmetric_eigen, unflatten_row_major};
use crate::net::Network;

/// Default cap on `d_i * d_{i-1}` for dense per-layer Hessians.
pub const DENSE_CAP: usize = 4096;

/// Relative eigenvalue clamp threshold used by [`truncate_psd`].
pub const TRUNCATION_EPS: f64 = 1e-10;

/// Gradient of the per-sample loss with respect to one layer's weights.
#[derive(Debug, Clone)]
pub struct LayerGradient {
    pub layer: usize,
    pub grad: Array2<f64>,
}

/// Dense symmetric per-layer Hessian over the row-major flattening of `W_i`.
#[derive(Debug, Clone)]
pub struct LayerHessian {
    pub layer: usize,
    pub matrix: Array2<f64>,
}

/// Eigen summary of a layer Hessian.
#[derive(Debug, Clone)]
pub struct SpectralSummary {
    /// Eigenvalues in descending order (after the truncation clamp).
    pub eigenvalues: Vec<f64>,
    /// Matching eigenvectors as columns, when retained.
    pub eigenvectors: Option<Array2<f64>>,
    /// Sum of eigenvalues (= trace of the input matrix up to clamping).
    pub trace: f64,
    /// Sum of the positive eigenvalues.
    pub positive_trace: f64,
}

impl SpectralSummary {
    /// CSV rows `layer,eigenvalue_index,value` for plotting.
    pub fn to_csv(&self, layer: usize) -> String {
        let mut out = String::from("layer,eigenvalue_index,value\n");
        for (idx, v) in self.eigenvalues.iter().enumerate() {
            out.push_str(&format!("{layer},{idx},{v}\n"));
        }
        out
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

/// Exact reverse-mode gradient of `ℓ(f_W(x), y)` for every layer.
pub fn gradient(net: &Network, x: ArrayView1<f64>, y: usize) -> Result<Vec<LayerGradient>> {
    let (out, cache) = net.forward(x)?;
    let kind = net.loss_spec().kind;
    let mut u = kind.grad(out.view(), y)?; // ∂ℓ/∂z_j, starting at j = L-1
    let mut grads: Vec<LayerGradient> = Vec::with_capacity(net.num_layers());
    for j in (0..net.num_layers()).rev() {
        let layer = &net.layers()[j];
        let d1 = cache.pre[j].mapv(|v| layer.activation.eval(v).1);
        let delta = &d1 * &u;
        let g = outer(&delta, cache.layer_input(j));
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { context: format!("gradient of layer {j}") });
        }
        grads.push(LayerGradient { layer: j, grad: g });
        if j > 0 {
            u = layer.weight.t().dot(&delta);
        }
    }
    grads.reverse();
    Ok(grads)
}

/// Prepared state for repeated Hessian-vector products against one layer of
/// one sample. The primal forward and backward passes run once; each
/// [`LayerHvp::apply`] then only propagates tangents.
pub struct LayerHvp {
    layer: usize,
    rows: usize,
    cols: usize,
    weights: Vec<Array2<f64>>,
    /// `z_{j-1}` per layer.
    inputs: Vec<Array1<f64>>,
    /// φ'(a_j) per layer.
    d1: Vec<Array1<f64>>,
    /// φ''(a_j) per layer.
    d2: Vec<Array1<f64>>,
    /// ∂ℓ/∂z_j per layer.
    u: Vec<Array1<f64>>,
    output: Array1<f64>,
    label: usize,
    loss: crate::net::LossKind,
}

impl LayerHvp {
    pub fn new(net: &Network, x: ArrayView1<f64>, y: usize, layer: usize) -> Result<LayerHvp> {
        if layer >= net.num_layers() {
            return Err(Error::invalid_parameter(
                "layer",
                format!("index {layer} out of range for {} layers", net.num_layers()),
            ));
        }
        let (out, cache) = net.forward(x)?;
        let kind = net.loss_spec().kind;
        let n_layers = net.num_layers();
        let mut d1 = Vec::with_capacity(n_layers);
        let mut d2 = Vec::with_capacity(n_layers);
        for (j, l) in net.layers().iter().enumerate() {
            let mut a1 = Array1::zeros(cache.pre[j].len());
            let mut a2 = Array1::zeros(cache.pre[j].len());
            for (idx, &z) in cache.pre[j].iter().enumerate() {
                let (_, g1, g2) = l.activation.eval(z);
                a1[idx] = g1;
                a2[idx] = g2;
            }
            d1.push(a1);
            d2.push(a2);
        }
        // Backward primal pass: u[j] = ∂ℓ/∂z_j.
        let mut u = vec![Array1::zeros(0); n_layers];
        u[n_layers - 1] = kind.grad(out.view(), y)?;
        for j in (1..n_layers).rev() {
            let delta = &d1[j] * &u[j];
            u[j - 1] = net.layers()[j].weight.t().dot(&delta);
        }
        let inputs = (0..n_layers).map(|j| cache.layer_input(j).clone()).collect();
        Ok(LayerHvp {
            layer,
            rows: net.layers()[layer].weight.nrows(),
            cols: net.layers()[layer].weight.ncols(),
            weights: net.layers().iter().map(|l| l.weight.clone()).collect(),
            inputs,
            d1,
            d2,
            u,
            output: out,
            label: y,
            loss: kind,
        })
    }

    /// Flattened parameter count of the target layer.
    pub fn dim(&self) -> usize {
        self.rows * self.cols
    }

    /// Exact product `H_i[ℓ] v` by tangent propagation (no truncation error).
    pub fn apply(&self, v: ArrayView1<f64>) -> Result<Array1<f64>> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                layer: self.layer,
                expected: self.dim(),
                got: v.len(),
            });
        }
        if !v.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite { context: "hvp direction".into() });
        }
        let n_layers = self.weights.len();
        let dir = unflatten_row_major(&v.to_owned(), self.rows, self.cols);

        // Forward tangent sweep from the perturbed layer upward.
        // adot[j] for j >= layer; zdot for the running post-activation tangent.
        let mut adot: Vec<Array1<f64>> = vec![Array1::zeros(0); n_layers];
        adot[self.layer] = dir.dot(&self.inputs[self.layer]);
        let mut zdot = &self.d1[self.layer] * &adot[self.layer];
        for j in self.layer + 1..n_layers {
            adot[j] = self.weights[j].dot(&zdot);
            zdot = &self.d1[j] * &adot[j];
        }

        // Backward tangent sweep: udot[j] is the tangent of ∂ℓ/∂z_j.
        let mut udot = self.loss.hess_vec(self.output.view(), self.label, zdot.view())?;
        for j in (self.layer..n_layers).rev() {
            let deltadot = &(&self.d2[j] * &adot[j]) * &self.u[j] + &(&self.d1[j] * &udot);
            if j == self.layer {
                // z_{layer-1} carries no tangent, so the product reduces to
                // the outer product of the delta tangent with the layer input.
                return Ok(flatten_row_major(&outer(&deltadot, &self.inputs[j])));
            }
            udot = self.weights[j].t().dot(&deltadot);
        }
        unreachable!("loop always returns at j == self.layer");
    }
}

/// Exact Hessian-vector product `H_i[ℓ(f_W(x), y)] v`.
pub fn hvp(
    net: &Network,
    x: ArrayView1<f64>,
    y: usize,
    layer: usize,
    v: ArrayView1<f64>,
) -> Result<Array1<f64>> {
    LayerHvp::new(net, x, y, layer)?.apply(v)
}

/// Dense per-layer Hessian, assembled column by column from exact HVPs and
/// symmetrized as `(H + Hᵀ)/2`.
pub fn layer_hessian_dense(
    net: &Network,
    x: ArrayView1<f64>,
    y: usize,
    layer: usize,
    cap: usize,
) -> Result<LayerHessian> {
    let op = LayerHvp::new(net, x, y, layer)?;
    let p = op.dim();
    if p > cap {
        return Err(Error::CapacityExceeded { layer, params: p, cap });
    }
    let mut h = Array2::<f64>::zeros((p, p));
    let mut e = Array1::<f64>::zeros(p);
    for j in 0..p {
        e[j] = 1.0;
        let col = op.apply(e.view())?;
        for i in 0..p {
            h[[i, j]] = col[i];
        }
        e[j] = 0.0;
    }
    let sym = Array2::from_shape_fn((p, p), |(i, j)| 0.5 * (h[[i, j]] + h[[j, i]]));
    Ok(LayerHessian { layer, matrix: sym })
}

/// Truncation of a symmetric matrix to its positive eigenspace:
/// `H⁺ = U max(D, 0) Uᵀ`, with eigenvalues below
/// `TRUNCATION_EPS * max(1, |λ|_max)` in magnitude clamped to zero first.
pub fn truncate_psd(h: &LayerHessian) -> Result<(LayerHessian, SpectralSummary)> {
    let eig = symmetric_eigen(&h.matrix)?;
    let lam_max = eig.values.iter().fold(0.0f64, |m, &l| m.max(l.abs()));
    let threshold = TRUNCATION_EPS * lam_max.max(1.0);
    let clamped: Vec<f64> = eig
        .values
        .iter()
        .map(|&l| if l.abs() < threshold { 0.0 } else { l })
        .collect();
    let n = h.matrix.nrows();
    let mut hp = Array2::<f64>::zeros((n, n));
    for (a, &lam) in clamped.iter().enumerate() {
        if lam > 0.0 {
            let col = eig.vectors.column(a);
            for i in 0..n {
                for j in 0..n {
                    hp[[i, j]] += lam * col[i] * col[j];
                }
            }
        }
    }
    let trace = clamped.iter().sum();
    let positive_trace = clamped.iter().filter(|&&l| l > 0.0).sum();
    Ok((
        LayerHessian { layer: h.layer, matrix: hp },
        SpectralSummary {
            eigenvalues: clamped,
            eigenvectors: Some(eig.vectors),
            trace,
            positive_trace,
        },
    ))
}

/// `vᵀ H⁺ v = Σ_{λ_j > 0} λ_j (u_jᵀ v)²` via the truncated eigendecomposition.
pub fn quadratic_form_pos(h: &LayerHessian, v: ArrayView1<f64>) -> Result<f64> {
    let p = h.matrix.nrows();
    if v.len() != p {
        return Err(Error::DimensionMismatch { layer: h.layer, expected: p, got: v.len() });
    }
    let (_, summary) = truncate_psd(h)?;
    let vectors = summary.eigenvectors.as_ref().unwrap();
    let mut acc = 0.0;
    for (a, &lam) in summary.eigenvalues.iter().enumerate() {
        if lam > 0.0 {
            let dot = vectors.column(a).dot(&v);
            acc += lam * dot * dot;
        }
    }
    Ok(acc)
}

/// Trace of a dense layer Hessian.
pub fn trace_exact(h: &LayerHessian) -> f64 {
    (0..h.matrix.nrows()).map(|i| h.matrix[[i, i]]).sum()
}

/// Hutchinson trace estimate over a caller-supplied HVP: Rademacher probes
/// `z`, estimate `mean(zᵀ H z)`, standard error of the mean.
pub fn hutchinson_trace_with<F>(mut hvp_fn: F, dim: usize, probes: usize, seed: u64) -> (f64, f64)
where
    F: FnMut(ArrayView1<f64>) -> Array1<f64>,
{
    assert!(probes >= 1, "need at least one probe");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(probes);
    for _ in 0..probes {
        let z = Array1::from_shape_fn(dim, |_| if rng.gen::<bool>() { 1.0 } else { -1.0 });
        let hz = hvp_fn(z.view());
        samples.push(z.dot(&hz));
    }
    let mean = samples.iter().sum::<f64>() / probes as f64;
    let stderr = if probes > 1 {
        let var =
            samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (probes as f64 - 1.0);
        (var / probes as f64).sqrt()
    } else {
        0.0
    };
    (mean, stderr)
}

/// Hutchinson trace estimate of a per-layer loss Hessian.
pub fn hutchinson_trace(
    net: &Network,
    x: ArrayView1<f64>,
    y: usize,
    layer: usize,
    probes: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let op = LayerHvp::new(net, x, y, layer)?;
    let dim = op.dim();
    let mut err = None;
    let (mean, stderr) = hutchinson_trace_with(
        |z| match op.apply(z) {
            Ok(v) => v,
            Err(e) => {
                err = Some(e);
                Array1::zeros(dim)
            }
        },
        dim,
        probes,
        seed,
    );
    match err {
        Some(e) => Err(e),
        None => Ok((mean, stderr)),
    }
}

/// Factored per-layer Hessian `H_i = M_i ⊗ z_{i-1} z_{i-1}ᵀ`, where `M_i` is
/// the pre-activation Hessian of the loss at layer `i` and `z_{i-1}` the
/// layer input. Exact, and cheap enough to evaluate per sample.
#[derive(Debug, Clone)]
pub struct LayerCurvature {
    pub layer: usize,
    /// `M_i = ∂²ℓ/∂a_i²`, a `d_i × d_i` symmetric matrix.
    pub output_hess: Array2<f64>,
    /// Layer input `z_{i-1}`.
    pub input: Array1<f64>,
}

impl LayerCurvature {
    /// Flattened parameter count of the layer.
    pub fn dim(&self) -> usize {
        self.output_hess.nrows() * self.input.len()
    }

    /// Exact signed trace `tr(H_i) = tr(M_i) ||z||²`.
    pub fn trace(&self) -> f64 {
        let tr_m: f64 = (0..self.output_hess.nrows()).map(|i| self.output_hess[[i, i]]).sum();
        tr_m * self.input.dot(&self.input)
    }

    /// Eigenvalues of the full `H_i` that are not structurally zero, i.e.
    /// `λ_a(M_i) ||z||²`, clamped with the same threshold as [`truncate_psd`].
    fn scaled_eigen(&self) -> Result<(Vec<f64>, Array2<f64>)> {
        let zz = self.input.dot(&self.input);
        let eig = symmetric_eigen(&self.output_hess)?;
        let scaled: Vec<f64> = eig.values.iter().map(|&l| l * zz).collect();
        let lam_max = scaled.iter().fold(0.0f64, |m, &l| m.max(l.abs()));
        let threshold = TRUNCATION_EPS * lam_max.max(1.0);
        let clamped =
            scaled.iter().map(|&l| if l.abs() < threshold { 0.0 } else { l }).collect();
        Ok((clamped, eig.vectors))
    }

    /// Positive-part trace `tr(H_i⁺)`.
    pub fn positive_trace(&self) -> Result<f64> {
        let (vals, _) = self.scaled_eigen()?;
        Ok(vals.into_iter().filter(|&l| l > 0.0).sum())
    }

    /// `vᵀ H_i⁺ v` for `v = flatten(ΔW)`:
    /// `Σ_{λ_a > 0} λ_a ||z||² (u_aᵀ ΔW ẑ)²` with `ẑ = z/||z||`.
    pub fn positive_quadratic_form(&self, delta_w: &Array2<f64>) -> Result<f64> {
        let zz = self.input.dot(&self.input);
        if zz == 0.0 {
            return Ok(0.0);
        }
        let (vals, vecs) = self.scaled_eigen()?;
        let znorm = zz.sqrt();
        let wz = delta_w.dot(&self.input) / znorm;
        let mut acc = 0.0;
        for (a, &lam) in vals.iter().enumerate() {
            if lam > 0.0 {
                let dot = vecs.column(a).dot(&wz);
                acc += lam * dot * dot;
            }
        }
        Ok(acc)
    }

    /// Materialize the dense `H_i` (tests and small cases only).
    pub fn to_dense(&self) -> LayerHessian {
        let d = self.output_hess.nrows();
        let c = self.input.len();
        let p = d * c;
        let mut h = Array2::<f64>::zeros((p, p));
        for a in 0..d {
            for b in 0..c {
                for e in 0..d {
                    for f in 0..c {
                        h[[a * c + b, e * c + f]] =
                            self.output_hess[[a, e]] * self.input[b] * self.input[f];
                    }
                }
            }
        }
        LayerHessian { layer: self.layer, matrix: h }
    }
}

/// Exact factored Hessians for every layer of one sample, via the backward
/// recurrence on pre-activation Hessians:
/// `M_j = D_{φ'} (W_{j+1}ᵀ M_{j+1} W_{j+1}) D_{φ'} + diag(φ'' ⊙ ∂ℓ/∂z_j)`.
pub fn layer_curvatures(net: &Network, x: ArrayView1<f64>, y: usize) -> Result<Vec<LayerCurvature>> {
    let (out, cache) = net.forward(x)?;
    let kind = net.loss_spec().kind;
    let n_layers = net.num_layers();
    let mut curv = vec![None; n_layers];

    // m = ∂²ℓ/∂z_j², u = ∂ℓ/∂z_j, walking j from L-1 down to 0.
    let mut m = kind.hess(out.view(), y)?;
    let mut u = kind.grad(out.view(), y)?;
    for j in (0..n_layers).rev() {
        let layer = &net.layers()[j];
        let n = cache.pre[j].len();
        let mut d1 = Array1::zeros(n);
        let mut d2 = Array1::zeros(n);
        for (idx, &z) in cache.pre[j].iter().enumerate() {
            let (_, g1, g2) = layer.activation.eval(z);
            d1[idx] = g1;
            d2[idx] = g2;
        }
        let mut a = Array2::from_shape_fn((n, n), |(r, c)| d1[r] * m[[r, c]] * d1[c]);
        for r in 0..n {
            a[[r, r]] += d2[r] * u[r];
        }
        if !a.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { context: format!("curvature of layer {j}") });
        }
        curv[j] = Some(LayerCurvature {
            layer: j,
            output_hess: a.clone(),
            input: cache.layer_input(j).clone(),
        });
        if j > 0 {
            let delta = &d1 * &u;
            u = layer.weight.t().dot(&delta);
            m = layer.weight.t().dot(&a).dot(&layer.weight);
        }
    }
    Ok(curv.into_iter().map(|c| c.unwrap()).collect())
}

/// Raw Hessian-Lipschitz constant formula:
///
/// `G = (3/2)(L+1)² e⁶ κ₂ κ₁² κ₀^{3(L+1)}
///      (max‖x‖ · Π d_l · Π ‖W_h‖₂)³ · (max_i ‖W_i‖₂⁻² Σ_h ‖W_h‖₂⁻¹)`.
///
/// `kappas` are the already-aggregated Lipschitz constants (the formula
/// assumes each is at least 1).
pub fn hessian_lipschitz_g_formula(
    kappas: (f64, f64, f64),
    num_layers: usize,
    max_input_norm: f64,
    dims: &[usize],
    spectral_norms: &[f64],
) -> Result<f64> {
    let (k0, k1, k2) = kappas;
    if spectral_norms.iter().any(|&s| s <= 0.0) {
        return Err(Error::SingularMatrix {
            context: "hessian_lipschitz_g: zero spectral norm".into(),
            cond: f64::INFINITY,
        });
    }
    let l = num_layers as f64;
    let dim_product: f64 = dims.iter().map(|&d| d as f64).product();
    let norm_product: f64 = spectral_norms.iter().product();
    let inv_sum: f64 = spectral_norms.iter().map(|s| 1.0 / s).sum();
    let min_norm = spectral_norms.iter().cloned().fold(f64::INFINITY, f64::min);
    let cubic = max_input_norm * dim_product * norm_product;
    Ok(1.5
        * (l + 1.0).powi(2)
        * std::f64::consts::E.powi(6)
        * k2
        * k1.powi(2)
        * k0.powf(3.0 * (l + 1.0))
        * cubic.powi(3)
        * (inv_sum / (min_norm * min_norm)))
}

/// Hessian-Lipschitz diagnostic `G` for a network, with Lipschitz constants
/// taken as the maximum over all activations and the loss (clamped to at
/// least 1, as the formula requires) and spectral norms from power iteration.
pub fn hessian_lipschitz_g(net: &Network, max_input_norm: f64) -> Result<f64> {
    let mut k0 = 1.0f64;
    let mut k1 = 1.0f64;
    let mut k2 = 1.0f64;
    for layer in net.layers() {
        let (a0, a1, a2) = layer.activation.lipschitz_constants();
        k0 = k0.max(a0);
        k1 = k1.max(a1);
        k2 = k2.max(a2);
    }
    let (l0, l1, l2) = net.loss_spec().kind.lipschitz_constants();
    k0 = k0.max(l0);
    k1 = k1.max(l1);
    k2 = k2.max(l2);

    let spectral: Vec<f64> = net.layers().iter().map(|l| linalg::spectral_norm(&l.weight)).collect();
    hessian_lipschitz_g_formula((k0, k1, k2), net.num_layers(), max_input_norm, &net.dims(), &spectral)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{ActivationKind, Layer, LossSpec};
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::Rng;

    fn random_net(dims: &[usize], act: ActivationKind, loss: LossSpec, seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        for w in dims.windows(2) {
            let weight = Array2::from_shape_fn((w[1], w[0]), |_| rng.gen_range(-1.0..1.0));
            let activation =
                if layers.len() + 2 == dims.len() { ActivationKind::Identity } else { act };
            layers.push(Layer { weight, activation });
        }
        Network::new(layers, loss).unwrap()
    }

    #[test]
    fn gradient_zero_when_input_is_zero() {
        // With x = 0 every pre-activation input to layer 0 vanishes, so the
        // layer-0 gradient δ xᵀ is exactly zero.
        let net = random_net(&[3, 2], ActivationKind::Identity, LossSpec::squared_error(), 1);
        let g = gradient(&net, array![0.0, 0.0, 0.0].view(), 0).unwrap();
        assert!(g[0].grad.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_zero_for_degenerate_single_class() {
        // k = 1: softmax is constant 1, so both losses are constant in W.
        let net = random_net(&[3, 1], ActivationKind::Identity, LossSpec::squared_error(), 2);
        let g = gradient(&net, array![0.3, -0.2, 0.9].view(), 0).unwrap();
        assert!(g[0].grad.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hvp_of_zero_vector_is_zero() {
        let net = random_net(&[2, 3, 2], ActivationKind::Tanh, LossSpec::cross_entropy(), 3);
        let v = Array1::zeros(6);
        let out = hvp(&net, array![0.4, -0.6].view(), 1, 0, v.view()).unwrap();
        assert!(out.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn hvp_is_linear() {
        let net = random_net(&[2, 3, 2], ActivationKind::Tanh, LossSpec::cross_entropy(), 4);
        let x = array![0.4, -0.6];
        let op = LayerHvp::new(&net, x.view(), 0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let u = Array1::from_shape_fn(6, |_| rng.gen_range(-1.0..1.0));
            let w = Array1::from_shape_fn(6, |_| rng.gen_range(-1.0..1.0));
            let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let combo: Array1<f64> = a * &u + b * &w;
            let lhs = op.apply(combo.view()).unwrap();
            let rhs = a * &op.apply(u.view()).unwrap() + b * &op.apply(w.view()).unwrap();
            for (l, r) in lhs.iter().zip(rhs.iter()) {
                assert_relative_eq!(l, r, epsilon = 1e-10, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn hvp_rejects_wrong_dimension() {
        let net = random_net(&[2, 2], ActivationKind::Tanh, LossSpec::cross_entropy(), 6);
        let err = hvp(&net, array![0.1, 0.2].view(), 0, 0, Array1::zeros(3).view()).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn dense_hessian_is_symmetric_and_matches_hvp() {
        let net = random_net(&[3, 4, 2], ActivationKind::Tanh, LossSpec::cross_entropy(), 7);
        let x = array![0.2, -0.5, 0.8];
        for layer in 0..2 {
            let h = layer_hessian_dense(&net, x.view(), 1, layer, DENSE_CAP).unwrap();
            let m = &h.matrix;
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    assert_relative_eq!(m[[i, j]], m[[j, i]], epsilon = 1e-12);
                }
            }
            // hvp agrees with the dense matrix-vector product.
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let v = Array1::from_shape_fn(m.nrows(), |_| rng.gen_range(-1.0..1.0));
            let hv = hvp(&net, x.view(), 1, layer, v.view()).unwrap();
            let dense_hv = m.dot(&v);
            for (a, b) in hv.iter().zip(dense_hv.iter()) {
                assert_relative_eq!(a, b, epsilon = 1e-8, max_relative = 1e-8);
            }
        }
    }

    #[test]
    fn dense_hessian_constant_along_output_preserving_changes() {
        // One linear layer: H = M(o) ⊗ xxᵀ depends on W only through o = Wx.
        // Two weight matrices with the same output on this x give the same H.
        let x = array![1.0, 0.0];
        let w1 = array![[0.3, 5.0], [-0.7, 1.0]];
        let w2 = array![[0.3, -2.0], [-0.7, 0.4]];
        for w in [&w1, &w2] {
            assert_eq!(w.dot(&x), array![0.3, -0.7]);
        }
        let mk = |w: &Array2<f64>| {
            Network::new(
                vec![Layer { weight: w.clone(), activation: ActivationKind::Identity }],
                LossSpec::squared_error(),
            )
            .unwrap()
        };
        let h1 = layer_hessian_dense(&mk(&w1), x.view(), 0, 0, DENSE_CAP).unwrap();
        let h2 = layer_hessian_dense(&mk(&w2), x.view(), 0, 0, DENSE_CAP).unwrap();
        for (a, b) in h1.matrix.iter().zip(h2.matrix.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn dense_hessian_respects_cap() {
        let net = random_net(&[3, 4, 2], ActivationKind::Tanh, LossSpec::cross_entropy(), 9);
        let err = layer_hessian_dense(&net, array![0.2, -0.5, 0.8].view(), 0, 0, 8).unwrap_err();
        assert!(matches!(err, Error::CapacityExceeded { layer: 0, params: 12, cap: 8 }));
    }

    #[test]
    fn truncate_diagonal_example() {
        let h = LayerHessian { layer: 0, matrix: array![[2.0, 0.0], [0.0, -3.0]] };
        let (hp, summary) = truncate_psd(&h).unwrap();
        assert_relative_eq!(hp.matrix[[0, 0]], 2.0, epsilon = 1e-12);
        assert_relative_eq!(hp.matrix[[1, 1]], 0.0, epsilon = 1e-12);
        assert_eq!(summary.eigenvalues, vec![2.0, -3.0]);
        assert_relative_eq!(summary.positive_trace, 2.0, epsilon = 1e-12);
        assert_relative_eq!(summary.trace, -1.0, epsilon = 1e-12);
    }

    #[test]
    fn truncate_psd_input_is_identity_like() {
        let m = array![[2.0, 0.5], [0.5, 1.0]];
        let h = LayerHessian { layer: 0, matrix: m.clone() };
        let (hp, _) = truncate_psd(&h).unwrap();
        for (a, b) in hp.matrix.iter().zip(m.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-9);
        }
        // Idempotence.
        let (hpp, _) = truncate_psd(&hp).unwrap();
        for (a, b) in hpp.matrix.iter().zip(hp.matrix.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn quadratic_form_pos_examples() {
        let h = LayerHessian { layer: 0, matrix: array![[2.0, 0.0], [0.0, -3.0]] };
        assert_eq!(quadratic_form_pos(&h, array![0.0, 0.0].view()).unwrap(), 0.0);
        let q = quadratic_form_pos(&h, array![1.0, 1.0].view()).unwrap();
        assert_relative_eq!(q, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn quadratic_form_matches_truncated_matrix() {
        let m = array![
            [1.0, -0.4, 0.2],
            [-0.4, -2.0, 0.7],
            [0.2, 0.7, 0.5],
        ];
        let h = LayerHessian { layer: 0, matrix: m };
        let (hp, _) = truncate_psd(&h).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..5 {
            let v = Array1::from_shape_fn(3, |_| rng.gen_range(-2.0..2.0));
            let direct = v.dot(&hp.matrix.dot(&v));
            let q = quadratic_form_pos(&h, v.view()).unwrap();
            assert_relative_eq!(q, direct, epsilon = 1e-9, max_relative = 1e-9);
        }
    }

    #[test]
    fn spectral_summary_csv_rows() {
        let h = LayerHessian { layer: 2, matrix: array![[2.0, 0.0], [0.0, -3.0]] };
        let (_, summary) = truncate_psd(&h).unwrap();
        let csv = summary.to_csv(2);
        assert_eq!(csv, "layer,eigenvalue_index,value\n2,0,2\n2,1,-3\n");
    }

    #[test]
    fn trace_exact_of_diagonal() {
        let h = LayerHessian {
            layer: 0,
            matrix: Array2::from_diag(&array![1.0, 2.0, 3.0]),
        };
        assert_eq!(trace_exact(&h), 6.0);
    }

    #[test]
    fn hutchinson_on_identity_is_exact() {
        // zᵀ I z = p for every Rademacher probe.
        let (est, stderr) = hutchinson_trace_with(|z| z.to_owned(), 17, 50, 42);
        assert_eq!(est, 17.0);
        assert_eq!(stderr, 0.0);
    }

    #[test]
    fn curvature_matches_dense_hessian() {
        let net = random_net(&[3, 4, 3], ActivationKind::Tanh, LossSpec::cross_entropy(), 11);
        let x = array![0.3, -0.9, 0.5];
        let curv = layer_curvatures(&net, x.view(), 2).unwrap();
        for layer in 0..2 {
            let dense = layer_hessian_dense(&net, x.view(), 2, layer, DENSE_CAP).unwrap();
            let fac = curv[layer].to_dense();
            let scale = crate::linalg::frobenius(&dense.matrix).max(1.0);
            for (a, b) in dense.matrix.iter().zip(fac.matrix.iter()) {
                assert!((a - b).abs() <= 1e-8 * scale, "dense {a} vs factored {b}");
            }
            // Traces and positive quantities agree across routes.
            assert_relative_eq!(
                trace_exact(&dense),
                curv[layer].trace(),
                epsilon = 1e-9,
                max_relative = 1e-9
            );
            let (_, summary) = truncate_psd(&dense).unwrap();
            assert_relative_eq!(
                summary.positive_trace,
                curv[layer].positive_trace().unwrap(),
                epsilon = 1e-8,
                max_relative = 1e-8
            );
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            let w = &net.layers()[layer].weight;
            let dw = Array2::from_shape_fn((w.nrows(), w.ncols()), |_| rng.gen_range(-1.0..1.0));
            let v = flatten_row_major(&dw);
            let q_dense = quadratic_form_pos(&dense, v.view()).unwrap();
            let q_fac = curv[layer].positive_quadratic_form(&dw).unwrap();
            assert_relative_eq!(q_dense, q_fac, epsilon = 1e-8, max_relative = 1e-7);
        }
    }

    #[test]
    fn g_formula_plugin_value() {
        // L = 1, all κ = 1, max‖x‖ = 1, d0 = d1 = 1, ‖W‖₂ = 1 → G = 6e⁶.
        let g = hessian_lipschitz_g_formula((1.0, 1.0, 1.0), 1, 1.0, &[1, 1], &[1.0]).unwrap();
        assert_relative_eq!(g, 6.0 * std::f64::consts::E.powi(6), max_relative = 1e-12);
        assert_relative_eq!(g, 2420.57, max_relative = 1e-5);
    }

    #[test]
    fn g_formula_cubic_in_input_norm() {
        let g1 = hessian_lipschitz_g_formula((1.0, 1.0, 1.0), 2, 1.0, &[3, 4, 2], &[0.7, 1.3])
            .unwrap();
        let g2 = hessian_lipschitz_g_formula((1.0, 1.0, 1.0), 2, 2.0, &[3, 4, 2], &[0.7, 1.3])
            .unwrap();
        assert_relative_eq!(g2, 8.0 * g1, max_relative = 1e-12);
    }

    #[test]
    fn g_formula_tracks_weight_scaling() {
        // Scaling every spectral norm by t multiplies the cubic factor by
        // t^{3L} and the trailing factor by t^{-3}.
        let base: Vec<f64> = vec![0.9, 1.4, 2.0];
        let t = 1.7;
        let scaled: Vec<f64> = base.iter().map(|s| s * t).collect();
        let g1 = hessian_lipschitz_g_formula((1.0, 1.0, 1.0), 3, 1.0, &[2, 3, 3, 2], &base).unwrap();
        let g2 =
            hessian_lipschitz_g_formula((1.0, 1.0, 1.0), 3, 1.0, &[2, 3, 3, 2], &scaled).unwrap();
        let predicted = g1 * t.powi(9) * t.powi(-3);
        assert_relative_eq!(g2, predicted, max_relative = 1e-10);
    }

    #[test]
    fn g_rejects_zero_spectral_norm() {
        let net = Network::new(
            vec![Layer { weight: Array2::zeros((2, 2)), activation: ActivationKind::Tanh }],
            LossSpec::squared_error(),
        )
        .unwrap();
        assert!(hessian_lipschitz_g(&net, 1.0).is_err());
    }
}
