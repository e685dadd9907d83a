//! Shared oracle helpers for the integration tests: seeded random networks
//! and finite-difference references that stay independent of the
//! implementation paths they check.
//!
//! Each test binary compiles this module separately and uses a subset.
#![allow(dead_code)]

use hessfine_core::net::{ActivationKind, Layer, LossSpec, Network};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn random_net(dims: &[usize], act: ActivationKind, loss: LossSpec, seed: u64) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    for w in dims.windows(2) {
        let weight = Array2::from_shape_fn((w[1], w[0]), |_| rng.gen_range(-1.0..1.0));
        let activation = if layers.len() + 2 == dims.len() { ActivationKind::Identity } else { act };
        layers.push(Layer { weight, activation });
    }
    Network::new(layers, loss).unwrap()
}

pub fn random_input(dim: usize, seed: u64) -> Array1<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array1::from_shape_fn(dim, |_| rng.gen_range(-1.5..1.5))
}

/// Copy of `net` with one weight entry shifted by `eps`.
pub fn perturb_entry(net: &Network, layer: usize, r: usize, c: usize, eps: f64) -> Network {
    let mut layers: Vec<Layer> = net.layers().to_vec();
    layers[layer].weight[[r, c]] += eps;
    Network::new(layers, net.loss_spec()).unwrap()
}

/// Copy of `net` with a whole layer shifted by `delta`.
pub fn shift_layer(net: &Network, layer: usize, delta: &Array2<f64>) -> Network {
    let mut layers: Vec<Layer> = net.layers().to_vec();
    layers[layer].weight = &layers[layer].weight + delta;
    Network::new(layers, net.loss_spec()).unwrap()
}

/// Central finite differences of the loss with respect to every weight entry.
pub fn fd_gradient(net: &Network, x: &Array1<f64>, y: usize, h: f64) -> Vec<Array2<f64>> {
    let mut grads = Vec::new();
    for (l, layer) in net.layers().iter().enumerate() {
        let (rows, cols) = (layer.weight.nrows(), layer.weight.ncols());
        let mut g = Array2::zeros((rows, cols));
        for r in 0..rows {
            for c in 0..cols {
                let lp = perturb_entry(net, l, r, c, h).loss_on(x.view(), y).unwrap();
                let lm = perturb_entry(net, l, r, c, -h).loss_on(x.view(), y).unwrap();
                g[[r, c]] = (lp - lm) / (2.0 * h);
            }
        }
        grads.push(g);
    }
    grads
}

/// Finite differences of the analytic gradient along direction `v`:
/// `(∇ℓ(W + hV) - ∇ℓ(W - hV)) / (2h)` restricted to the target layer.
pub fn fd_hvp(
    net: &Network,
    x: &Array1<f64>,
    y: usize,
    layer: usize,
    v: &Array2<f64>,
    h: f64,
) -> Array1<f64> {
    let plus = shift_layer(net, layer, &(h * v));
    let minus = shift_layer(net, layer, &(-h * v));
    let gp = hessfine_core::hessian::gradient(&plus, x.view(), y).unwrap();
    let gm = hessfine_core::hessian::gradient(&minus, x.view(), y).unwrap();
    let diff = (&gp[layer].grad - &gm[layer].grad) / (2.0 * h);
    hessfine_core::linalg::flatten_row_major(&diff)
}

/// Dense layer Hessian from second-order central finite differences of the
/// loss itself.
pub fn fd_layer_hessian(
    net: &Network,
    x: &Array1<f64>,
    y: usize,
    layer: usize,
    h: f64,
) -> Array2<f64> {
    let w = &net.layers()[layer].weight;
    let (rows, cols) = (w.nrows(), w.ncols());
    let p = rows * cols;
    let mut hess = Array2::zeros((p, p));
    let loss_at = |da: f64, ia: (usize, usize), db: f64, ib: (usize, usize)| -> f64 {
        let mut layers: Vec<Layer> = net.layers().to_vec();
        layers[layer].weight[[ia.0, ia.1]] += da;
        layers[layer].weight[[ib.0, ib.1]] += db;
        Network::new(layers, net.loss_spec())
            .unwrap()
            .loss_on(x.view(), y)
            .unwrap()
    };
    for a in 0..p {
        let ia = (a / cols, a % cols);
        for b in 0..p {
            let ib = (b / cols, b % cols);
            let v = (loss_at(h, ia, h, ib) - loss_at(h, ia, -h, ib) - loss_at(-h, ia, h, ib)
                + loss_at(-h, ia, -h, ib))
                / (4.0 * h * h);
            hess[[a, b]] = v;
        }
    }
    hess
}
