//! Synthetic task generation (pretrain/fine-tune pairs), CSV ingestion, and
//! seeded splits. All generators are pure functions of their parameters and
//! seed.

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::path::Path;

use crate::error::{Error, Result};

/// A labeled dataset. Labels are 0-based class indices in `0..k`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub k: usize,
    /// Generator + parameters + seed, for manifests.
    pub provenance: String,
}

impl Dataset {
    pub fn new(
        features: Array2<f64>,
        labels: Vec<usize>,
        k: usize,
        provenance: String,
    ) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::EmptyInput { what: "dataset".into() });
        }
        if features.nrows() != labels.len() {
            return Err(Error::invalid_parameter(
                "labels",
                format!("{} labels for {} rows", labels.len(), features.nrows()),
            ));
        }
        if !features.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { context: "dataset features".into() });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::LabelOutOfRange { label: bad, classes: k });
        }
        Ok(Dataset { features, labels, k, provenance })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn sample(&self, i: usize) -> (ArrayView1<'_, f64>, usize) {
        (self.features.row(i), self.labels[i])
    }

    /// Same features with replaced labels (e.g. after noise injection).
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Dataset> {
        Dataset::new(
            self.features.clone(),
            labels,
            self.k,
            format!("{} (relabeled)", self.provenance),
        )
    }

    pub fn max_feature_norm(&self) -> f64 {
        self.features
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .fold(0.0, f64::max)
    }

    /// Deterministic evenly-spaced subsample of at most `cap` rows.
    pub fn subsample_even(&self, cap: usize) -> Dataset {
        let n = self.len();
        if cap == 0 || n <= cap {
            return self.clone();
        }
        let idx: Vec<usize> = (0..cap).map(|i| i * n / cap).collect();
        self.select(&idx, format!("{} (subsampled {cap}/{n})", self.provenance))
    }

    pub fn concat(a: &Dataset, b: &Dataset) -> Result<Dataset> {
        if a.dim() != b.dim() || a.k != b.k {
            return Err(Error::invalid_parameter("concat", "incompatible datasets"));
        }
        let n = a.len() + b.len();
        let mut features = Array2::zeros((n, a.dim()));
        let mut labels = Vec::with_capacity(n);
        for (i, (row, y)) in a
            .features
            .rows()
            .into_iter()
            .zip(a.labels.iter())
            .chain(b.features.rows().into_iter().zip(b.labels.iter()))
            .enumerate()
        {
            features.row_mut(i).assign(&row);
            labels.push(*y);
        }
        Dataset::new(features, labels, a.k, format!("{} + {}", a.provenance, b.provenance))
    }

    fn select(&self, idx: &[usize], provenance: String) -> Dataset {
        let mut features = Array2::zeros((idx.len(), self.dim()));
        let mut labels = Vec::with_capacity(idx.len());
        for (row, &i) in idx.iter().enumerate() {
            features.row_mut(row).assign(&self.features.row(i));
            labels.push(self.labels[i]);
        }
        Dataset { features, labels, k: self.k, provenance }
    }
}

/// Parameters of a Gaussian-blobs task.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BlobsParams {
    pub k: usize,
    pub dim: usize,
    pub n: usize,
    pub spread: f64,
    pub center_scale: f64,
    pub seed: u64,
}

fn blob_centers(params: &BlobsParams, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((params.k, params.dim), |_| {
        let z: f64 = StandardNormal.sample(rng);
        params.center_scale * z
    })
}

fn sample_blobs(
    centers: &Array2<f64>,
    params: &BlobsParams,
    rng: &mut ChaCha8Rng,
    provenance: String,
) -> Result<Dataset> {
    let mut features = Array2::zeros((params.n, params.dim));
    let mut labels = Vec::with_capacity(params.n);
    for i in 0..params.n {
        let y = i % params.k;
        for j in 0..params.dim {
            let z: f64 = StandardNormal.sample(rng);
            features[[i, j]] = centers[[y, j]] + params.spread * z;
        }
        labels.push(y);
    }
    Dataset::new(features, labels, params.k, provenance)
}

/// Gaussian blobs: class centers ~ N(0, center_scale² I), samples
/// ~ N(center_y, spread² I), class counts balanced to within 1.
pub fn gaussian_blobs(params: &BlobsParams) -> Result<Dataset> {
    if params.k < 2 || params.dim < 1 || params.n < params.k {
        return Err(Error::invalid_parameter(
            "blobs",
            "need k >= 2, dim >= 1 and n >= k",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let centers = blob_centers(params, &mut rng);
    sample_blobs(
        &centers,
        params,
        &mut rng,
        format!(
            "blobs(k={}, dim={}, n={}, spread={}, center_scale={}, seed={})",
            params.k, params.dim, params.n, params.spread, params.center_scale, params.seed
        ),
    )
}

/// A related task: the source task's centers jittered by N(0, perturbation² I),
/// then sampled afresh. Models the pretrain/fine-tune distribution shift.
pub fn related_task(source: &BlobsParams, perturbation: f64, seed: u64) -> Result<Dataset> {
    if perturbation < 0.0 {
        return Err(Error::invalid_parameter("perturbation", "must be nonnegative"));
    }
    let mut source_rng = ChaCha8Rng::seed_from_u64(source.seed);
    let mut centers = blob_centers(source, &mut source_rng);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in centers.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v += perturbation * z;
    }
    sample_blobs(
        &centers,
        source,
        &mut rng,
        format!(
            "related_task(source_seed={}, perturbation={perturbation}, seed={seed})",
            source.seed
        ),
    )
}

/// Two interleaved spirals in the plane (k = 2).
///
/// With `noise = 0` the points lie exactly on the parametric curves
/// `s ↦ ±s·(cos(2π·turns·s), sin(2π·turns·s))` for `s` evenly spaced in [0, 1].
pub fn two_spirals(n: usize, turns: f64, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::invalid_parameter("n", "need at least two points"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    let counts = [n - n / 2, n / 2];
    let mut row = 0;
    for class in 0..2usize {
        let m = counts[class];
        for i in 0..m {
            let s = if m > 1 { i as f64 / (m as f64 - 1.0) } else { 0.0 };
            let theta = 2.0 * std::f64::consts::PI * turns * s;
            let sign = if class == 0 { 1.0 } else { -1.0 };
            let (mut x0, mut x1) = (sign * s * theta.cos(), sign * s * theta.sin());
            if noise > 0.0 {
                let z0: f64 = StandardNormal.sample(&mut rng);
                let z1: f64 = StandardNormal.sample(&mut rng);
                x0 += noise * z0;
                x1 += noise * z1;
            }
            features[[row, 0]] = x0;
            features[[row, 1]] = x1;
            labels.push(class);
            row += 1;
        }
    }
    Dataset::new(
        features,
        labels,
        2,
        format!("two_spirals(n={n}, turns={turns}, noise={noise}, seed={seed})"),
    )
}

/// Load a numeric CSV with a header row. The named label column carries
/// integer class labels (0-based or 1-based; 1-based is shifted down); every
/// other column becomes a feature, in file order.
pub fn load_csv(path: &Path, label_column: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Csv { line: None, msg: e.to_string() })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Csv { line: None, msg: e.to_string() })?
        .clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::Csv {
            line: Some(1),
            msg: format!("label column `{label_column}` not found"),
        })?;
    let dim = headers.len() - 1;
    if dim == 0 {
        return Err(Error::Csv { line: Some(1), msg: "no feature columns".into() });
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut raw_labels: Vec<i64> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let lineno = i + 2; // header is line 1
        let record = record.map_err(|e| Error::Csv { line: Some(lineno), msg: e.to_string() })?;
        if record.len() != headers.len() {
            return Err(Error::Csv {
                line: Some(lineno),
                msg: format!("expected {} fields, got {}", headers.len(), record.len()),
            });
        }
        let mut row = Vec::with_capacity(dim);
        for (j, cell) in record.iter().enumerate() {
            if j == label_idx {
                let label: i64 = cell.trim().parse().map_err(|_| Error::Csv {
                    line: Some(lineno),
                    msg: format!("cannot parse label `{cell}` as an integer"),
                })?;
                raw_labels.push(label);
            } else {
                let v: f64 = cell.trim().parse().map_err(|_| Error::Csv {
                    line: Some(lineno),
                    msg: format!("cannot parse `{cell}` as a real"),
                })?;
                row.push(v);
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput { what: "csv dataset".into() });
    }

    let min_label = *raw_labels.iter().min().unwrap();
    let max_label = *raw_labels.iter().max().unwrap();
    let offset = match min_label {
        0 => 0,
        1 => 1,
        other => {
            return Err(Error::Csv {
                line: None,
                msg: format!("labels must start at 0 or 1, found minimum {other}"),
            })
        }
    };
    let k = (max_label - offset + 1) as usize;
    let labels: Vec<usize> = raw_labels.iter().map(|&l| (l - offset) as usize).collect();
    let features = Array2::from_shape_fn((rows.len(), dim), |(i, j)| rows[i][j]);
    Dataset::new(
        features,
        labels,
        k,
        format!("csv({}, label={label_column}, label_offset={offset})", path.display()),
    )
}

/// Seeded permutation split into (train, val, test), stratified by class when
/// every class has at least 3 samples. Never duplicates or drops an index.
pub fn split(ds: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let (f1, f2, f3) = fractions;
    if f1 < 0.0 || f2 < 0.0 || f3 < 0.0 || (f1 + f2 + f3 - 1.0).abs() > 1e-9 {
        return Err(Error::invalid_parameter(
            "fractions",
            "must be nonnegative and sum to 1",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut class_counts = vec![0usize; ds.k];
    for &y in &ds.labels {
        class_counts[y] += 1;
    }
    let stratified = class_counts.iter().all(|&c| c >= 3);

    let mut parts: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    if stratified {
        for class in 0..ds.k {
            let mut idx: Vec<usize> =
                (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
            idx.shuffle(&mut rng);
            assign_counts(&mut parts, &idx, (f1, f2));
        }
    } else {
        let mut idx: Vec<usize> = (0..ds.len()).collect();
        idx.shuffle(&mut rng);
        assign_counts(&mut parts, &idx, (f1, f2));
    }
    for p in parts.iter_mut() {
        p.sort_unstable();
    }
    let name = |tag: &str| format!("{} [{tag} split seed={seed}]", ds.provenance);
    let mk = |idx: &Vec<usize>, tag: &str| -> Dataset {
        if idx.is_empty() {
            Dataset {
                features: Array2::zeros((0, ds.dim())),
                labels: Vec::new(),
                k: ds.k,
                provenance: name(tag),
            }
        } else {
            ds.select(idx, name(tag))
        }
    };
    Ok((mk(&parts[0], "train"), mk(&parts[1], "val"), mk(&parts[2], "test")))
}

/// Apportion `idx` into three splits with largest-remainder rounding so every
/// index lands in exactly one split and proportions are within one sample.
fn assign_counts(parts: &mut [Vec<usize>; 3], idx: &[usize], (f1, f2): (f64, f64)) {
    let n = idx.len();
    let exact = [f1 * n as f64, f2 * n as f64, (1.0 - f1 - f2) * n as f64];
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut leftover = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &split in &order {
        if leftover == 0 {
            break;
        }
        counts[split] += 1;
        leftover -= 1;
    }
    let mut cursor = 0;
    for (split, &c) in counts.iter().enumerate() {
        parts[split].extend_from_slice(&idx[cursor..cursor + c]);
        cursor += c;
    }
}

/// Fraction of samples whose predicted class matches the label.
pub fn accuracy(net: &crate::net::Network, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyInput { what: "accuracy dataset".into() });
    }
    let mut correct = 0usize;
    for i in 0..ds.len() {
        let (x, y) = ds.sample(i);
        if net.predict(x)? == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Mean loss over a dataset under the network's own loss.
pub fn mean_loss(net: &crate::net::Network, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyInput { what: "loss dataset".into() });
    }
    let mut total = 0.0;
    for i in 0..ds.len() {
        let (x, y) = ds.sample(i);
        total += net.loss_on(x, y)?;
    }
    Ok(total / ds.len() as f64)
}

/// Per-sample classification margins (correct-class output minus best other).
pub fn margins(net: &crate::net::Network, ds: &Dataset) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let (x, y) = ds.sample(i);
        out.push(net.margin(x, y)?);
    }
    Ok(out)
}
