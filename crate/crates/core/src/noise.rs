//! Class-conditional label noise: confusion matrices, noisy-label synthesis,
//! confusion inversion (with a condition-number gate), empirical estimation,
//! and the statistically-consistent weighted loss.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg;

/// Condition-number gate for confusion inversion. Beyond this the reweighting
/// coefficients blow up and destabilize training.
pub const CONDITION_LIMIT: f64 = 1e8;

const ROW_SUM_TOL: f64 = 1e-12;

/// Row-stochastic k×k confusion matrix: `F[y][z] = P(noisy label = z | clean = y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    k: usize,
    matrix: Array2<f64>,
}

impl ConfusionMatrix {
    pub fn new(matrix: Array2<f64>) -> Result<Self> {
        let k = matrix.nrows();
        if k == 0 || matrix.ncols() != k {
            return Err(Error::invalid_parameter("confusion", "matrix must be square and nonempty"));
        }
        for (i, row) in matrix.rows().into_iter().enumerate() {
            let mut sum = 0.0;
            for &v in row.iter() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::invalid_parameter(
                        "confusion",
                        format!("entry {v} in row {i} outside [0, 1]"),
                    ));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::invalid_parameter(
                    "confusion",
                    format!("row {i} sums to {sum}, not 1"),
                ));
            }
        }
        Ok(ConfusionMatrix { k, matrix })
    }

    pub fn identity(k: usize) -> Self {
        ConfusionMatrix { k, matrix: Array2::eye(k) }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn is_identity(&self) -> bool {
        self.matrix == Array2::<f64>::eye(self.k)
    }

    /// Write as CSV: k rows of k comma-separated reals.
    pub fn to_csv(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for row in self.matrix.rows() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            text.push_str(&cells.join(","));
            text.push('\n');
        }
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn from_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut row = Vec::new();
            for cell in line.split(',') {
                let v: f64 = cell.trim().parse().map_err(|_| Error::Csv {
                    line: Some(lineno + 1),
                    msg: format!("cannot parse `{cell}` as a real"),
                })?;
                row.push(v);
            }
            rows.push(row);
        }
        let k = rows.len();
        if k == 0 || rows.iter().any(|r| r.len() != k) {
            return Err(Error::Csv { line: None, msg: "confusion CSV must be square".into() });
        }
        let matrix = Array2::from_shape_fn((k, k), |(i, j)| rows[i][j]);
        ConfusionMatrix::new(matrix)
    }
}

/// Uniform-flip confusion matrix: `F = (1-ρ) I + ρ/(k-1) (J - I)`.
///
/// Rates at or beyond `(k-1)/k` are accepted with a warning; the matrix
/// becomes singular exactly at `(k-1)/k`.
pub fn uniform_confusion(k: usize, rho: f64) -> Result<ConfusionMatrix> {
    if k < 2 {
        return Err(Error::invalid_parameter("k", "uniform confusion needs k >= 2"));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::invalid_parameter("rho", format!("noise rate {rho} outside [0, 1]")));
    }
    let limit = (k as f64 - 1.0) / k as f64;
    if rho >= limit {
        log::warn!("uniform noise rate {rho} >= (k-1)/k = {limit}; confusion is not invertible");
    }
    let off = rho / (k as f64 - 1.0);
    let matrix = Array2::from_shape_fn((k, k), |(i, j)| if i == j { 1.0 - rho } else { off });
    ConfusionMatrix::new(matrix)
}

/// Flip each label independently according to its row of `F`.
/// Deterministic for a fixed `(labels, F, seed)`.
pub fn apply_noise(labels: &[usize], f: &ConfusionMatrix, seed: u64) -> Result<Vec<usize>> {
    let k = f.k();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noisy = Vec::with_capacity(labels.len());
    for &y in labels {
        if y >= k {
            return Err(Error::LabelOutOfRange { label: y, classes: k });
        }
        let u: f64 = rng.gen();
        let mut cum = 0.0;
        let mut z = k - 1;
        for j in 0..k {
            cum += f.matrix[[y, j]];
            if u < cum {
                z = j;
                break;
            }
        }
        noisy.push(z);
    }
    Ok(noisy)
}

/// Inverse confusion matrix `Λ = F⁻¹` used to reweight losses.
#[derive(Debug, Clone)]
pub struct ReweightMatrix {
    pub lambda: Array2<f64>,
    /// 1-norm condition estimate of `F`.
    pub condition: f64,
}

impl ReweightMatrix {
    pub fn identity(k: usize) -> Self {
        ReweightMatrix { lambda: Array2::eye(k), condition: 1.0 }
    }

    pub fn k(&self) -> usize {
        self.lambda.nrows()
    }

    /// Row of weights applied when the observed noisy label is `y_noisy`.
    pub fn row(&self, y_noisy: usize) -> ArrayView1<'_, f64> {
        self.lambda.row(y_noisy)
    }
}

/// Invert a confusion matrix, rejecting singular or ill-conditioned inputs
/// (condition estimate above [`CONDITION_LIMIT`], which signals a noise rate
/// too close to `(k-1)/k`).
pub fn invert_confusion(f: &ConfusionMatrix) -> Result<ReweightMatrix> {
    let (lambda, condition) = linalg::invert(f.matrix(), "confusion inversion")?;
    if condition > CONDITION_LIMIT {
        return Err(Error::SingularMatrix {
            context: "confusion inversion (condition limit exceeded)".into(),
            cond: condition,
        });
    }
    Ok(ReweightMatrix { lambda, condition })
}

/// Additive smoothing per cell before row normalization.
pub const ESTIMATION_SMOOTHING: f64 = 1e-6;

/// Row-normalized count estimate of the confusion matrix from paired
/// `(clean, noisy)` labels.
pub fn estimate_confusion(pairs: &[(usize, usize)], k: usize) -> Result<ConfusionMatrix> {
    if k < 1 {
        return Err(Error::invalid_parameter("k", "need at least one class"));
    }
    let mut counts = Array2::<f64>::from_elem((k, k), ESTIMATION_SMOOTHING);
    let mut seen = vec![false; k];
    for &(y, z) in pairs {
        if y >= k {
            return Err(Error::LabelOutOfRange { label: y, classes: k });
        }
        if z >= k {
            return Err(Error::LabelOutOfRange { label: z, classes: k });
        }
        counts[[y, z]] += 1.0;
        seen[y] = true;
    }
    if let Some(class) = seen.iter().position(|s| !s) {
        return Err(Error::MissingClass { class });
    }
    for mut row in counts.rows_mut() {
        let sum: f64 = row.iter().sum();
        row.mapv_inplace(|v| v / sum);
    }
    ConfusionMatrix::new(counts)
}

/// Weighted loss `Σ_c Λ[ỹ, c] · ℓ(f(x), c)`.
///
/// May be negative when `Λ` has negative entries; callers must not clamp.
pub fn weighted_loss(loss_vector: ArrayView1<f64>, lambda: &ReweightMatrix, y_noisy: usize) -> f64 {
    lambda.row(y_noisy).dot(&loss_vector)
}

/// Expected weighted loss over the noise, by exact summation:
/// `Σ_z F[y, z] · (Λ ℓ)_z`. Equals `ℓ[y]` when `Λ = F⁻¹` (unbiasedness).
pub fn expected_weighted_loss(
    loss_vector: ArrayView1<f64>,
    f: &ConfusionMatrix,
    lambda: &ReweightMatrix,
    y_clean: usize,
) -> f64 {
    let weighted: Array1<f64> = lambda.lambda.dot(&loss_vector);
    f.matrix().row(y_clean).dot(&weighted)
}
